//! Graph snapshots of an evolving sensor network.
//!
//! A snapshot holds the undirected distance-weighted graph of one period.
//! Node identity is persistent: a sensor keeps its [`NodeId`] in every
//! period that contains it, which is what makes deltas between consecutive
//! snapshots meaningful. Matrix rows always follow ascending node id, so
//! adjacency and Laplacian indices are reproducible.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph: expected consecutive periods, got {prev} then {next}")]
    InvalidPeriodSequence { prev: u32, next: u32 },
    #[error("graph: node {0} is not part of the snapshot")]
    UnknownNode(NodeId),
    #[error("graph: snapshot must contain at least one node")]
    EmptyGraph,
    #[error("graph: self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("graph: duplicate edge ({0}, {1})")]
    DuplicateEdge(NodeId, NodeId),
    #[error("graph: edge ({0}, {1}) has non-finite or negative distance")]
    BadDistance(NodeId, NodeId),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Persistent sensor identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Undirected weighted edge, stored with canonically ordered endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub distance: f64,
}

fn canonical(u: NodeId, v: NodeId) -> (NodeId, NodeId) {
    if u <= v {
        (u, v)
    } else {
        (v, u)
    }
}

/// One period of the evolving network.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    period: u32,
    nodes: Vec<NodeId>,
    edges: BTreeMap<(NodeId, NodeId), f64>,
}

impl GraphSnapshot {
    /// Build a snapshot, validating the structural invariants: no self
    /// loops, no duplicate edges, every endpoint known. Node order is
    /// normalized to ascending id.
    pub fn new(
        period: u32,
        nodes: impl IntoIterator<Item = NodeId>,
        edges: impl IntoIterator<Item = (NodeId, NodeId, f64)>,
    ) -> Result<Self> {
        let node_set: BTreeSet<NodeId> = nodes.into_iter().collect();
        let mut edge_map = BTreeMap::new();
        for (u, v, distance) in edges {
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            if !node_set.contains(&u) {
                return Err(GraphError::UnknownNode(u));
            }
            if !node_set.contains(&v) {
                return Err(GraphError::UnknownNode(v));
            }
            if !distance.is_finite() || distance < 0.0 {
                return Err(GraphError::BadDistance(u, v));
            }
            let key = canonical(u, v);
            if edge_map.insert(key, distance).is_some() {
                return Err(GraphError::DuplicateEdge(key.0, key.1));
            }
        }
        Ok(Self {
            period,
            nodes: node_set.into_iter().collect(),
            edges: edge_map,
        })
    }

    pub fn period(&self) -> u32 {
        self.period
    }

    /// Nodes in ascending id order; matrix row `i` belongs to `nodes()[i]`.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.nodes.binary_search(&node).is_ok()
    }

    pub fn index_of(&self, node: NodeId) -> Option<usize> {
        self.nodes.binary_search(&node).ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges
            .iter()
            .map(|(&(a, b), &distance)| Edge { a, b, distance })
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.edges.contains_key(&canonical(u, v))
    }

    /// Adjacency lists keyed by node id.
    pub fn neighbor_map(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut map: BTreeMap<NodeId, Vec<NodeId>> =
            self.nodes.iter().map(|&n| (n, Vec::new())).collect();
        for &(a, b) in self.edges.keys() {
            map.get_mut(&a).unwrap().push(b);
            map.get_mut(&b).unwrap().push(a);
        }
        map
    }

    /// Restriction of the snapshot to `keep`, preserving the period.
    pub fn induced_subgraph(&self, keep: &BTreeSet<NodeId>) -> Result<Self> {
        for &node in keep {
            if !self.contains(node) {
                return Err(GraphError::UnknownNode(node));
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|((a, b), _)| keep.contains(a) && keep.contains(b))
            .map(|(&(a, b), &d)| (a, b, d));
        Self::new(self.period, keep.iter().copied(), edges)
    }

    /// Size of the largest connected component.
    pub fn largest_component(&self) -> usize {
        if self.nodes.is_empty() {
            return 0;
        }
        let neighbors = self.neighbor_map();
        let mut seen: BTreeSet<NodeId> = BTreeSet::new();
        let mut best = 0;
        for &start in &self.nodes {
            if seen.contains(&start) {
                continue;
            }
            let mut stack = vec![start];
            let mut size = 0;
            seen.insert(start);
            while let Some(n) = stack.pop() {
                size += 1;
                for &m in &neighbors[&n] {
                    if seen.insert(m) {
                        stack.push(m);
                    }
                }
            }
            best = best.max(size);
        }
        best
    }
}

/// Change set between two consecutive snapshots.
///
/// `affected_nodes` is the closure of surviving nodes incident on the
/// change: endpoints of added/removed edges plus neighbors of added and
/// removed nodes, restricted to membership in the newer snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphDelta {
    pub added_nodes: BTreeSet<NodeId>,
    pub removed_nodes: BTreeSet<NodeId>,
    pub added_edges: Vec<Edge>,
    pub removed_edges: Vec<Edge>,
    pub affected_nodes: BTreeSet<NodeId>,
}

impl GraphDelta {
    pub fn is_empty(&self) -> bool {
        self.added_nodes.is_empty()
            && self.removed_nodes.is_empty()
            && self.added_edges.is_empty()
            && self.removed_edges.is_empty()
    }

    /// Replay the delta on top of `prev`. Used to check reconstruction.
    pub fn apply(&self, prev: &GraphSnapshot) -> Result<GraphSnapshot> {
        let mut nodes: BTreeSet<NodeId> = prev.nodes.iter().copied().collect();
        for n in &self.removed_nodes {
            nodes.remove(n);
        }
        nodes.extend(self.added_nodes.iter().copied());
        let removed: BTreeSet<(NodeId, NodeId)> = self
            .removed_edges
            .iter()
            .map(|e| canonical(e.a, e.b))
            .collect();
        let mut edges: Vec<(NodeId, NodeId, f64)> = prev
            .edges
            .iter()
            .filter(|(key, _)| !removed.contains(key))
            .map(|(&(a, b), &d)| (a, b, d))
            .collect();
        edges.extend(self.added_edges.iter().map(|e| (e.a, e.b, e.distance)));
        GraphSnapshot::new(prev.period + 1, nodes, edges)
    }
}

/// Exact set difference between consecutive snapshots.
///
/// An edge present in both periods with a different distance counts as
/// removed-then-added, so replaying the delta reconstructs `next` exactly.
pub fn compute_delta(prev: &GraphSnapshot, next: &GraphSnapshot) -> Result<GraphDelta> {
    if prev.period + 1 != next.period {
        return Err(GraphError::InvalidPeriodSequence {
            prev: prev.period,
            next: next.period,
        });
    }
    let prev_nodes: BTreeSet<NodeId> = prev.nodes.iter().copied().collect();
    let next_nodes: BTreeSet<NodeId> = next.nodes.iter().copied().collect();
    let added_nodes: BTreeSet<NodeId> = next_nodes.difference(&prev_nodes).copied().collect();
    let removed_nodes: BTreeSet<NodeId> = prev_nodes.difference(&next_nodes).copied().collect();

    let mut added_edges = Vec::new();
    let mut removed_edges = Vec::new();
    for (key, &d) in &next.edges {
        if prev.edges.get(key) != Some(&d) {
            added_edges.push(Edge {
                a: key.0,
                b: key.1,
                distance: d,
            });
        }
    }
    for (key, &d) in &prev.edges {
        if next.edges.get(key) != Some(&d) {
            removed_edges.push(Edge {
                a: key.0,
                b: key.1,
                distance: d,
            });
        }
    }

    let mut affected: BTreeSet<NodeId> = BTreeSet::new();
    for e in added_edges.iter().chain(removed_edges.iter()) {
        affected.insert(e.a);
        affected.insert(e.b);
    }
    let next_neighbors = next.neighbor_map();
    for n in &added_nodes {
        affected.extend(next_neighbors[n].iter().copied());
    }
    let prev_neighbors = prev.neighbor_map();
    for n in &removed_nodes {
        affected.extend(prev_neighbors[n].iter().copied());
    }
    affected.retain(|n| next_nodes.contains(n));

    Ok(GraphDelta {
        added_nodes,
        removed_nodes,
        added_edges,
        removed_edges,
        affected_nodes: affected,
    })
}

/// Dense symmetric adjacency built from a Gaussian distance kernel.
#[derive(Debug, Clone)]
pub struct WeightedAdjacency {
    pub matrix: Tensor,
    /// Kernel bandwidth actually used (falls back to 1 on zero spread).
    pub sigma: f64,
}

/// Weight pairs of connected sensors by `exp(-dist^2 / sigma^2)` with
/// `sigma` the standard deviation of the snapshot's edge distances, and
/// zero out entries below `epsilon`. Unconnected pairs and the diagonal
/// stay zero.
pub fn build_adjacency(snapshot: &GraphSnapshot, epsilon: f64) -> Result<WeightedAdjacency> {
    if snapshot.nodes.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    let distances: Vec<f64> = snapshot.edges.values().copied().collect();
    let sigma = if distances.is_empty() {
        1.0
    } else {
        let mean = distances.iter().sum::<f64>() / distances.len() as f64;
        let var = distances
            .iter()
            .map(|d| (d - mean) * (d - mean))
            .sum::<f64>()
            / distances.len() as f64;
        var.sqrt()
    };
    let sigma = if sigma > 0.0 {
        sigma
    } else {
        // All distances identical: the kernel bandwidth is undefined, so
        // fall back to 1 and keep exp(-d^2) weights.
        log::warn!(
            "graph: degenerate edge distances in period {} (zero spread), using sigma = 1",
            snapshot.period
        );
        1.0
    };

    let n = snapshot.nodes.len();
    let mut matrix = Tensor::zeros(&[n, n]);
    for (&(a, b), &d) in &snapshot.edges {
        let w = (-(d * d) / (sigma * sigma)).exp();
        if w >= epsilon {
            let i = snapshot.index_of(a).unwrap();
            let j = snapshot.index_of(b).unwrap();
            matrix.set2(i, j, w);
            matrix.set2(j, i, w);
        }
    }
    Ok(WeightedAdjacency { matrix, sigma })
}

/// Symmetric normalized Laplacian rescaled to the `[-1, 1]` spectrum.
#[derive(Debug, Clone)]
pub struct RescaledLaplacian {
    pub matrix: Tensor,
    pub lambda_max: f64,
}

const POWER_ITER_TOL: f64 = 1e-6;
const POWER_ITER_MAX: usize = 1000;
/// Theoretical spectral upper bound of the normalized Laplacian.
const LAMBDA_FALLBACK: f64 = 2.0;

/// Build `L = I - D^{-1/2} A D^{-1/2}` and rescale it by the dominant
/// eigenvalue: `2 L / lambda_max - I`.
///
/// Conventions: an isolated node (zero degree) contributes an all-zero row
/// to `L`, so an edgeless graph yields the zero Laplacian and, with the
/// fallback `lambda_max = 2`, the rescaled matrix `-I`. The power-iteration
/// estimate is inflated by one iteration tolerance (and capped at the
/// theoretical bound 2) so the rescaled spectrum never leaves `[-1, 1]`.
pub fn build_rescaled_laplacian(adj: &WeightedAdjacency) -> RescaledLaplacian {
    let n = adj.matrix.shape()[0];
    let mut degree = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            degree[i] += adj.matrix.at2(i, j);
        }
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut lap = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let off = inv_sqrt[i] * inv_sqrt[j] * adj.matrix.at2(i, j);
            let diag = if i == j && degree[i] > 0.0 { 1.0 } else { 0.0 };
            lap.set2(i, j, diag - off);
        }
    }

    let lambda_max = match power_iteration(&lap) {
        Some(est) => est.min(LAMBDA_FALLBACK),
        None => LAMBDA_FALLBACK,
    };

    let mut rescaled = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = 2.0 * lap.at2(i, j) / lambda_max - if i == j { 1.0 } else { 0.0 };
            rescaled.set2(i, j, v);
        }
    }
    RescaledLaplacian {
        matrix: rescaled,
        lambda_max,
    }
}

/// Certified upper estimate of the dominant eigenvalue of a symmetric PSD
/// matrix, or `None` when the iteration collapses or fails to converge.
///
/// The returned value is `theta + sqrt(2) * ||Mv - theta v||` for the final
/// Rayleigh quotient `theta`: once the iterate's component on the top
/// eigenspace dominates, this is >= lambda_max, so rescaling by it cannot
/// push the spectrum outside `[-1, 1]`. It degrades gracefully on small
/// spectral gaps, where the plain Rayleigh quotient alone stalls below
/// lambda_max.
fn power_iteration(m: &Tensor) -> Option<f64> {
    let n = m.shape()[0];
    if n == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    if nv == 0.0 {
        return None;
    }
    for x in &mut v {
        *x /= nv;
    }
    let matvec = |v: &[f64]| {
        let mut w = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                w[i] += m.at2(i, j) * v[j];
            }
        }
        w
    };
    let mut prev_eig = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let w = matvec(&v);
        // Rayleigh quotient on the unit vector v.
        let eig: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let wn = norm(&w);
        if wn < 1e-12 {
            return None; // collapsed onto the null space
        }
        let converged = eig > 0.0 && (eig - prev_eig).abs() <= POWER_ITER_TOL * eig.abs();
        for (x, wi) in v.iter_mut().zip(&w) {
            *x = wi / wn;
        }
        if converged {
            let w = matvec(&v);
            let theta: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            let residual: f64 = w
                .iter()
                .zip(&v)
                .map(|(wi, vi)| (wi - theta * vi) * (wi - theta * vi))
                .sum::<f64>()
                .sqrt();
            return Some(theta + std::f64::consts::SQRT_2 * residual);
        }
        prev_eig = eig;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn ids(v: &[u64]) -> Vec<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    fn path_graph(period: u32, n: u64) -> GraphSnapshot {
        GraphSnapshot::new(
            period,
            (0..n).map(NodeId),
            (0..n - 1).map(|i| (NodeId(i), NodeId(i + 1), 1.0)),
        )
        .unwrap()
    }

    #[test]
    fn identical_snapshots_give_empty_delta() {
        let g1 = path_graph(1, 5);
        let mut g2 = g1.clone();
        g2.period = 2;
        let delta = compute_delta(&g1, &g2).unwrap();
        assert!(delta.is_empty());
        assert!(delta.affected_nodes.is_empty());
    }

    #[test]
    fn added_node_and_edge_show_up_in_delta() {
        let prev = GraphSnapshot::new(1, ids(&[1, 2]), vec![(NodeId(1), NodeId(2), 1.0)]).unwrap();
        let next = GraphSnapshot::new(
            2,
            ids(&[1, 2, 3]),
            vec![(NodeId(1), NodeId(2), 1.0), (NodeId(2), NodeId(3), 2.0)],
        )
        .unwrap();
        let delta = compute_delta(&prev, &next).unwrap();
        assert_eq!(delta.added_nodes, ids(&[3]).into_iter().collect());
        assert!(delta.removed_nodes.is_empty());
        assert_eq!(delta.added_edges.len(), 1);
        assert!(delta.affected_nodes.contains(&NodeId(2)));
        assert!(delta.affected_nodes.contains(&NodeId(3)));
    }

    #[test]
    fn delta_requires_consecutive_periods() {
        let g1 = path_graph(1, 3);
        let g3 = path_graph(3, 3);
        assert!(matches!(
            compute_delta(&g1, &g3),
            Err(GraphError::InvalidPeriodSequence { prev: 1, next: 3 })
        ));
    }

    fn random_snapshot(period: u32, seed: u64) -> GraphSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<u64> = (0..30).collect();
        pool.shuffle(&mut rng);
        let n = rng.gen_range(5..=20);
        let nodes: BTreeSet<NodeId> = pool[..n].iter().map(|&i| NodeId(i)).collect();
        let list: Vec<NodeId> = nodes.iter().copied().collect();
        let mut edges = Vec::new();
        for i in 0..list.len() {
            for j in i + 1..list.len() {
                if rng.gen_bool(0.2) {
                    edges.push((list[i], list[j], rng.gen_range(0.1..5.0)));
                }
            }
        }
        GraphSnapshot::new(period, nodes, edges).unwrap()
    }

    #[test]
    fn delta_reconstructs_next_snapshot_exactly() {
        // Independent oracle: replaying the delta on the older snapshot must
        // reproduce the newer one, for randomized snapshot pairs.
        for seed in 0..25 {
            let prev = random_snapshot(1, seed);
            let mut next = random_snapshot(2, seed + 1000);
            next.period = 2;
            let delta = compute_delta(&prev, &next).unwrap();
            let rebuilt = delta.apply(&prev).unwrap();
            assert_eq!(rebuilt, next, "seed {seed}");
            for n in &delta.affected_nodes {
                assert!(next.contains(*n));
            }
        }
    }

    #[test]
    fn adjacency_weight_examples() {
        // Two distinct distances so sigma is well defined; check the kernel
        // values directly from its definition.
        let g = GraphSnapshot::new(
            1,
            ids(&[1, 2, 3]),
            vec![(NodeId(1), NodeId(2), 0.0), (NodeId(2), NodeId(3), 2.0)],
        )
        .unwrap();
        let adj = build_adjacency(&g, 0.0).unwrap();
        // sigma = std of {0, 2} = 1
        assert!((adj.sigma - 1.0).abs() < 1e-12);
        assert!((adj.matrix.at2(0, 1) - 1.0).abs() < 1e-12); // exp(0) = 1
        let w = adj.matrix.at2(1, 2);
        assert!((w - (-4.0f64).exp()).abs() < 1e-12);
        assert_eq!(adj.matrix.at2(0, 2), 0.0); // no edge
        assert_eq!(adj.matrix.at2(0, 0), 0.0); // diagonal
    }

    #[test]
    fn adjacency_weight_at_distance_sigma_is_inv_e() {
        // Distances with spread: {1, 3} has mean 2, std 1... pick values so
        // one edge sits exactly at distance sigma.
        let g = GraphSnapshot::new(
            1,
            ids(&[1, 2, 3]),
            vec![(NodeId(1), NodeId(2), 1.0), (NodeId(2), NodeId(3), 3.0)],
        )
        .unwrap();
        let adj = build_adjacency(&g, 0.0).unwrap();
        assert!((adj.sigma - 1.0).abs() < 1e-12);
        // edge (1,2) has distance 1 = sigma -> weight e^{-1}
        assert!((adj.matrix.at2(0, 1) - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn adjacency_threshold_zeroes_small_weights() {
        let g = GraphSnapshot::new(
            1,
            ids(&[1, 2, 3]),
            vec![(NodeId(1), NodeId(2), 1.0), (NodeId(2), NodeId(3), 3.0)],
        )
        .unwrap();
        // weight of (2,3): exp(-9) ~ 1.2e-4 < 0.1 -> zeroed
        let adj = build_adjacency(&g, 0.1).unwrap();
        assert_eq!(adj.matrix.at2(1, 2), 0.0);
        assert!(adj.matrix.at2(0, 1) > 0.0);
    }

    #[test]
    fn degenerate_distances_fall_back_to_unit_sigma() {
        let g = GraphSnapshot::new(1, ids(&[1, 2]), vec![(NodeId(1), NodeId(2), 3.0)]).unwrap();
        let adj = build_adjacency(&g, 0.0).unwrap();
        assert_eq!(adj.sigma, 1.0);
        assert!((adj.matrix.at2(0, 1) - (-9.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn single_edge_laplacian_matches_hand_eigendecomposition() {
        // L = [[1,-1],[-1,1]] has eigenvalues {0, 2}; lambda_max = 2 and the
        // rescaled matrix is [[0,-1],[-1,0]].
        let g = GraphSnapshot::new(1, ids(&[1, 2]), vec![(NodeId(1), NodeId(2), 0.0)]).unwrap();
        let adj = build_adjacency(&g, 0.0).unwrap();
        let lap = build_rescaled_laplacian(&adj);
        assert!((lap.lambda_max - 2.0).abs() < 1e-5);
        let expect = [[0.0, -1.0], [-1.0, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((lap.matrix.at2(i, j) - expect[i][j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn edgeless_graph_rescales_to_minus_identity() {
        let g = GraphSnapshot::new(1, ids(&[1, 2, 3]), Vec::new()).unwrap();
        let adj = build_adjacency(&g, 0.1).unwrap();
        let lap = build_rescaled_laplacian(&adj);
        assert_eq!(lap.lambda_max, 2.0);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { -1.0 } else { 0.0 };
                assert_eq!(lap.matrix.at2(i, j), expect);
            }
        }
    }

    fn eigenvalues(m: &Tensor) -> Vec<f64> {
        // Dense symmetric eigensolver oracle, independent of the
        // power-iteration path under test.
        let n = m.shape()[0];
        let dm = nalgebra::DMatrix::from_fn(n, n, |i, j| m.at2(i, j));
        dm.symmetric_eigen().eigenvalues.iter().copied().collect()
    }

    #[test]
    fn spectral_bounds_hold_on_random_graphs() {
        for seed in 0..30 {
            let g = random_snapshot(1, 777 + seed);
            let adj = build_adjacency(&g, 0.05).unwrap();
            let n = g.node_count();
            // Symmetry of the unnormalized source Laplacian is implied by
            // adjacency symmetry; check the rescaled matrix directly.
            let lap = build_rescaled_laplacian(&adj);
            for i in 0..n {
                for j in 0..n {
                    assert!((lap.matrix.at2(i, j) - lap.matrix.at2(j, i)).abs() <= 1e-12);
                }
            }
            for ev in eigenvalues(&lap.matrix) {
                assert!(
                    (-1.0 - 1e-8..=1.0 + 1e-8).contains(&ev),
                    "seed {seed}: rescaled eigenvalue {ev}"
                );
            }
        }
    }

    #[test]
    fn induced_subgraph_examples() {
        let tri = GraphSnapshot::new(
            4,
            ids(&[1, 2, 3]),
            vec![
                (NodeId(1), NodeId(2), 1.0),
                (NodeId(2), NodeId(3), 1.0),
                (NodeId(1), NodeId(3), 1.0),
            ],
        )
        .unwrap();
        let all: BTreeSet<NodeId> = tri.nodes().iter().copied().collect();
        assert_eq!(tri.induced_subgraph(&all).unwrap(), tri);

        let empty = tri.induced_subgraph(&BTreeSet::new()).unwrap();
        assert_eq!(empty.node_count(), 0);
        assert_eq!(empty.period(), 4);

        let pair: BTreeSet<NodeId> = ids(&[1, 2]).into_iter().collect();
        let sub = tri.induced_subgraph(&pair).unwrap();
        assert_eq!(sub.edge_count(), 1);
        assert!(sub.has_edge(NodeId(1), NodeId(2)));

        let bad: BTreeSet<NodeId> = ids(&[1, 9]).into_iter().collect();
        assert!(matches!(
            tri.induced_subgraph(&bad),
            Err(GraphError::UnknownNode(NodeId(9)))
        ));
    }

    #[test]
    fn snapshot_rejects_self_loops_and_duplicates() {
        assert!(matches!(
            GraphSnapshot::new(1, ids(&[1]), vec![(NodeId(1), NodeId(1), 1.0)]),
            Err(GraphError::SelfLoop(_))
        ));
        assert!(matches!(
            GraphSnapshot::new(
                1,
                ids(&[1, 2]),
                vec![(NodeId(1), NodeId(2), 1.0), (NodeId(2), NodeId(1), 2.0)]
            ),
            Err(GraphError::DuplicateEdge(_, _))
        ));
    }

    proptest! {
        #[test]
        fn prop_delta_round_trip(seed_a in 0u64..500, seed_b in 500u64..1000) {
            let prev = random_snapshot(1, seed_a);
            let mut next = random_snapshot(2, seed_b);
            next.period = 2;
            let delta = compute_delta(&prev, &next).unwrap();
            prop_assert_eq!(delta.apply(&prev).unwrap(), next);
        }

        #[test]
        fn prop_threshold_monotonicity(seed in 0u64..200, eps_lo in 0.0f64..0.5, step in 0.0f64..0.5) {
            let g = random_snapshot(1, seed);
            let lo = build_adjacency(&g, eps_lo).unwrap();
            let hi = build_adjacency(&g, eps_lo + step).unwrap();
            let count = |t: &Tensor| t.data().iter().filter(|v| **v != 0.0).count();
            prop_assert!(count(&hi.matrix) <= count(&lo.matrix));
        }
    }
}
