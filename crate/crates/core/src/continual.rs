//! Rehearsal machinery for continual training over graph evolutions.
//!
//! After an evolution, each surviving node is scored by the earth mover's
//! distance between histograms of its trailing windows in the old and new
//! period. The most stable nodes fill a consolidation buffer (their old
//! data is replayed to keep historical knowledge alive), the most changed
//! nodes fill an update buffer (they are retrained on new data like newly
//! added nodes), and together with the evolved part of the graph they form
//! the training subgraph for the new period.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

use crate::graph::{GraphDelta, GraphSnapshot, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ContinualError {
    #[error("continual: cannot build a histogram from an empty window")]
    EmptyWindow,
    #[error("continual: histogram range is not ascending ({lo} >= {hi})")]
    BadRange { lo: f64, hi: f64 },
    #[error("continual: histograms have different bin edges")]
    BinMismatch,
    #[error("continual: window of {requested} timestamps exceeds available history {available}")]
    InsufficientHistory { requested: usize, available: usize },
    #[error("continual: buffer capacities {total} exceed the {scored} scored nodes")]
    CapacityError { total: usize, scored: usize },
    #[error("continual: assembled training set is empty (no evolution, empty buffers)")]
    EmptyTrainingSet,
    #[error("continual: node {0} is missing from the series data")]
    MissingNode(NodeId),
    #[error("continual: manifest {path}: {message}")]
    BadManifest { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ContinualError>;

/// Equal-width normalized histogram over a fixed range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    edges: Vec<f64>,
    mass: Vec<f64>,
}

impl Histogram {
    /// Histogram of `series` over `bins` equal-width bins spanning
    /// `[lo, hi]`. Values outside the range are clamped to the boundary
    /// bins; mass is normalized by the sample count.
    pub fn build(series: &[f64], bins: usize, range: (f64, f64)) -> Result<Self> {
        if series.is_empty() {
            return Err(ContinualError::EmptyWindow);
        }
        let (lo, hi) = range;
        if lo >= hi || lo.is_nan() || hi.is_nan() {
            return Err(ContinualError::BadRange { lo, hi });
        }
        assert!(bins >= 1, "histogram needs at least one bin");
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0usize; bins];
        for &v in series {
            let clamped = v.clamp(lo, hi);
            let mut idx = ((clamped - lo) / width) as usize;
            if idx >= bins {
                idx = bins - 1; // v == hi lands in the last bin
            }
            counts[idx] += 1;
        }
        let total = series.len() as f64;
        let mass = counts.iter().map(|&c| c as f64 / total).collect();
        Ok(Self { edges, mass })
    }

    pub fn bin_count(&self) -> usize {
        self.mass.len()
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Earth mover's distance between histograms sharing the same bin edges.
///
/// For 1D histograms on a shared equal-width grid the minimal transport
/// cost with ground cost |center_i - center_j| reduces to the scaled L1
/// distance between cumulative distributions, which is what this computes.
pub fn emd(h1: &Histogram, h2: &Histogram) -> Result<f64> {
    if h1.edges != h2.edges {
        return Err(ContinualError::BinMismatch);
    }
    let width = h1.edges[1] - h1.edges[0];
    let mut cdf_gap = 0.0;
    let mut c1 = 0.0;
    let mut c2 = 0.0;
    // The last CDF entry is 1 for both, so the final term is always zero.
    for (m1, m2) in h1.mass.iter().zip(&h2.mass) {
        c1 += m1;
        c2 += m2;
        cdf_gap += (c1 - c2).abs();
    }
    Ok(cdf_gap * width)
}

/// Per-node stability scores between two periods.
///
/// For every node present in both series, histograms are built from the
/// last `tau` timestamps of the first feature channel (traffic flow) in
/// each period, over the shared range spanned by both windows, and scored
/// with [`emd`]. Nodes absent from either period are skipped.
pub fn score_nodes(
    prev_nodes: &[NodeId],
    prev_values: &Tensor,
    next_nodes: &[NodeId],
    next_values: &Tensor,
    tau: usize,
    bins: usize,
) -> Result<BTreeMap<NodeId, f64>> {
    let t_prev = prev_values.shape()[2];
    let t_next = next_values.shape()[2];
    if tau > t_prev {
        return Err(ContinualError::InsufficientHistory {
            requested: tau,
            available: t_prev,
        });
    }
    if tau > t_next {
        return Err(ContinualError::InsufficientHistory {
            requested: tau,
            available: t_next,
        });
    }
    let next_index: BTreeMap<NodeId, usize> = next_nodes
        .iter()
        .enumerate()
        .map(|(i, &n)| (n, i))
        .collect();
    let shared: Vec<(NodeId, usize, usize)> = prev_nodes
        .iter()
        .enumerate()
        .filter_map(|(i, &n)| next_index.get(&n).map(|&j| (n, i, j)))
        .collect();

    let tail = |values: &Tensor, row: usize, t_total: usize| -> Vec<f64> {
        (t_total - tau..t_total)
            .map(|t| values.at3(row, 0, t))
            .collect()
    };
    let score_one = |&(node, i, j): &(NodeId, usize, usize)| -> Result<(NodeId, f64)> {
        let wp = tail(prev_values, i, t_prev);
        let wn = tail(next_values, j, t_next);
        let lo = wp.iter().chain(&wn).copied().fold(f64::INFINITY, f64::min);
        let hi = wp
            .iter()
            .chain(&wn)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        // Identical constant windows have no spread; the distributions are
        // equal so the distance is zero by definition.
        let (lo, hi) = if lo < hi {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let hp = Histogram::build(&wp, bins, (lo, hi))?;
        let hn = Histogram::build(&wn, bins, (lo, hi))?;
        Ok((node, emd(&hp, &hn)?))
    };

    let scored: Vec<(NodeId, f64)> = if crate::thread_count() > 1 {
        use rayon::prelude::*;
        shared
            .par_iter()
            .map(score_one)
            .collect::<Result<Vec<_>>>()?
    } else {
        shared.iter().map(score_one).collect::<Result<Vec<_>>>()?
    };
    Ok(scored.into_iter().collect())
}

/// Rehearsal buffers: the most stable and most changed old nodes.
#[derive(Debug, Clone, Default)]
pub struct RehearsalBuffers {
    /// Most stable nodes, ascending score. Their old data is replayed.
    pub consolidation: Vec<(NodeId, f64)>,
    /// Most changed nodes, descending score. They retrain on new data.
    pub update: Vec<(NodeId, f64)>,
    /// Raw rehearsal windows `[F, tau]` for consolidation nodes, together
    /// with the normalization stats of the period they were captured in.
    pub rehearsal: BTreeMap<NodeId, Tensor>,
    pub rehearsal_stats: Vec<(f64, f64)>,
}

impl RehearsalBuffers {
    pub fn consolidation_ids(&self) -> BTreeSet<NodeId> {
        self.consolidation.iter().map(|&(n, _)| n).collect()
    }

    pub fn update_ids(&self) -> BTreeSet<NodeId> {
        self.update.iter().map(|&(n, _)| n).collect()
    }

    /// Capture the last `tau` timestamps of every consolidation node from
    /// the previous period's series, as raw values.
    pub fn store_rehearsal_windows(
        &mut self,
        nodes: &[NodeId],
        values: &Tensor,
        stats: &[(f64, f64)],
        tau: usize,
    ) -> Result<()> {
        let (f, t_total) = (values.shape()[1], values.shape()[2]);
        if tau > t_total {
            return Err(ContinualError::InsufficientHistory {
                requested: tau,
                available: t_total,
            });
        }
        let index: BTreeMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        for &(node, _) in &self.consolidation {
            let &row = index.get(&node).ok_or(ContinualError::MissingNode(node))?;
            let mut window = Tensor::zeros(&[f, tau]);
            for fi in 0..f {
                for (k, t) in (t_total - tau..t_total).enumerate() {
                    window.set2(fi, k, values.at3(row, fi, t));
                }
            }
            self.rehearsal.insert(node, window);
        }
        self.rehearsal_stats = stats.to_vec();
        Ok(())
    }

    pub fn save_manifest(&self, path: &Path, period: u32) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "period,buffer,node_id,score")?;
        for (node, score) in &self.consolidation {
            writeln!(out, "{period},consolidation,{node},{score}")?;
        }
        for (node, score) in &self.update {
            writeln!(out, "{period},update,{node},{score}")?;
        }
        Ok(())
    }

    pub fn load_manifest(path: &Path) -> Result<Self> {
        let bad = |message: &str| ContinualError::BadManifest {
            path: path.display().to_string(),
            message: message.to_string(),
        };
        let file = std::fs::File::open(path).map_err(|e| bad(&e.to_string()))?;
        let mut buffers = Self::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| bad(&e.to_string()))?;
            if i == 0 {
                continue; // header
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(bad(&format!("line {}: expected 4 fields", i + 1)));
            }
            let node = NodeId(fields[2].parse().map_err(|_| bad("bad node id"))?);
            let score: f64 = fields[3].parse().map_err(|_| bad("bad score"))?;
            match fields[1] {
                "consolidation" => buffers.consolidation.push((node, score)),
                "update" => buffers.update.push((node, score)),
                other => return Err(bad(&format!("unknown buffer {other:?}"))),
            }
        }
        Ok(buffers)
    }
}

/// Fill the buffers from stability scores: the `capacity_c` lowest go to
/// consolidation, the `capacity_u` highest to update. Ties break on
/// ascending node id so selection is deterministic.
pub fn select_buffers(
    scores: &BTreeMap<NodeId, f64>,
    capacity_c: usize,
    capacity_u: usize,
) -> Result<RehearsalBuffers> {
    if capacity_c + capacity_u > scores.len() {
        return Err(ContinualError::CapacityError {
            total: capacity_c + capacity_u,
            scored: scores.len(),
        });
    }
    let mut ranked: Vec<(NodeId, f64)> = scores.iter().map(|(&n, &s)| (n, s)).collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let consolidation = ranked[..capacity_c].to_vec();
    let mut update = ranked[ranked.len() - capacity_u..].to_vec();
    update.reverse();
    Ok(RehearsalBuffers {
        consolidation,
        update,
        rehearsal: BTreeMap::new(),
        rehearsal_stats: Vec::new(),
    })
}

/// Assemble the period's training subgraph: added nodes, the affected
/// closure, and both buffers, induced on the new snapshot.
pub fn assemble_training_set(
    delta: &GraphDelta,
    buffers: &RehearsalBuffers,
    next: &GraphSnapshot,
) -> Result<GraphSnapshot> {
    let mut keep: BTreeSet<NodeId> = BTreeSet::new();
    keep.extend(delta.added_nodes.iter().copied());
    keep.extend(delta.affected_nodes.iter().copied());
    keep.retain(|n| next.contains(*n));
    keep.extend(buffers.consolidation.iter().map(|&(n, _)| n));
    keep.extend(buffers.update.iter().map(|&(n, _)| n));
    if keep.is_empty() {
        return Err(ContinualError::EmptyTrainingSet);
    }
    next.induced_subgraph(&keep)
        .map_err(|_| ContinualError::MissingNode(*keep.iter().next().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::compute_delta;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn histogram_of_constant_series_is_a_point_mass() {
        let h = Histogram::build(&[2.0, 2.0, 2.0], 4, (2.0, 6.0)).unwrap();
        assert_eq!(h.mass(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn histogram_splits_on_bin_boundaries() {
        let h = Histogram::build(&[0.0, 1.0, 2.0, 3.0], 2, (0.0, 4.0)).unwrap();
        assert_eq!(h.mass(), &[0.5, 0.5]);
    }

    #[test]
    fn histogram_mass_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.gen_range(1..200);
            let series: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..9.0)).collect();
            let h = Histogram::build(&series, 20, (-5.0, 10.0)).unwrap();
            assert!((h.mass().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn histogram_rejects_empty_series() {
        assert!(matches!(
            Histogram::build(&[], 4, (0.0, 1.0)),
            Err(ContinualError::EmptyWindow)
        ));
    }

    #[test]
    fn emd_of_identical_histograms_is_zero() {
        let h = Histogram::build(&[0.2, 0.4, 0.9], 5, (0.0, 1.0)).unwrap();
        assert_eq!(emd(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn emd_of_opposite_point_masses_spans_the_center_gap() {
        // Two bins with centers 0.5 and 1.5: moving all mass one bin over
        // costs exactly the center distance 1.0 (single feasible plan).
        let h1 = Histogram::build(&[0.1], 2, (0.0, 2.0)).unwrap();
        let h2 = Histogram::build(&[1.9], 2, (0.0, 2.0)).unwrap();
        assert_eq!(h1.mass(), &[1.0, 0.0]);
        assert_eq!(h2.mass(), &[0.0, 1.0]);
        assert!((emd(&h1, &h2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn emd_rejects_mismatched_edges() {
        let h1 = Histogram::build(&[0.5], 2, (0.0, 1.0)).unwrap();
        let h2 = Histogram::build(&[0.5], 2, (0.0, 2.0)).unwrap();
        assert!(matches!(emd(&h1, &h2), Err(ContinualError::BinMismatch)));
    }

    /// Exhaustive transport-plan oracle: split both histograms into unit
    /// atoms of mass 1/denominator and take the cheapest assignment over
    /// all permutations. Independent of the CDF closed form.
    fn emd_brute_force(h1: &Histogram, h2: &Histogram, denom: usize) -> f64 {
        let centers = h1.centers();
        let atoms = |h: &Histogram| -> Vec<f64> {
            let mut out = Vec::new();
            for (bin, &m) in h.mass().iter().enumerate() {
                let count = (m * denom as f64).round() as usize;
                out.extend(std::iter::repeat_n(centers[bin], count));
            }
            out
        };
        let a = atoms(h1);
        let b = atoms(h2);
        assert_eq!(a.len(), b.len());
        let mut idx: Vec<usize> = (0..b.len()).collect();
        let mut best = f64::INFINITY;
        permute_all(&mut idx, 0, &mut |perm| {
            let cost: f64 = a
                .iter()
                .zip(perm.iter().map(|&j| b[j]))
                .map(|(x, y)| (x - y).abs())
                .sum();
            best = best.min(cost / denom as f64);
        });
        best
    }

    fn permute_all(idx: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == idx.len() {
            visit(idx);
            return;
        }
        for i in k..idx.len() {
            idx.swap(k, i);
            permute_all(idx, k + 1, visit);
            idx.swap(k, i);
        }
    }

    fn histogram_from_mass(mass: Vec<f64>, range: (f64, f64)) -> Histogram {
        let bins = mass.len();
        let width = (range.1 - range.0) / bins as f64;
        let edges = (0..=bins).map(|i| range.0 + width * i as f64).collect();
        Histogram { edges, mass }
    }

    #[test]
    fn emd_matches_exhaustive_plan_oracle_on_small_instances() {
        // All mass vectors with denominator 4 over 3 bins, all pairs.
        let denom = 4usize;
        let mut masses = Vec::new();
        for a in 0..=denom {
            for b in 0..=denom - a {
                let c = denom - a - b;
                masses.push(vec![
                    a as f64 / denom as f64,
                    b as f64 / denom as f64,
                    c as f64 / denom as f64,
                ]);
            }
        }
        for m1 in &masses {
            for m2 in &masses {
                let h1 = histogram_from_mass(m1.clone(), (0.0, 3.0));
                let h2 = histogram_from_mass(m2.clone(), (0.0, 3.0));
                let closed = emd(&h1, &h2).unwrap();
                let brute = emd_brute_force(&h1, &h2, denom);
                assert!(
                    (closed - brute).abs() <= 1e-9,
                    "{m1:?} vs {m2:?}: closed {closed} brute {brute}"
                );
            }
        }
    }

    fn series_tensor(rows: &[Vec<f64>]) -> Tensor {
        let n = rows.len();
        let t = rows[0].len();
        let mut out = Tensor::zeros(&[n, 1, t]);
        for (i, row) in rows.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                out.set3(i, 0, k, v);
            }
        }
        out
    }

    #[test]
    fn identical_periods_score_zero_everywhere() {
        let nodes = vec![NodeId(1), NodeId(2)];
        let data = series_tensor(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 5.0, 6.0, 7.0]]);
        let scores = score_nodes(&nodes, &data, &nodes, &data, 3, 4).unwrap();
        for (_, s) in scores {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn shifted_node_gets_the_maximal_score() {
        let nodes = vec![NodeId(1), NodeId(2), NodeId(3)];
        let prev = series_tensor(&[
            vec![1.0, 2.0, 1.5, 2.5],
            vec![3.0, 3.5, 3.2, 3.1],
            vec![0.5, 0.7, 0.6, 0.5],
        ]);
        let next = series_tensor(&[
            vec![1.1, 1.9, 1.4, 2.6],
            vec![3.1, 3.4, 3.3, 3.0],
            vec![100.5, 100.7, 100.6, 100.5], // large constant shift
        ]);
        let scores = score_nodes(&nodes, &prev, &nodes, &next, 4, 10).unwrap();
        assert!(scores[&NodeId(3)] > scores[&NodeId(1)]);
        assert!(scores[&NodeId(3)] > scores[&NodeId(2)]);

        // Per-node oracle: histogram the shifted node by hand.
        let wp = [0.5, 0.7, 0.6, 0.5];
        let wn = [100.5, 100.7, 100.6, 100.5];
        let h1 = Histogram::build(&wp, 10, (0.5, 100.7)).unwrap();
        let h2 = Histogram::build(&wn, 10, (0.5, 100.7)).unwrap();
        let expect = emd(&h1, &h2).unwrap();
        assert!((scores[&NodeId(3)] - expect).abs() <= 1e-12);
    }

    #[test]
    fn scoring_ignores_nodes_missing_from_either_period() {
        let prev_nodes = vec![NodeId(1), NodeId(2)];
        let next_nodes = vec![NodeId(2), NodeId(9)];
        let prev = series_tensor(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let next = series_tensor(&[vec![3.0, 4.0], vec![8.0, 9.0]]);
        let scores = score_nodes(&prev_nodes, &prev, &next_nodes, &next, 2, 4).unwrap();
        assert_eq!(scores.len(), 1);
        assert!(scores.contains_key(&NodeId(2)));
    }

    #[test]
    fn parallel_scoring_matches_serial_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let nodes: Vec<NodeId> = (0..40).map(NodeId).collect();
        let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..40)
                .map(|_| (0..30).map(|_| rng.gen_range(0.0..50.0)).collect())
                .collect()
        };
        let prev = series_tensor(&rows(&mut rng));
        let next = series_tensor(&rows(&mut rng));
        let serial = score_nodes(&nodes, &prev, &nodes, &next, 20, 12).unwrap();
        std::env::set_var("EVOFORECAST_THREADS", "3");
        let parallel = score_nodes(&nodes, &prev, &nodes, &next, 20, 12).unwrap();
        std::env::remove_var("EVOFORECAST_THREADS");
        assert_eq!(serial.len(), parallel.len());
        for (node, score) in &serial {
            assert_eq!(score.to_bits(), parallel[node].to_bits());
        }
    }

    #[test]
    fn scoring_rejects_oversized_tau() {
        let nodes = vec![NodeId(1)];
        let data = series_tensor(&[vec![1.0, 2.0]]);
        assert!(matches!(
            score_nodes(&nodes, &data, &nodes, &data, 5, 4),
            Err(ContinualError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn buffer_selection_splits_extremes() {
        let scores: BTreeMap<NodeId, f64> =
            [(NodeId(10), 0.1), (NodeId(11), 0.5), (NodeId(12), 0.9)]
                .into_iter()
                .collect();
        let buffers = select_buffers(&scores, 1, 1).unwrap();
        assert_eq!(buffers.consolidation, vec![(NodeId(10), 0.1)]);
        assert_eq!(buffers.update, vec![(NodeId(12), 0.9)]);
    }

    #[test]
    fn equal_scores_break_ties_by_node_id() {
        let scores: BTreeMap<NodeId, f64> = (0..6).map(|i| (NodeId(i), 0.5)).collect();
        let buffers = select_buffers(&scores, 2, 2).unwrap();
        assert_eq!(
            buffers.consolidation_ids(),
            [NodeId(0), NodeId(1)].into_iter().collect()
        );
        assert_eq!(
            buffers.update_ids(),
            [NodeId(4), NodeId(5)].into_iter().collect()
        );
    }

    #[test]
    fn buffer_selection_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: BTreeMap<NodeId, f64> = (0..50)
            .map(|i| (NodeId(i), rng.gen_range(0.0..1.0)))
            .collect();
        let buffers = select_buffers(&scores, 10, 10).unwrap();
        let mut ranked: Vec<(NodeId, f64)> = scores.iter().map(|(&n, &s)| (n, s)).collect();
        ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let lowest: BTreeSet<NodeId> = ranked[..10].iter().map(|&(n, _)| n).collect();
        let highest: BTreeSet<NodeId> = ranked[40..].iter().map(|&(n, _)| n).collect();
        assert_eq!(buffers.consolidation_ids(), lowest);
        assert_eq!(buffers.update_ids(), highest);
        let max_c = buffers
            .consolidation
            .iter()
            .map(|x| x.1)
            .fold(0.0, f64::max);
        let min_u = buffers.update.iter().map(|x| x.1).fold(f64::MAX, f64::min);
        assert!(max_c <= min_u);
    }

    #[test]
    fn capacity_overflow_is_rejected() {
        let scores: BTreeMap<NodeId, f64> = (0..3).map(|i| (NodeId(i), 0.1)).collect();
        assert!(matches!(
            select_buffers(&scores, 2, 2),
            Err(ContinualError::CapacityError {
                total: 4,
                scored: 3
            })
        ));
    }

    fn snapshot(period: u32, nodes: &[u64], edges: &[(u64, u64)]) -> GraphSnapshot {
        GraphSnapshot::new(
            period,
            nodes.iter().map(|&i| NodeId(i)),
            edges.iter().map(|&(a, b)| (NodeId(a), NodeId(b), 1.0)),
        )
        .unwrap()
    }

    #[test]
    fn no_evolution_and_empty_buffers_is_an_empty_training_set() {
        let g1 = snapshot(1, &[1, 2], &[(1, 2)]);
        let g2 = snapshot(2, &[1, 2], &[(1, 2)]);
        let delta = compute_delta(&g1, &g2).unwrap();
        let buffers = RehearsalBuffers::default();
        assert!(matches!(
            assemble_training_set(&delta, &buffers, &g2),
            Err(ContinualError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn training_set_unions_delta_and_buffers() {
        let g1 = snapshot(1, &[1, 2, 5, 7], &[(1, 2), (5, 7)]);
        let g2 = snapshot(2, &[1, 2, 3, 5, 7], &[(1, 2), (2, 3), (5, 7)]);
        let delta = compute_delta(&g1, &g2).unwrap();
        let buffers = RehearsalBuffers {
            consolidation: vec![(NodeId(7), 0.0)],
            update: vec![(NodeId(5), 1.0)],
            ..Default::default()
        };
        let sub = assemble_training_set(&delta, &buffers, &g2).unwrap();
        let want: Vec<NodeId> = [2, 3, 5, 7].iter().map(|&i| NodeId(i)).collect();
        assert_eq!(sub.nodes(), &want[..]);
        assert!(sub.has_edge(NodeId(2), NodeId(3)));
        assert!(sub.has_edge(NodeId(5), NodeId(7)));
        assert!(!sub.has_edge(NodeId(1), NodeId(2))); // node 1 not selected
    }

    #[test]
    fn training_set_size_is_bounded_by_its_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let n = 30u64;
            let nodes: Vec<u64> = (0..n).collect();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(0.1) {
                        edges.push((i, j));
                    }
                }
            }
            let g1 = snapshot(1, &nodes, &edges);
            // drop a couple of nodes, add a couple of new ones
            let nodes2: Vec<u64> = nodes
                .iter()
                .copied()
                .filter(|&i| i >= 2)
                .chain([40, 41])
                .collect();
            let edges2: Vec<(u64, u64)> = edges
                .iter()
                .copied()
                .filter(|&(a, b)| a >= 2 && b >= 2)
                .chain([(40, 5), (41, 6)])
                .collect();
            let g2 = snapshot(2, &nodes2, &edges2);
            let delta = compute_delta(&g1, &g2).unwrap();
            let buffers = RehearsalBuffers {
                consolidation: vec![(NodeId(10), 0.0), (NodeId(11), 0.0)],
                update: vec![(NodeId(20), 1.0), (NodeId(21), 1.0)],
                ..Default::default()
            };
            let sub = assemble_training_set(&delta, &buffers, &g2).unwrap();
            let bound = delta.added_nodes.len()
                + delta.affected_nodes.len()
                + buffers.consolidation.len()
                + buffers.update.len();
            assert!(sub.node_count() <= bound);
            assert!(sub.node_count() < g2.node_count() + 4);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let buffers = RehearsalBuffers {
            consolidation: vec![(NodeId(3), 0.25), (NodeId(9), 0.5)],
            update: vec![(NodeId(1), 2.75)],
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffers.csv");
        buffers.save_manifest(&path, 4).unwrap();
        let loaded = RehearsalBuffers::load_manifest(&path).unwrap();
        assert_eq!(loaded.consolidation, buffers.consolidation);
        assert_eq!(loaded.update, buffers.update);
    }

    proptest! {
        #[test]
        fn prop_emd_metric_axioms(
            m1 in proptest::collection::vec(0u32..8, 5),
            m2 in proptest::collection::vec(0u32..8, 5),
            m3 in proptest::collection::vec(0u32..8, 5),
        ) {
            let to_hist = |m: &[u32]| {
                let total: u32 = m.iter().sum::<u32>().max(1);
                let mass: Vec<f64> = m.iter().map(|&c| c as f64 / total as f64).collect();
                histogram_from_mass(mass, (0.0, 5.0))
            };
            let (h1, h2, h3) = (to_hist(&m1), to_hist(&m2), to_hist(&m3));
            let d12 = emd(&h1, &h2).unwrap();
            let d21 = emd(&h2, &h1).unwrap();
            let d13 = emd(&h1, &h3).unwrap();
            let d23 = emd(&h2, &h3).unwrap();
            prop_assert!(d12 >= 0.0);
            prop_assert!((d12 - d21).abs() <= 1e-12);
            prop_assert!(emd(&h1, &h1).unwrap() <= 1e-12);
            // triangle inequality
            prop_assert!(d13 <= d12 + d23 + 1e-9);
        }
    }
}
