//! Dataset ingestion, preprocessing, and the synthetic scenario generator.
//!
//! On disk a dataset is one directory per period:
//!
//! ```text
//! <root>/period_1/nodes.csv          node_id
//! <root>/period_1/edges.csv          src,dst,distance
//! <root>/period_1/observations.csv   rows = timestamps, columns = node:feature
//! <root>/planted_shifts.csv          period,node_id (generator manifest)
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! a save/load cycle reproduces every observation bit-exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, GraphSnapshot, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data: missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("data: {path} line {line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("data: scenario: {0}")]
    Scenario(String),
    #[error("data: series of {available} steps cannot produce {needed}-step windows")]
    InsufficientHistory { needed: usize, available: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("data: io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Observations for one period: `[N, F, T]` values whose row order matches
/// the companion snapshot's node order.
#[derive(Debug, Clone)]
pub struct SeriesTensor {
    nodes: Vec<NodeId>,
    values: Tensor,
    /// Per-channel (mean, std) this series was normalized with, when it was.
    stats: Option<Vec<(f64, f64)>>,
}

impl SeriesTensor {
    pub fn new(nodes: Vec<NodeId>, values: Tensor) -> Result<Self> {
        assert_eq!(values.rank(), 3, "series tensor must be [N, F, T]");
        assert_eq!(nodes.len(), values.shape()[0], "node order mismatch");
        if !values.all_finite() {
            return Err(DataError::Scenario("non-finite observation".into()));
        }
        Ok(Self {
            nodes,
            values,
            stats: None,
        })
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn feature_count(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn len_time(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn stats(&self) -> Option<&[(f64, f64)]> {
        self.stats.as_deref()
    }

    pub fn aligned_with(&self, snapshot: &GraphSnapshot) -> bool {
        self.nodes == snapshot.nodes()
    }

    /// Chronological slice `[from, to)` of the time axis.
    pub fn slice_time(&self, from: usize, to: usize) -> Self {
        let (n, f) = (self.node_count(), self.feature_count());
        let mut out = Tensor::zeros(&[n, f, to - from]);
        for i in 0..n {
            for c in 0..f {
                for (k, t) in (from..to).enumerate() {
                    out.set3(i, c, k, self.values.at3(i, c, t));
                }
            }
        }
        Self {
            nodes: self.nodes.clone(),
            values: out,
            stats: self.stats.clone(),
        }
    }

    /// Restriction to a node subset, keeping ascending order.
    pub fn select_nodes(&self, keep: &[NodeId]) -> Result<Self> {
        let index: BTreeMap<NodeId, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, i))
            .collect();
        let (f, t_len) = (self.feature_count(), self.len_time());
        let mut out = Tensor::zeros(&[keep.len(), f, t_len]);
        for (row, node) in keep.iter().enumerate() {
            let &src = index
                .get(node)
                .ok_or(DataError::Graph(GraphError::UnknownNode(*node)))?;
            for c in 0..f {
                for t in 0..t_len {
                    out.set3(row, c, t, self.values.at3(src, c, t));
                }
            }
        }
        Ok(Self {
            nodes: keep.to_vec(),
            values: out,
            stats: self.stats.clone(),
        })
    }

    /// Overwrite one node's row with a `[F, T]` window.
    pub fn overwrite_node(&mut self, node: NodeId, window: &Tensor) {
        let row = self
            .nodes
            .iter()
            .position(|&n| n == node)
            .expect("node present");
        let (f, t_len) = (self.feature_count(), self.len_time());
        for c in 0..f {
            for t in 0..t_len {
                self.values.set3(row, c, t, window.at2(c, t));
            }
        }
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }
}

/// Per-channel population mean and standard deviation over `[0, t_end)`.
/// Channels with no spread fall back to a unit deviation so normalization
/// stays invertible.
pub fn channel_stats(series: &SeriesTensor, t_end: usize) -> Vec<(f64, f64)> {
    let (n, f) = (series.node_count(), series.feature_count());
    let t_end = t_end.min(series.len_time());
    let count = (n * t_end) as f64;
    (0..f)
        .map(|c| {
            let mut sum = 0.0;
            for i in 0..n {
                for t in 0..t_end {
                    sum += series.values.at3(i, c, t);
                }
            }
            let mean = sum / count;
            let mut var = 0.0;
            for i in 0..n {
                for t in 0..t_end {
                    let d = series.values.at3(i, c, t) - mean;
                    var += d * d;
                }
            }
            let std = (var / count).sqrt();
            if std > 0.0 {
                (mean, std)
            } else {
                log::warn!("data: constant channel {c}, normalizing with unit deviation");
                (mean, 1.0)
            }
        })
        .collect()
}

/// Z-score the series with the given per-channel statistics.
pub fn normalize(series: &SeriesTensor, stats: &[(f64, f64)]) -> SeriesTensor {
    assert_eq!(stats.len(), series.feature_count());
    let mut out = series.clone();
    let (n, f, t_len) = (
        series.node_count(),
        series.feature_count(),
        series.len_time(),
    );
    for c in 0..f {
        let (mean, std) = stats[c];
        for i in 0..n {
            for t in 0..t_len {
                let v = (series.values.at3(i, c, t) - mean) / std;
                out.values.set3(i, c, t, v);
            }
        }
    }
    out.stats = Some(stats.to_vec());
    out
}

/// Invert [`normalize`] on a tensor of channel-0 predictions.
pub fn denormalize_flow(values: &Tensor, stats: &[(f64, f64)]) -> Tensor {
    let (mean, std) = stats[0];
    values.map(|v| v * std + mean)
}

/// Chronological 60/20/20 split of the time axis.
pub fn split_series(series: &SeriesTensor) -> (SeriesTensor, SeriesTensor, SeriesTensor) {
    let t = series.len_time();
    let t_train = (t as f64 * 0.6).floor() as usize;
    let t_val = (t as f64 * 0.8).floor() as usize;
    (
        series.slice_time(0, t_train),
        series.slice_time(t_train, t_val),
        series.slice_time(t_val, t),
    )
}

/// One supervised example: `input` is `[N, F, P]`, `target` is `[N, 1, H]`
/// of the first feature channel.
#[derive(Debug, Clone)]
pub struct Window {
    pub input: Tensor,
    pub target: Tensor,
}

/// Sliding windows over the series. Window `s` reads inputs `[s, s+P)` and
/// targets `[s+P, s+P+H)`; windows never cross the series boundary, so
/// split slices can never straddle a split.
pub fn make_windows(
    series: &SeriesTensor,
    p: usize,
    h: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    let t = series.len_time();
    if t < p + h {
        return Err(DataError::InsufficientHistory {
            needed: p + h,
            available: t,
        });
    }
    let (n, f) = (series.node_count(), series.feature_count());
    let mut windows = Vec::new();
    let mut s = 0;
    while s + p + h <= t {
        let mut input = Tensor::zeros(&[n, f, p]);
        let mut target = Tensor::zeros(&[n, 1, h]);
        for i in 0..n {
            for c in 0..f {
                for k in 0..p {
                    input.set3(i, c, k, series.values.at3(i, c, s + k));
                }
            }
            for k in 0..h {
                target.set3(i, 0, k, series.values.at3(i, 0, s + p + k));
            }
        }
        windows.push(Window { input, target });
        s += stride;
    }
    Ok(windows)
}

// --- on-disk formats ---

fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(DataError::MissingArtifact(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(DataError::Io)
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Load every `period_<k>` directory under `root`, ascending and
/// contiguous from 1.
pub fn load_dataset(root: &Path) -> Result<Vec<(GraphSnapshot, SeriesTensor)>> {
    if !root.is_dir() {
        return Err(DataError::MissingArtifact(root.to_path_buf()));
    }
    let mut periods = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        if let Some(k) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_prefix("period_"))
            .and_then(|n| n.parse::<u32>().ok())
        {
            periods.push(k);
        }
    }
    periods.sort_unstable();
    if periods.is_empty() {
        return Err(DataError::MissingArtifact(root.join("period_1")));
    }
    if periods[0] != 1 || periods.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(DataError::Scenario(format!(
            "period directories must be contiguous from 1, found {periods:?}"
        )));
    }
    periods
        .into_iter()
        .map(|k| load_period(&root.join(format!("period_{k}")), k))
        .collect()
}

fn load_period(dir: &Path, period: u32) -> Result<(GraphSnapshot, SeriesTensor)> {
    let nodes_path = dir.join("nodes.csv");
    let mut nodes = Vec::new();
    for (i, line) in read_lines(&nodes_path)?.iter().enumerate() {
        if i == 0 {
            if line != "node_id" {
                return Err(format_err(&nodes_path, 1, "expected header `node_id`"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let id: u64 = line
            .parse()
            .map_err(|_| format_err(&nodes_path, i + 1, "bad node id"))?;
        nodes.push(NodeId(id));
    }

    let edges_path = dir.join("edges.csv");
    let mut edges = Vec::new();
    for (i, line) in read_lines(&edges_path)?.iter().enumerate() {
        if i == 0 {
            if line != "src,dst,distance" {
                return Err(format_err(
                    &edges_path,
                    1,
                    "expected header `src,dst,distance`",
                ));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(format_err(&edges_path, i + 1, "expected 3 fields"));
        }
        let src: u64 = fields[0]
            .parse()
            .map_err(|_| format_err(&edges_path, i + 1, "bad src id"))?;
        let dst: u64 = fields[1]
            .parse()
            .map_err(|_| format_err(&edges_path, i + 1, "bad dst id"))?;
        let distance: f64 = fields[2]
            .parse()
            .map_err(|_| format_err(&edges_path, i + 1, "bad distance"))?;
        edges.push((NodeId(src), NodeId(dst), distance));
    }
    let snapshot = GraphSnapshot::new(period, nodes, edges)?;

    let obs_path = dir.join("observations.csv");
    let lines = read_lines(&obs_path)?;
    if lines.is_empty() {
        return Err(format_err(&obs_path, 1, "missing header"));
    }
    // Header columns are `node:feature`; remap them onto the snapshot's
    // ascending node order.
    let mut columns = Vec::new();
    for (c, name) in lines[0].split(',').enumerate() {
        let (node_s, feat_s) = name.split_once(':').ok_or_else(|| {
            format_err(&obs_path, 1, format!("column {c}: expected node:feature"))
        })?;
        let node = NodeId(
            node_s
                .parse()
                .map_err(|_| format_err(&obs_path, 1, format!("column {c}: bad node id")))?,
        );
        let feature: usize = feat_s
            .parse()
            .map_err(|_| format_err(&obs_path, 1, format!("column {c}: bad feature index")))?;
        if !snapshot.contains(node) {
            return Err(format_err(
                &obs_path,
                1,
                format!("column {c}: node {node} is not in nodes.csv"),
            ));
        }
        columns.push((node, feature));
    }
    let n = snapshot.node_count();
    let f = columns.iter().map(|&(_, f)| f + 1).max().unwrap_or(0);
    if columns.len() != n * f {
        return Err(format_err(
            &obs_path,
            1,
            format!(
                "expected {n} nodes x {f} features = {} columns, found {}",
                n * f,
                columns.len()
            ),
        ));
    }
    let t = lines.len() - 1;
    let mut values = Tensor::zeros(&[n, f, t]);
    let mut seen = vec![false; n * f];
    let col_targets: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(c, &(node, feature))| {
            let row = snapshot.index_of(node).expect("checked above");
            if feature >= f {
                return Err(format_err(
                    &obs_path,
                    1,
                    format!("column {c}: feature out of range"),
                ));
            }
            let slot = row * f + feature;
            if seen[slot] {
                return Err(format_err(
                    &obs_path,
                    1,
                    format!("column {c}: duplicate column"),
                ));
            }
            seen[slot] = true;
            Ok(slot)
        })
        .collect::<Result<_>>()?;
    if !seen.iter().all(|&s| s) {
        return Err(format_err(
            &obs_path,
            1,
            "a node is missing feature columns",
        ));
    }
    for (r, line) in lines[1..].iter().enumerate() {
        let mut count = 0;
        for (c, field) in line.split(',').enumerate() {
            if c >= col_targets.len() {
                return Err(format_err(&obs_path, r + 2, "too many fields"));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| format_err(&obs_path, r + 2, format!("bad value in column {c}")))?;
            let slot = col_targets[c];
            let (row, feature) = (slot / f, slot % f);
            values.set3(row, feature, r, v);
            count += 1;
        }
        if count != col_targets.len() {
            return Err(format_err(&obs_path, r + 2, "ragged row"));
        }
    }
    let series = SeriesTensor::new(snapshot.nodes().to_vec(), values)?;
    Ok((snapshot, series))
}

/// Write one period directory.
pub fn save_period(dir: &Path, snapshot: &GraphSnapshot, series: &SeriesTensor) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut nodes_out = std::io::BufWriter::new(std::fs::File::create(dir.join("nodes.csv"))?);
    writeln!(nodes_out, "node_id")?;
    for node in snapshot.nodes() {
        writeln!(nodes_out, "{node}")?;
    }
    let mut edges_out = std::io::BufWriter::new(std::fs::File::create(dir.join("edges.csv"))?);
    writeln!(edges_out, "src,dst,distance")?;
    for edge in snapshot.edges() {
        writeln!(edges_out, "{},{},{}", edge.a, edge.b, edge.distance)?;
    }
    let mut obs_out = std::io::BufWriter::new(std::fs::File::create(dir.join("observations.csv"))?);
    let f = series.feature_count();
    let header: Vec<String> = snapshot
        .nodes()
        .iter()
        .flat_map(|n| (0..f).map(move |c| format!("{n}:{c}")))
        .collect();
    writeln!(obs_out, "{}", header.join(","))?;
    for t in 0..series.len_time() {
        let mut row = Vec::with_capacity(snapshot.node_count() * f);
        for i in 0..snapshot.node_count() {
            for c in 0..f {
                row.push(series.values().at3(i, c, t).to_string());
            }
        }
        writeln!(obs_out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Synthetic evolution scenario: a random geometric sensor graph whose
/// topology churns between periods, with node signals made of a daily
/// cycle, neighbor coupling, noise, and optional planted mean shifts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionScenario {
    pub periods: u32,
    pub nodes: usize,
    pub steps: usize,
    pub features: usize,
    pub add_node_fraction: f64,
    pub remove_node_fraction: f64,
    pub add_edge_fraction: f64,
    pub remove_edge_fraction: f64,
    pub daily_amplitude: f64,
    pub trend: f64,
    pub noise: f64,
    /// Fraction of surviving nodes whose mean jumps at each evolution.
    pub shift_fraction: f64,
    pub shift_magnitude: f64,
    pub steps_per_day: usize,
    /// Neighbor-diffusion mixing weight in [0, 1).
    pub coupling: f64,
    pub seed: u64,
}

impl Default for EvolutionScenario {
    fn default() -> Self {
        Self {
            periods: 3,
            nodes: 30,
            steps: 288,
            features: 2,
            add_node_fraction: 0.1,
            remove_node_fraction: 0.05,
            add_edge_fraction: 0.05,
            remove_edge_fraction: 0.05,
            daily_amplitude: 10.0,
            trend: 0.0,
            noise: 1.0,
            shift_fraction: 0.1,
            shift_magnitude: 40.0,
            steps_per_day: 48,
            coupling: 0.2,
            seed: 7,
        }
    }
}

impl EvolutionScenario {
    pub fn validate(&self) -> Result<()> {
        let frac = [
            ("add_node_fraction", self.add_node_fraction),
            ("remove_node_fraction", self.remove_node_fraction),
            ("add_edge_fraction", self.add_edge_fraction),
            ("remove_edge_fraction", self.remove_edge_fraction),
            ("shift_fraction", self.shift_fraction),
            ("coupling", self.coupling),
        ];
        for (name, v) in frac {
            if !(0.0..1.0).contains(&v) {
                return Err(DataError::Scenario(format!("{name} must be in [0, 1)")));
            }
        }
        if self.periods < 1 {
            return Err(DataError::Scenario("periods must be >= 1".into()));
        }
        if self.nodes < 4 {
            return Err(DataError::Scenario("need at least 4 nodes".into()));
        }
        if self.steps < 4 || self.steps_per_day < 2 {
            return Err(DataError::Scenario(
                "steps and steps_per_day too small".into(),
            ));
        }
        if self.features < 1 {
            return Err(DataError::Scenario("need at least one feature".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| DataError::MissingArtifact(path.to_path_buf()))?;
        let scenario: Self =
            toml::from_str(&text).map_err(|e| DataError::Scenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }
}

/// One generated dataset held in memory.
pub struct GeneratedDataset {
    pub periods: Vec<(GraphSnapshot, SeriesTensor)>,
    /// Nodes whose mean jumped going into each period (period, nodes).
    pub planted_shifts: Vec<(u32, Vec<NodeId>)>,
}

struct NodeState {
    position: (f64, f64),
    base: f64,
    amplitude: f64,
    phase: f64,
}

const CONNECT_RETRIES: usize = 10;

/// Generate the scenario. Deterministic in the seed.
pub fn generate_scenario(scenario: &EvolutionScenario) -> Result<GeneratedDataset> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut states: BTreeMap<NodeId, NodeState> = BTreeMap::new();

    let radius = connect_radius(scenario.nodes);
    let mut snapshot = None;
    for attempt in 0..CONNECT_RETRIES {
        states.clear();
        for id in 0..scenario.nodes as u64 {
            states.insert(NodeId(id), new_node_state(&mut rng, scenario));
        }
        let candidate = geometric_graph(1, &states, radius)?;
        if candidate.largest_component() * 10 >= candidate.node_count() * 9 {
            snapshot = Some(candidate);
            break;
        }
        log::debug!("generator: retry {attempt} for initial connectivity");
    }
    let mut snapshot = snapshot
        .ok_or_else(|| DataError::Scenario("could not generate a connected graph".into()))?;

    let mut periods = Vec::new();
    let mut planted = Vec::new();
    let series = synthesize_signals(&snapshot, &states, scenario, &mut rng)?;
    periods.push((snapshot.clone(), series));

    for period in 2..=scenario.periods {
        let mut evolved = None;
        for _ in 0..CONNECT_RETRIES {
            let mut trial_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let (trial, new_states) =
                evolve_topology(&snapshot, &states, scenario, period, radius, &mut trial_rng)?;
            if trial.largest_component() * 10 >= trial.node_count() * 9 {
                evolved = Some((trial, new_states));
                break;
            }
        }
        let (next_snapshot, new_states) = evolved
            .ok_or_else(|| DataError::Scenario(format!("period {period}: graph fell apart")))?;
        states.retain(|id, _| next_snapshot.contains(*id));
        states.extend(new_states);

        // Plant distribution shifts on surviving nodes so buffer selection
        // has ground truth.
        let survivors: Vec<NodeId> = next_snapshot
            .nodes()
            .iter()
            .copied()
            .filter(|n| snapshot.contains(*n))
            .collect();
        let shift_count = (scenario.shift_fraction * survivors.len() as f64).floor() as usize;
        let mut shifted: Vec<NodeId> = survivors
            .choose_multiple(&mut rng, shift_count)
            .copied()
            .collect();
        shifted.sort_unstable();
        for node in &shifted {
            states.get_mut(node).unwrap().base += scenario.shift_magnitude;
        }
        planted.push((period, shifted));

        let series = synthesize_signals(&next_snapshot, &states, scenario, &mut rng)?;
        periods.push((next_snapshot.clone(), series));
        snapshot = next_snapshot;
    }

    Ok(GeneratedDataset {
        periods,
        planted_shifts: planted,
    })
}

/// Generate and write a dataset plus its planted-shift manifest.
pub fn generate_to_disk(scenario: &EvolutionScenario, out: &Path) -> Result<GeneratedDataset> {
    let dataset = generate_scenario(scenario)?;
    std::fs::create_dir_all(out)?;
    for (snapshot, series) in &dataset.periods {
        save_period(
            &out.join(format!("period_{}", snapshot.period())),
            snapshot,
            series,
        )?;
    }
    let mut manifest =
        std::io::BufWriter::new(std::fs::File::create(out.join("planted_shifts.csv"))?);
    writeln!(manifest, "period,node_id")?;
    for (period, nodes) in &dataset.planted_shifts {
        for node in nodes {
            writeln!(manifest, "{period},{node}")?;
        }
    }
    Ok(dataset)
}

/// Read the generator's planted-shift manifest.
pub fn load_planted_shifts(path: &Path) -> Result<Vec<(u32, Vec<NodeId>)>> {
    let mut by_period: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let (p, n) = line
            .split_once(',')
            .ok_or_else(|| format_err(path, i + 1, "expected period,node_id"))?;
        let period: u32 = p
            .parse()
            .map_err(|_| format_err(path, i + 1, "bad period"))?;
        let node: u64 = n
            .parse()
            .map_err(|_| format_err(path, i + 1, "bad node id"))?;
        by_period.entry(period).or_default().push(NodeId(node));
    }
    Ok(by_period.into_iter().collect())
}

fn connect_radius(n: usize) -> f64 {
    // Above the connectivity threshold of a random geometric graph, but
    // low enough to keep road-network-like degrees (~5).
    1.3 * ((n.max(2) as f64).ln() / (std::f64::consts::PI * n as f64)).sqrt()
}

fn new_node_state(rng: &mut ChaCha8Rng, scenario: &EvolutionScenario) -> NodeState {
    NodeState {
        position: (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
        base: rng.gen_range(30.0..70.0),
        amplitude: scenario.daily_amplitude * rng.gen_range(0.8..1.2),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    (dx * dx + dy * dy).sqrt() * 10.0
}

fn geometric_graph(
    period: u32,
    states: &BTreeMap<NodeId, NodeState>,
    radius: f64,
) -> Result<GraphSnapshot> {
    let ids: Vec<NodeId> = states.keys().copied().collect();
    let mut edges = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let d = distance(states[&ids[i]].position, states[&ids[j]].position);
            if d <= radius * 10.0 {
                edges.push((ids[i], ids[j], d));
            }
        }
    }
    Ok(GraphSnapshot::new(period, ids, edges)?)
}

/// Apply one evolution step: drop nodes/edges, add nodes near existing
/// ones, add shortcut edges.
fn evolve_topology(
    snapshot: &GraphSnapshot,
    states: &BTreeMap<NodeId, NodeState>,
    scenario: &EvolutionScenario,
    period: u32,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(GraphSnapshot, BTreeMap<NodeId, NodeState>)> {
    let mut nodes: Vec<NodeId> = snapshot.nodes().to_vec();
    let remove_count = (scenario.remove_node_fraction * nodes.len() as f64).floor() as usize;
    let removed: Vec<NodeId> = nodes
        .choose_multiple(rng, remove_count.min(nodes.len().saturating_sub(4)))
        .copied()
        .collect();
    nodes.retain(|n| !removed.contains(n));

    let mut edges: Vec<(NodeId, NodeId, f64)> = snapshot
        .edges()
        .filter(|e| !removed.contains(&e.a) && !removed.contains(&e.b))
        .map(|e| (e.a, e.b, e.distance))
        .collect();
    let drop_edges = (scenario.remove_edge_fraction * edges.len() as f64).floor() as usize;
    for _ in 0..drop_edges {
        if edges.len() <= nodes.len() {
            break; // keep the graph from thinning out completely
        }
        let k = rng.gen_range(0..edges.len());
        edges.swap_remove(k);
    }

    // A new node extends the network from its two nearest survivors, the
    // way a new sensor joins existing road segments.
    let mut new_states: BTreeMap<NodeId, NodeState> = BTreeMap::new();
    let max_id = snapshot.nodes().iter().map(|n| n.0).max().unwrap_or(0);
    let add_count = (scenario.add_node_fraction * snapshot.node_count() as f64).floor() as usize;
    let positions: BTreeMap<NodeId, (f64, f64)> = states
        .iter()
        .filter(|(id, _)| nodes.contains(id))
        .map(|(&id, s)| (id, s.position))
        .collect();
    for offset in 0..add_count as u64 {
        let id = NodeId(max_id + 1 + offset);
        let state = new_node_state(rng, scenario);
        let mut near: Vec<(f64, NodeId)> = positions
            .iter()
            .map(|(&other, &pos)| (distance(state.position, pos), other))
            .collect();
        near.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for &(d, other) in near.iter().take(2) {
            edges.push((id, other, d));
        }
        nodes.push(id);
        new_states.insert(id, state);
    }

    // Shortcut edges between unconnected near pairs.
    let add_edges = (scenario.add_edge_fraction * edges.len() as f64).floor() as usize;
    let all_positions: BTreeMap<NodeId, (f64, f64)> = positions
        .iter()
        .map(|(&id, &p)| (id, p))
        .chain(new_states.iter().map(|(&id, s)| (id, s.position)))
        .collect();
    let has_edge: std::collections::BTreeSet<(NodeId, NodeId)> = edges
        .iter()
        .map(|&(a, b, _)| if a <= b { (a, b) } else { (b, a) })
        .collect();
    let ids: Vec<NodeId> = nodes.clone();
    let mut added = 0;
    let mut guard = 0;
    while added < add_edges && guard < add_edges * 50 + 100 {
        guard += 1;
        let a = ids[rng.gen_range(0..ids.len())];
        let b = ids[rng.gen_range(0..ids.len())];
        if a == b {
            continue;
        }
        let key = if a <= b { (a, b) } else { (b, a) };
        if has_edge.contains(&key) {
            continue;
        }
        let d = distance(all_positions[&a], all_positions[&b]);
        if d <= radius * 15.0 {
            edges.push((a, b, d));
            added += 1;
        }
    }

    let snapshot = GraphSnapshot::new(period, nodes, dedup_edges(edges))?;
    Ok((snapshot, new_states))
}

fn dedup_edges(edges: Vec<(NodeId, NodeId, f64)>) -> Vec<(NodeId, NodeId, f64)> {
    let mut seen = std::collections::BTreeSet::new();
    edges
        .into_iter()
        .filter(|&(a, b, _)| seen.insert(if a <= b { (a, b) } else { (b, a) }))
        .collect()
}

/// Per-node signal: daily sinusoid around the node's base level, a linear
/// trend within the period, one pass of neighbor diffusion, and Gaussian
/// noise. Feature 0 is the flow; feature 1 (when present) is a shared
/// clock channel; higher features are harmonics of the cycle.
fn synthesize_signals(
    snapshot: &GraphSnapshot,
    states: &BTreeMap<NodeId, NodeState>,
    scenario: &EvolutionScenario,
    rng: &mut ChaCha8Rng,
) -> Result<SeriesTensor> {
    let n = snapshot.node_count();
    let t_len = scenario.steps;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut raw = vec![vec![0.0f64; t_len]; n];
    for (i, node) in snapshot.nodes().iter().enumerate() {
        let s = &states[node];
        for (t, slot) in raw[i].iter_mut().enumerate() {
            let angle = std::f64::consts::TAU * t as f64 / scenario.steps_per_day as f64;
            *slot = s.base
                + s.amplitude * (angle + s.phase).sin()
                + scenario.trend * t as f64
                + scenario.noise * normal.sample(rng);
        }
    }
    // One diffusion pass couples neighbors.
    let neighbors = snapshot.neighbor_map();
    let mut values = Tensor::zeros(&[n, scenario.features, t_len]);
    for (i, node) in snapshot.nodes().iter().enumerate() {
        let others = &neighbors[node];
        for t in 0..t_len {
            let own = raw[i][t];
            let coupled = if others.is_empty() || scenario.coupling == 0.0 {
                own
            } else {
                let mean: f64 = others
                    .iter()
                    .map(|o| raw[snapshot.index_of(*o).unwrap()][t])
                    .sum::<f64>()
                    / others.len() as f64;
                (1.0 - scenario.coupling) * own + scenario.coupling * mean
            };
            values.set3(i, 0, t, coupled);
            for c in 1..scenario.features {
                let angle = std::f64::consts::TAU * t as f64 / scenario.steps_per_day as f64;
                let clock = (angle * c as f64).sin();
                values.set3(i, c, t, clock);
            }
        }
    }
    SeriesTensor::new(snapshot.nodes().to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scenario() -> EvolutionScenario {
        EvolutionScenario {
            periods: 3,
            nodes: 20,
            steps: 60,
            features: 2,
            add_node_fraction: 0.15,
            remove_node_fraction: 0.1,
            add_edge_fraction: 0.1,
            remove_edge_fraction: 0.1,
            daily_amplitude: 8.0,
            trend: 0.0,
            noise: 0.5,
            shift_fraction: 0.2,
            shift_magnitude: 50.0,
            steps_per_day: 12,
            coupling: 0.3,
            seed: 42,
        }
    }

    #[test]
    fn generated_fixture_saves_and_loads_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = generate_to_disk(&tiny_scenario(), dir.path()).unwrap();
        assert_eq!(dataset.periods.len(), 3);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for ((s1, d1), (s2, d2)) in dataset.periods.iter().zip(&loaded) {
            assert_eq!(s1, s2);
            assert!(d2.aligned_with(s2));
            for (a, b) in d1.values().data().iter().zip(d2.values().data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let shifts = load_planted_shifts(&dir.path().join("planted_shifts.csv")).unwrap();
        assert_eq!(shifts.len(), 2); // periods 2 and 3
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = generate_scenario(&tiny_scenario()).unwrap();
        let b = generate_scenario(&tiny_scenario()).unwrap();
        for ((s1, d1), (s2, d2)) in a.periods.iter().zip(&b.periods) {
            assert_eq!(s1, s2);
            assert_eq!(d1.values().data(), d2.values().data());
        }
        assert_eq!(a.planted_shifts, b.planted_shifts);
    }

    #[test]
    fn null_scenario_produces_identical_periods() {
        let scenario = EvolutionScenario {
            add_node_fraction: 0.0,
            remove_node_fraction: 0.0,
            add_edge_fraction: 0.0,
            remove_edge_fraction: 0.0,
            noise: 0.0,
            shift_fraction: 0.0,
            trend: 0.0,
            ..tiny_scenario()
        };
        let dataset = generate_scenario(&scenario).unwrap();
        let (g1, d1) = &dataset.periods[0];
        for (gk, dk) in &dataset.periods[1..] {
            assert_eq!(g1.nodes(), gk.nodes());
            assert_eq!(g1.edge_count(), gk.edge_count());
            assert_eq!(d1.values().data(), dk.values().data());
        }
        // With identical data every node scores zero.
        let scores = crate::continual::score_nodes(
            d1.nodes(),
            d1.values(),
            dataset.periods[1].1.nodes(),
            dataset.periods[1].1.values(),
            30,
            20,
        )
        .unwrap();
        assert!(scores.values().all(|&s| s == 0.0));
    }

    #[test]
    fn planted_shift_nodes_outrank_every_unshifted_node() {
        let dataset = generate_scenario(&tiny_scenario()).unwrap();
        let (_, prev) = &dataset.periods[0];
        let (_, next) = &dataset.periods[1];
        let (period, shifted) = &dataset.planted_shifts[0];
        assert_eq!(*period, 2);
        assert!(!shifted.is_empty());
        let scores = crate::continual::score_nodes(
            prev.nodes(),
            prev.values(),
            next.nodes(),
            next.values(),
            40,
            20,
        )
        .unwrap();
        let min_shifted = shifted
            .iter()
            .map(|n| scores[n])
            .fold(f64::INFINITY, f64::min);
        let max_other = scores
            .iter()
            .filter(|(n, _)| !shifted.contains(n))
            .map(|(_, &s)| s)
            .fold(0.0, f64::max);
        assert!(
            min_shifted > max_other,
            "planted {min_shifted} vs background {max_other}"
        );
    }

    #[test]
    fn generator_keeps_graphs_connected() {
        let dataset = generate_scenario(&tiny_scenario()).unwrap();
        for (snapshot, _) in &dataset.periods {
            assert!(snapshot.largest_component() * 10 >= snapshot.node_count() * 9);
        }
    }

    #[test]
    fn normalization_round_trips_and_standardizes() {
        let dataset = generate_scenario(&tiny_scenario()).unwrap();
        let (_, series) = &dataset.periods[0];
        let (train, _, _) = split_series(series);
        let stats = channel_stats(&train, train.len_time());
        let normed = normalize(series, &stats);

        // Training split is standardized.
        let normed_train = normalize(&train, &stats);
        let recomputed = channel_stats(&normed_train, normed_train.len_time());
        assert!(recomputed[0].0.abs() <= 1e-9);
        assert!((recomputed[0].1 - 1.0).abs() <= 1e-6);

        // Round trip restores the originals.
        for c in 0..series.feature_count() {
            let (mean, std) = stats[c];
            for i in 0..series.node_count() {
                for t in 0..series.len_time() {
                    let back = normed.values().at3(i, c, t) * std + mean;
                    assert!((back - series.values().at3(i, c, t)).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let nodes = vec![NodeId(1), NodeId(2)];
        let values = Tensor::full(&[2, 1, 5], 3.25);
        let series = SeriesTensor::new(nodes, values).unwrap();
        let stats = channel_stats(&series, 5);
        assert_eq!(stats[0], (3.25, 1.0)); // unit-deviation guard
        let normed = normalize(&series, &stats);
        assert!(normed.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_counts_match_the_contract() {
        let nodes = vec![NodeId(1)];
        let mk = |t: usize| {
            let values = Tensor::new(vec![1, 1, t], (0..t).map(|i| i as f64).collect()).unwrap();
            SeriesTensor::new(nodes.clone(), values).unwrap()
        };
        assert_eq!(make_windows(&mk(7), 4, 3, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&mk(9), 4, 3, 1).unwrap().len(), 3);
        assert!(matches!(
            make_windows(&mk(6), 4, 3, 1),
            Err(DataError::InsufficientHistory { .. })
        ));
        // Chronology: the first window's target starts right after its input.
        let windows = make_windows(&mk(9), 4, 3, 1).unwrap();
        assert_eq!(windows[0].input.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(windows[0].target.data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn unknown_observation_column_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = generate_to_disk(&tiny_scenario(), dir.path()).unwrap();
        drop(dataset);
        let obs = dir.path().join("period_1").join("observations.csv");
        let text = std::fs::read_to_string(&obs).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let patched = lines[0].replacen(':', "9999:", 1);
        let patched_header = patched;
        lines[0] = &patched_header;
        std::fs::write(&obs, lines.join("\n")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::Format { .. })
        ));
    }

    #[test]
    fn missing_file_is_reported_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        generate_to_disk(&tiny_scenario(), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("period_2").join("edges.csv")).unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::MissingArtifact(p)) => {
                assert!(p.ends_with("period_2/edges.csv"));
            }
            other => panic!("expected MissingArtifact, got {other:?}"),
        }
    }

    #[test]
    fn split_is_chronological_and_covers_everything() {
        let nodes = vec![NodeId(1)];
        let values = Tensor::new(vec![1, 1, 100], (0..100).map(|i| i as f64).collect()).unwrap();
        let series = SeriesTensor::new(nodes, values).unwrap();
        let (train, val, test) = split_series(&series);
        assert_eq!(train.len_time(), 60);
        assert_eq!(val.len_time(), 20);
        assert_eq!(test.len_time(), 20);
        assert_eq!(train.values().at3(0, 0, 59), 59.0);
        assert_eq!(val.values().at3(0, 0, 0), 60.0);
        assert_eq!(test.values().at3(0, 0, 19), 99.0);
    }
}
