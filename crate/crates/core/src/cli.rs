//! Command-line surface: generate fixtures, train either scenario,
//! forecast from a checkpoint, and evaluate prediction files.
//!
//! All randomness is seeded, so repeated runs with the same seed produce
//! byte-identical CSV outputs; wall-clock numbers live in separate timing
//! files. Logs go to standard error; exit code is nonzero on failure with
//! a module-tagged message.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    channel_stats, generate_to_disk, load_dataset, make_windows, normalize, split_series,
    EvolutionScenario, SeriesTensor,
};
use crate::graph::{build_adjacency, build_rescaled_laplacian, GraphSnapshot, NodeId};
use crate::metrics::{
    horizon_report, mae, mape, rmse, HorizonMetrics, MetricReport, PeriodMetrics, PeriodTiming,
    STANDARD_HORIZONS,
};
use crate::model::{CastConfig, CastModel};
use crate::tensor::{ParamStore, Tensor};
use crate::training::{
    predict, train_continual, train_full, ContinualConfig, EpochRecord, TrainConfig, TrainOutcome,
};

pub type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Gaussian-kernel adjacency settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Kernel weights below this threshold are zeroed.
    pub epsilon: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { epsilon: 0.1 }
    }
}

/// The run configuration file: `[model]`, `[train]`, `[continual]`,
/// `[graph]` sections, each optional and defaulted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: CastConfig,
    pub train: TrainConfig,
    pub continual: ContinualConfig,
    pub graph: GraphConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        let config: Self = toml::from_str(&text).map_err(|e| format!("config: {e}"))?;
        Ok(config)
    }
}

#[derive(Parser)]
#[command(
    name = "evoforecast",
    about = "Continual traffic forecasting over evolving sensor networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ScenarioKind {
    /// Reinitialize and fully retrain every period.
    Full,
    /// Transfer the model and retrain on changed plus buffered nodes.
    Continual,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic evolving dataset from a scenario file.
    Generate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train over every period of a dataset and report metrics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        scenario: ScenarioKind,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Forecast one period's test windows from a checkpoint.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        period: u32,
        /// Prediction CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the matching ground-truth CSV here.
        #[arg(long)]
        truth_out: Option<PathBuf>,
        /// Accepted for interface uniformity; forecasting is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare a prediction CSV against a truth CSV.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Accepted for interface uniformity; evaluation is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Entry point; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Generate {
            scenario,
            out,
            seed,
        } => {
            let mut spec = EvolutionScenario::load(&scenario)?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let dataset = generate_to_disk(&spec, &out)?;
            log::info!(
                "generated {} periods under {}",
                dataset.periods.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            config,
            scenario,
            out,
            seed,
        } => {
            let mut rc = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                rc.train.seed = seed;
            }
            let dataset = load_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            let report = match scenario {
                ScenarioKind::Full => run_scenario_full(&dataset, &rc, &out)?,
                ScenarioKind::Continual => run_scenario_continual(&dataset, &rc, &out)?,
            };
            report.write_metrics(&out.join("metrics.csv"))?;
            report.write_timings(&out.join("timings.csv"))?;
            log::info!("reports written under {}", out.display());
            Ok(())
        }
        Command::Forecast {
            checkpoint,
            data,
            period,
            out,
            truth_out,
            seed: _,
        } => cmd_forecast(
            &checkpoint,
            &data,
            period,
            out.as_deref(),
            truth_out.as_deref(),
        ),
        Command::Evaluate {
            pred,
            truth,
            seed: _,
        } => cmd_evaluate(&pred, &truth),
    }
}

fn check_features(rc: &RunConfig, series: &SeriesTensor) -> CliResult<()> {
    if rc.model.f_in != series.feature_count() {
        return Err(format!(
            "config: model.f_in = {} but the dataset has {} feature channels",
            rc.model.f_in,
            series.feature_count()
        )
        .into());
    }
    Ok(())
}

/// Test-split predictions and raw truths for one period's full graph.
fn period_forecasts(
    model: &CastModel,
    snapshot: &GraphSnapshot,
    series: &SeriesTensor,
    epsilon: f64,
) -> CliResult<(Vec<Tensor>, Vec<Tensor>)> {
    let lap = build_rescaled_laplacian(&build_adjacency(snapshot, epsilon)?);
    let cfg = model.config();
    let (train, _, test) = split_series(series);
    let stats = channel_stats(&train, train.len_time());
    let test_norm = normalize(&test, &stats);
    let windows_norm = make_windows(&test_norm, cfg.input_steps, cfg.horizon, 1)?;
    let windows_raw = make_windows(&test, cfg.input_steps, cfg.horizon, 1)?;
    let inputs: Vec<Tensor> = windows_norm.iter().map(|w| w.input.clone()).collect();
    let preds_norm = predict(model, &lap, &inputs)?;
    let (mean, std) = stats[0];
    let preds: Vec<Tensor> = preds_norm
        .iter()
        .map(|p| p.map(|v| v * std + mean))
        .collect();
    let truths: Vec<Tensor> = windows_raw.into_iter().map(|w| w.target).collect();
    Ok((preds, truths))
}

fn evaluate_period(
    model: &CastModel,
    snapshot: &GraphSnapshot,
    series: &SeriesTensor,
    epsilon: f64,
) -> CliResult<Vec<HorizonMetrics>> {
    let (preds, truths) = period_forecasts(model, snapshot, series, epsilon)?;
    Ok(horizon_report(&preds, &truths)?)
}

fn write_history(path: &Path, history: &[EpochRecord]) -> CliResult<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,train_loss,val_loss,wall_seconds")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.wall_seconds
        )?;
    }
    Ok(())
}

fn save_checkpoint(path: &Path, model: &CastModel, epsilon: f64) -> CliResult<()> {
    let mut store = model.params().clone();
    model.config().write_meta(&mut store);
    store.set_meta("graph.epsilon", &epsilon.to_string());
    store.save(path)?;
    Ok(())
}

fn timing_row(period: u32, total: f64, history: &[EpochRecord]) -> PeriodTiming {
    let epoch_mean = if history.is_empty() {
        0.0
    } else {
        history.iter().map(|r| r.wall_seconds).sum::<f64>() / history.len() as f64
    };
    PeriodTiming {
        period,
        total_seconds: total,
        epochs: history.len(),
        seconds_per_epoch: epoch_mean,
    }
}

fn train_first_period(
    dataset: &[(GraphSnapshot, SeriesTensor)],
    rc: &RunConfig,
    out: &Path,
) -> CliResult<(TrainOutcome, f64)> {
    let (snapshot, series) = &dataset[0];
    check_features(rc, series)?;
    let model = CastModel::init(rc.model.clone(), rc.train.seed)?;
    let started = Instant::now();
    let outcome = train_full(model, snapshot, series, &rc.train, rc.graph.epsilon)?;
    let total = started.elapsed().as_secs_f64();
    write_history(&out.join("history_period_1.csv"), &outcome.history)?;
    save_checkpoint(
        &out.join("checkpoint_period_1.ckpt"),
        &outcome.model,
        rc.graph.epsilon,
    )?;
    Ok((outcome, total))
}

/// Scenario 1: reinitialize and fully train a model every period.
pub fn run_scenario_full(
    dataset: &[(GraphSnapshot, SeriesTensor)],
    rc: &RunConfig,
    out: &Path,
) -> CliResult<MetricReport> {
    let mut report = MetricReport::default();
    for (idx, (snapshot, series)) in dataset.iter().enumerate() {
        check_features(rc, series)?;
        let period = snapshot.period();
        // Fresh model every period, seeded independently.
        let model = CastModel::init(rc.model.clone(), rc.train.seed + idx as u64)?;
        let started = Instant::now();
        let outcome = train_full(model, snapshot, series, &rc.train, rc.graph.epsilon)?;
        let total = started.elapsed().as_secs_f64();
        if outcome.no_improvement {
            log::warn!("period {period}: training never improved");
        }
        write_history(
            &out.join(format!("history_period_{period}.csv")),
            &outcome.history,
        )?;
        save_checkpoint(
            &out.join(format!("checkpoint_period_{period}.ckpt")),
            &outcome.model,
            rc.graph.epsilon,
        )?;
        report.periods.push(PeriodMetrics {
            period,
            horizons: evaluate_period(&outcome.model, snapshot, series, rc.graph.epsilon)?,
        });
        report
            .timings
            .push(timing_row(period, total, &outcome.history));
        log::info!(
            "scenario 1, period {period}: {} epochs, best {}",
            outcome.history.len(),
            outcome.best_epoch
        );
    }
    Ok(report)
}

/// Scenario 2: full training on period 1, then continual transfer.
pub fn run_scenario_continual(
    dataset: &[(GraphSnapshot, SeriesTensor)],
    rc: &RunConfig,
    out: &Path,
) -> CliResult<MetricReport> {
    let mut report = MetricReport::default();
    let (first, first_total) = train_first_period(dataset, rc, out)?;
    let (first_snapshot, first_series) = &dataset[0];
    report.periods.push(PeriodMetrics {
        period: first_snapshot.period(),
        horizons: evaluate_period(&first.model, first_snapshot, first_series, rc.graph.epsilon)?,
    });
    report.timings.push(timing_row(
        first_snapshot.period(),
        first_total,
        &first.history,
    ));

    let mut subsets = Vec::new();
    let mut model = first.model;
    for pair in dataset.windows(2) {
        let (prev_snapshot, prev_series) = &pair[0];
        let (next_snapshot, next_series) = &pair[1];
        check_features(rc, next_series)?;
        let period = next_snapshot.period();
        let started = Instant::now();
        let result = train_continual(
            model,
            prev_snapshot,
            prev_series,
            next_snapshot,
            next_series,
            &rc.train,
            &rc.continual,
            rc.graph.epsilon,
        )?;
        let total = started.elapsed().as_secs_f64();
        if result.outcome.noop {
            log::info!("scenario 2, period {period}: no evolution, model carried over");
        }
        result
            .buffers
            .save_manifest(&out.join(format!("buffers_period_{period}.csv")), period)?;
        write_history(
            &out.join(format!("history_period_{period}.csv")),
            &result.outcome.history,
        )?;
        save_checkpoint(
            &out.join(format!("checkpoint_period_{period}.ckpt")),
            &result.outcome.model,
            rc.graph.epsilon,
        )?;
        let (preds, truths) = period_forecasts(
            &result.outcome.model,
            next_snapshot,
            next_series,
            rc.graph.epsilon,
        )?;
        report.periods.push(PeriodMetrics {
            period,
            horizons: horizon_report(&preds, &truths)?,
        });
        report
            .timings
            .push(timing_row(period, total, &result.outcome.history));

        // Stable/unstable sub-reports, per buffer membership.
        for (label, ids) in [
            ("stable", result.buffers.consolidation_ids()),
            ("unstable", result.buffers.update_ids()),
        ] {
            if ids.is_empty() {
                continue;
            }
            let rows: Vec<usize> = next_snapshot
                .nodes()
                .iter()
                .enumerate()
                .filter(|(_, n)| ids.contains(n))
                .map(|(i, _)| i)
                .collect();
            let select = |tensors: &[Tensor]| -> Vec<Tensor> {
                tensors
                    .iter()
                    .map(|t| {
                        let (f, h) = (t.shape()[1], t.shape()[2]);
                        let mut sub = Tensor::zeros(&[rows.len(), f, h]);
                        for (ri, &src) in rows.iter().enumerate() {
                            for c in 0..f {
                                for k in 0..h {
                                    sub.set3(ri, c, k, t.at3(src, c, k));
                                }
                            }
                        }
                        sub
                    })
                    .collect()
            };
            let sub_preds = select(&preds);
            let sub_truths = select(&truths);
            subsets.push((
                period,
                label,
                mae(&flatten(&sub_preds), &flatten(&sub_truths))?,
                rmse(&flatten(&sub_preds), &flatten(&sub_truths))?,
                mape(&flatten(&sub_preds), &flatten(&sub_truths))?,
            ));
        }
        model = result.outcome.model;
        log::info!(
            "scenario 2, period {period}: trained on {} of {} nodes",
            result.training_nodes.len(),
            next_snapshot.node_count()
        );
    }

    if !subsets.is_empty() {
        let mut out_file =
            std::io::BufWriter::new(std::fs::File::create(out.join("stable_unstable.csv"))?);
        writeln!(out_file, "period,subset,mae,rmse,mape")?;
        for (period, label, m, r, p) in subsets {
            writeln!(out_file, "{period},{label},{m},{r},{p}")?;
        }
    }
    Ok(report)
}

fn flatten(tensors: &[Tensor]) -> Tensor {
    let data: Vec<f64> = tensors.iter().flat_map(|t| t.data().to_vec()).collect();
    Tensor::new(vec![data.len()], data).expect("flat")
}

fn cmd_forecast(
    checkpoint: &Path,
    data: &Path,
    period: u32,
    out: Option<&Path>,
    truth_out: Option<&Path>,
) -> CliResult<()> {
    let store = ParamStore::load(checkpoint)?;
    let config = CastConfig::read_meta(&store)?;
    let epsilon: f64 = store
        .meta("graph.epsilon")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.1);
    let model = CastModel::from_parts(config, store)?;
    let dataset = load_dataset(data)?;
    let (snapshot, series) = dataset
        .iter()
        .find(|(s, _)| s.period() == period)
        .ok_or_else(|| format!("data: no period_{period} in {}", data.display()))?;
    let (preds, truths) = period_forecasts(&model, snapshot, series, epsilon)?;

    let write_csv = |path: Option<&Path>, tensors: &[Tensor]| -> CliResult<()> {
        let mut sink: Box<dyn Write> = match path {
            Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => Box::new(std::io::stdout().lock()),
        };
        writeln!(sink, "window,node_id,step,value")?;
        for (w, tensor) in tensors.iter().enumerate() {
            for (i, node) in snapshot.nodes().iter().enumerate() {
                for k in 0..tensor.shape()[2] {
                    writeln!(sink, "{w},{node},{},{}", k + 1, tensor.at3(i, 0, k))?;
                }
            }
        }
        Ok(())
    };
    write_csv(out, &preds)?;
    if let Some(path) = truth_out {
        write_csv(Some(path), &truths)?;
    }
    log::info!("forecast period {period}: {} windows", preds.len());
    Ok(())
}

fn read_prediction_csv(path: &Path) -> CliResult<BTreeMap<(usize, NodeId, usize), f64>> {
    let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != "window,node_id,step,value" {
                return Err(format!("{}: unexpected header", path.display()).into());
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(format!("{} line {}: expected 4 fields", path.display(), i + 1).into());
        }
        let window: usize = fields[0].parse().map_err(|_| "bad window index")?;
        let node: u64 = fields[1].parse().map_err(|_| "bad node id")?;
        let step: usize = fields[2].parse().map_err(|_| "bad step")?;
        let value: f64 = fields[3].parse().map_err(|_| "bad value")?;
        map.insert((window, NodeId(node), step), value);
    }
    Ok(map)
}

fn cmd_evaluate(pred_path: &Path, truth_path: &Path) -> CliResult<()> {
    let preds = read_prediction_csv(pred_path)?;
    let truths = read_prediction_csv(truth_path)?;
    if preds.len() != truths.len() || !preds.keys().eq(truths.keys()) {
        return Err("metrics: prediction and truth files cover different keys".into());
    }
    let steps_present: std::collections::BTreeSet<usize> =
        preds.keys().map(|&(_, _, s)| s).collect();
    let mut rows: Vec<(u32, usize)> = vec![(0, 0)];
    rows.extend(
        STANDARD_HORIZONS
            .iter()
            .filter(|&&(_, s)| steps_present.contains(&s)),
    );
    let mut sink = std::io::stdout().lock();
    writeln!(sink, "horizon_minutes,horizon_step,mae,rmse,mape")?;
    for (minutes, step) in rows {
        let mut p = Vec::new();
        let mut t = Vec::new();
        for ((_, _, s), &v) in &preds {
            if step == 0 || *s == step {
                p.push(v);
            }
        }
        for ((_, _, s), &v) in &truths {
            if step == 0 || *s == step {
                t.push(v);
            }
        }
        let p = Tensor::new(vec![p.len()], p)?;
        let t = Tensor::new(vec![t.len()], t)?;
        writeln!(
            sink,
            "{minutes},{step},{},{},{}",
            mae(&p, &t)?,
            rmse(&p, &t)?,
            mape(&p, &t)?
        )?;
    }
    Ok(())
}
