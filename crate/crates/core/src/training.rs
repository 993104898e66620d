//! Objectives, optimizer, and the two training procedures.
//!
//! Period 1 (and every period of the full-retrain scenario) minimizes the
//! Huber loss over sliding windows. Continual periods transfer the previous
//! model and minimize Huber plus an elastic consolidation penalty weighted
//! by the diagonal empirical Fisher information of the previous period,
//! training only on the assembled subgraph: evolved nodes, the update
//! buffer on new data, and the consolidation buffer replaying its stored
//! old windows.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::{
    assemble_training_set, score_nodes, select_buffers, ContinualError, RehearsalBuffers,
};
use crate::data::{
    channel_stats, make_windows, normalize, split_series, DataError, SeriesTensor, Window,
};
use crate::graph::{
    build_adjacency, build_rescaled_laplacian, compute_delta, GraphError, GraphSnapshot, NodeId,
    RescaledLaplacian,
};
use crate::model::{BoundParams, CastModel, ModelError};
use crate::tensor::{AdamState, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train: Fisher information needs at least one sample")]
    EmptyFisherData,
    #[error("train: parameter mismatch at {0}")]
    ParameterMismatch(String),
    #[error("train: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Continual(#[from] ContinualError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Consolidation penalty weight (lambda).
    pub lambda: f64,
    /// Huber threshold (delta).
    pub delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 200,
            patience: 15,
            lambda: 0.0001,
            delta: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.delta <= 0.0 {
            return Err(TrainError::Config(
                "learning_rate and delta must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch_size and max_epochs must be >= 1".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::Config("lambda must be >= 0".into()));
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::Config("patience must be <= max_epochs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    /// Consolidation buffer capacity as a fraction of surviving nodes.
    pub buffer_fraction_c: f64,
    /// Update buffer capacity as a fraction of surviving nodes.
    pub buffer_fraction_u: f64,
    /// Trailing window length for histogram scoring (timestamps).
    pub tau: usize,
    /// Histogram bin count.
    pub bins: usize,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            buffer_fraction_c: 0.15,
            buffer_fraction_u: 0.15,
            // 7 days of 5-minute steps.
            tau: 2016,
            bins: 20,
        }
    }
}

/// Mean elementwise Huber value of the prediction error.
pub fn huber_loss<'t>(pred: Var<'t>, truth: Var<'t>, delta: f64) -> Result<Var<'t>> {
    Ok(pred.sub(truth)?.huber_elem(delta)?.mean(None)?)
}

/// Diagonal parameter importance for the previous period, with the frozen
/// reference parameters it was measured at.
#[derive(Clone)]
pub struct FisherState {
    importance: BTreeMap<String, Tensor>,
    reference: ParamStore,
}

impl FisherState {
    pub fn importance(&self, name: &str) -> Option<&Tensor> {
        self.importance.get(name)
    }

    pub fn reference(&self) -> &ParamStore {
        &self.reference
    }
}

/// Diagonal empirical Fisher: the mean over samples of the squared
/// per-sample loss gradient. The closure produces the loss gradients for
/// sample `k` (typically: fresh tape, forward, Huber loss, backward, and
/// [`Tape::param_grads`]); parameters the loss never touches keep zero
/// importance. The reference parameters are deep-copied from `params`.
pub fn compute_fisher(
    params: &ParamStore,
    sample_count: usize,
    mut grads_for_sample: impl FnMut(usize) -> Result<BTreeMap<String, Tensor>>,
) -> Result<FisherState> {
    if sample_count == 0 {
        return Err(TrainError::EmptyFisherData);
    }
    let mut importance: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
        .collect();
    for k in 0..sample_count {
        for (name, g) in grads_for_sample(k)? {
            let acc = importance
                .get_mut(&name)
                .ok_or_else(|| TrainError::ParameterMismatch(name.clone()))?;
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v * v;
            }
        }
    }
    for t in importance.values_mut() {
        for v in t.data_mut() {
            *v /= sample_count as f64;
        }
    }
    Ok(FisherState {
        importance,
        reference: params.clone(),
    })
}

/// Consolidation penalty `sum_i F_i (theta_i - theta_ref_i)^2` as a plain
/// value.
pub fn ewc_penalty(params: &ParamStore, fisher: &FisherState) -> Result<f64> {
    let mut total = 0.0;
    for (name, current) in params.iter() {
        let imp = fisher
            .importance
            .get(name)
            .ok_or_else(|| TrainError::ParameterMismatch(name.to_string()))?;
        let reference = fisher
            .reference
            .get(name)
            .ok_or_else(|| TrainError::ParameterMismatch(name.to_string()))?;
        if imp.shape() != current.shape() {
            return Err(TrainError::ParameterMismatch(name.to_string()));
        }
        for ((c, r), f) in current.data().iter().zip(reference.data()).zip(imp.data()) {
            let d = c - r;
            total += f * d * d;
        }
    }
    Ok(total)
}

/// The same penalty on the tape, so it contributes gradients.
fn ewc_penalty_on_tape<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    fisher: &FisherState,
) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (name, var) in bound.iter() {
        let imp = fisher
            .importance
            .get(name)
            .ok_or_else(|| TrainError::ParameterMismatch(name.to_string()))?;
        if imp.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let reference = fisher
            .reference
            .get(name)
            .ok_or_else(|| TrainError::ParameterMismatch(name.to_string()))?;
        let diff = var.sub(tape.leaf(reference.clone()))?;
        let weighted = diff.hadamard(diff)?.hadamard(tape.leaf(imp.clone()))?;
        let term = weighted.sum(None)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.scalar(0.0)))
}

/// Overall objective: Huber plus `lambda` times the consolidation penalty.
/// With `lambda == 0` or no Fisher state this is the Huber loss, bit for
/// bit.
pub fn overall_loss<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    pred: Var<'t>,
    truth: Var<'t>,
    fisher: Option<&FisherState>,
    lambda: f64,
    delta: f64,
) -> Result<Var<'t>> {
    let main = huber_loss(pred, truth, delta)?;
    match fisher {
        Some(state) if lambda != 0.0 => {
            let penalty = ewc_penalty_on_tape(tape, bound, state)?;
            Ok(main.add(penalty.scale(lambda)?)?)
        }
        _ => Ok(main),
    }
}

/// One bias-corrected Adam update over every parameter. Parameters without
/// a gradient entry are treated as zero-gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.step += 1;
    let t = state.step as i32;
    let corr1 = 1.0 - BETA1.powi(t);
    let corr2 = 1.0 - BETA2.powi(t);
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let value = params.get_mut(&name).expect("iterating own names");
        let zero;
        let grad = match grads.get(&name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(value.shape());
                &zero
            }
        };
        let (m, v) = state.moments_mut(&name, value.shape());
        for i in 0..value.len() {
            let g = grad.data()[i];
            let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * g;
            let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Per-epoch training record; the wall time backs runtime reports and is
/// excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

/// A trained model plus its training history.
pub struct TrainOutcome {
    pub model: CastModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Set when validation never improved over its initial value.
    pub no_improvement: bool,
    /// Set when continual training had nothing to train on.
    pub noop: bool,
}

fn mean_forward_loss(
    model: &CastModel,
    lap: &RescaledLaplacian,
    windows: &[Window],
    delta: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let pred = model.forward(&tape, &bound, tape.leaf(w.input.clone()), lap)?;
        let loss = huber_loss(pred, tape.leaf(w.target.clone()), delta)?;
        total += loss.scalar_value();
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Forward a batch of inputs without gradients.
pub fn predict(
    model: &CastModel,
    lap: &RescaledLaplacian,
    inputs: &[Tensor],
) -> Result<Vec<Tensor>> {
    inputs
        .iter()
        .map(|input| {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            Ok(model
                .forward(&tape, &bound, tape.leaf(input.clone()), lap)?
                .value())
        })
        .collect()
}

struct EpochLoop<'a> {
    model: CastModel,
    lap: &'a RescaledLaplacian,
    train: Vec<Window>,
    val: Vec<Window>,
    fisher: Option<&'a FisherState>,
    config: &'a TrainConfig,
}

impl EpochLoop<'_> {
    /// Standard loop: shuffled mini-batches, Adam, early stopping on the
    /// validation loss with the configured patience, best-epoch checkpoint.
    fn run(mut self) -> Result<TrainOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut adam = AdamState::new();
        let mut history = Vec::new();
        let mut best_val = f64::INFINITY;
        let mut best_epoch = 0;
        let mut best_params = self.model.params().clone();
        let mut bad_epochs = 0usize;
        let mut order: Vec<usize> = (0..self.train.len()).collect();

        for epoch in 1..=self.config.max_epochs {
            let started = Instant::now();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(self.config.batch_size) {
                let mut grad_sum: BTreeMap<String, Tensor> = BTreeMap::new();
                let mut batch_loss = 0.0;
                for &idx in batch {
                    let window = &self.train[idx];
                    let tape = Tape::new();
                    let bound = self.model.bind(&tape);
                    let pred = self.model.forward(
                        &tape,
                        &bound,
                        tape.leaf(window.input.clone()),
                        self.lap,
                    )?;
                    let loss = overall_loss(
                        &tape,
                        &bound,
                        pred,
                        tape.leaf(window.target.clone()),
                        self.fisher,
                        self.config.lambda,
                        self.config.delta,
                    )?;
                    batch_loss += loss.scalar_value();
                    let grads = tape.backward(loss)?;
                    for (name, g) in tape.param_grads(&grads) {
                        match grad_sum.get_mut(&name) {
                            Some(acc) => {
                                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += v;
                                }
                            }
                            None => {
                                grad_sum.insert(name, g);
                            }
                        }
                    }
                }
                let scale = 1.0 / batch.len() as f64;
                for g in grad_sum.values_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
                adam_step(
                    self.model.params_mut(),
                    &grad_sum,
                    &mut adam,
                    self.config.learning_rate,
                );
                epoch_loss += batch_loss;
            }
            let train_loss = epoch_loss / self.train.len().max(1) as f64;
            let val_loss = mean_forward_loss(&self.model, self.lap, &self.val, self.config.delta)?;
            history.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            if val_loss < best_val {
                best_val = val_loss;
                best_epoch = epoch;
                best_params = self.model.params().clone();
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
            }
            if bad_epochs >= self.config.patience {
                break;
            }
        }

        let no_improvement = match (history.first(), history.last()) {
            (Some(first), Some(last)) => history.len() > 1 && last.train_loss >= first.train_loss,
            _ => true,
        };
        if no_improvement {
            log::warn!("train: loss never improved over {} epochs", history.len());
        }
        let config = self.model.config().clone();
        Ok(TrainOutcome {
            model: CastModel::from_parts(config, best_params)?,
            history,
            best_epoch,
            no_improvement,
            noop: false,
        })
    }
}

/// Scenario 1: train a fresh model on one period's full graph.
///
/// The series is split 60/20/20 chronologically; normalization statistics
/// come from the training split only; early stopping watches the
/// validation split.
pub fn train_full(
    model: CastModel,
    snapshot: &GraphSnapshot,
    series: &SeriesTensor,
    config: &TrainConfig,
    epsilon: f64,
) -> Result<TrainOutcome> {
    config.validate()?;
    let lap = build_rescaled_laplacian(&build_adjacency(snapshot, epsilon)?);
    let (train, val, _) = split_series(series);
    let stats = channel_stats(&train, train.len_time());
    let cfg = model.config().clone();
    let train_windows = make_windows(&normalize(&train, &stats), cfg.input_steps, cfg.horizon, 1)?;
    let val_windows = make_windows(&normalize(&val, &stats), cfg.input_steps, cfg.horizon, 1)?;
    EpochLoop {
        model,
        lap: &lap,
        train: train_windows,
        val: val_windows,
        fisher: None,
        config,
    }
    .run()
}

/// What continual training worked with, for reports and manifests.
pub struct ContinualOutcome {
    pub outcome: TrainOutcome,
    pub buffers: RehearsalBuffers,
    pub training_nodes: Vec<NodeId>,
}

/// Scenario 2: transfer the previous period's model and train it on the
/// assembled subgraph only.
///
/// Follows the rehearsal procedure: score surviving nodes by histogram
/// EMD, pick consolidation/update buffers, assemble the training subgraph
/// from the delta plus both buffers, compute Fisher importance on the
/// previous period, and minimize Huber + lambda * EWC. Consolidation-node
/// rows replay their stored old windows (normalized with the old stats);
/// all other rows carry new-period data (normalized with the new stats).
/// When nothing evolved and the buffers are empty the model is returned
/// unchanged with the no-op flag set.
#[allow(clippy::too_many_arguments)]
pub fn train_continual(
    model_prev: CastModel,
    prev_snapshot: &GraphSnapshot,
    prev_series: &SeriesTensor,
    next_snapshot: &GraphSnapshot,
    next_series: &SeriesTensor,
    config: &TrainConfig,
    continual: &ContinualConfig,
    epsilon: f64,
) -> Result<ContinualOutcome> {
    config.validate()?;
    let delta = compute_delta(prev_snapshot, next_snapshot)?;

    let tau = continual
        .tau
        .min(prev_series.len_time())
        .min(next_series.len_time());
    if tau < continual.tau {
        log::warn!(
            "continual: clamping tau from {} to {tau} (short period)",
            continual.tau
        );
    }
    let scores = score_nodes(
        prev_series.nodes(),
        prev_series.values(),
        next_series.nodes(),
        next_series.values(),
        tau,
        continual.bins,
    )?;
    let capacity_c = (continual.buffer_fraction_c * scores.len() as f64).floor() as usize;
    let capacity_u = (continual.buffer_fraction_u * scores.len() as f64).floor() as usize;
    let mut buffers = select_buffers(&scores, capacity_c, capacity_u)?;
    let prev_train = split_series(prev_series).0;
    let prev_stats = channel_stats(&prev_train, prev_train.len_time());
    buffers.store_rehearsal_windows(prev_series.nodes(), prev_series.values(), &prev_stats, tau)?;

    let training_sub = match assemble_training_set(&delta, &buffers, next_snapshot) {
        Ok(sub) => sub,
        Err(ContinualError::EmptyTrainingSet) => {
            log::info!("continual: nothing to train on, keeping the transferred model");
            return Ok(ContinualOutcome {
                outcome: TrainOutcome {
                    model: model_prev,
                    history: Vec::new(),
                    best_epoch: 0,
                    no_improvement: false,
                    noop: true,
                },
                buffers,
                training_nodes: Vec::new(),
            });
        }
        Err(e) => return Err(e.into()),
    };

    // Fisher importance from the previous period's training windows.
    let fisher = {
        let prev_lap = build_rescaled_laplacian(&build_adjacency(prev_snapshot, epsilon)?);
        let (prev_train, _, _) = split_series(prev_series);
        let stats = channel_stats(&prev_train, prev_train.len_time());
        let cfg = model_prev.config().clone();
        let windows = make_windows(
            &normalize(&prev_train, &stats),
            cfg.input_steps,
            cfg.horizon,
            1,
        )?;
        let sample_count = windows.len().min(FISHER_MAX_SAMPLES);
        let step = (windows.len().max(1) / sample_count.max(1)).max(1);
        let chosen: Vec<&Window> = (0..sample_count).map(|k| &windows[k * step]).collect();
        let model_ref = &model_prev;
        let delta_huber = config.delta;
        compute_fisher(model_prev.params(), chosen.len(), |k| {
            let tape = Tape::new();
            let bound = model_ref.bind(&tape);
            let w = chosen[k];
            let pred = model_ref.forward(&tape, &bound, tape.leaf(w.input.clone()), &prev_lap)?;
            let loss = huber_loss(pred, tape.leaf(w.target.clone()), delta_huber)?;
            let grads = tape.backward(loss)?;
            Ok(tape.param_grads(&grads))
        })?
    };

    // Composite training series over the assembled subgraph: rehearsal rows
    // for consolidation nodes, new-period rows elsewhere.
    let sub_lap = build_rescaled_laplacian(&build_adjacency(&training_sub, epsilon)?);
    let next_train = split_series(next_series).0;
    let next_stats = channel_stats(&next_train, next_train.len_time());
    let mut composite = next_series.select_nodes(training_sub.nodes())?;
    let consolidation = buffers.consolidation_ids();
    for node in &consolidation {
        if let Some(window) = buffers.rehearsal.get(node) {
            let tiled = tile_to_length(window, composite.len_time());
            composite.overwrite_node(*node, &tiled);
        }
    }
    // Per-row normalization: rehearsal rows use the stats of the period
    // they were captured in, everything else uses the new period's stats.
    let (f_sub, t_sub) = (composite.feature_count(), composite.len_time());
    let node_list = composite.nodes().to_vec();
    for (row, node) in node_list.iter().enumerate() {
        let stats = if consolidation.contains(node) {
            &buffers.rehearsal_stats
        } else {
            &next_stats
        };
        for c in 0..f_sub {
            let (mean, std) = stats[c];
            for t in 0..t_sub {
                let v = (composite.values().at3(row, c, t) - mean) / std;
                composite.values_mut().set3(row, c, t, v);
            }
        }
    }
    let cfg = model_prev.config().clone();
    let t = composite.len_time();
    let t_train = (t as f64 * 0.6).floor() as usize;
    let t_val = (t as f64 * 0.8).floor() as usize;
    let train_slice = composite.slice_time(0, t_train);
    let val_slice = composite.slice_time(t_train, t_val);
    let train_windows = make_windows(&train_slice, cfg.input_steps, cfg.horizon, 1)?;
    let val_windows = make_windows(&val_slice, cfg.input_steps, cfg.horizon, 1)?;

    let outcome = EpochLoop {
        model: model_prev,
        lap: &sub_lap,
        train: train_windows,
        val: val_windows,
        fisher: Some(&fisher),
        config,
    }
    .run()?;
    Ok(ContinualOutcome {
        outcome,
        buffers,
        training_nodes: training_sub.nodes().to_vec(),
    })
}

const FISHER_MAX_SAMPLES: usize = 128;

/// Repeat an `[F, tau]` window along time to reach `len` steps, keeping the
/// window's tail aligned with the series tail.
fn tile_to_length(window: &Tensor, len: usize) -> Tensor {
    let (f, tau) = (window.shape()[0], window.shape()[1]);
    let mut out = Tensor::zeros(&[f, len]);
    for c in 0..f {
        for t in 0..len {
            // align ends: position `len - 1` maps to `tau - 1`
            let offset = (len - 1 - t) % tau;
            let src = tau - 1 - offset;
            out.set2(c, t, window.at2(c, src));
        }
    }
    out
}
