//! The training loop: confidence loss plus weighted smoothness loss,
//! optimized with ADAM over shuffled minibatches.
//!
//! Each step builds one fresh graph over the current batch,
//!
//! ```text
//! total = confidence_loss(batch) + lambda * smoothness_loss(batch)
//! ```
//!
//! with the confidence term running batchnorm in train mode (the batch is
//! the population whose transmission is scored) and the smoothness term in
//! eval mode (probes must not leak statistics into each other). Both
//! losses are clamped internally, so a non-finite value mid-training is a
//! genuine failure and aborts with a diagnostic rather than limping on.
//!
//! Runs are deterministic: batch shuffling and direction sampling use two
//! separate streams of one counter-based generator seeded from the config,
//! and all reductions are sequential.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{confidence_loss_node, ConfidenceConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, GradientMap};
use crate::model::{
    build_forward, declare_params, init, update_running_stats, MlpSpec, Mode, ModelParams,
    ParamBinding,
};
use crate::smoothness::{smoothness_loss_node, SmoothnessConfig};
use crate::tensor::Tensor;

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_lambda() -> f64 {
    0.0
}

fn default_smoothness() -> SmoothnessConfig {
    SmoothnessConfig::with_rho(0.1)
}

/// Everything a training run needs besides the model shape and the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the smoothness term; 0 trains on confidence alone and
    /// skips the smoothness graph entirely.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Batch size, divergence and failure tolerance for the confidence
    /// term.
    pub confidence: ConfidenceConfig,
    /// Probe geometry for the smoothness term; ignored when lambda is 0.
    #[serde(default = "default_smoothness")]
    pub smoothness: SmoothnessConfig,
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be a nonnegative real, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1".to_string()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0)
            || !(self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0)
        {
            return Err(Error::config(
                "adam betas must lie in [0, 1)".to_string(),
            ));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive".to_string()));
        }
        self.confidence.validate(num_classes)?;
        if self.lambda > 0.0 {
            self.smoothness.validate()?;
        }
        Ok(())
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub confidence_loss: f64,
    pub smoothness_loss: f64,
    pub total: f64,
}

/// Averages of a batchnorm layer's running statistics after an epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnSummary {
    pub layer: usize,
    pub mean_of_running_mean: f64,
    pub mean_of_running_var: f64,
}

/// Per-epoch bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub wall_time_s: f64,
    pub bn: Vec<BnSummary>,
}

/// Full record of a training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Mean confidence loss over the steps of one epoch.
    pub fn epoch_mean_confidence(&self, epoch: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.epoch == epoch)
            .map(|s| s.confidence_loss)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Steps as CSV: epoch, confidence_loss, smoothness_loss, total.
    pub fn write_steps_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.steps {
            out.serialize(s)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Epochs as CSV: epoch, wall_time_s, then pooled batchnorm running
    /// statistics (empty cells for models without batchnorm).
    pub fn write_epochs_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "epoch",
            "wall_time_s",
            "mean_of_running_mean",
            "mean_of_running_var",
        ])?;
        for e in &self.epochs {
            let (mm, mv) = if e.bn.is_empty() {
                (String::new(), String::new())
            } else {
                let n = e.bn.len() as f64;
                (
                    (e.bn.iter().map(|b| b.mean_of_running_mean).sum::<f64>() / n).to_string(),
                    (e.bn.iter().map(|b| b.mean_of_running_var).sum::<f64>() / n).to_string(),
                )
            };
            out.write_record([
                e.epoch.to_string(),
                e.wall_time_s.to_string(),
                mm,
                mv,
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// ADAM moment accumulators, one pair per parameter block.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: std::collections::BTreeMap<String, Tensor>,
    v: std::collections::BTreeMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected ADAM update over every trainable block of `params`.
/// The step counter advances once per call, not per block.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradientMap,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for name in params.leaf_names() {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::contract(format!("missing gradient for parameter {name}")))?;
        if !g.all_finite() {
            return Err(Error::contract(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
        let theta = params.leaf_mut(&name).expect("leaf_names is canonical");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        *m = m.zip_map(g, |mi, gi| b1 * mi + (1.0 - b1) * gi);
        *v = v.zip_map(g, |vi, gi| b2 * vi + (1.0 - b2) * gi * gi);
        let lr = cfg.learning_rate;
        let eps = cfg.adam_eps;
        let update = m.zip_map(v, |mi, vi| {
            lr * (mi / bias1) / ((vi / bias2).sqrt() + eps)
        });
        *theta = theta.zip_map(&update, |ti, ui| ti - ui);
    }
    Ok(())
}

/// Trains a freshly initialized model. See [`train_with`] for the variant
/// with an epoch observer and [`train_from`] to resume from existing
/// parameters.
pub fn train(spec: &MlpSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    train_with(spec, data, cfg, |_, _, _| ControlFlow::Continue(()))
}

/// Trains a freshly initialized model, calling `observer` after every
/// epoch; returning `ControlFlow::Break(())` stops training early and
/// returns the parameters as they stand.
pub fn train_with(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: impl FnMut(usize, &ModelParams, &TrainHistory) -> ControlFlow<()>,
) -> Result<(ModelParams, TrainHistory)> {
    let params = init(spec, cfg.seed)?;
    train_from(params, data, cfg, observer)
}

/// Trains starting from the given parameters.
pub fn train_from(
    mut params: ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(usize, &ModelParams, &TrainHistory) -> ControlFlow<()>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate(params.spec.num_classes)?;
    let n = data.len();
    let b = cfg.confidence.batch_size;
    if b > n {
        return Err(Error::contract(format!(
            "batch size {b} exceeds dataset size {n}"
        )));
    }
    if data.dim() != params.spec.input_dim {
        return Err(Error::shape(
            "train",
            format!(
                "dataset has {} features, model expects {}",
                data.dim(),
                params.spec.input_dim
            ),
        ));
    }

    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut direction_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    direction_rng.set_stream(2);

    let mut state = AdamState::new();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        // Tail instances that do not fill a batch are skipped this epoch;
        // the batch size is what the label-completeness guarantee is
        // calibrated for.
        for (step, chunk) in order.chunks_exact(b).enumerate() {
            let batch_x = gather_rows(&data.x, chunk);
            let mut g = Graph::new();
            let nodes = declare_params(&mut g, &params, ParamBinding::Leaves);
            let input = g.constant(batch_x.clone());
            let plan = build_forward(&mut g, &params, &nodes, input, Mode::Train);
            let closs = confidence_loss_node(&mut g, plan.probs, cfg.confidence.divergence);
            let (total, sloss) = if cfg.lambda > 0.0 {
                let s = smoothness_loss_node(
                    &mut g,
                    &params,
                    &nodes,
                    &batch_x,
                    &cfg.smoothness,
                    &mut direction_rng,
                )?;
                let weighted = g.mul_const(s, cfg.lambda);
                (g.add(closs, weighted), Some(s))
            } else {
                (closs, None)
            };

            let mut bindings = Bindings::new();
            params.bind_leaves(&mut bindings);
            let abort = |e: Error| {
                Error::TrainAbort(format!("epoch {epoch}, step {step}: {e}"))
            };
            let forward = g.evaluate(&bindings).map_err(abort)?;
            let c_val = forward.value(closs).scalar_value();
            let s_val = sloss.map_or(0.0, |s| forward.value(s).scalar_value());
            let total_val = forward.value(total).scalar_value();
            let grads = forward
                .backward(total)
                .map_err(|e| Error::TrainAbort(format!("epoch {epoch}, step {step}: {e}")))?;
            adam_step(&mut params, &grads, &mut state, cfg)?;
            update_running_stats(&mut params, &plan, &forward);
            history.steps.push(StepRecord {
                epoch,
                confidence_loss: c_val,
                smoothness_loss: s_val,
                total: total_val,
            });
        }
        let bn = params
            .batchnorms
            .iter()
            .enumerate()
            .filter_map(|(layer, bn)| {
                bn.as_ref().map(|bn| BnSummary {
                    layer,
                    mean_of_running_mean: mean_of(&bn.running_mean),
                    mean_of_running_var: mean_of(&bn.running_var),
                })
            })
            .collect();
        history.epochs.push(EpochRecord {
            epoch,
            wall_time_s: epoch_start.elapsed().as_secs_f64(),
            bn,
        });
        if let ControlFlow::Break(()) = observer(epoch, &params, &history) {
            break;
        }
    }
    Ok((params, history))
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::from_vec(idx.len(), x.cols(), data).expect("gathered rows are finite")
}

fn mean_of(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.len() as f64
}
