//! The discriminative model: an MLP with ReLU hidden layers, optional
//! per-layer batch normalization, and a softmax head, plus extraction of
//! per-instance score matrices (the low-rank factor of the Fisher
//! information with respect to the input).
//!
//! Two forward flavors matter throughout the crate:
//!
//! * **train mode** normalizes with batch statistics (and the trainer folds
//!   those statistics into running averages), coupling the instances of a
//!   batch;
//! * **eval mode** normalizes with frozen running statistics, making every
//!   output row depend on its input row alone. All smoothness and score
//!   computations use eval mode so that per-instance input gradients are
//!   well defined.

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Forward, Graph, NodeId};
use crate::tensor::Tensor;
use crate::{BN_EPS, BN_MOMENTUM};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Architecture of the MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Batch normalization per hidden layer; `None` means every hidden
    /// layer is normalized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batchnorm: Option<Vec<bool>>,
}

impl MlpSpec {
    /// A spec with batch normalization on every hidden layer.
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> MlpSpec {
        MlpSpec {
            input_dim,
            hidden_dims,
            num_classes,
            batchnorm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::contract("input_dim must be positive"));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::contract(
                "hidden_dims must be non-empty with positive sizes",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("num_classes must be at least 2"));
        }
        if let Some(flags) = &self.batchnorm {
            if flags.len() != self.hidden_dims.len() {
                return Err(Error::contract(format!(
                    "batchnorm has {} flags for {} hidden layers",
                    flags.len(),
                    self.hidden_dims.len()
                )));
            }
        }
        Ok(())
    }

    /// One flag per hidden layer.
    pub fn batchnorm_flags(&self) -> Vec<bool> {
        match &self.batchnorm {
            Some(flags) => flags.clone(),
            None => vec![true; self.hidden_dims.len()],
        }
    }

    /// Layer dimensions as (fan_in, fan_out) pairs, hidden layers first,
    /// output layer last.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }
}

/// Weights of one affine layer. The weight is `fan_in x fan_out`, so a
/// batch forward is `X * W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Scale/shift and running statistics of one batch-normalization layer.
/// All four are `1 x d` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// All trainable state of a model plus the seed that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub spec: MlpSpec,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<LayerParams>,
    /// Aligned with `spec.hidden_dims`; `None` where normalization is off.
    pub batchnorms: Vec<Option<BnParams>>,
    pub seed: u64,
}

/// Initializes a model: He-scaled normal weights (std `sqrt(2/fan_in)`),
/// zero biases, unit batchnorm scales, zero shifts, zero running means,
/// unit running variances. Deterministic in `seed`; weights are drawn layer
/// by layer in row-major order.
pub fn init(spec: &MlpSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (fan_in, fan_out) in spec.layer_dims() {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is positive and finite");
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| normal.sample(&mut rng))
            .collect();
        layers.push(LayerParams {
            weight: Tensor::from_vec(fan_in, fan_out, data)?,
            bias: Tensor::zeros(1, fan_out),
        });
    }
    let batchnorms = spec
        .batchnorm_flags()
        .iter()
        .zip(&spec.hidden_dims)
        .map(|(&on, &d)| {
            on.then(|| BnParams {
                scale: Tensor::full(1, d, 1.0),
                shift: Tensor::zeros(1, d),
                running_mean: Tensor::zeros(1, d),
                running_var: Tensor::full(1, d, 1.0),
            })
        })
        .collect();
    Ok(ModelParams {
        spec: spec.clone(),
        layers,
        batchnorms,
        seed,
    })
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let dims = self.spec.layer_dims();
        if self.layers.len() != dims.len() {
            return Err(Error::contract(format!(
                "{} layers for {} declared dimensions",
                self.layers.len(),
                dims.len()
            )));
        }
        for (layer, (fan_in, fan_out)) in self.layers.iter().zip(&dims) {
            if layer.weight.shape() != [*fan_in, *fan_out] {
                return Err(Error::shape(
                    "ModelParams weight",
                    format!("expected {fan_in}x{fan_out}, got {:?}", layer.weight.shape()),
                ));
            }
            if layer.bias.shape() != [1, *fan_out] {
                return Err(Error::shape(
                    "ModelParams bias",
                    format!("expected 1x{fan_out}, got {:?}", layer.bias.shape()),
                ));
            }
        }
        let flags = self.spec.batchnorm_flags();
        if self.batchnorms.len() != flags.len() {
            return Err(Error::contract("batchnorm blocks misaligned with spec"));
        }
        for ((bn, &on), &d) in self.batchnorms.iter().zip(&flags).zip(&self.spec.hidden_dims) {
            match (bn, on) {
                (Some(bn), true) => {
                    for (name, t) in [
                        ("scale", &bn.scale),
                        ("shift", &bn.shift),
                        ("running_mean", &bn.running_mean),
                        ("running_var", &bn.running_var),
                    ] {
                        if t.shape() != [1, d] {
                            return Err(Error::shape(
                                format!("batchnorm {name}"),
                                format!("expected 1x{d}, got {:?}", t.shape()),
                            ));
                        }
                    }
                    if bn.running_var.data().iter().any(|&v| v <= 0.0) {
                        return Err(Error::contract("running variance must stay positive"));
                    }
                }
                (None, false) => {}
                _ => return Err(Error::contract("batchnorm blocks misaligned with spec")),
            }
        }
        Ok(())
    }

    /// Trainable leaf names in canonical order: per layer `w{i}`, `b{i}`,
    /// then `bn{i}.scale`, `bn{i}.shift` when that hidden layer is
    /// normalized. Running statistics are not trainable and not listed.
    pub fn leaf_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.layers.len() {
            names.push(format!("w{i}"));
            names.push(format!("b{i}"));
            if i < self.batchnorms.len() && self.batchnorms[i].is_some() {
                names.push(format!("bn{i}.scale"));
                names.push(format!("bn{i}.shift"));
            }
        }
        names
    }

    pub fn leaf(&self, name: &str) -> Option<&Tensor> {
        if let Some(rest) = name.strip_prefix('w') {
            return self.layers.get(rest.parse::<usize>().ok()?).map(|l| &l.weight);
        }
        if let Some(rest) = name.strip_prefix("bn") {
            let (idx, field) = rest.split_once('.')?;
            let bn = self.batchnorms.get(idx.parse::<usize>().ok()?)?.as_ref()?;
            return match field {
                "scale" => Some(&bn.scale),
                "shift" => Some(&bn.shift),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix('b') {
            return self.layers.get(rest.parse::<usize>().ok()?).map(|l| &l.bias);
        }
        None
    }

    pub fn leaf_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix('w') {
            return self
                .layers
                .get_mut(rest.parse::<usize>().ok()?)
                .map(|l| &mut l.weight);
        }
        if let Some(rest) = name.strip_prefix("bn") {
            let (idx, field) = rest.split_once('.')?;
            let bn = self
                .batchnorms
                .get_mut(idx.parse::<usize>().ok()?)?
                .as_mut()?;
            return match field {
                "scale" => Some(&mut bn.scale),
                "shift" => Some(&mut bn.shift),
                _ => None,
            };
        }
        if let Some(rest) = name.strip_prefix('b') {
            return self
                .layers
                .get_mut(rest.parse::<usize>().ok()?)
                .map(|l| &mut l.bias);
        }
        None
    }

    /// Binds every trainable leaf by its canonical name.
    pub fn bind_leaves(&self, bindings: &mut Bindings) {
        for name in self.leaf_names() {
            bindings.insert(name.clone(), self.leaf(&name).unwrap().clone());
        }
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.leaf_names()
            .iter()
            .map(|n| self.leaf(n).unwrap().len())
            .sum()
    }
}

/// Batch-normalization statistics handling for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics; instances couple.
    Train,
    /// Normalize with frozen running statistics; rows are independent.
    Eval,
}

/// How model parameters enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBinding {
    /// As named leaves (trainable; bind with [`ModelParams::bind_leaves`]).
    Leaves,
    /// As baked-in constants (frozen; nothing to bind).
    Constants,
}

/// Graph nodes holding the model parameters, shared across any number of
/// forward passes built on the same graph.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    /// (weight, bias) per layer.
    layers: Vec<(NodeId, NodeId)>,
    /// (scale, shift) per hidden layer with normalization.
    bns: Vec<Option<(NodeId, NodeId)>>,
}

/// Declares the parameters on `g` once, either as leaves or as constants.
pub fn declare_params(g: &mut Graph, params: &ModelParams, binding: ParamBinding) -> ParamNodes {
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let ids = match binding {
            ParamBinding::Leaves => (
                g.leaf(format!("w{i}"), layer.weight.rows(), layer.weight.cols()),
                g.leaf(format!("b{i}"), 1, layer.bias.cols()),
            ),
            ParamBinding::Constants => (
                g.constant(layer.weight.clone()),
                g.constant(layer.bias.clone()),
            ),
        };
        layers.push(ids);
    }
    let mut bns = Vec::with_capacity(params.batchnorms.len());
    for (i, bn) in params.batchnorms.iter().enumerate() {
        bns.push(bn.as_ref().map(|bn| match binding {
            ParamBinding::Leaves => (
                g.leaf(format!("bn{i}.scale"), 1, bn.scale.cols()),
                g.leaf(format!("bn{i}.shift"), 1, bn.shift.cols()),
            ),
            ParamBinding::Constants => (
                g.constant(bn.scale.clone()),
                g.constant(bn.shift.clone()),
            ),
        }));
    }
    ParamNodes { layers, bns }
}

/// Handles into one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPlan {
    pub logits: NodeId,
    pub log_probs: NodeId,
    pub probs: NodeId,
    /// Train mode only: per normalized hidden layer, the batch mean and
    /// biased batch variance nodes, for folding into running statistics.
    pub bn_stats: Vec<(usize, BnBatchStats)>,
}

#[derive(Debug, Clone, Copy)]
pub struct BnBatchStats {
    pub mean: NodeId,
    pub var: NodeId,
}

/// Builds the MLP forward pass from `input` (shape `n x input_dim`) through
/// to probabilities. May be called several times on one graph with the same
/// `ParamNodes` (e.g. a train-mode pass for the confidence loss and
/// eval-mode passes for smoothness probes).
pub fn build_forward(
    g: &mut Graph,
    params: &ModelParams,
    nodes: &ParamNodes,
    input: NodeId,
    mode: Mode,
) -> ForwardPlan {
    let mut h = input;
    let mut bn_stats = Vec::new();
    let hidden_count = params.spec.hidden_dims.len();
    for i in 0..hidden_count {
        let (w, b) = nodes.layers[i];
        let lin = g.matmul(h, w);
        h = g.add_row_vec(lin, b);
        if let Some((scale, shift)) = nodes.bns[i] {
            match mode {
                Mode::Train => {
                    let (out, stats) = batchnorm_train(g, h, scale, shift);
                    h = out;
                    bn_stats.push((i, stats));
                }
                Mode::Eval => {
                    let bn = params.batchnorms[i].as_ref().unwrap();
                    h = batchnorm_eval(g, h, scale, shift, bn);
                }
            }
        }
        h = g.relu(h);
    }
    let (w, b) = nodes.layers[hidden_count];
    let lin = g.matmul(h, w);
    let logits = g.add_row_vec(lin, b);
    let log_probs = g.log_softmax(logits);
    let probs = g.exp(log_probs);
    ForwardPlan {
        logits,
        log_probs,
        probs,
        bn_stats,
    }
}

/// Train-mode batch normalization from primitives: mean/biased-variance
/// over the batch, normalize, then scale and shift.
pub(crate) fn batchnorm_train(
    g: &mut Graph,
    x: NodeId,
    scale: NodeId,
    shift: NodeId,
) -> (NodeId, BnBatchStats) {
    let d = g.shape(x)[1];
    let mean = g.mean_cols(x);
    let neg_mean = g.neg(mean);
    let centered = g.add_row_vec(x, neg_mean);
    let sq = g.mul(centered, centered);
    let var = g.mean_cols(sq);
    let var_eps = g.add_const(var, BN_EPS);
    let std = g.sqrt(var_eps);
    let ones = g.constant(Tensor::full(1, d, 1.0));
    let inv_std = g.div(ones, std);
    let normalized = g.mul_row_vec(centered, inv_std);
    let scaled = g.mul_row_vec(normalized, scale);
    let out = g.add_row_vec(scaled, shift);
    (out, BnBatchStats { mean, var })
}

/// Eval-mode batch normalization: running statistics enter as constants, so
/// each row is normalized independently of the rest of the batch; scale and
/// shift still carry gradients.
fn batchnorm_eval(
    g: &mut Graph,
    x: NodeId,
    scale: NodeId,
    shift: NodeId,
    bn: &BnParams,
) -> NodeId {
    let neg_mean = g.constant(bn.running_mean.map(|v| -v));
    let inv_std = g.constant(bn.running_var.map(|v| 1.0 / (v + BN_EPS).sqrt()));
    let centered = g.add_row_vec(x, neg_mean);
    let normalized = g.mul_row_vec(centered, inv_std);
    let scaled = g.mul_row_vec(normalized, scale);
    g.add_row_vec(scaled, shift)
}

/// Folds the batch statistics recorded in a train-mode forward into the
/// running statistics: `running = (1 - M) * running + M * batch`.
pub fn update_running_stats(
    params: &mut ModelParams,
    plan: &ForwardPlan,
    forward: &Forward<'_>,
) {
    for (layer_idx, stats) in &plan.bn_stats {
        let mean = forward.value(stats.mean).clone();
        let var = forward.value(stats.var).clone();
        let bn = params.batchnorms[*layer_idx]
            .as_mut()
            .expect("bn stats recorded for a non-normalized layer");
        bn.running_mean = bn
            .running_mean
            .zip_map(&mean, |r, b| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b);
        bn.running_var = bn
            .running_var
            .zip_map(&var, |r, b| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b);
    }
}

/// A batch of conditional distributions: one row-stochastic row per
/// instance.
#[derive(Debug, Clone)]
pub struct CondDistBatch {
    probs: Tensor,
}

impl CondDistBatch {
    /// Validates entries in [0,1] and row sums within 1e-9 of 1.
    pub fn new(probs: Tensor) -> Result<CondDistBatch> {
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::contract(format!(
                    "row {i} has entries outside [0,1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!(
                    "row {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(CondDistBatch { probs })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    /// Argmax label of row `i`; ties resolve to the lowest label.
    pub fn predicted_label(&self, i: usize) -> usize {
        let row = self.probs.row(i);
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        best
    }

    /// The winning probability of row `i`.
    pub fn confidence(&self, i: usize) -> f64 {
        let i_best = self.predicted_label(i);
        self.probs.get(i, i_best)
    }

    pub fn predicted_labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.predicted_label(i)).collect()
    }
}

/// Eval-mode prediction (frozen running statistics; batch-independent).
pub fn predict_eval(params: &ModelParams, x: &Tensor) -> Result<CondDistBatch> {
    check_input(params, x)?;
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let nodes = declare_params(&mut g, params, ParamBinding::Constants);
    let plan = build_forward(&mut g, params, &nodes, input, Mode::Eval);
    let f = g.evaluate(&Bindings::new())?;
    CondDistBatch::new(f.value(plan.probs).clone())
}

/// Train-mode prediction: normalizes with batch statistics and folds them
/// into the running statistics. Requires at least two instances when any
/// layer is normalized.
pub fn predict_train(params: &mut ModelParams, x: &Tensor) -> Result<CondDistBatch> {
    check_input(params, x)?;
    let has_bn = params.batchnorms.iter().any(Option::is_some);
    if has_bn && x.rows() < 2 {
        return Err(Error::contract(
            "train-mode prediction with batch normalization needs a batch of at least 2",
        ));
    }
    let mut g = Graph::new();
    let input = g.constant(x.clone());
    let nodes = declare_params(&mut g, params, ParamBinding::Constants);
    let plan = build_forward(&mut g, params, &nodes, input, Mode::Train);
    let f = g.evaluate(&Bindings::new())?;
    update_running_stats(params, &plan, &f);
    CondDistBatch::new(f.value(plan.probs).clone())
}

fn check_input(params: &ModelParams, x: &Tensor) -> Result<()> {
    if x.cols() != params.spec.input_dim {
        return Err(Error::shape(
            "model input",
            format!(
                "expected n x {}, got {:?}",
                params.spec.input_dim,
                x.shape()
            ),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::contract("empty input batch"));
    }
    Ok(())
}

/// The `h x |Y|` score matrix of one instance: column `y` is
/// `sqrt(Q(y|x)) * d log Q(y|x) / dx`. `A Aᵀ` is the Fisher information of
/// the model at `x` with respect to the input.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    /// `input_dim x num_classes`.
    pub a: Tensor,
    /// The instance the matrix was computed at.
    pub x: Vec<f64>,
    /// The model's conditional distribution at `x`.
    pub q: Vec<f64>,
}

/// Score matrix of a single instance (eval mode).
pub fn score_matrix(params: &ModelParams, x: &[f64]) -> Result<ScoreMatrix> {
    let xs = Tensor::from_vec(1, x.len(), x.to_vec())?;
    Ok(score_matrices(params, &xs)?.pop().unwrap())
}

/// Score matrices for every row of `xs`, sharing one forward pass and
/// `num_classes` backward passes. Eval mode keeps rows independent, so the
/// input gradient of the summed log-probability of class `y` recovers each
/// instance's own gradient.
pub fn score_matrices(params: &ModelParams, xs: &Tensor) -> Result<Vec<ScoreMatrix>> {
    check_input(params, xs)?;
    let (n, h) = (xs.rows(), xs.cols());
    let k = params.spec.num_classes;
    let mut g = Graph::new();
    let input = g.leaf("x", n, h);
    let nodes = declare_params(&mut g, params, ParamBinding::Constants);
    let plan = build_forward(&mut g, params, &nodes, input, Mode::Eval);
    let mut class_sums = Vec::with_capacity(k);
    for y in 0..k {
        let mut mask = Tensor::zeros(n, k);
        for i in 0..n {
            mask.set(i, y, 1.0);
        }
        let mask = g.constant(mask);
        let masked = g.mul(plan.log_probs, mask);
        class_sums.push(g.sum_all(masked));
    }
    let mut bindings = Bindings::new();
    bindings.insert("x", xs.clone());
    let f = g.evaluate(&bindings)?;
    let probs = f.value(plan.probs).clone();

    // grads[y] is n x h: row i holds d log Q(y|x_i) / d x_i.
    let mut grads = Vec::with_capacity(k);
    for &s in &class_sums {
        grads.push(f.backward(s)?.get("x").unwrap().clone());
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = Tensor::zeros(h, k);
        for (y, gy) in grads.iter().enumerate() {
            let weight = probs.get(i, y).sqrt();
            for j in 0..h {
                a.set(j, y, weight * gy.get(i, j));
            }
        }
        out.push(ScoreMatrix {
            a,
            x: xs.row(i).to_vec(),
            q: probs.row(i).to_vec(),
        });
    }
    Ok(out)
}

/// A saved model: parameters plus the input standardization fitted at
/// training time, if any. JSON round-trips are bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub params: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardizer: Option<Standardizer>,
}

pub const CHECKPOINT_FORMAT: &str = "piecewise-model-v1";

impl Checkpoint {
    pub fn new(params: ModelParams, standardizer: Option<Standardizer>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params,
            standardizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_string(self)?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let body = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&body)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {:?}",
                ck.format
            )));
        }
        ck.params.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradient_check;

    fn small_spec() -> MlpSpec {
        MlpSpec::new(2, vec![4, 3], 2)
    }

    #[test]
    fn init_has_documented_parameter_count() {
        let spec = MlpSpec::new(2, vec![200, 100], 2);
        let params = init(&spec, 0).unwrap();
        let affine = 2 * 200 + 200 + 200 * 100 + 100 + 100 * 2 + 2;
        let bn = 2 * 200 + 2 * 100;
        assert_eq!(params.num_params(), affine + bn);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = small_spec();
        let a = init(&spec, 0).unwrap();
        let b = init(&spec, 0).unwrap();
        assert_eq!(a, b);
        let c = init(&spec, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn predict_rows_are_stochastic() {
        let params = init(&small_spec(), 0).unwrap();
        let x = Tensor::from_vec(3, 2, vec![0.1, -0.5, 1.0, 2.0, -1.0, 0.3]).unwrap();
        let q = predict_eval(&params, &x).unwrap();
        for i in 0..q.len() {
            let sum: f64 = q.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_output_layer_predicts_uniformly() {
        let mut params = init(&small_spec(), 0).unwrap();
        let last = params.layers.len() - 1;
        params.layers[last].weight = Tensor::zeros(3, 2);
        params.layers[last].bias = Tensor::zeros(1, 2);
        let x = Tensor::from_vec(2, 2, vec![0.3, 0.7, -2.0, 5.0]).unwrap();
        let q = predict_eval(&params, &x).unwrap();
        for i in 0..q.len() {
            for &p in q.row(i) {
                assert!((p - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_predictions_are_batch_independent() {
        let params = init(&small_spec(), 3).unwrap();
        let two = Tensor::from_vec(2, 2, vec![0.4, -0.2, 1.5, 0.9]).unwrap();
        let one = Tensor::from_vec(1, 2, vec![0.4, -0.2]).unwrap();
        let q2 = predict_eval(&params, &two).unwrap();
        let q1 = predict_eval(&params, &one).unwrap();
        for (a, b) in q2.row(0).iter().zip(q1.row(0)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn train_mode_batchnorm_standardizes_a_two_point_column() {
        // Column [1, 3]: mean 2, biased variance 1, so the normalized
        // values are (x - 2) / sqrt(1 + eps), approximately -1 and 1.
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(2, 1, vec![1.0, 3.0]).unwrap());
        let scale = g.constant(Tensor::full(1, 1, 1.0));
        let shift = g.constant(Tensor::zeros(1, 1));
        let (out, stats) = batchnorm_train(&mut g, x, scale, shift);
        let f = g.evaluate(&Bindings::new()).unwrap();
        let v = f.value(out);
        assert!((v.get(0, 0) + 1.0).abs() < 1e-4);
        assert!((v.get(1, 0) - 1.0).abs() < 1e-4);
        assert!((f.value(stats.mean).get(0, 0) - 2.0).abs() < 1e-12);
        assert!((f.value(stats.var).get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn train_mode_single_instance_with_batchnorm_is_rejected() {
        let mut params = init(&small_spec(), 0).unwrap();
        let x = Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(predict_train(&mut params, &x).is_err());
    }

    #[test]
    fn predict_train_moves_running_statistics() {
        let mut params = init(&small_spec(), 0).unwrap();
        let before = params.batchnorms[0].as_ref().unwrap().running_mean.clone();
        let x = Tensor::from_vec(4, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0, 0.0, 1.0]).unwrap();
        predict_train(&mut params, &x).unwrap();
        let after = &params.batchnorms[0].as_ref().unwrap().running_mean;
        assert_ne!(&before, after);
    }

    #[test]
    fn score_matrix_satisfies_softmax_identity() {
        let params = init(&small_spec(), 5).unwrap();
        let sm = score_matrix(&params, &[0.7, -0.4]).unwrap();
        // Sum_y Q(y|x) * d log Q(y|x)/dx = 0, i.e. A * sqrt(q) = 0.
        for j in 0..2 {
            let mut dot = 0.0;
            for y in 0..2 {
                dot += sm.a.get(j, y) * sm.q[y].sqrt();
            }
            assert!(dot.abs() < 1e-6, "identity violated: {dot}");
        }
    }

    #[test]
    fn score_matrix_matches_finite_differences() {
        let params = init(&small_spec(), 7).unwrap();
        let x = [0.3, 0.9];
        let sm = score_matrix(&params, &x).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            for y in 0..2 {
                let mut up = x;
                up[j] += h;
                let mut down = x;
                down[j] -= h;
                let lp = |pt: [f64; 2]| -> f64 {
                    let t = Tensor::from_vec(1, 2, pt.to_vec()).unwrap();
                    predict_eval(&params, &t).unwrap().row(0)[y].ln()
                };
                let fd = (lp(up) - lp(down)) / (2.0 * h);
                let expect = sm.q[y].sqrt() * fd;
                let got = sm.a.get(j, y);
                let rel = (got - expect).abs() / got.abs().max(expect.abs()).max(1.0);
                assert!(rel < 1e-5, "entry ({j},{y}): {got} vs {expect}");
            }
        }
    }

    #[test]
    fn zeroed_output_layer_gives_zero_scores() {
        let mut params = init(&small_spec(), 0).unwrap();
        let last = params.layers.len() - 1;
        params.layers[last].weight = Tensor::zeros(3, 2);
        params.layers[last].bias = Tensor::zeros(1, 2);
        let sm = score_matrix(&params, &[0.5, -0.5]).unwrap();
        for &v in sm.a.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn batched_scores_match_single_instance_scores() {
        let params = init(&small_spec(), 9).unwrap();
        let xs =
            Tensor::from_vec(3, 2, vec![0.1, 0.2, -0.7, 1.1, 2.0, -0.3]).unwrap();
        let batch = score_matrices(&params, &xs).unwrap();
        for i in 0..3 {
            let single = score_matrix(&params, xs.row(i)).unwrap();
            for (a, b) in batch[i].a.data().iter().zip(single.a.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn fisher_factor_is_positive_semidefinite() {
        let params = init(&small_spec(), 11).unwrap();
        let sm = score_matrix(&params, &[1.2, -0.8]).unwrap();
        let gram = sm.a.transpose().matmul(&sm.a);
        let eig = crate::linalg::symmetric_eigenvalues(&gram, 1e-9).unwrap();
        for v in eig {
            assert!(v >= -1e-9);
        }
    }

    #[test]
    fn trainable_forward_passes_gradient_check() {
        let params = init(&MlpSpec::new(2, vec![3], 2), 13).unwrap();
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::from_vec(4, 2, vec![0.5, -0.1, 0.9, 0.4, -0.6, 1.2, 0.0, -0.9]).unwrap(),
        );
        let nodes = declare_params(&mut g, &params, ParamBinding::Leaves);
        let plan = build_forward(&mut g, &params, &nodes, x, Mode::Train);
        let loss = g.mean_all(plan.log_probs);
        let mut b = Bindings::new();
        params.bind_leaves(&mut b);
        let report = gradient_check(&g, loss, &b, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params = init(&small_spec(), 42).unwrap();
        let ck = Checkpoint::new(params, Some(Standardizer { mean: 0.25, std: 1.75 }));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.params, back.params);
        back.save(&dir.path().join("model2.json")).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(dir.path().join("model2.json")).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(MlpSpec::new(2, vec![], 2).validate().is_err());
        assert!(MlpSpec::new(2, vec![4], 1).validate().is_err());
        assert!(MlpSpec::new(0, vec![4], 2).validate().is_err());
        let mut spec = small_spec();
        spec.batchnorm = Some(vec![true]);
        assert!(spec.validate().is_err());
    }
}
