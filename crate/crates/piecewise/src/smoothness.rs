//! Fisher-information smoothness machinery.
//!
//! The per-instance score matrix `A` (see [`crate::model::ScoreMatrix`])
//! captures how fast the conditional distribution moves under input
//! perturbation: `A Aᵀ` is the Fisher information with respect to the
//! input, and for small `r` the divergence `phi(r) = f(Q(.|x) || Q(.|x+r))`
//! grows like `½ c_f rᵀ A Aᵀ r`. Perturbations that matter are therefore
//! the ones aligned with the top of the Fisher spectrum.
//!
//! The smoothness loss exploits this: draw directions `e ~ N(0, (A Aᵀ)^k)`
//! — cheap low-rank sampling, no eigendecomposition — rescale them onto a
//! ρ-ball, probe the divergence along a signed grid of radii, and charge
//! the model the worst probe per instance. The max over probes is a lower
//! bound on the true worst case `sup_{|r|≤ρ} phi(r)`, and it is exactly 0
//! for models that are constant around the batch, so minimizing it pushes
//! the model toward piecewise-constant behavior without flattening it
//! everywhere.
//!
//! The sampled directions are deliberately *not* differentiated through
//! (that would need second-order autodiff); gradients flow only through
//! the two distribution evaluations in `phi`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::divergence::{divergence_rows, DivergenceKind};
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::linalg::top_eigenvalue;
use crate::model::{
    build_forward, declare_params, predict_eval, score_matrices, Mode, ModelParams, ParamBinding,
    ParamNodes, ScoreMatrix,
};
use crate::tensor::Tensor;

/// Direction norms below this are treated as exactly zero (locally
/// constant model); the corresponding probes contribute nothing.
pub const DIRECTION_NORM_FLOOR: f64 = 1e-12;

fn default_k() -> usize {
    4
}

fn default_m() -> usize {
    1
}

fn default_grid_field() -> Vec<f64> {
    default_grid(10)
}

fn default_divergence() -> DivergenceKind {
    DivergenceKind::SqHellinger
}

/// `points` evenly spaced values from -1 to 1 inclusive. The default
/// 10-point grid is symmetric and skips 0 (the unperturbed instance).
pub fn default_grid(points: usize) -> Vec<f64> {
    assert!(points >= 2, "a radius grid needs at least two points");
    (0..points)
        .map(|i| i as f64 * 2.0 / (points - 1) as f64 - 1.0)
        .collect()
}

/// Settings for the smoothness loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessConfig {
    /// Radius of the probed neighborhood.
    pub rho: f64,
    /// Power of the Fisher information used as sampling covariance;
    /// higher powers concentrate directions on the top eigenvector.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Directions sampled per instance.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Signed radius fractions probed along each direction; must contain
    /// -1 and 1 and stay within [-1, 1].
    #[serde(default = "default_grid_field")]
    pub grid: Vec<f64>,
    /// Divergence used for the probe comparison.
    #[serde(default = "default_divergence")]
    pub divergence: DivergenceKind,
}

impl SmoothnessConfig {
    /// A config with the given radius and all defaults.
    pub fn with_rho(rho: f64) -> SmoothnessConfig {
        SmoothnessConfig {
            rho,
            k: default_k(),
            m: default_m(),
            grid: default_grid_field(),
            divergence: default_divergence(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!(
                "rho must be a positive real, got {}",
                self.rho
            )));
        }
        if self.k < 1 || self.m < 1 {
            return Err(Error::config(format!(
                "k and m must be at least 1, got k={}, m={}",
                self.k, self.m
            )));
        }
        if !self.grid.contains(&-1.0) || !self.grid.contains(&1.0) {
            return Err(Error::config(
                "radius grid must contain both -1 and 1".to_string(),
            ));
        }
        if self.grid.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::config(
                "radius grid values must lie in [-1, 1]".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-instance stability record. Field order doubles as the CSV column
/// order: index, predicted_label, confidence, fisher_trace,
/// top_eigenvalue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub index: usize,
    pub predicted_label: usize,
    pub confidence: f64,
    pub fisher_trace: f64,
    pub top_eigenvalue: f64,
}

/// `tr(A Aᵀ)`, the Fisher criterion: total sensitivity of the conditional
/// distribution at the instance. Computed as the sum of squared entries.
pub fn fisher_trace(score: &ScoreMatrix) -> f64 {
    score.a.data().iter().map(|v| v * v).sum()
}

/// Largest eigenvalue of the Fisher information, computed from the small
/// `|Y| x |Y|` matrix `AᵀA`, which shares the nonzero spectrum of `A Aᵀ`.
pub fn fisher_top_eig(score: &ScoreMatrix) -> f64 {
    let ata = score.a.transpose().matmul(&score.a);
    // AᵀA is bitwise symmetric by construction.
    top_eigenvalue(&ata, 1e-9)
        .expect("AᵀA is symmetric")
        .max(0.0)
}

fn mat_vec(a: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = (a.rows(), a.cols());
    debug_assert_eq!(cols, v.len());
    let mut out = vec![0.0; rows];
    for (i, o) in out.iter_mut().enumerate() {
        let row = a.row(i);
        *o = row.iter().zip(v).map(|(x, y)| x * y).sum();
    }
    out
}

fn mat_t_vec(a: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = (a.rows(), a.cols());
    debug_assert_eq!(rows, v.len());
    let mut out = vec![0.0; cols];
    for (i, &vi) in v.iter().enumerate() {
        for (j, &aij) in a.row(i).iter().enumerate() {
            out[j] += aij * vi;
        }
    }
    out
}

/// Draws a direction with covariance `(A Aᵀ)^k` using only matrix-vector
/// products: odd `k` starts from `A n` with `n` a standard normal
/// `|Y|`-vector, even `k` from a standard normal input-space vector; each
/// remaining factor pair applies `A Aᵀ`. Cost `O(k |Y| h)`.
///
/// A zero score matrix yields the zero vector.
pub fn sample_direction(score: &ScoreMatrix, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert!(k >= 1, "covariance power must be at least 1");
    let a = &score.a;
    let (h, classes) = (a.rows(), a.cols());
    let pairs;
    let mut v = if k % 2 == 1 {
        let n: Vec<f64> = (0..classes).map(|_| rng.sample(StandardNormal)).collect();
        pairs = (k - 1) / 2;
        mat_vec(a, &n)
    } else {
        pairs = k / 2;
        (0..h).map(|_| rng.sample(StandardNormal)).collect()
    };
    for _ in 0..pairs {
        let w = mat_t_vec(a, &v);
        v = mat_vec(a, &w);
    }
    v
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Probe instances with their validity mask, instance-major: all probes of
/// instance 0 first, within an instance all grid points of direction 0
/// first.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    /// `(n * m * grid) x input_dim`.
    pub rows: Tensor,
    /// One entry per probe row: 1.0 for live directions, 0.0 where the
    /// sampled direction was numerically zero.
    pub mask: Vec<f64>,
    pub probes_per_instance: usize,
}

/// Samples the probe points the smoothness loss evaluates for each batch
/// instance: `m` directions drawn from the instance's Fisher power, scaled
/// to every grid radius. Each probe lies within `cfg.rho` of its instance
/// exactly (in float arithmetic, not just up to rounding).
pub fn build_probe_set(
    scores: &[ScoreMatrix],
    batch_x: &Tensor,
    cfg: &SmoothnessConfig,
    rng: &mut impl Rng,
) -> ProbeSet {
    let (n, d) = (batch_x.rows(), batch_x.cols());
    debug_assert_eq!(scores.len(), n);
    let per = cfg.m * cfg.grid.len();
    let mut rows = Vec::with_capacity(n * per * d);
    let mut mask = Vec::with_capacity(n * per);
    for (i, score) in scores.iter().enumerate() {
        let x = batch_x.row(i);
        for _ in 0..cfg.m {
            let e = sample_direction(score, cfg.k, rng);
            let norm = l2(&e);
            let live = norm >= DIRECTION_NORM_FLOOR;
            for &nu in &cfg.grid {
                if live {
                    let scale = nu * cfg.rho / norm;
                    let mut r: Vec<f64> = e.iter().map(|v| v * scale).collect();
                    // Round-off in both the scaling and the addition to x can
                    // push the stored probe a hair past rho; shrink until the
                    // realized displacement is inside the ball exactly.
                    let mut probe: Vec<f64> =
                        x.iter().zip(&r).map(|(a, b)| a + b).collect();
                    while probe
                        .iter()
                        .zip(x)
                        .map(|(p, a)| (p - a) * (p - a))
                        .sum::<f64>()
                        .sqrt()
                        > cfg.rho
                    {
                        r.iter_mut().for_each(|v| *v *= 1.0 - 1e-12);
                        probe = x.iter().zip(&r).map(|(a, b)| a + b).collect();
                    }
                    rows.extend_from_slice(&probe);
                    mask.push(1.0);
                } else {
                    rows.extend_from_slice(x);
                    mask.push(0.0);
                }
            }
        }
    }
    ProbeSet {
        rows: Tensor::from_vec(n * per, d, rows).expect("probe rows are finite"),
        mask,
        probes_per_instance: per,
    }
}

/// Builds the smoothness loss over a batch as a graph node: the mean over
/// instances of the worst probed divergence. Directions are sampled here,
/// outside the graph, and enter as constants; the model parameters stay
/// live through both distribution evaluations.
pub fn smoothness_loss_node(
    g: &mut Graph,
    params: &ModelParams,
    nodes: &ParamNodes,
    batch_x: &Tensor,
    cfg: &SmoothnessConfig,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    cfg.validate()?;
    if batch_x.rows() == 0 {
        return Err(Error::contract("smoothness loss needs a non-empty batch"));
    }
    if batch_x.cols() != params.spec.input_dim {
        return Err(Error::shape(
            "smoothness_loss",
            format!(
                "batch has {} columns, model expects {}",
                batch_x.cols(),
                params.spec.input_dim
            ),
        ));
    }
    let n = batch_x.rows();
    let scores = score_matrices(params, batch_x)?;
    let probes = build_probe_set(&scores, batch_x, cfg, rng);
    let per = probes.probes_per_instance;
    let total = n * per;

    let base_in = g.constant(batch_x.clone());
    let base_plan = build_forward(g, params, nodes, base_in, Mode::Eval);
    let probe_in = g.constant(probes.rows.clone());
    let probe_plan = build_forward(g, params, nodes, probe_in, Mode::Eval);

    // Replicate each base row across its probes with a 0/1 matrix so the
    // divergence rows line up.
    let mut rep = Tensor::zeros(total, n);
    for row in 0..total {
        rep.set(row, row / per, 1.0);
    }
    let rep = g.constant(rep);
    let base_rep = g.matmul(rep, base_plan.probs);

    let div = divergence_rows(g, base_rep, probe_plan.probs, cfg.divergence);
    let mask = g.constant(Tensor::from_vec(total, 1, probes.mask.clone())?);
    let masked = g.mul(div, mask);
    let grouped = g.reshape(masked, n, per);
    let worst = g.max_rows(grouped);
    Ok(g.mean_all(worst))
}

/// Single-instance version of [`smoothness_loss_node`]: the randomized
/// lower bound on `sup_{|r| <= rho} phi(r)` at `x`.
pub fn smoothness_bound_node(
    g: &mut Graph,
    params: &ModelParams,
    nodes: &ParamNodes,
    x: &[f64],
    cfg: &SmoothnessConfig,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let row = Tensor::from_vec(1, x.len(), x.to_vec())?;
    smoothness_loss_node(g, params, nodes, &row, cfg, rng)
}

/// Evaluates [`smoothness_loss_node`] with the parameters baked in as
/// constants.
pub fn smoothness_loss(
    params: &ModelParams,
    batch_x: &Tensor,
    cfg: &SmoothnessConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = declare_params(&mut g, params, ParamBinding::Constants);
    let node = smoothness_loss_node(&mut g, params, &nodes, batch_x, cfg, rng)?;
    let f = g.evaluate(&Bindings::new())?;
    Ok(f.value(node).scalar_value())
}

/// Evaluates the single-instance bound as a plain number.
pub fn smoothness_bound(
    params: &ModelParams,
    x: &[f64],
    cfg: &SmoothnessConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let row = Tensor::from_vec(1, x.len(), x.to_vec())?;
    smoothness_loss(params, &row, cfg, rng)
}

/// Empirical attack-free margin: the largest radius in `rho_grid` at which
/// a dense random search (`directions` draws per instance, norms exactly
/// at the radius) finds no divergence above `tau` anywhere in `data`.
/// Returns 0 when even the smallest radius is attackable.
pub fn margin_probe(
    params: &ModelParams,
    data: &Tensor,
    kind: DivergenceKind,
    tau: f64,
    rho_grid: &[f64],
    directions: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if rho_grid.is_empty() {
        return Err(Error::contract("rho grid must be non-empty"));
    }
    if rho_grid.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::contract("rho grid values must be positive reals"));
    }
    if rho_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("rho grid must be strictly increasing"));
    }
    if directions == 0 {
        return Err(Error::contract("need at least one probe direction"));
    }
    let base = predict_eval(params, data)?;
    let d = data.cols();
    'radii: for &rho in rho_grid.iter().rev() {
        for i in 0..data.rows() {
            let x = data.row(i);
            let mut probe_rows = Vec::with_capacity(directions * d);
            for _ in 0..directions {
                let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = l2(&u);
                if norm < DIRECTION_NORM_FLOOR {
                    probe_rows.extend_from_slice(x);
                    continue;
                }
                let mut r: Vec<f64> = u.iter().map(|v| v * rho / norm).collect();
                while l2(&r) > rho {
                    r.iter_mut().for_each(|v| *v *= 1.0 - 1e-12);
                }
                probe_rows.extend(x.iter().zip(&r).map(|(a, b)| a + b));
            }
            let probes = Tensor::from_vec(directions, d, probe_rows)?;
            let perturbed = predict_eval(params, &probes)?;
            for j in 0..directions {
                if kind.apply(base.tensor().row(i), perturbed.tensor().row(j)) > tau {
                    continue 'radii;
                }
            }
        }
        return Ok(rho);
    }
    Ok(0.0)
}
