//! f-divergences between discrete distributions over the label set, both as
//! plain functions and as graph nodes, plus the perturbation divergence
//! `phi(r) = f(Q(.|x) || Q(.|x+r))`.
//!
//! Two facts the rest of the crate leans on:
//!
//! * both divergences vanish to first order at `r = 0`, and
//! * their curvature there is the Fisher quadratic form: the second
//!   derivative of `nu -> phi(nu * e)` at 0 equals `c_f * eᵀ I_F e`, with
//!   `c = 1` for KL and `c = 1/4` for squared Hellinger.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::model::{predict_eval, ModelParams};
use crate::tensor::Tensor;
use crate::PROB_EPS;
use serde::{Deserialize, Serialize};

/// Floor for products of probabilities before a square root; equals
/// [`PROB_EPS`] squared so clamped distributions stay representable.
pub(crate) const SQRT_FLOOR: f64 = PROB_EPS * PROB_EPS;

/// The two divergences used by the losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    /// Kullback-Leibler divergence; asymmetric, curvature constant 1.
    Kl,
    /// Squared Hellinger distance (`1 - sum sqrt(p q)` convention);
    /// symmetric, bounded by 1, curvature constant 1/4.
    SqHellinger,
}

impl DivergenceKind {
    /// The constant `c_f` in the local expansion
    /// `phi(nu e) ~ ½ c_f nu² eᵀ I_F e`.
    pub fn curvature_constant(self) -> f64 {
        match self {
            DivergenceKind::Kl => 1.0,
            DivergenceKind::SqHellinger => 0.25,
        }
    }

    pub fn apply(self, p: &[f64], q: &[f64]) -> f64 {
        match self {
            DivergenceKind::Kl => kl(p, q),
            DivergenceKind::SqHellinger => hel2(p, q),
        }
    }
}

/// `KL(p || q) = sum_y p(y) (log p(y) - log q(y))` with `0 log 0 := 0` and
/// `q` floored at [`PROB_EPS`], so the result is always finite.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions over different label sets");
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi.ln() - qi.max(PROB_EPS).ln());
        }
    }
    acc.max(0.0)
}

/// Squared Hellinger distance in the Bhattacharyya convention
/// `1 - sum_y sqrt(p(y) q(y))`, computed as `½ sum (sqrt p - sqrt q)²`
/// (identical for stochastic vectors, exactly zero when `p == q`, and
/// exactly symmetric). Always in `[0, 1]`.
pub fn hel2(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions over different label sets");
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let d = pi.sqrt() - qi.sqrt();
        acc += d * d;
    }
    (0.5 * acc).min(1.0)
}

/// The perturbation divergence `phi_f(r; x, theta) =
/// f(Q(.|x) || Q(.|x+r))`, evaluated with frozen batch statistics so both
/// terms depend only on their own input point.
pub fn phi(params: &ModelParams, x: &[f64], r: &[f64], kind: DivergenceKind) -> Result<f64> {
    assert_eq!(x.len(), r.len(), "perturbation dimension mismatch");
    let mut data = Vec::with_capacity(2 * x.len());
    data.extend_from_slice(x);
    data.extend(x.iter().zip(r).map(|(&a, &b)| a + b));
    let stacked = Tensor::from_vec(2, x.len(), data)?;
    let q = predict_eval(params, &stacked)?;
    Ok(kind.apply(q.row(0), q.row(1)))
}

/// Graph node computing the per-row divergence between two `n x k`
/// probability matrices; output is `n x 1`.
///
/// Rows are floored at zero: rounding can push a mathematically zero
/// divergence a few ulps negative, and the floor also gives the subgradient
/// 0 exactly at coincident distributions.
pub fn divergence_rows(g: &mut Graph, p: NodeId, q: NodeId, kind: DivergenceKind) -> NodeId {
    match kind {
        DivergenceKind::Kl => kl_rows(g, p, q),
        DivergenceKind::SqHellinger => hel2_rows(g, p, q),
    }
}

fn kl_rows(g: &mut Graph, p: NodeId, q: NodeId) -> NodeId {
    let cp = g.clamp(p, PROB_EPS, 1.0);
    let cq = g.clamp(q, PROB_EPS, 1.0);
    let lp = g.log(cp);
    let lq = g.log(cq);
    let diff = g.sub(lp, lq);
    let weighted = g.mul(p, diff);
    let rows = g.sum_rows(weighted);
    g.relu(rows)
}

fn hel2_rows(g: &mut Graph, p: NodeId, q: NodeId) -> NodeId {
    let prod = g.mul(p, q);
    let clamped = g.clamp(prod, SQRT_FLOOR, 1.0);
    let roots = g.sqrt(clamped);
    let coeff = g.sum_rows(roots);
    let neg = g.neg(coeff);
    let shifted = g.add_const(neg, 1.0);
    g.relu(shifted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Bindings;
    use crate::model::{init, score_matrix, MlpSpec};
    use crate::smoothness::{fisher_trace, sample_direction};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(kl(&p, &p), 0.0);
    }

    #[test]
    fn kl_of_unit_mass_reduces_to_negative_log() {
        let q = [0.7, 0.3];
        assert!((kl(&[1.0, 0.0], &q) + q[0].ln()).abs() < 1e-15);
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]) - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hel2_basic_values_and_symmetry() {
        let p = [0.25, 0.75];
        assert_eq!(hel2(&p, &p), 0.0);
        assert_eq!(hel2(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        let q = [0.6, 0.4];
        assert_eq!(hel2(&p, &q).to_bits(), hel2(&q, &p).to_bits());
    }

    #[test]
    fn divergences_are_nonnegative_on_random_distributions() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..200 {
            let k = rng.random_range(2..=5);
            let p = random_dist(&mut rng, k);
            let q = random_dist(&mut rng, k);
            assert!(kl(&p, &q) >= 0.0);
            let h = hel2(&p, &q);
            assert!((0.0..=1.0).contains(&h));
        }
    }

    fn random_dist(rng: &mut ChaCha20Rng, k: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0) + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn graph_rows_match_plain_functions() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 4;
        let k = 3;
        let mut pd = Vec::new();
        let mut qd = Vec::new();
        for _ in 0..n {
            pd.extend(random_dist(&mut rng, k));
            qd.extend(random_dist(&mut rng, k));
        }
        let pt = Tensor::from_vec(n, k, pd).unwrap();
        let qt = Tensor::from_vec(n, k, qd).unwrap();
        for kind in [DivergenceKind::Kl, DivergenceKind::SqHellinger] {
            let mut g = Graph::new();
            let p = g.constant(pt.clone());
            let q = g.constant(qt.clone());
            let rows = divergence_rows(&mut g, p, q, kind);
            let f = g.evaluate(&Bindings::new()).unwrap();
            for i in 0..n {
                let expect = kind.apply(pt.row(i), qt.row(i));
                let got = f.value(rows).get(i, 0);
                assert!(
                    (got - expect).abs() < 1e-12,
                    "{kind:?} row {i}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn phi_vanishes_at_zero_perturbation() {
        let params = init(&MlpSpec::new(3, vec![5], 2), 1).unwrap();
        let x = [0.4, -0.2, 0.9];
        for kind in [DivergenceKind::Kl, DivergenceKind::SqHellinger] {
            assert_eq!(phi(&params, &x, &[0.0; 3], kind).unwrap(), 0.0);
        }
    }

    #[test]
    fn phi_of_constant_model_is_zero_for_any_perturbation() {
        let mut params = init(&MlpSpec::new(2, vec![4], 2), 0).unwrap();
        let last = params.layers.len() - 1;
        params.layers[last].weight = Tensor::zeros(4, 2);
        params.layers[last].bias = Tensor::zeros(1, 2);
        for kind in [DivergenceKind::Kl, DivergenceKind::SqHellinger] {
            let v = phi(&params, &[0.3, 0.3], &[0.5, -0.8], kind).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    /// Central-difference curvature of `nu -> phi(nu e)` at 0 matches the
    /// Fisher quadratic form scaled by the divergence's constant.
    #[test]
    fn curvature_matches_fisher_quadratic_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for trial in 0..8 {
            let spec = MlpSpec::new(3, vec![6], 3);
            let params = init(&spec, 100 + trial).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sm = score_matrix(&params, &x).unwrap();
            if fisher_trace(&sm) < 1e-6 {
                continue;
            }
            // Random unit direction.
            let e = {
                let mut e = sample_direction(&sm, 1, &mut rng);
                let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-9 {
                    continue;
                }
                e.iter_mut().for_each(|v| *v /= norm);
                e
            };
            // e' I_F e with I_F = A A'.
            let quad: f64 = {
                let ate: Vec<f64> = (0..sm.a.cols())
                    .map(|y| (0..sm.a.rows()).map(|j| sm.a.get(j, y) * e[j]).sum())
                    .collect();
                ate.iter().map(|v| v * v).sum()
            };
            let h = 1e-3;
            for kind in [DivergenceKind::Kl, DivergenceKind::SqHellinger] {
                let psi = |nu: f64| {
                    let r: Vec<f64> = e.iter().map(|v| nu * v).collect();
                    phi(&params, &x, &r, kind).unwrap()
                };
                let second = (psi(h) - 2.0 * psi(0.0) + psi(-h)) / (h * h);
                let first = (psi(h) - psi(-h)) / (2.0 * h);
                assert!(first.abs() < 1e-4, "{kind:?}: first derivative {first}");
                let expect = kind.curvature_constant() * quad;
                let rel = (second - expect).abs() / expect.abs().max(1e-12);
                assert!(
                    rel < 1e-2,
                    "{kind:?} trial {trial}: curvature {second} vs {expect}"
                );
            }
        }
    }
}
