//! Label-transmission machinery.
//!
//! Think of a batch as a communication game: a label `y` is encoded as an
//! instance drawn from the reverse conditional `P(x|y)`, then decoded by
//! the model as `y' ~ Q(y'|x)`. Composing the two gives the **label
//! transition matrix** `T(y'|y) = sum_x P(x|y) Q(y'|x)`; encoding instances
//! through labels instead gives the symmetric **instance transition
//! matrix** `S(x'|x) = sum_y P(x'|y) Q(y|x)`.
//!
//! Two structural facts are exploited by the tests and the confidence loss:
//! `T` is diagonal exactly when `Q` is 0/1-valued on the batch with every
//! label used, and in that case the support components of `S` (its
//! irreducible recurrent classes) are the label classes themselves.
//!
//! Functions here are the plain-matrix analysis versions. The losses build
//! the same quantities as graph nodes (see [`label_transition_node`]) so
//! gradients flow through both the numerator and the normalizing column
//! sums of `P`.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::CondDistBatch;
use crate::tensor::Tensor;
use crate::PROB_EPS;

/// Default support threshold distinguishing structural zeros from round-off
/// when counting recurrent classes.
pub const SUPPORT_TOL: f64 = 1e-9;

/// The reverse conditional `P(x|y)`: an `n x |Y|` matrix whose column `y`
/// is `Q(y|.)` normalized to sum 1 over the batch. A column with total mass
/// below [`PROB_EPS`] (a dead label) falls back to the uniform column
/// `1/n`.
pub fn reverse_conditional(q: &CondDistBatch) -> Tensor {
    let qt = q.tensor();
    let (n, k) = (qt.rows(), qt.cols());
    let mut sums = vec![0.0; k];
    for i in 0..n {
        for (j, s) in sums.iter_mut().enumerate() {
            *s += qt.get(i, j);
        }
    }
    let mut p = Tensor::zeros(n, k);
    let uniform = 1.0 / n as f64;
    for i in 0..n {
        for j in 0..k {
            let v = if sums[j] < PROB_EPS {
                uniform
            } else {
                qt.get(i, j) / sums[j]
            };
            p.set(i, j, v);
        }
    }
    p
}

/// The `|Y| x |Y|` label transition matrix `T = Pᵀ Q`; entry `(y, y')` is
/// the probability a round trip turns `y` into `y'`. Row-stochastic.
pub fn label_transition(q: &CondDistBatch) -> Tensor {
    let p = reverse_conditional(q);
    p.transpose().matmul(q.tensor())
}

/// The `n x n` instance transition matrix `S = Q Pᵀ`; symmetric and
/// row-stochastic.
pub fn instance_transition(q: &CondDistBatch) -> Tensor {
    let p = reverse_conditional(q);
    q.tensor().matmul(&p.transpose())
}

/// True when every off-diagonal entry of `t` is below `tol`.
pub fn is_diagonal(t: &Tensor, tol: f64) -> bool {
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            if i != j && t.get(i, j).abs() >= tol {
                return false;
            }
        }
    }
    true
}

/// Number of connected components of the undirected support graph of a
/// symmetric transition matrix (edge wherever `s[i][j] >= tol`). For a
/// symmetric chain these are exactly its irreducible recurrent classes.
///
/// Asymmetry beyond 1e-6 is a contract violation.
pub fn recurrent_class_count(s: &Tensor, tol: f64) -> Result<usize> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::shape(
            "recurrent_class_count",
            format!("matrix is {}x{}", s.rows(), s.cols()),
        ));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (s.get(i, j) - s.get(j, i)).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "instance transitions asymmetric at ({i},{j}): {} vs {}",
                    s.get(i, j),
                    s.get(j, i)
                )));
            }
        }
    }
    // Union-find over the support edges.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if s.get(i, j) >= tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut count = 0;
    for i in 0..n {
        if find(&mut parent, i) == i {
            count += 1;
        }
    }
    Ok(count)
}

/// Graph version of [`label_transition`], built from a probability node:
/// `T = normalize_cols(Q)ᵀ Q`, with the same uniform fallback for dead
/// labels (which passes no gradient).
pub fn label_transition_node(g: &mut Graph, q: NodeId) -> NodeId {
    let p = g.normalize_cols(q);
    let pt = g.transpose(p);
    g.matmul(pt, q)
}
