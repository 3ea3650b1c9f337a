//! Small dense symmetric eigensolver (cyclic Jacobi rotations).
//!
//! Only what the rest of the crate needs: eigenvalues of small symmetric
//! matrices (Fisher-information factors, instance-transition kernels). For
//! the matrix sizes here (at most a few hundred rows, usually fewer than
//! ten) Jacobi is simple, deterministic, and accurate to near machine
//! precision.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 64;

/// Eigenvalues of a symmetric matrix, sorted in descending order.
///
/// The input must be square and symmetric within `sym_tol` (absolute);
/// asymmetry beyond that is a contract violation. Accuracy is relative to
/// the Frobenius norm of the input.
pub fn symmetric_eigenvalues(m: &Tensor, sym_tol: f64) -> Result<Vec<f64>> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::shape(
            "symmetric_eigenvalues",
            format!("matrix is {}x{}", m.rows(), m.cols()),
        ));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get(i, j) - m.get(j, i)).abs() > sym_tol {
                return Err(Error::contract(format!(
                    "matrix asymmetric at ({i},{j}): {} vs {}",
                    m.get(i, j),
                    m.get(j, i)
                )));
            }
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    // Work on a symmetrized copy so tiny input asymmetry cannot bias sweeps.
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m.get(i, j) + m.get(j, i));
        }
    }

    let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let stop = (frob * 1e-14).max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += a[i * n + j] * a[i * n + j];
                    }
                }
            }
            s.sqrt()
        };
        if off <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= stop / (n * n) as f64 {
                    continue;
                }
                let (c, s) = jacobi_rotation(a[p * n + p], a[q * n + q], apq);
                apply_rotation(&mut a, n, p, q, c, s);
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(eig)
}

/// Largest eigenvalue of a symmetric matrix.
pub fn top_eigenvalue(m: &Tensor, sym_tol: f64) -> Result<f64> {
    let eig = symmetric_eigenvalues(m, sym_tol)?;
    Ok(eig.into_iter().next().unwrap_or(0.0))
}

/// Singular values of a symmetric matrix, i.e. the absolute eigenvalues,
/// sorted in descending order.
pub fn symmetric_singular_values(m: &Tensor, sym_tol: f64) -> Result<Vec<f64>> {
    let mut sv: Vec<f64> = symmetric_eigenvalues(m, sym_tol)?
        .into_iter()
        .map(f64::abs)
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(sv)
}

/// Rotation (c, s) annihilating the (p,q) entry of a 2x2 symmetric block.
fn jacobi_rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}

fn apply_rotation(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[p * n + k];
        let aqk = a[q * n + k];
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_closed_form() {
        // Eigenvalues of [[2,1],[1,2]] are 3 and 1.
        let m = t(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let eig = symmetric_eigenvalues(&m, 1e-12).unwrap();
        assert!((eig[0] - 3.0).abs() < 1e-12);
        assert!((eig[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matrix_returns_sorted_diagonal() {
        let m = t(3, 3, &[5.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 2.0]);
        let eig = symmetric_eigenvalues(&m, 1e-12).unwrap();
        assert_eq!(eig, vec![5.0, 2.0, -1.0]);
    }

    #[test]
    fn trace_and_frobenius_identities_on_random_matrices() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for n in [1usize, 2, 3, 5, 8] {
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    let v: f64 = rng.random_range(-2.0..2.0);
                    data[i * n + j] = v;
                    data[j * n + i] = v;
                }
            }
            let m = t(n, n, &data);
            let eig = symmetric_eigenvalues(&m, 1e-12).unwrap();
            let trace: f64 = (0..n).map(|i| m.get(i, i)).sum();
            let frob2: f64 = m.data().iter().map(|v| v * v).sum();
            let eig_sum: f64 = eig.iter().sum();
            let eig_sq: f64 = eig.iter().map(|v| v * v).sum();
            assert!((trace - eig_sum).abs() < 1e-10 * (1.0 + trace.abs()));
            assert!((frob2 - eig_sq).abs() < 1e-9 * (1.0 + frob2));
        }
    }

    #[test]
    fn gram_matrices_have_nonnegative_spectra() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (r, c) = (4usize, 3usize);
            let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = t(r, c, &data);
            let gram = a.transpose().matmul(&a);
            let eig = symmetric_eigenvalues(&gram, 1e-9).unwrap();
            for v in eig {
                assert!(v >= -1e-9, "negative eigenvalue {v} for a Gram matrix");
            }
        }
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let m = t(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(symmetric_eigenvalues(&m, 1e-9).is_err());
    }
}
