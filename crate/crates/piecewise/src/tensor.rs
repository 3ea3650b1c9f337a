//! Dense row-major matrices of 64-bit reals.
//!
//! Everything the computation graph touches is a rank-2 tensor: scalars are
//! `1x1`, row vectors `1xd`, column vectors `nx1`. Values are finite by
//! construction; operations that could produce NaN/Inf are caught by the
//! graph evaluator.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// A dense `rows x cols` matrix of `f64`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;
    fn try_from(raw: RawTensor) -> Result<Tensor> {
        Tensor::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> RawTensor {
        RawTensor {
            rows: t.rows,
            cols: t.cols,
            data: t.data,
        }
    }
}

impl Tensor {
    /// Builds a tensor, validating the element count and finiteness of every
    /// value.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("tensor values must be finite"));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Internal constructor for values already known to be well-formed.
    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Tensor {
        assert!(v.is_finite(), "tensor values must be finite");
        Tensor::raw(rows, cols, vec![v; rows * cols])
    }

    /// A `1x1` tensor.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::full(1, 1, v)
    }

    /// A `1xd` row vector.
    pub fn row_vec(data: Vec<f64>) -> Result<Tensor> {
        let d = data.len();
        Tensor::from_vec(1, d, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The value of a `1x1` tensor.
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.shape(), [1, 1], "scalar_value on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Tensor::raw(self.cols, self.rows, out)
    }

    /// Matrix product `self * rhs`. Panics on an inner-dimension mismatch;
    /// the graph evaluator checks shapes before calling in.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul inner dimensions {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = vec![0.0; self.rows * rhs.cols];
        matmul_into(
            &self.data,
            &rhs.data,
            &mut out,
            self.rows,
            self.cols,
            rhs.cols,
        );
        Tensor::raw(self.rows, rhs.cols, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::raw(self.rows, self.cols, data)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

static FORCE_SERIAL: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

/// Forces all matrix kernels onto a single thread for the rest of the
/// process. Results are bit-identical either way (work is split by output
/// row); this exists so deterministic runs cannot depend on thread timing
/// even incidentally.
pub fn set_force_serial(on: bool) {
    FORCE_SERIAL.store(on, std::sync::atomic::Ordering::Relaxed);
}

/// Worker count for the optional row-split matrix kernels.
///
/// Defaults to the machine's available parallelism, capped by the
/// `PIECEWISE_THREADS` environment variable. Work is always partitioned by
/// output row, so results are bit-identical for any worker count; the
/// documented deterministic mode simply forces one worker.
pub fn worker_threads() -> usize {
    static WORKERS: OnceLock<usize> = OnceLock::new();
    if FORCE_SERIAL.load(std::sync::atomic::Ordering::Relaxed) {
        return 1;
    }
    *WORKERS.get_or_init(|| {
        let hw = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        match std::env::var("PIECEWISE_THREADS")
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
        {
            Some(n) if n >= 1 => n.min(hw),
            _ => hw,
        }
    })
}

/// Row blocks below this many multiply-adds are not worth a thread.
const PARALLEL_FLOP_THRESHOLD: usize = 1 << 20;

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let workers = worker_threads();
    if workers <= 1 || n * k * m < PARALLEL_FLOP_THRESHOLD || n < 2 {
        matmul_rows(a, b, out, k, m);
        return;
    }
    let chunk_rows = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (a_chunk, out_chunk) in a
            .chunks(chunk_rows * k)
            .zip(out.chunks_mut(chunk_rows * m))
        {
            scope.spawn(move || matmul_rows(a_chunk, b, out_chunk, k, m));
        }
    });
}

/// `out += a * b` over whole rows; `out` must be zeroed. The i-k-j loop order
/// keeps both `b` and `out` streaming row-major.
fn matmul_rows(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize) {
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (l, &a_val) in a_row.iter().enumerate() {
            let b_row = &b[l * m..(l + 1) * m];
            for (o, &b_val) in out_row.iter_mut().zip(b_row) {
                *o += a_val * b_val;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_count_and_finiteness() {
        assert!(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        let t = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.shape(), [2, 2]);
        assert_eq!(t.get(1, 0), 3.0);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(2, 1), 6.0);
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let a = Tensor::from_vec(1, 3, vec![0.1, -1.0 / 3.0, 2e-300]).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        for (x, y) in a.data().iter().zip(back.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn serde_rejects_nonfinite() {
        let r: std::result::Result<Tensor, _> =
            serde_json::from_str(r#"{"rows":1,"cols":1,"data":[null]}"#);
        assert!(r.is_err());
    }
}
