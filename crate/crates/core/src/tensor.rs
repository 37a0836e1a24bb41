//! Dense row-major f32 tensors.
//!
//! `Tensor` is a plain value type: parameters, grids and images live in it.
//! Gradient tracking happens on the [`crate::tape::Tape`]; a tensor's `grad`
//! field is filled in by the tape after a backward pass.

use crate::error::{GecaError, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense n-dimensional array of f32 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Same-shape gradient accumulator, populated by `Tape::backward`.
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GecaError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    /// I.i.d. standard normal entries.
    pub fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform entries in [lo, hi).
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    /// Xavier/Glorot uniform init for a [fan_in, fan_out] weight matrix.
    pub fn xavier<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Tensor::rand_uniform(vec![fan_in, fan_out], -bound, bound, rng)
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(GecaError::Dimension(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Flat offset of a multi-index; asserts in-bounds.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {} out of bounds at axis {}", ix, i);
            off = off * ext + ix;
        }
        off
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Mean of entries, accumulated in f64.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population variance of entries, accumulated in f64.
    pub fn variance(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let mu = self.mean();
        self.data
            .iter()
            .map(|&v| {
                let d = v as f64 - mu;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn clamp_in_place(&mut self, lo: f32, hi: f32) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Raw f32 matrix product: a[m,k] * b[k,n] -> out[m,n].
///
/// Loop order keeps the inner traversal contiguous in both `b` and `out`
/// so the compiler can vectorize it.
pub fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Transpose a row-major [rows, cols] buffer.
pub fn transpose_raw(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_data_agreement() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(GecaError::Dimension(_))
        ));
    }

    #[test]
    fn matmul_identity() {
        let id = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![3.0, -1.0, 2.0, 5.0];
        assert_eq!(matmul_raw(&id, &b, 2, 2, 2), b);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(vec![4, 4], &mut r1);
        let b = Tensor::randn(vec![4, 4], &mut r2);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn offset_row_major() {
        let t = Tensor::zeros(vec![2, 3, 4]);
        assert_eq!(t.offset(&[0, 0, 0]), 0);
        assert_eq!(t.offset(&[1, 2, 3]), 23);
        assert_eq!(t.offset(&[0, 1, 0]), 4);
    }
}
