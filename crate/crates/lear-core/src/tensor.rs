//! Dense row-major f64 tensors and the seeded RNG used everywhere.
//!
//! Tensors are plain values: shape metadata plus a flat buffer. All layout is
//! row-major and every shape is explicit; the only broadcasting anywhere in
//! the crate is the documented bias-add / row-broadcast in the graph ops.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows / columns when viewed as a 2-D matrix. Rank-1 tensors
    /// count as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Enables gradient accumulation; allocates the grad buffer lazily.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

/// Seeded, reproducible random source.
///
/// The generator is ChaCha8 (from `rand_chacha`), whose output stream is
/// fixed by the algorithm, so a seed fully determines every draw. Gaussian
/// draws go through `rand_distr::Normal`.
pub struct Rng {
    pub seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).unwrap().sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p.clamp(0.0, 1.0))
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// Tensor with entries drawn uniformly from [lo, hi).
    pub fn uniform_tensor(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.uniform(lo, hi)).collect();
        Tensor::from_vec(shape, data).expect("shape/data consistent by construction")
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>, mean: f64, std: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| self.normal(mean, std)).collect();
        Tensor::from_vec(shape, data).expect("shape/data consistent by construction")
    }

    /// Glorot/Xavier uniform: bound = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform_tensor(shape, -bound, bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[5]"), "{msg}");
    }

    #[test]
    fn rows_cols_view() {
        let t = Tensor::zeros(vec![2, 3, 4]);
        assert_eq!(t.rows(), 6);
        assert_eq!(t.cols(), 4);
        let v = Tensor::zeros(vec![5]);
        assert_eq!(v.rows(), 1);
        assert_eq!(v.cols(), 5);
    }

    #[test]
    fn rng_streams_are_seed_deterministic() {
        let mut a = Rng::new(1234);
        let mut b = Rng::new(1234);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ta = Rng::new(7).normal_tensor(vec![4, 4], 0.0, 0.02);
        let tb = Rng::new(7).normal_tensor(vec![4, 4], 0.0, 0.02);
        assert_eq!(ta.data(), tb.data());
        let tc = Rng::new(8).normal_tensor(vec![4, 4], 0.0, 0.02);
        assert_ne!(ta.data(), tc.data());
    }

    #[test]
    fn xavier_bound_is_respected() {
        let t = Rng::new(3).xavier(6, 6, vec![6, 6]);
        let bound = (6.0 / 12.0_f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}
