//! Dense row-major tensors.
//!
//! A `Tensor` is a plain value; gradient tracking lives on the
//! [`Tape`](crate::tape::Tape).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Shaped dense array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor payload length {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    /// Gaussian init with the given std, sampled in f64 so both numeric
    /// modes draw the identical sequence from a shared seed.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        Self::from_fn(shape, |_| F::from_f64(dist.sample(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn get2(&self, r: usize, c: usize) -> F {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: F) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), data.iter().map(|&v| F::from_f64(v)).collect())
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.numel())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_payload() {
        let r = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.get2(0, 2), 3.0);
        assert_eq!(t.get2(1, 0), 4.0);
        assert_eq!(t.row(1), &[4., 5., 6.]);
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let mut b = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let ta = Tensor::<f32>::randn(&[4, 4], 0.02, &mut a);
        let tb = Tensor::<f32>::randn(&[4, 4], 0.02, &mut b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn f32_and_f64_modes_share_init_streams() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let mut b = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let t32 = Tensor::<f32>::randn(&[8], 0.1, &mut a);
        let t64 = Tensor::<f64>::randn(&[8], 0.1, &mut b);
        for (x, y) in t32.data().iter().zip(t64.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
