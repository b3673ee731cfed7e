//! Streaming first and second moments.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

/// Welford accumulator for the mean and covariance of a vector stream.
///
/// Accumulators over disjoint sub-streams combine with [`merge`](Self::merge),
/// so calibration batches can be processed independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments<T> {
    n: u64,
    mean: Vec<T>,
    /// Sum of centered cross-products, `Σ (x − μ)(x − μ)ᵀ`.
    m2: DenseMatrix<T>,
}

impl<T: Scalar> RunningMoments<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![T::zero(); dim],
            m2: DenseMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn push(&mut self, sample: &[T]) -> Result<()> {
        ensure_len("RunningMoments::push", self.dim(), sample.len())?;
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("moments sample".into()));
        }
        self.n += 1;
        let n = T::lit(self.n as f64);
        let d = self.dim();
        let delta: Vec<T> = sample.iter().zip(&self.mean).map(|(&x, &m)| x - m).collect();
        for (m, &dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        // m2 += δ_old (x − μ_new)ᵀ, kept exactly symmetric by updating the upper
        // triangle and mirroring.
        let post: Vec<T> = sample.iter().zip(&self.mean).map(|(&x, &m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                let inc = (delta[i] * post[j] + delta[j] * post[i]) * T::lit(0.5);
                self.m2[(i, j)] += inc;
                if i != j {
                    self.m2[(j, i)] = self.m2[(i, j)];
                }
            }
        }
        Ok(())
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        ensure_len("RunningMoments::merge", self.dim(), other.dim())?;
        if other.n == 0 {
            return Ok(self.clone());
        }
        if self.n == 0 {
            return Ok(other.clone());
        }
        let na = T::lit(self.n as f64);
        let nb = T::lit(other.n as f64);
        let n = na + nb;
        let delta: Vec<T> = other
            .mean
            .iter()
            .zip(&self.mean)
            .map(|(&b, &a)| b - a)
            .collect();
        // Symmetric combination of the means keeps merge(a, b) == merge(b, a).
        let mean = self
            .mean
            .iter()
            .zip(&other.mean)
            .map(|(&a, &b)| (na * a + nb * b) / n)
            .collect();
        let w = na * nb / n;
        let d = self.dim();
        let m2 = DenseMatrix::from_fn(d, d, |i, j| {
            self.m2[(i, j)] + other.m2[(i, j)] + delta[i] * delta[j] * w
        });
        Ok(Self {
            n: self.n + other.n,
            mean,
            m2,
        })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn comoment(&self) -> &DenseMatrix<T> {
        &self.m2
    }

    /// Unbiased covariance `m2 / (n − 1)`.
    pub fn covariance(&self) -> Result<DenseMatrix<T>> {
        if self.n < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                have: self.n as usize,
            });
        }
        let denom = T::lit((self.n - 1) as f64);
        let mut cov = self.m2.scale(T::one() / denom);
        for i in 0..self.dim() {
            if cov[(i, i)] < T::zero() {
                cov[(i, i)] = T::zero();
            }
        }
        Ok(cov)
    }

    pub fn variance(&self) -> Result<Vec<T>> {
        Ok(self.covariance()?.diag())
    }

    pub fn std(&self) -> Result<Vec<T>> {
        Ok(self.variance()?.into_iter().map(|v| v.sqrt()).collect())
    }
}

/// Per-channel running absolute maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsMax<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> AbsMax<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    pub fn push(&mut self, sample: &[T]) -> Result<()> {
        ensure_len("AbsMax::push", self.values.len(), sample.len())?;
        for (m, &x) in self.values.iter_mut().zip(sample) {
            *m = m.max(x.abs());
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        self.push(&other.values)
    }

    /// Largest value over all channels.
    pub fn overall(&self) -> T {
        self.values.iter().fold(T::zero(), |a, &b| a.max(b))
    }
}
