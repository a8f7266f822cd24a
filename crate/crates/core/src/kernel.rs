//! Stationary covariance functions with per-dimension lengthscales.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern52,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub family: KernelFamily,
    /// Signal variance; `k(x, x) = amplitude`.
    pub amplitude: f64,
    pub lengthscales: Vec<f64>,
}

const SQRT_5: f64 = 2.236_067_977_499_79;

impl KernelParams {
    pub fn new(family: KernelFamily, amplitude: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return input(format!("kernel amplitude must be positive, got {amplitude}"));
        }
        if lengthscales.is_empty() {
            return input("kernel needs at least one lengthscale");
        }
        if lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return input("every lengthscale must be positive");
        }
        Ok(Self { family, amplitude, lengthscales })
    }

    /// Squared-exponential kernel with the same lengthscale in every dimension.
    pub fn isotropic_se(amplitude: f64, lengthscale: f64, d: usize) -> Self {
        Self { family: KernelFamily::SquaredExponential, amplitude, lengthscales: vec![lengthscale; d] }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != self.dim() || y.len() != self.dim() {
            return input(format!(
                "kernel of dimension {} evaluated at points of dimension {} and {}",
                self.dim(),
                x.len(),
                y.len()
            ));
        }
        Ok(self.k(x, y))
    }

    /// Kernel value without the dimension check.
    #[inline]
    pub fn k(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let t = (a - b) / l;
                t * t
            })
            .sum();
        self.from_scaled_sq_dist(r2)
    }

    #[inline]
    pub fn from_scaled_sq_dist(&self, r2: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => self.amplitude * (-0.5 * r2).exp(),
            KernelFamily::Matern52 => {
                let r = r2.sqrt();
                self.amplitude * (1.0 + SQRT_5 * r + 5.0 / 3.0 * r2) * (-SQRT_5 * r).exp()
            }
        }
    }

    pub fn gram(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.amplitude;
            for j in 0..i {
                let v = self.k(&xs[i], &xs[j]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// `K[i, j] = k(a_i, b_j)`.
    pub fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.k(&a[i], &b[j]))
    }
}
