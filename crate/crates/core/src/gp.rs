//! Exact GP regression for a single task (objective or one constraint).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::kernel::KernelParams;
use crate::linalg::{cholesky_with_jitter, log_det, solve_lower, solve_lower_mat, JitteredCholesky};

/// Mean and variance of a univariate Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Smallest variance ever reported, relative to the kernel amplitude.
const VARIANCE_FLOOR: f64 = 1e-16;

/// One GP per task: kernel, observation noise, constant prior mean and the
/// data it is conditioned on. Immutable once built; the Cholesky factor of the
/// noisy Gram matrix is cached.
#[derive(Clone, Debug)]
pub struct TaskModel {
    kernel: KernelParams,
    noise_variance: f64,
    mean: f64,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    chol: Option<JitteredCholesky>,
    /// `(K + σ²I)⁻¹ (y - m)`
    alpha: DVector<f64>,
}

impl TaskModel {
    pub fn new(
        kernel: KernelParams,
        noise_variance: f64,
        mean: f64,
        xs: Vec<Vec<f64>>,
        ys: Vec<f64>,
    ) -> Result<Self> {
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return input(format!("noise variance must be nonnegative, got {noise_variance}"));
        }
        if xs.len() != ys.len() {
            return input(format!("{} inputs but {} targets", xs.len(), ys.len()));
        }
        if let Some(bad) = xs.iter().find(|x| x.len() != kernel.dim()) {
            return input(format!(
                "observation of dimension {} for a kernel of dimension {}",
                bad.len(),
                kernel.dim()
            ));
        }
        if ys.iter().any(|y| !y.is_finite()) || !mean.is_finite() {
            return input("observations and prior mean must be finite");
        }
        let (chol, alpha) = if xs.is_empty() {
            (None, DVector::zeros(0))
        } else {
            let mut gram = kernel.gram(&xs);
            for i in 0..xs.len() {
                gram[(i, i)] += noise_variance;
            }
            let chol = cholesky_with_jitter(&gram, kernel.amplitude)?;
            let centered = DVector::from_iterator(ys.len(), ys.iter().map(|y| y - mean));
            let alpha = chol.factor.solve(&centered);
            (Some(chol), alpha)
        };
        Ok(Self { kernel, noise_variance, mean, xs, ys, chol, alpha })
    }

    pub fn prior(kernel: KernelParams, noise_variance: f64, mean: f64) -> Result<Self> {
        Self::new(kernel, noise_variance, mean, Vec::new(), Vec::new())
    }

    /// Same hyperparameters, one more observation.
    pub fn with_observation(&self, x: Vec<f64>, y: f64) -> Result<Self> {
        let mut xs = self.xs.clone();
        let mut ys = self.ys.clone();
        xs.push(x);
        ys.push(y);
        Self::new(self.kernel.clone(), self.noise_variance, self.mean, xs, ys)
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn mean_value(&self) -> f64 {
        self.mean
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn targets(&self) -> &[f64] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub(crate) fn cholesky(&self) -> Option<&JitteredCholesky> {
        self.chol.as_ref()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return input(format!("query of dimension {} for a model of dimension {}", x.len(), self.dim()));
        }
        Ok(())
    }

    fn k_data(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| self.kernel.k(xi, x)))
    }

    /// Predictive moments of the latent (noise-free) function at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<GaussianMoments> {
        self.check_point(x)?;
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> GaussianMoments {
        let amp = self.kernel.amplitude;
        match &self.chol {
            None => GaussianMoments { mean: self.mean, variance: amp },
            Some(chol) => {
                let k = self.k_data(x);
                let mean = self.mean + k.dot(&self.alpha);
                let v = solve_lower(&chol.factor, &k);
                let variance = (amp - v.norm_squared()).max(VARIANCE_FLOOR * amp);
                GaussianMoments { mean, variance }
            }
        }
    }

    /// Posterior mean only; cheaper than [`predict`](Self::predict).
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        if self.xs.is_empty() {
            return self.mean;
        }
        self.mean + self.k_data(x).dot(&self.alpha)
    }

    /// Joint predictive mean vector and covariance matrix of the latent
    /// function over `points`.
    pub fn predict_joint(&self, points: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        for p in points {
            self.check_point(p)?;
        }
        let prior = self.kernel.gram(points);
        match &self.chol {
            None => Ok((DVector::from_element(points.len(), self.mean), prior)),
            Some(chol) => {
                let kxs = self.kernel.cross(&self.xs, points);
                let mean = DVector::from_element(points.len(), self.mean) + kxs.transpose() * &self.alpha;
                let v = solve_lower_mat(&chol.factor, &kxs);
                let mut cov = prior - v.transpose() * &v;
                crate::linalg::symmetrize(&mut cov);
                Ok((mean, cov))
            }
        }
    }

    /// Precomputes what is needed to evaluate posterior cross-covariances
    /// between a fixed point set and arbitrary queries.
    pub fn cross_covariance_basis(&self, points: &[Vec<f64>]) -> CrossCovarianceBasis {
        let whitened = self
            .chol
            .as_ref()
            .map(|c| solve_lower_mat(&c.factor, &self.kernel.cross(&self.xs, points)));
        CrossCovarianceBasis { points: points.to_vec(), whitened }
    }

    /// `log p(y | X, θ)` under the noisy Gram matrix.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let chol = self
            .chol
            .as_ref()
            .ok_or_else(|| Error::Input("log marginal likelihood needs at least one observation".into()))?;
        let n = self.xs.len() as f64;
        let centered = DVector::from_iterator(self.ys.len(), self.ys.iter().map(|y| y - self.mean));
        let fit = centered.dot(&self.alpha);
        Ok(-0.5 * fit - 0.5 * log_det(&chol.factor) - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Posterior cross-covariances `cov(f(s_i), f(x) | D)` for a fixed set `s`.
#[derive(Clone, Debug)]
pub struct CrossCovarianceBasis {
    points: Vec<Vec<f64>>,
    /// `L⁻¹ K(X, s)`, absent for a model without data.
    whitened: Option<DMatrix<f64>>,
}

impl CrossCovarianceBasis {
    /// Returns the cross-covariance vector together with the posterior
    /// moments at `x`, sharing the triangular solve.
    pub fn at(&self, model: &TaskModel, x: &[f64]) -> (DVector<f64>, GaussianMoments) {
        let kernel = &model.kernel;
        let mut b = DVector::from_iterator(self.points.len(), self.points.iter().map(|s| kernel.k(s, x)));
        let moments = match (&self.whitened, &model.chol) {
            (Some(w), Some(chol)) => {
                let k = model.k_data(x);
                let v = solve_lower(&chol.factor, &k);
                b -= w.transpose() * &v;
                let amp = kernel.amplitude;
                GaussianMoments {
                    mean: model.mean + k.dot(&model.alpha),
                    variance: (amp - v.norm_squared()).max(VARIANCE_FLOOR * amp),
                }
            }
            _ => GaussianMoments { mean: model.mean, variance: kernel.amplitude },
        };
        (b, moments)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelFamily;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Textbook GP equations with an explicit inverse, kept independent of the
    /// Cholesky path used by `TaskModel`.
    fn dense_oracle(k: &KernelParams, noise: f64, mean: f64, xs: &[Vec<f64>], ys: &[f64], x: &[f64]) -> (f64, f64) {
        let n = xs.len();
        let mut kxx = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                kxx[(i, j)] = k.k(&xs[i], &xs[j]) + if i == j { noise } else { 0.0 };
            }
        }
        let inv = kxx.try_inverse().unwrap();
        let kx = DVector::from_iterator(n, xs.iter().map(|xi| k.k(xi, x)));
        let y = DVector::from_iterator(n, ys.iter().map(|v| v - mean));
        let m = mean + (kx.transpose() * &inv * y)[0];
        let v = k.k(x, x) - (kx.transpose() * &inv * &kx)[0];
        (m, v)
    }

    fn oracle_lml(k: &KernelParams, noise: f64, mean: f64, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        let n = xs.len();
        let mut kxx = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                kxx[(i, j)] = k.k(&xs[i], &xs[j]) + if i == j { noise } else { 0.0 };
            }
        }
        let det = kxx.determinant();
        let y = DVector::from_iterator(n, ys.iter().map(|v| v - mean));
        let q = (y.transpose() * kxx.try_inverse().unwrap() * &y)[0];
        -0.5 * q - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * PI).ln()
    }

    #[test]
    fn empty_model_returns_prior() {
        let m = TaskModel::prior(KernelParams::isotropic_se(1.0, 0.1, 1), 0.01, 0.0).unwrap();
        let p = m.predict(&[0.4]).unwrap();
        assert_eq!(p, GaussianMoments { mean: 0.0, variance: 1.0 });
    }

    #[test]
    fn noiseless_datum_is_interpolated() {
        let m = TaskModel::new(KernelParams::isotropic_se(1.0, 0.1, 1), 0.0, 0.0, vec![vec![0.3]], vec![0.7]).unwrap();
        let p = m.predict(&[0.3]).unwrap();
        assert!((p.mean - 0.7).abs() < 1e-8);
        assert!(p.variance < 1e-8);
    }

    #[test]
    fn three_point_dataset_matches_dense_oracle() {
        let k = KernelParams::isotropic_se(1.3, 0.2, 1);
        let xs = vec![vec![0.1], vec![0.45], vec![0.8]];
        let ys = vec![0.2, -0.4, 1.1];
        let m = TaskModel::new(k.clone(), 0.01, 0.1, xs.clone(), ys.clone()).unwrap();
        for q in [0.0, 0.3, 0.45, 0.77, 1.0] {
            let p = m.predict(&[q]).unwrap();
            let (om, ov) = dense_oracle(&k, 0.01 + m.cholesky().unwrap().jitter, 0.1, &xs, &ys, &[q]);
            assert!((p.mean - om).abs() < 1e-8);
            assert!((p.variance - ov).abs() < 1e-8);
        }
    }

    #[test]
    fn single_observation_likelihood_is_univariate_normal() {
        let m = TaskModel::new(KernelParams::isotropic_se(1.0, 0.1, 1), 0.01, 0.0, vec![vec![0.5]], vec![0.0]).unwrap();
        let v = 1.01 + m.cholesky().unwrap().jitter;
        let expect = -0.5 * (2.0 * PI * v).ln();
        assert!((m.log_marginal_likelihood().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn likelihood_invariant_to_joint_mean_shift() {
        let k = KernelParams::isotropic_se(1.0, 0.3, 1);
        let xs = vec![vec![0.1], vec![0.5], vec![0.9]];
        let ys = vec![0.3, -0.2, 0.5];
        let a = TaskModel::new(k.clone(), 0.05, 0.0, xs.clone(), ys.clone()).unwrap();
        let shifted: Vec<f64> = ys.iter().map(|y| y + 3.0).collect();
        let b = TaskModel::new(k, 0.05, 3.0, xs, shifted).unwrap();
        assert!((a.log_marginal_likelihood().unwrap() - b.log_marginal_likelihood().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn five_point_likelihood_matches_dense_oracle() {
        let k = KernelParams::new(KernelFamily::Matern52, 0.8, vec![0.3, 0.5]).unwrap();
        let xs = vec![vec![0.1, 0.2], vec![0.4, 0.9], vec![0.7, 0.3], vec![0.95, 0.6], vec![0.2, 0.7]];
        let ys = vec![0.1, 0.5, -0.3, 0.8, 0.0];
        let m = TaskModel::new(k.clone(), 0.02, 0.2, xs.clone(), ys.clone()).unwrap();
        let noise = 0.02 + m.cholesky().unwrap().jitter;
        assert!((m.log_marginal_likelihood().unwrap() - oracle_lml(&k, noise, 0.2, &xs, &ys)).abs() < 1e-8);
    }

    #[test]
    fn joint_prediction_diagonal_agrees_with_pointwise() {
        let k = KernelParams::isotropic_se(1.0, 0.2, 1);
        let m = TaskModel::new(k, 0.01, 0.0, vec![vec![0.2], vec![0.6]], vec![0.5, -0.5]).unwrap();
        let pts = vec![vec![0.1], vec![0.4], vec![0.6]];
        let (mean, cov) = m.predict_joint(&pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let g = m.predict(p).unwrap();
            assert!((mean[i] - g.mean).abs() < 1e-12);
            assert!((cov[(i, i)] - g.variance).abs() < 1e-12);
        }
        let basis = m.cross_covariance_basis(&pts);
        let (b, _) = basis.at(&m, &[0.4]);
        for i in 0..3 {
            assert!((b[i] - cov[(i, 1)]).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_query_dimension_is_rejected() {
        let m = TaskModel::prior(KernelParams::isotropic_se(1.0, 0.1, 2), 0.01, 0.0).unwrap();
        assert!(matches!(m.predict(&[0.1]), Err(Error::Input(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn posterior_matches_oracle_on_small_sets(
            xs in prop::collection::vec(0.0f64..1.0, 1..10),
            seed_y in prop::collection::vec(-2.0f64..2.0, 10),
            q in 0.0f64..1.0,
        ) {
            let k = KernelParams::isotropic_se(1.0, 0.25, 1);
            let pts: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
            let ys = seed_y[..pts.len()].to_vec();
            let m = TaskModel::new(k.clone(), 0.05, 0.0, pts.clone(), ys.clone()).unwrap();
            let p = m.predict(&[q]).unwrap();
            let (om, ov) = dense_oracle(&k, 0.05 + m.cholesky().unwrap().jitter, 0.0, &pts, &ys, &[q]);
            prop_assert!((p.mean - om).abs() < 1e-8);
            prop_assert!((p.variance - ov.max(0.0)).abs() < 1e-8);
        }

        #[test]
        fn variance_never_grows_with_more_data(
            xs in prop::collection::vec(0.0f64..1.0, 0..8),
            extra in 0.0f64..1.0,
            q in 0.0f64..1.0,
        ) {
            let k = KernelParams::isotropic_se(1.0, 0.15, 1);
            let pts: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
            let ys = vec![0.0; pts.len()];
            let before = TaskModel::new(k, 0.01, 0.0, pts, ys).unwrap();
            let after = before.with_observation(vec![extra], 0.3).unwrap();
            let vb = before.predict(&[q]).unwrap().variance;
            let va = after.predict(&[q]).unwrap().variance;
            prop_assert!(va <= vb + 1e-8);
        }
    }
}
