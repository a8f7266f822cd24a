//! Maximum-likelihood hyperparameters by multi-start local ascent in log space.

use rand::Rng;

use crate::domain::Bounds;
use crate::error::{input, Result};
use crate::gp::TaskModel;
use crate::kernel::{KernelFamily, KernelParams};
use crate::local::{minimize, PolishOptions};

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub restarts: usize,
    pub evals_per_restart: usize,
    /// Start point tried first (e.g. the previous iteration's fit).
    pub warm_start: Option<(KernelParams, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { restarts: 10, evals_per_restart: 150, warm_start: None }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub kernel: KernelParams,
    pub noise_variance: f64,
    pub mean: f64,
    pub log_likelihood: f64,
    /// False when no restart improved on its start point.
    pub improved: bool,
}

const AMPLITUDE_RANGE: (f64, f64) = (1e-3, 1e3);
const NOISE_RANGE: (f64, f64) = (1e-8, 1.0);
const LENGTHSCALE_RANGE: (f64, f64) = (1e-3, 10.0);

struct Packing {
    d: usize,
    widths: Vec<f64>,
}

impl Packing {
    fn log_bounds(&self) -> Bounds {
        let mut lo = vec![AMPLITUDE_RANGE.0.ln()];
        let mut hi = vec![AMPLITUDE_RANGE.1.ln()];
        for w in &self.widths {
            lo.push((LENGTHSCALE_RANGE.0 * w).ln());
            hi.push((LENGTHSCALE_RANGE.1 * w).ln());
        }
        lo.push(NOISE_RANGE.0.ln());
        hi.push(NOISE_RANGE.1.ln());
        Bounds { lower: lo, upper: hi }
    }

    fn unpack(&self, theta: &[f64], family: KernelFamily) -> (KernelParams, f64) {
        let kernel = KernelParams {
            family,
            amplitude: theta[0].exp(),
            lengthscales: theta[1..=self.d].iter().map(|v| v.exp()).collect(),
        };
        (kernel, theta[self.d + 1].exp())
    }

    fn pack(&self, kernel: &KernelParams, noise: f64, bounds: &Bounds) -> Vec<f64> {
        let mut t = vec![kernel.amplitude.ln()];
        t.extend(kernel.lengthscales.iter().map(|l| l.ln()));
        t.push(noise.max(NOISE_RANGE.0).ln());
        bounds.clamp(&mut t);
        t
    }
}

/// Fits amplitude, per-dimension lengthscales and noise variance by
/// maximizing the log marginal likelihood. The prior mean is fixed to the
/// empirical mean of `ys`.
pub fn fit_hyperparameters<R: Rng + ?Sized>(
    xs: &[Vec<f64>],
    ys: &[f64],
    domain: &Bounds,
    family: KernelFamily,
    opts: &FitOptions,
    rng: &mut R,
) -> Result<FitResult> {
    if xs.len() < 2 {
        return input(format!("hyperparameter fitting needs at least 2 observations, got {}", xs.len()));
    }
    if xs.len() != ys.len() {
        return input("inputs and targets differ in length");
    }
    let d = domain.dim();
    let packing = Packing { d, widths: domain.widths() };
    let log_bounds = packing.log_bounds();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let spread = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;

    let neg_lml = |theta: &[f64]| -> f64 {
        let (kernel, noise) = packing.unpack(theta, family);
        match TaskModel::new(kernel, noise, mean, xs.to_vec(), ys.to_vec()).and_then(|m| m.log_marginal_likelihood()) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    };

    let mut starts = Vec::with_capacity(opts.restarts.max(1));
    match &opts.warm_start {
        Some((k, noise)) if k.dim() == d => starts.push(packing.pack(k, *noise, &log_bounds)),
        _ => {
            let heuristic = KernelParams {
                family,
                amplitude: spread.clamp(AMPLITUDE_RANGE.0, AMPLITUDE_RANGE.1),
                lengthscales: packing.widths.iter().map(|w| 0.2 * w).collect(),
            };
            starts.push(packing.pack(&heuristic, 1e-3 * spread.max(1e-6), &log_bounds));
        }
    }
    while starts.len() < opts.restarts.max(1) {
        let t: Vec<f64> = log_bounds
            .lower
            .iter()
            .zip(&log_bounds.upper)
            .map(|(l, h)| l + rng.random::<f64>() * (h - l))
            .collect();
        starts.push(t);
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut best_start: Option<(Vec<f64>, f64)> = None;
    let mut improved = false;
    for start in starts {
        let f0 = neg_lml(&start);
        if best_start.as_ref().is_none_or(|(_, v)| f0 < *v) {
            best_start = Some((start.clone(), f0));
        }
        let res = minimize(
            &neg_lml,
            &start,
            Some(f0),
            &log_bounds,
            PolishOptions { max_evals: opts.evals_per_restart, initial_step: 0.1, f_tol: 1e-9 },
        );
        if res.value < f0 {
            improved = true;
        }
        if best.as_ref().is_none_or(|(_, v)| res.value < *v) {
            best = Some((res.x, res.value));
        }
    }
    let (theta, value) = best.expect("at least one restart");
    if !value.is_finite() {
        return Err(crate::error::Error::Numerical(
            "log marginal likelihood is not finite at any start point".into(),
        ));
    }
    if !improved {
        log::warn!("hyperparameter fit: no restart improved on its start point");
    }
    let (kernel, noise_variance) = packing.unpack(&theta, family);
    Ok(FitResult { kernel, noise_variance, mean, log_likelihood: -value, improved })
}
