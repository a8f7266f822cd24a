//! Expectation propagation for the latent task values conditioned on the
//! location of the constrained minimizer, and the per-query conditioned
//! predictive marginals built on top of it.
//!
//! For a minimizer sample `x*` and the observed locations `x_1..x_N`, every
//! task carries a Gaussian over its values at the stack `(x*, x_1, .., x_N)`,
//! starting from the GP posterior. Two kinds of factor are approximated:
//!
//! * feasibility, `Θ[c_k(x*)]`, one per constraint;
//! * minimality at each observed point,
//!   `Ψ(x_n) = ∏_k Θ[c_k(x_n)] · Θ[f(x_n) − f(x*)] + (1 − ∏_k Θ[c_k(x_n)])`.
//!
//! Each true factor only varies along a few linear projections of the stacked
//! vectors (`c_k[0]`, `c_k[n]`, `f[n] − f[0]`), so every Gaussian site is a
//! univariate factor on one projection. Tasks stay independent, which keeps
//! the approximation block-diagonal across tasks.
//!
//! The posterior covariance at the stack can be close to singular (noise-free
//! data, `x*` on top of an observation), so nothing here inverts it. With
//! `T`, `h` the summed site precision matrix and shift, the approximation is
//! `V = (I + ΣT)⁻¹Σ`, `m = (I + ΣT)⁻¹(μ + Σh)`, and conditioned predictions
//! at a query are corrections to the plain GP posterior through the
//! posterior cross-covariance `b = cov(f(stack), f(x))`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gp::{CrossCovarianceBasis, GaussianMoments, TaskModel};
use crate::normal::{inv_mills, log1m_exp, log_add_exp, log_cdf, log_pdf};
use crate::state::ProblemState;

#[derive(Clone, Copy, Debug)]
pub struct EpOptions {
    pub damping: f64,
    pub max_sweeps: usize,
    /// Convergence threshold on the largest natural-parameter change.
    pub tolerance: f64,
    /// Step halvings tried when an update breaks positive definiteness.
    pub max_redamp: usize,
}

impl Default for EpOptions {
    fn default() -> Self {
        Self { damping: 0.5, max_sweeps: 200, tolerance: 1e-4, max_redamp: 10 }
    }
}

/// Natural parameters of a univariate Gaussian factor `exp(-τ s²/2 + ν s)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SiteParams {
    pub precision: f64,
    pub shift: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    /// `Θ[c_k(x*)]`
    Feasibility,
    /// One task's share of `Ψ(x_n)`.
    Minimality,
}

/// One Gaussian site acting on `Σ_i weights[i] · task[touched[i]]`.
#[derive(Clone, Debug, Serialize)]
pub struct EpFactor {
    pub kind: FactorKind,
    pub task: usize,
    /// Stack index of the observed point for minimality factors.
    pub point: usize,
    pub touched: Vec<usize>,
    pub weights: Vec<f64>,
    pub params: SiteParams,
    pub last_delta: f64,
}

impl EpFactor {
    fn project_mean(&self, m: &DVector<f64>) -> f64 {
        self.touched.iter().zip(&self.weights).map(|(i, w)| w * m[*i]).sum()
    }

    fn project_var(&self, v: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for (i, wi) in self.touched.iter().zip(&self.weights) {
            for (j, wj) in self.touched.iter().zip(&self.weights) {
                acc += wi * wj * v[(*i, *j)];
            }
        }
        acc
    }
}

/// Per-task part of the approximation.
#[derive(Clone, Debug)]
struct TaskBlock {
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    site_precision: DMatrix<f64>,
    site_shift: DVector<f64>,
    /// `(I + ΣT)⁻¹`
    solve: DMatrix<f64>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// `h − Tμ`
    shift_residual: DVector<f64>,
    basis: CrossCovarianceBasis,
    amplitude: f64,
}

impl TaskBlock {
    fn new(model: &TaskModel, stack: &[Vec<f64>]) -> Result<Self> {
        let (prior_mean, prior_cov) = model.predict_joint(stack)?;
        let p = stack.len();
        Ok(Self {
            mean: prior_mean.clone(),
            cov: prior_cov.clone(),
            prior_mean,
            prior_cov,
            site_precision: DMatrix::zeros(p, p),
            site_shift: DVector::zeros(p),
            solve: DMatrix::identity(p, p),
            shift_residual: DVector::zeros(p),
            basis: model.cross_covariance_basis(stack),
            amplitude: model.kernel().amplitude,
        })
    }

    fn load_sites<'a>(&mut self, sites: impl Iterator<Item = (&'a EpFactor, SiteParams)>) {
        self.site_precision.fill(0.0);
        self.site_shift.fill(0.0);
        for (f, p) in sites {
            for (i, wi) in f.touched.iter().zip(&f.weights) {
                self.site_shift[*i] += p.shift * wi;
                for (j, wj) in f.touched.iter().zip(&f.weights) {
                    self.site_precision[(*i, *j)] += p.precision * wi * wj;
                }
            }
        }
    }

    /// Recomputes `V`, `m` from the loaded sites; false if `V` is not
    /// positive definite to within the eigenvalue floor.
    fn refresh(&mut self) -> bool {
        let p = self.prior_mean.len();
        let a = DMatrix::identity(p, p) + &self.prior_cov * &self.site_precision;
        let Some(solve) = a.try_inverse() else {
            return false;
        };
        let mut cov = &solve * &self.prior_cov;
        crate::linalg::symmetrize(&mut cov);
        let mut shifted = cov.clone();
        for i in 0..p {
            shifted[(i, i)] += 1e-8 * self.amplitude;
        }
        if !cov.iter().all(|v| v.is_finite()) || Cholesky::new(shifted).is_none() {
            return false;
        }
        self.mean = &solve * (&self.prior_mean + &self.prior_cov * &self.site_shift);
        self.shift_residual = &self.site_shift - &self.site_precision * &self.prior_mean;
        self.solve = solve;
        self.cov = cov;
        true
    }
}

/// Result of EP for one minimizer sample. Immutable after construction and
/// reused for every query location.
#[derive(Clone, Debug)]
pub struct EpApproximation {
    xstar: Vec<f64>,
    stack: Vec<Vec<f64>>,
    blocks: Vec<TaskBlock>,
    factors: Vec<EpFactor>,
    converged: bool,
    iterations: usize,
}

/// Log-normalizer derivatives of `Ψ` with respect to the cavity means.
#[derive(Clone, Debug)]
pub struct PsiDerivatives {
    pub log_z: f64,
    /// First and second derivative with respect to the mean of `f(x) − f(x*)`.
    pub objective: (f64, f64),
    pub constraints: Vec<(f64, f64)>,
}

/// Derivatives of `log Z`, `Z = E[Ψ]`, under independent Gaussians for the
/// objective difference `s = f(x) − f(x*)` and each constraint value.
pub fn psi_derivatives(s: (f64, f64), constraints: &[(f64, f64)]) -> PsiDerivatives {
    let (s_mean, s_var) = s;
    // a degenerate difference (x on top of x*) is nonnegative by Θ(0) = 1
    let alpha = if s_var > 0.0 {
        s_mean / s_var.sqrt()
    } else if s_mean >= 0.0 {
        f64::INFINITY
    } else {
        f64::NEG_INFINITY
    };
    let betas: Vec<f64> = constraints.iter().map(|(m, v)| m / v.sqrt()).collect();
    let log_p: Vec<f64> = betas.iter().map(|b| log_cdf(*b)).collect();
    let log_pc: f64 = log_p.iter().sum();
    let log_phi_a = log_cdf(alpha);
    let log_phi_na = log_cdf(-alpha);
    let log_z = log_add_exp(log1m_exp(log_pc), log_pc + log_phi_a);

    let objective = if alpha.is_finite() {
        let r = (log_pc + log_pdf(alpha) - log_z).exp();
        (r / s_var.sqrt(), -(r * alpha + r * r) / s_var)
    } else {
        (0.0, 0.0)
    };
    let constraints = constraints
        .iter()
        .zip(betas.iter().zip(&log_p))
        .map(|((_, v), (beta, lp))| {
            let e = (log_pc - lp + log_phi_na + log_pdf(*beta) - log_z).exp();
            (-e / v.sqrt(), (e * beta - e * e) / v)
        })
        .collect();
    PsiDerivatives { log_z, objective, constraints }
}

/// Moments after multiplying `N(mean, var)` by a factor with the given
/// log-normalizer derivatives.
#[inline]
fn tilt(mean: f64, var: f64, (d1, d2): (f64, f64)) -> (f64, f64) {
    (mean + var * d1, var + var * var * d2)
}

/// Site update that moves the cavity onto the tilted moments; `None` when
/// either distribution is improper.
fn site_from_tilted(cavity: (f64, f64), tilted: (f64, f64)) -> Option<SiteParams> {
    let (cm, cv) = cavity;
    let (tm, tv) = tilted;
    if !(cv > 0.0 && tv > 0.0 && tm.is_finite() && tv.is_finite()) {
        return None;
    }
    Some(SiteParams { precision: 1.0 / tv - 1.0 / cv, shift: tm / tv - cm / cv })
}

fn cavity(marginal: (f64, f64), site: SiteParams) -> Option<(f64, f64)> {
    let (m, v) = marginal;
    let prec = 1.0 / v - site.precision;
    if !(prec > 0.0 && v > 0.0) {
        return None;
    }
    let var = 1.0 / prec;
    Some((var * (m / v - site.shift), var))
}

/// Cavity variances below this (relative to the amplitude) mark a projection
/// that is pinned by the data; its factor is left inert.
const PINNED_VARIANCE: f64 = 1e-12;

/// Builds the EP approximation conditioned on the constrained minimizer
/// being at `xstar`.
pub fn build_ep_approximation(state: &ProblemState, xstar: &[f64], opts: &EpOptions) -> Result<EpApproximation> {
    if xstar.len() != state.dim() {
        return Err(Error::Input(format!("x* has dimension {} but the domain has {}", xstar.len(), state.dim())));
    }
    let mut stack = vec![xstar.to_vec()];
    stack.extend(state.observed_union());
    let n_points = stack.len();
    let k_count = state.num_constraints();

    let mut blocks = state.tasks().iter().map(|t| TaskBlock::new(t, &stack)).collect::<Result<Vec<_>>>()?;

    let mut factors = Vec::new();
    for k in 1..=k_count {
        factors.push(EpFactor {
            kind: FactorKind::Feasibility,
            task: k,
            point: 0,
            touched: vec![0],
            weights: vec![1.0],
            params: SiteParams::default(),
            last_delta: 0.0,
        });
    }
    for n in 1..n_points {
        factors.push(EpFactor {
            kind: FactorKind::Minimality,
            task: 0,
            point: n,
            touched: vec![n, 0],
            weights: vec![1.0, -1.0],
            params: SiteParams::default(),
            last_delta: 0.0,
        });
        for k in 1..=k_count {
            factors.push(EpFactor {
                kind: FactorKind::Minimality,
                task: k,
                point: n,
                touched: vec![n],
                weights: vec![1.0],
                params: SiteParams::default(),
                last_delta: 0.0,
            });
        }
    }
    // minimality factors are grouped per point: objective part, then constraints
    let group_start = k_count;
    let group_len = 1 + k_count;

    let mut converged = factors.is_empty();
    let mut iterations = 0;
    while !converged && iterations < opts.max_sweeps {
        iterations += 1;
        let targets = sweep_targets(&blocks, &factors, k_count, group_start, group_len);

        let mut step = opts.damping;
        let mut accepted = false;
        for _ in 0..=opts.max_redamp {
            let proposal: Vec<SiteParams> = factors
                .iter()
                .zip(&targets)
                .map(|(f, t)| match t {
                    Some(t) => SiteParams {
                        precision: f.params.precision + step * (t.precision - f.params.precision),
                        shift: f.params.shift + step * (t.shift - f.params.shift),
                    },
                    None => f.params,
                })
                .collect();
            let mut ok = true;
            for (task, block) in blocks.iter_mut().enumerate() {
                block.load_sites(
                    factors.iter().zip(&proposal).filter(|(f, _)| f.task == task).map(|(f, p)| (f, *p)),
                );
                if !block.refresh() {
                    ok = false;
                    break;
                }
            }
            if ok {
                let mut max_delta: f64 = 0.0;
                for (f, p) in factors.iter_mut().zip(&proposal) {
                    let d = (p.precision - f.params.precision).abs().max((p.shift - f.params.shift).abs());
                    f.last_delta = d;
                    max_delta = max_delta.max(d);
                    f.params = *p;
                }
                converged = max_delta < opts.tolerance;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // restore the last good state before reporting
            for (task, block) in blocks.iter_mut().enumerate() {
                block.load_sites(factors.iter().filter(|f| f.task == task).map(|f| (f, f.params)));
                block.refresh();
            }
            return Err(Error::Numerical(format!(
                "EP covariance lost positive definiteness at sweep {iterations} for x* = {xstar:?}; sites: {}",
                serde_json::to_string(&factors).unwrap_or_default()
            )));
        }
    }
    if !converged {
        log::debug!("EP hit the sweep cap ({}) without converging", opts.max_sweeps);
    }
    Ok(EpApproximation { xstar: xstar.to_vec(), stack, blocks, factors, converged, iterations })
}

/// Undamped moment-matching targets for every factor under the current
/// approximation (parallel EP).
fn sweep_targets(
    blocks: &[TaskBlock],
    factors: &[EpFactor],
    k_count: usize,
    group_start: usize,
    group_len: usize,
) -> Vec<Option<SiteParams>> {
    let mut targets = vec![None; factors.len()];
    for (idx, f) in factors[..group_start].iter().enumerate() {
        let b = &blocks[f.task];
        let marginal = (f.project_mean(&b.mean), f.project_var(&b.cov));
        targets[idx] = cavity(marginal, f.params).and_then(|(cm, cv)| {
            if cv < PINNED_VARIANCE * b.amplitude {
                return None;
            }
            let sd = cv.sqrt();
            let beta = cm / sd;
            let lambda = inv_mills(beta);
            let d1 = lambda / sd;
            let d2 = -lambda * (beta + lambda) / cv;
            site_from_tilted((cm, cv), tilt(cm, cv, (d1, d2)))
        });
    }
    for (g, group) in factors[group_start..].chunks(group_len).enumerate() {
        let base = group_start + g * group_len;
        let cavities: Vec<Option<(f64, f64)>> = group
            .iter()
            .map(|f| {
                let b = &blocks[f.task];
                cavity((f.project_mean(&b.mean), f.project_var(&b.cov)), f.params)
            })
            .collect();
        if cavities.iter().any(|c| c.is_none()) {
            continue;
        }
        let cavities: Vec<(f64, f64)> = cavities.into_iter().flatten().collect();
        let (s_cav, c_cav) = cavities.split_first().expect("objective part present");
        let pinned = s_cav.1 < PINNED_VARIANCE * blocks[0].amplitude;
        let derivs = psi_derivatives(if pinned { (s_cav.0.max(0.0), 0.0) } else { *s_cav }, c_cav);
        if !derivs.log_z.is_finite() {
            continue;
        }
        if !pinned {
            targets[base] = site_from_tilted(*s_cav, tilt(s_cav.0, s_cav.1, derivs.objective));
        }
        for k in 0..k_count {
            let (cm, cv) = c_cav[k];
            if cv < PINNED_VARIANCE * blocks[k + 1].amplitude {
                continue;
            }
            targets[base + 1 + k] = site_from_tilted((cm, cv), tilt(cm, cv, derivs.constraints[k]));
        }
    }
    targets
}

/// Joint Gaussian over `(f(x), f(x*))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectivePair {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

/// Marginals of the conditioned predictive distribution of the noise-free
/// task values at one query.
#[derive(Clone, Debug, PartialEq)]
pub struct CpdMarginals {
    /// Objective first, then constraints.
    pub tasks: Vec<GaussianMoments>,
    /// Some variance had to be clamped at the floor.
    pub clamped: bool,
    pub log_normalizer: f64,
}

/// The query is incompatible with the minimizer sample under the
/// approximation (normalizer underflows).
#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
#[error("inconsistent conditioning: log normalizer {log_normalizer}")]
pub struct InconsistentConditioning {
    pub log_normalizer: f64,
}

const CPD_VARIANCE_FLOOR: f64 = 1e-12;
/// `ln(1e-300)`
const MIN_LOG_NORMALIZER: f64 = -690.775_527_898_213_7;

/// Projects `N([z0, f0]) ∏ N(z_k) · Ψ(x)` onto independent Gaussians with the
/// same marginal means and variances.
pub fn moment_match_mixture(
    pair: &ObjectivePair,
    constraints: &[GaussianMoments],
) -> std::result::Result<CpdMarginals, InconsistentConditioning> {
    let [mz, mf] = pair.mean;
    let [[czz, czf], [_, cff]] = pair.cov;
    let s_mean = mz - mf;
    let s_var = czz + cff - 2.0 * czf;
    let pinned = s_var <= PINNED_VARIANCE * czz.max(cff).max(f64::MIN_POSITIVE);
    let s = if pinned { (s_mean.max(0.0), 0.0) } else { (s_mean, s_var) };
    let cons: Vec<(f64, f64)> = constraints.iter().map(|g| (g.mean, g.variance)).collect();
    let d = psi_derivatives(s, &cons);
    if !(d.log_z >= MIN_LOG_NORMALIZER) {
        return Err(InconsistentConditioning { log_normalizer: d.log_z });
    }
    let mut clamped = false;
    let mut floor = |v: f64| {
        if v < CPD_VARIANCE_FLOOR || !v.is_finite() {
            clamped = true;
            CPD_VARIANCE_FLOOR
        } else {
            v
        }
    };
    // Σu with u = (1, -1) picks out cov(z0, s)
    let lever = czz - czf;
    let (d1, d2) = d.objective;
    let mut tasks = vec![GaussianMoments { mean: mz + lever * d1, variance: floor(czz + lever * lever * d2) }];
    for (g, dk) in constraints.iter().zip(&d.constraints) {
        let (m, v) = tilt(g.mean, g.variance, *dk);
        tasks.push(GaussianMoments { mean: m, variance: floor(v) });
    }
    Ok(CpdMarginals { tasks, clamped, log_normalizer: d.log_z })
}

/// Per-task view of the approximation over the stack.
#[derive(Clone, Debug, Serialize)]
pub struct SiteDump {
    pub index: usize,
    pub kind: FactorKind,
    pub task: usize,
    pub touched: Vec<usize>,
    pub weights: Vec<f64>,
    pub precision: f64,
    pub shift: f64,
    pub last_delta: f64,
}

impl EpApproximation {
    pub fn xstar(&self) -> &[f64] {
        &self.xstar
    }

    /// `(x*, x_1, .., x_N)`
    pub fn stack(&self) -> &[Vec<f64>] {
        &self.stack
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn factors(&self) -> &[EpFactor] {
        &self.factors
    }

    /// Mean of task `k` over the stack.
    pub fn mean(&self, task: usize) -> &DVector<f64> {
        &self.blocks[task].mean
    }

    /// Covariance of task `k` over the stack.
    pub fn covariance(&self, task: usize) -> &DMatrix<f64> {
        &self.blocks[task].cov
    }

    /// The GP posterior over the stack the approximation started from.
    pub fn prior(&self, task: usize) -> (&DVector<f64>, &DMatrix<f64>) {
        (&self.blocks[task].prior_mean, &self.blocks[task].prior_cov)
    }

    /// Diagnostic dump of all sites as JSON.
    pub fn site_dump(&self) -> serde_json::Value {
        let sites: Vec<SiteDump> = self
            .factors
            .iter()
            .enumerate()
            .map(|(index, f)| SiteDump {
                index,
                kind: f.kind,
                task: f.task,
                touched: f.touched.clone(),
                weights: f.weights.clone(),
                precision: f.params.precision,
                shift: f.params.shift,
                last_delta: f.last_delta,
            })
            .collect();
        serde_json::json!({
            "xstar": self.xstar,
            "converged": self.converged,
            "iterations": self.iterations,
            "sites": sites,
        })
    }

    /// Approximate moments of the task values at `x` before the `Ψ(x)`
    /// factor is applied: the objective pair `(f(x), f(x*))` and each
    /// constraint value.
    pub fn conditioned_moments(&self, state: &ProblemState, x: &[f64]) -> (ObjectivePair, Vec<GaussianMoments>) {
        let mut pair = None;
        let mut cons = Vec::with_capacity(self.blocks.len() - 1);
        for (k, (block, model)) in self.blocks.iter().zip(state.tasks()).enumerate() {
            let (b, pd) = block.basis.at(model, x);
            let c = &block.solve * &b;
            let mean = pd.mean + c.dot(&block.shift_residual);
            let variance = pd.variance - b.dot(&(&block.site_precision * &c));
            if k == 0 {
                pair = Some(ObjectivePair {
                    mean: [mean, block.mean[0]],
                    cov: [[variance, c[0]], [c[0], block.cov[(0, 0)]]],
                });
            } else {
                cons.push(GaussianMoments { mean, variance });
            }
        }
        (pair.expect("objective task"), cons)
    }

    /// Marginals of the conditioned predictive distribution at `x`.
    pub fn cpd_marginals(
        &self,
        state: &ProblemState,
        x: &[f64],
    ) -> std::result::Result<CpdMarginals, InconsistentConditioning> {
        let (mut pair, mut cons) = self.conditioned_moments(state, x);
        let floor = CPD_VARIANCE_FLOOR;
        pair.cov[0][0] = pair.cov[0][0].max(floor);
        for c in &mut cons {
            c.variance = c.variance.max(floor);
        }
        moment_match_mixture(&pair, &cons)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Bounds;
    use crate::kernel::KernelParams;
    use crate::normal::truncated_below_zero;

    fn se(noise: f64, xs: Vec<Vec<f64>>, ys: Vec<f64>) -> TaskModel {
        TaskModel::new(KernelParams::isotropic_se(1.0, 0.2, 1), noise, 0.0, xs, ys).unwrap()
    }

    #[test]
    fn feasibility_only_gives_truncated_moments() {
        let f = se(0.01, vec![], vec![]);
        let c = TaskModel::new(KernelParams::isotropic_se(1.0, 0.2, 1), 0.01, -0.3, vec![], vec![]).unwrap();
        let state = ProblemState::new(Bounds::unit(1), vec![f, c]).unwrap();
        let ep = build_ep_approximation(&state, &[0.5], &EpOptions { tolerance: 1e-10, ..Default::default() }).unwrap();
        assert!(ep.converged());
        let (m, v) = truncated_below_zero(-0.3, 1.0);
        assert!((ep.mean(1)[0] - m).abs() < 1e-6);
        assert!((ep.covariance(1)[(0, 0)] - v).abs() < 1e-6);
    }

    #[test]
    fn far_separated_minimality_factors_are_inert() {
        // f(x*) sits ≥ 10σ below f(x_1) and the two are uncorrelated
        let f = se(0.01, vec![vec![0.0]], vec![12.0]);
        let state = ProblemState::new(Bounds::unit(1), vec![f]).unwrap();
        let ep = build_ep_approximation(&state, &[1.0], &EpOptions::default()).unwrap();
        let (pm, pc) = ep.prior(0);
        assert!((ep.mean(0) - pm).amax() < 1e-6);
        assert!((ep.covariance(0) - pc).amax() < 1e-6);
    }

    #[test]
    fn saturated_constraint_is_untouched_by_the_final_projection() {
        let pair = ObjectivePair { mean: [0.0, 0.0], cov: [[1.0, 0.0], [0.0, 1.0]] };
        let out = moment_match_mixture(&pair, &[GaussianMoments { mean: 10.0, variance: 1.0 }]).unwrap();
        assert!((out.tasks[1].mean - 10.0).abs() < 1e-6);
        assert!((out.tasks[1].variance - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hopeless_constraint_leaves_everything_unchanged() {
        // feasibility probability ~0: Ψ(x) ≈ 1
        let pair = ObjectivePair { mean: [0.3, 0.1], cov: [[0.8, 0.2], [0.2, 0.5]] };
        let c = GaussianMoments { mean: -40.0, variance: 1.0 };
        let out = moment_match_mixture(&pair, &[c]).unwrap();
        assert!((out.tasks[0].mean - 0.3).abs() < 1e-12);
        assert!((out.tasks[0].variance - 0.8).abs() < 1e-12);
        assert!((out.tasks[1].mean - c.mean).abs() < 1e-12);
        assert!((out.tasks[1].variance - c.variance).abs() < 1e-12);
    }

    #[test]
    fn underflowing_normalizer_is_reported() {
        // z0 must exceed f0 but sits 60σ below it, with certain feasibility
        let pair = ObjectivePair { mean: [-60.0, 0.0], cov: [[0.5, 0.0], [0.0, 0.5]] };
        let err = moment_match_mixture(&pair, &[]).unwrap_err();
        assert!(err.log_normalizer < MIN_LOG_NORMALIZER);
    }

    #[test]
    fn query_at_data_free_region_matches_posterior_when_unconditioned() {
        let f = se(0.01, vec![vec![0.2], vec![0.7]], vec![0.5, -0.3]);
        let c = se(0.01, vec![vec![0.2], vec![0.7]], vec![0.4, 0.1]);
        let state = ProblemState::new(Bounds::unit(1), vec![f.clone(), c.clone()]).unwrap();
        let ep = build_ep_approximation(&state, &[0.65], &EpOptions::default()).unwrap();
        // with the sites zeroed the corrections must vanish
        let mut bare = ep.clone();
        for (task, block) in bare.blocks.iter_mut().enumerate() {
            let _ = task;
            block.site_precision.fill(0.0);
            block.site_shift.fill(0.0);
            assert!(block.refresh());
        }
        let (pair, cons) = bare.conditioned_moments(&state, &[0.33]);
        let pf = f.predict(&[0.33]).unwrap();
        let pc = c.predict(&[0.33]).unwrap();
        assert!((pair.mean[0] - pf.mean).abs() < 1e-12);
        assert!((pair.cov[0][0] - pf.variance).abs() < 1e-12);
        assert!((cons[0].mean - pc.mean).abs() < 1e-12);
        assert!((cons[0].variance - pc.variance).abs() < 1e-12);
    }

    #[test]
    fn cpd_is_pure_across_call_order() {
        let f = se(0.01, vec![vec![0.1], vec![0.5], vec![0.9]], vec![0.2, -0.4, 0.3]);
        let c = se(0.01, vec![vec![0.1], vec![0.5], vec![0.9]], vec![0.5, -0.2, 0.6]);
        let state = ProblemState::new(Bounds::unit(1), vec![f, c]).unwrap();
        let ep = build_ep_approximation(&state, &[0.45], &EpOptions::default()).unwrap();
        let a1 = ep.cpd_marginals(&state, &[0.3]).unwrap();
        let b1 = ep.cpd_marginals(&state, &[0.8]).unwrap();
        let b2 = ep.cpd_marginals(&state, &[0.8]).unwrap();
        let a2 = ep.cpd_marginals(&state, &[0.3]).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn site_dump_lists_every_factor() {
        let f = se(0.01, vec![vec![0.1], vec![0.9]], vec![0.2, 0.3]);
        let c = se(0.01, vec![vec![0.1], vec![0.9]], vec![0.5, 0.6]);
        let state = ProblemState::new(Bounds::unit(1), vec![f, c]).unwrap();
        let ep = build_ep_approximation(&state, &[0.5], &EpOptions::default()).unwrap();
        let dump = ep.site_dump();
        // one feasibility site plus (objective + constraint) per observed point
        assert_eq!(dump["sites"].as_array().unwrap().len(), 1 + 2 * 2);
        assert!(dump["sites"][1]["touched"].is_array());
    }
}
