//! Benchmark problems, the recommendation rule, the utility-gap metric and
//! the Bayesian-optimization loop that ties everything together.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    acquisition_candidates, eic_acquisition, maximize_acquisition, pesc_acquisition, pesc_decoupled_select,
    rsdg_acquisition, AcquisitionContext, Incumbent, MaximizeOptions, RejectionEstimator,
};
use crate::domain::Bounds;
use crate::ep::EpOptions;
use crate::error::{config, input, Error, Result};
use crate::fit::{fit_hyperparameters, FitOptions};
use crate::gp::TaskModel;
use crate::kernel::{KernelFamily, KernelParams};
use crate::linalg::cholesky_with_jitter;
use crate::local::{minimize, PolishOptions};
use crate::normal::cdf;
use crate::qmc::{halton, halton_in};
use crate::sampling::{draw_minimizer_batch, MinimizerSearch};
use crate::state::ProblemState;

pub use crate::qmc::latin_hypercube;

/// Location and value of the true constrained minimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueOptimum {
    pub location: Vec<f64>,
    pub value: f64,
}

/// A constrained minimization problem with known ground truth. Task 0 is the
/// objective, tasks `1..=K` the constraints `c_k(x) ≥ 0`.
pub trait Problem: Send + Sync {
    fn name(&self) -> String;
    fn bounds(&self) -> &Bounds;
    fn num_constraints(&self) -> usize;
    /// Noise-free value of a task.
    fn value(&self, task: usize, x: &[f64]) -> f64;
    fn noise_variance(&self, task: usize) -> f64;
    /// Kernel, noise variance and prior mean the problem was generated with.
    fn known_model(&self, task: usize) -> Option<(KernelParams, f64, f64)>;
    fn optimum(&self) -> &TrueOptimum;
    /// Utility assigned to infeasible or missing recommendations: the largest
    /// objective value over the validation set.
    fn penalty(&self) -> f64;

    fn is_feasible(&self, x: &[f64]) -> bool {
        (1..=self.num_constraints()).all(|k| self.value(k, x) >= 0.0)
    }
}

/// `u(x) = f(x)` for a feasible recommendation, otherwise the penalty.
pub fn utility(problem: &dyn Problem, recommendation: Option<&[f64]>) -> f64 {
    match recommendation {
        Some(x) if problem.is_feasible(x) => problem.value(0, x),
        _ => problem.penalty(),
    }
}

/// `|u(x_rec) − u(x*)|`
pub fn utility_gap(problem: &dyn Problem, recommendation: Option<&[f64]>) -> f64 {
    (utility(problem, recommendation) - problem.optimum().value).abs()
}

/// Validation set used for the true optimum and the penalty: a regular grid
/// in one and two dimensions, Halton points beyond.
fn validation_points(d: usize) -> Vec<Vec<f64>> {
    match d {
        1 => (0..10_000).map(|i| vec![i as f64 / 9_999.0]).collect(),
        2 => grid_2d(500),
        _ => halton(100_000, d),
    }
}

fn grid_2d(side: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..side).map(|i| i as f64 / (side - 1) as f64).collect();
    let mut out = Vec::with_capacity(side * side);
    for a in &axis {
        for b in &axis {
            out.push(vec![*a, *b]);
        }
    }
    out
}

/// Minimum of the objective over feasible validation points, refined
/// locally, and the penalty. `None` when no validation point is feasible.
fn locate_optimum(
    problem: &dyn Problem,
    points: &[Vec<f64>],
    values: &[Vec<f64>],
) -> Option<(TrueOptimum, f64)> {
    let penalty = values[0].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in values[0].iter().enumerate() {
        if values[1..].iter().all(|c| c[i] >= 0.0) && best.is_none_or(|(_, b)| *f < b) {
            best = Some((i, *f));
        }
    }
    let (i, f) = best?;
    let r = minimize(
        |x: &[f64]| if problem.is_feasible(x) { problem.value(0, x) } else { f64::INFINITY },
        &points[i],
        Some(f),
        problem.bounds(),
        PolishOptions { max_evals: 200, initial_step: 1e-3, f_tol: 1e-14 },
    );
    Some((TrueOptimum { location: r.x, value: r.value }, penalty.max(r.value)))
}

/// Objective and constraints drawn from a zero-mean GP prior (squared
/// exponential, unit amplitude, lengthscale 0.1) on 1000 Halton points and
/// represented by the resulting posterior mean.
#[derive(Clone, Debug)]
pub struct SyntheticProblem {
    dim: usize,
    num_constraints: usize,
    seed: u64,
    bounds: Bounds,
    kernel: KernelParams,
    design: Vec<Vec<f64>>,
    /// Representer weights per task.
    weights: Vec<DVector<f64>>,
    noise: f64,
    optimum: TrueOptimum,
    penalty: f64,
}

pub const SYNTHETIC_LENGTHSCALE: f64 = 0.1;
pub const SYNTHETIC_NOISE: f64 = 0.01;
const SYNTHETIC_DESIGN: usize = 1000;
const SYNTHETIC_JITTER: f64 = 1e-6;

/// Deterministic synthetic problem for `(d, K, seed)`. Draws without a
/// feasible validation point are discarded and redrawn on the next stream.
pub fn make_synthetic_problem(d: usize, k: usize, seed: u64) -> Result<SyntheticProblem> {
    if d == 0 || k == 0 {
        return input("synthetic problems need d ≥ 1 and K ≥ 1");
    }
    if d > 16 {
        return input("synthetic problems support at most 16 dimensions");
    }
    let kernel = KernelParams::isotropic_se(1.0, SYNTHETIC_LENGTHSCALE, d);
    let design = halton(SYNTHETIC_DESIGN, d);
    let mut gram = kernel.gram(&design);
    for i in 0..design.len() {
        gram[(i, i)] += SYNTHETIC_JITTER;
    }
    let chol = cholesky_with_jitter(&gram, 1.0)?;
    let l = chol.factor.l();
    let points = validation_points(d);
    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let weights: Vec<DVector<f64>> = (0..=k)
            .map(|_| {
                let z = DVector::from_fn(design.len(), |_, _| StandardNormal.sample(&mut rng));
                chol.factor.solve(&(&l * z))
            })
            .collect();
        let mut problem = SyntheticProblem {
            dim: d,
            num_constraints: k,
            seed,
            bounds: Bounds::unit(d),
            kernel: kernel.clone(),
            design: design.clone(),
            weights,
            noise: SYNTHETIC_NOISE,
            optimum: TrueOptimum { location: vec![], value: 0.0 },
            penalty: 0.0,
        };
        let values: Vec<Vec<f64>> = (0..=k).map(|t| problem.values_on(t, &points)).collect();
        if let Some((opt, penalty)) = locate_optimum(&problem, &points, &values) {
            problem.optimum = opt;
            problem.penalty = penalty;
            return Ok(problem);
        }
        log::debug!("synthetic problem seed {seed}: draw {attempt} has no feasible point, redrawing");
    }
    Err(Error::Numerical(format!("no feasible synthetic problem found for seed {seed}")))
}

impl SyntheticProblem {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Task values at many points. Two-dimensional grids use the separable
    /// form of the squared exponential kernel.
    fn values_on(&self, task: usize, points: &[Vec<f64>]) -> Vec<f64> {
        let w = &self.weights[task];
        if self.dim == 2 && points.len() == 500 * 500 {
            let side = 500;
            let axis: Vec<f64> = (0..side).map(|i| i as f64 / (side - 1) as f64).collect();
            let scale = -0.5 / (SYNTHETIC_LENGTHSCALE * SYNTHETIC_LENGTHSCALE);
            let a = DMatrix::from_fn(side, self.design.len(), |i, g| {
                let r = axis[i] - self.design[g][0];
                (scale * r * r).exp() * w[g]
            });
            let b = DMatrix::from_fn(self.design.len(), side, |g, j| {
                let r = axis[j] - self.design[g][1];
                (scale * r * r).exp()
            });
            let m = a * b;
            // grid_2d is row-major in the first coordinate
            let mut out = Vec::with_capacity(side * side);
            for i in 0..side {
                for j in 0..side {
                    out.push(m[(i, j)]);
                }
            }
            return out;
        }
        points.iter().map(|x| self.value(task, x)).collect()
    }
}

impl Problem for SyntheticProblem {
    fn name(&self) -> String {
        format!("synthetic-d{}-k{}", self.dim, self.num_constraints)
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn num_constraints(&self) -> usize {
        self.num_constraints
    }

    fn value(&self, task: usize, x: &[f64]) -> f64 {
        self.design.iter().zip(self.weights[task].iter()).map(|(g, w)| w * self.kernel.k(g, x)).sum()
    }

    fn noise_variance(&self, _task: usize) -> f64 {
        self.noise
    }

    fn known_model(&self, _task: usize) -> Option<(KernelParams, f64, f64)> {
        Some((self.kernel.clone(), self.noise, 0.0))
    }

    fn optimum(&self) -> &TrueOptimum {
        &self.optimum
    }

    fn penalty(&self) -> f64 {
        self.penalty
    }
}

/// Minimize `x1 + x2` on the unit square subject to
/// `c1 = 0.5 sin(2π(x1² − 2x2)) + x1 + 2x2 − 1.5 ≥ 0` and
/// `c2 = −x1² − x2² + 1.5 ≥ 0`. Evaluations are noise-free.
#[derive(Clone, Debug)]
pub struct ToyProblem {
    bounds: Bounds,
    optimum: TrueOptimum,
    penalty: f64,
}

impl ToyProblem {
    pub fn new() -> Self {
        let mut p = ToyProblem {
            bounds: Bounds::unit(2),
            optimum: TrueOptimum { location: vec![], value: 0.0 },
            penalty: 0.0,
        };
        let points = grid_2d(500);
        let values: Vec<Vec<f64>> = (0..3).map(|t| points.iter().map(|x| p.value(t, x)).collect()).collect();
        let (opt, penalty) = locate_optimum(&p, &points, &values).expect("toy problem has feasible points");
        p.optimum = opt;
        p.penalty = penalty;
        p
    }

    pub fn objective(x: &[f64]) -> f64 {
        x[0] + x[1]
    }

    pub fn c1(x: &[f64]) -> f64 {
        0.5 * (2.0 * std::f64::consts::PI * (x[0] * x[0] - 2.0 * x[1])).sin() + x[0] + 2.0 * x[1] - 1.5
    }

    pub fn c2(x: &[f64]) -> f64 {
        -x[0] * x[0] - x[1] * x[1] + 1.5
    }
}

impl Default for ToyProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl Problem for ToyProblem {
    fn name(&self) -> String {
        "toy".into()
    }

    fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn num_constraints(&self) -> usize {
        2
    }

    fn value(&self, task: usize, x: &[f64]) -> f64 {
        match task {
            0 => Self::objective(x),
            1 => Self::c1(x),
            2 => Self::c2(x),
            _ => panic!("toy problem has tasks 0..=2, asked for {task}"),
        }
    }

    fn noise_variance(&self, _task: usize) -> f64 {
        0.0
    }

    fn known_model(&self, _task: usize) -> Option<(KernelParams, f64, f64)> {
        None
    }

    fn optimum(&self) -> &TrueOptimum {
        &self.optimum
    }

    fn penalty(&self) -> f64 {
        self.penalty
    }
}

/// Per-constraint confidence levels: a location qualifies when
/// `Φ(μ_k/σ_k) ≥ 1 − δ_k` for every constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationPolicy {
    pub deltas: Vec<f64>,
    pub candidates: usize,
    pub polish_evals: usize,
}

impl RecommendationPolicy {
    pub fn new(deltas: Vec<f64>) -> Result<Self> {
        if let Some(d) = deltas.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return input(format!("confidence levels must lie in (0, 1), got {d}"));
        }
        Ok(Self { deltas, candidates: 1000, polish_evals: 100 })
    }

    /// Whether `x` passes the probabilistic feasibility rule.
    pub fn qualifies(&self, state: &ProblemState, x: &[f64]) -> bool {
        state.constraints().iter().zip(&self.deltas).all(|(c, d)| {
            let p = c.predict_unchecked(x);
            cdf(p.mean / p.variance.sqrt()) >= 1.0 - d
        })
    }
}

/// Location with the lowest posterior objective mean among those passing
/// the policy; `None` when nothing qualifies.
pub fn recommend(state: &ProblemState, policy: &RecommendationPolicy) -> Result<Option<Vec<f64>>> {
    if policy.deltas.len() != state.num_constraints() {
        return input(format!(
            "{} confidence levels for {} constraints",
            policy.deltas.len(),
            state.num_constraints()
        ));
    }
    let mut candidates = halton_in(state.bounds(), policy.candidates);
    candidates.extend(state.observed_union());
    let objective = state.objective();
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in candidates.iter().enumerate() {
        if policy.qualifies(state, x) {
            let m = objective.predict_mean(x);
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((i, m));
            }
        }
    }
    let Some((i, m)) = best else {
        return Ok(None);
    };
    let r = minimize(
        |x: &[f64]| if policy.qualifies(state, x) { objective.predict_mean(x) } else { f64::INFINITY },
        &candidates[i],
        Some(m),
        state.bounds(),
        PolishOptions { max_evals: policy.polish_evals, initial_step: 0.01, f_tol: 1e-12 },
    );
    Ok(Some(r.x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pesc,
    Eic,
    Rsdg,
    Rs,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Pesc => "pesc",
            Method::Eic => "eic",
            Method::Rsdg => "rsdg",
            Method::Rs => "rs",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pesc" => Ok(Method::Pesc),
            "eic" => Ok(Method::Eic),
            "rsdg" => Ok(Method::Rsdg),
            "rs" => Ok(Method::Rs),
            other => input(format!("unknown method {other:?} (expected pesc, eic, rsdg or rs)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperparameterMode {
    /// Use the kernel and noise the problem was generated with.
    Fixed,
    /// Maximum-likelihood fit at every iteration.
    Ml,
}

/// Knobs of one optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    /// Total function evaluations, including the initial design.
    pub evaluations: usize,
    pub initial_points: usize,
    /// Minimizer samples per iteration (PESC and RSDG).
    pub minimizer_samples: usize,
    /// Random features per task when sampling minimizers.
    pub features: usize,
    pub sampler_candidates: usize,
    pub sampler_polish_evals: usize,
    pub acquisition_candidates: usize,
    pub polish_starts: usize,
    pub polish_evals: usize,
    /// Joint function draws for RS and RSDG.
    pub rs_samples: usize,
    /// Points per axis of the RS grid.
    pub rs_grid: usize,
    /// Same confidence level for every constraint.
    pub delta: f64,
    pub recommendation_candidates: usize,
    pub hyperparameters: HyperparameterMode,
    pub kernel: KernelFamily,
    pub fit_restarts: usize,
    pub fit_evals: usize,
    /// Evaluate one task per iteration (PESC only).
    pub decoupled: bool,
    /// Record per-iteration wall time. Off by default so traces stay
    /// byte-identical across runs.
    pub record_timing: bool,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            evaluations: 30,
            initial_points: 3,
            minimizer_samples: 50,
            features: 1000,
            sampler_candidates: 1000,
            sampler_polish_evals: 100,
            acquisition_candidates: 1000,
            polish_starts: 5,
            polish_evals: 100,
            rs_samples: 2000,
            rs_grid: 200,
            delta: 0.05,
            recommendation_candidates: 1000,
            hyperparameters: HyperparameterMode::Fixed,
            kernel: KernelFamily::SquaredExponential,
            fit_restarts: 10,
            fit_evals: 150,
            decoupled: false,
            record_timing: false,
        }
    }
}

impl BoConfig {
    pub fn validate(&self, method: Method, dim: usize) -> Result<()> {
        if self.initial_points == 0 {
            return config("initial_points", "need at least one initial point");
        }
        if self.evaluations < self.initial_points {
            return config("evaluations", format!("must be at least initial_points ({})", self.initial_points));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return config("delta", format!("must lie in (0, 1), got {}", self.delta));
        }
        if matches!(method, Method::Pesc | Method::Rsdg) {
            if self.minimizer_samples == 0 {
                return config("minimizer_samples", "must be positive");
            }
            if self.features == 0 {
                return config("features", "must be positive");
            }
        }
        if method == Method::Rs && dim > 2 {
            return config("method", format!("RS only supports d ≤ 2, got d = {dim}"));
        }
        if self.decoupled && method != Method::Pesc {
            return config("decoupled", "only supported by PESC");
        }
        for (key, v) in [
            ("acquisition_candidates", self.acquisition_candidates),
            ("sampler_candidates", self.sampler_candidates),
            ("recommendation_candidates", self.recommendation_candidates),
            ("rs_samples", self.rs_samples),
        ] {
            if v == 0 {
                return config(key, "must be positive");
            }
        }
        if self.rs_grid < 2 {
            return config("rs_grid", "must be at least 2");
        }
        if self.hyperparameters == HyperparameterMode::Ml && self.initial_points < 2 {
            return config("initial_points", "maximum-likelihood fitting needs at least 2");
        }
        Ok(())
    }

    fn search(&self) -> MinimizerSearch {
        MinimizerSearch {
            n_features: self.features,
            n_candidates: self.sampler_candidates,
            polish_evals: self.sampler_polish_evals,
        }
    }

    fn maximize(&self) -> MaximizeOptions {
        MaximizeOptions {
            candidates: self.acquisition_candidates,
            polish_starts: self.polish_starts,
            polish_evals: self.polish_evals,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub method: Method,
    pub problem: String,
    pub seed: u64,
    pub config: BoConfig,
}

/// One function evaluation and the state of the run after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Number of evaluations so far.
    pub iteration: usize,
    pub x: Vec<f64>,
    /// Evaluated task in the decoupled setting.
    pub task: Option<usize>,
    /// Observation per task, `None` for tasks not evaluated.
    pub y: Vec<Option<f64>>,
    pub recommendation: Option<Vec<f64>>,
    pub utility_gap: Option<f64>,
    /// Acquisition value that selected `x`; absent for the initial design.
    pub acquisition: Option<f64>,
    /// Seed of the iteration that chose `x`.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// One line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Iteration(TraceRecord),
    Complete { iterations: usize },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentTrace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
    /// Set when the run aborted; the records up to the failure are kept.
    pub error: Option<String>,
}

impl ExperimentTrace {
    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }

    pub fn lines(&self) -> Vec<TraceLine> {
        let mut out = vec![TraceLine::Header(self.header.clone())];
        out.extend(self.records.iter().cloned().map(TraceLine::Iteration));
        out.push(match &self.error {
            None => TraceLine::Complete { iterations: self.records.len() },
            Some(e) => TraceLine::Failed { error: e.clone() },
        });
        out
    }

    /// JSON-lines form: header, one line per record, then a completion or
    /// failure marker.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for line in self.lines() {
            s.push_str(&serde_json::to_string(&line).expect("trace lines serialize"));
            s.push('\n');
        }
        s
    }

    /// Parses a trace file. A trace without its final marker is returned
    /// with an error noting it is incomplete.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        let mut end = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: TraceLine = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("trace line {}: {e}", i + 1)))?;
            match parsed {
                TraceLine::Header(h) if header.is_none() => header = Some(h),
                TraceLine::Header(_) => return input(format!("trace line {}: second header", i + 1)),
                TraceLine::Iteration(r) => records.push(r),
                TraceLine::Complete { .. } => end = Some(None),
                TraceLine::Failed { error } => end = Some(Some(error)),
            }
        }
        let header = header.ok_or_else(|| Error::Input("trace has no header".into()))?;
        let error = match end {
            Some(e) => e,
            None => Some("trace is incomplete".into()),
        };
        Ok(Self { header, records, error })
    }
}

fn mix_seed(seed: u64, iteration: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn regular_grid(bounds: &Bounds, per_axis: usize) -> Vec<Vec<f64>> {
    let d = bounds.dim();
    let total = per_axis.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            let mut u = vec![0.0; d];
            for j in (0..d).rev() {
                u[j] = (idx % per_axis) as f64 / (per_axis - 1) as f64;
                idx /= per_axis;
            }
            bounds.from_unit(&u)
        })
        .collect()
}

/// Grid used by RS: `per_axis` points along each axis.
pub fn rs_grid(bounds: &Bounds, per_axis: usize) -> Vec<Vec<f64>> {
    regular_grid(bounds, per_axis)
}

struct Dataset {
    xs: Vec<Vec<Vec<f64>>>,
    ys: Vec<Vec<f64>>,
}

struct Modeler<'a> {
    problem: &'a dyn Problem,
    config: &'a BoConfig,
    warm: Vec<Option<(KernelParams, f64)>>,
}

impl Modeler<'_> {
    fn state(&mut self, data: &Dataset, seed: u64) -> Result<ProblemState> {
        let bounds = self.problem.bounds().clone();
        let mut tasks = Vec::with_capacity(data.xs.len());
        for k in 0..data.xs.len() {
            let (xs, ys) = (&data.xs[k], &data.ys[k]);
            let model = match self.config.hyperparameters {
                HyperparameterMode::Fixed => {
                    let (kernel, noise, mean) = self
                        .problem
                        .known_model(k)
                        .ok_or_else(|| Error::Input(format!("problem {} has no known hyperparameters", self.problem.name())))?;
                    TaskModel::new(kernel, noise, mean, xs.clone(), ys.clone())?
                }
                HyperparameterMode::Ml => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(3 + k as u64);
                    let opts = FitOptions {
                        restarts: self.config.fit_restarts,
                        evals_per_restart: self.config.fit_evals,
                        warm_start: self.warm[k].clone(),
                    };
                    let fit = fit_hyperparameters(xs, ys, &bounds, self.config.kernel, &opts, &mut rng)?;
                    self.warm[k] = Some((fit.kernel.clone(), fit.noise_variance));
                    TaskModel::new(fit.kernel, fit.noise_variance, fit.mean, xs.clone(), ys.clone())?
                }
            };
            tasks.push(model);
        }
        ProblemState::new(bounds, tasks)
    }
}

/// Runs one optimization and returns the full trace.
pub fn run_bo(problem: &dyn Problem, method: Method, config: &BoConfig, seed: u64) -> ExperimentTrace {
    run_bo_streaming(problem, method, config, seed, &mut |_| {})
}

/// Like `run_bo`, calling `sink` with every trace line as soon as it is
/// final (header first, then records, then the end marker).
pub fn run_bo_streaming(
    problem: &dyn Problem,
    method: Method,
    config: &BoConfig,
    seed: u64,
    sink: &mut dyn FnMut(&TraceLine),
) -> ExperimentTrace {
    let header = TraceHeader { method, problem: problem.name(), seed, config: config.clone() };
    sink(&TraceLine::Header(header.clone()));
    let mut trace = ExperimentTrace { header, records: Vec::new(), error: None };
    let result = bo_loop(problem, method, config, seed, &mut |r: TraceRecord| {
        sink(&TraceLine::Iteration(r.clone()));
        trace.records.push(r);
    });
    match result {
        Ok(()) => sink(&TraceLine::Complete { iterations: trace.records.len() }),
        Err(e) => {
            let msg = e.to_string();
            sink(&TraceLine::Failed { error: msg.clone() });
            trace.error = Some(msg);
        }
    }
    trace
}

fn bo_loop(
    problem: &dyn Problem,
    method: Method,
    config: &BoConfig,
    seed: u64,
    emit: &mut dyn FnMut(TraceRecord),
) -> Result<()> {
    let bounds = problem.bounds().clone();
    config.validate(method, bounds.dim())?;
    let n_tasks = problem.num_constraints() + 1;
    let policy = RecommendationPolicy {
        candidates: config.recommendation_candidates,
        ..RecommendationPolicy::new(vec![config.delta; n_tasks - 1])?
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(2);
    let mut observe = |task: usize, x: &[f64]| {
        let eps: f64 = StandardNormal.sample(&mut noise_rng);
        problem.value(task, x) + problem.noise_variance(task).sqrt() * eps
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(1);
    let design: Vec<Vec<f64>> =
        latin_hypercube(config.initial_points, bounds.dim(), &mut init_rng).iter().map(|u| bounds.from_unit(u)).collect();

    let mut data = Dataset { xs: vec![Vec::new(); n_tasks], ys: vec![Vec::new(); n_tasks] };
    let mut modeler = Modeler { problem, config, warm: vec![None; n_tasks] };
    let mut pending: Option<TraceRecord> = None;
    let mut started = Instant::now();

    for (i, x) in design.iter().enumerate() {
        let y: Vec<Option<f64>> = (0..n_tasks).map(|k| Some(observe(k, x))).collect();
        for k in 0..n_tasks {
            data.xs[k].push(x.clone());
            data.ys[k].push(y[k].expect("observed"));
        }
        let record = TraceRecord {
            iteration: i + 1,
            x: x.clone(),
            task: None,
            y,
            recommendation: None,
            utility_gap: None,
            acquisition: None,
            seed,
            wall_ms: None,
        };
        if i + 1 < design.len() {
            emit(record);
        } else {
            pending = Some(record);
        }
    }

    let mut n = design.len();
    loop {
        let iter_seed = mix_seed(seed, n as u64);
        let state = modeler.state(&data, iter_seed)?;
        let rec = recommend(&state, &policy)?;
        let mut record = pending.take().expect("a record awaits its recommendation");
        record.utility_gap = Some(utility_gap(problem, rec.as_deref()));
        record.recommendation = rec.clone();
        if config.record_timing {
            record.wall_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        }
        emit(record);
        if n >= config.evaluations {
            return Ok(());
        }
        started = Instant::now();

        let (task, x, value) = select(method, config, state, rec, iter_seed)?;
        let y: Vec<Option<f64>> = (0..n_tasks)
            .map(|k| (task.is_none() || task == Some(k)).then(|| observe(k, &x)))
            .collect();
        for (k, yk) in y.iter().enumerate() {
            if let Some(v) = yk {
                data.xs[k].push(x.clone());
                data.ys[k].push(*v);
            }
        }
        n += 1;
        pending = Some(TraceRecord {
            iteration: n,
            x,
            task,
            y,
            recommendation: None,
            utility_gap: None,
            acquisition: Some(value),
            seed: iter_seed,
            wall_ms: None,
        });
    }
}

/// Picks the next evaluation: `(task, x, acquisition value)`, where `task`
/// is set only in the decoupled setting.
fn select(
    method: Method,
    config: &BoConfig,
    state: ProblemState,
    rec: Option<Vec<f64>>,
    seed: u64,
) -> Result<(Option<usize>, Vec<f64>, f64)> {
    let bounds = state.bounds().clone();
    let incumbent = rec.as_ref().map(|x| Incumbent { eta: state.objective().predict_mean(x), location: x.clone() });
    let extra: Vec<Vec<f64>> = rec.into_iter().collect();
    let candidates = acquisition_candidates(&bounds, config.acquisition_candidates, &extra, seed);
    let opts = config.maximize();
    match method {
        Method::Eic => {
            let ctx = AcquisitionContext::new(state, incumbent, seed);
            let (x, v) = maximize_acquisition(|x| eic_acquisition(&ctx, x), &bounds, &candidates, &opts);
            Ok((None, x, v))
        }
        Method::Pesc => {
            let samples = draw_minimizer_batch(&state, config.minimizer_samples, &config.search(), &extra, seed)?;
            let ctx = AcquisitionContext::new(state, incumbent, seed).with_minimizers(samples, &EpOptions::default())?;
            if config.decoupled {
                let (k, x, v) = pesc_decoupled_select(&ctx, &candidates, &opts);
                Ok((Some(k), x, v))
            } else {
                let (x, v) = maximize_acquisition(|x| pesc_acquisition(&ctx, x).total, &bounds, &candidates, &opts);
                Ok((None, x, v))
            }
        }
        Method::Rsdg => {
            let samples = draw_minimizer_batch(&state, config.minimizer_samples, &config.search(), &extra, seed)?;
            let ctx = AcquisitionContext::new(state, incumbent, seed)
                .with_minimizers(samples, &EpOptions::default())?
                .with_dynamic_grid(config.rs_samples)?;
            let (x, v) = maximize_acquisition(
                |x| rsdg_acquisition(&ctx, x).unwrap_or(f64::NEG_INFINITY),
                &bounds,
                &candidates,
                &opts,
            );
            Ok((None, x, v))
        }
        Method::Rs => {
            let grid = rs_grid(&bounds, config.rs_grid_axis(bounds.dim()));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = RejectionEstimator::new(&state, grid.clone(), config.rs_samples, &mut rng)?;
            let values: Vec<f64> = grid.iter().map(|x| est.evaluate(&state, x).total).collect();
            // grid order is lexicographic, so the first maximum is the smallest
            let mut best = 0;
            for i in 1..values.len() {
                if values[i] > values[best] {
                    best = i;
                }
            }
            Ok((None, grid[best].clone(), values[best]))
        }
    }
}

impl BoConfig {
    /// Points per axis for the RS grid: `rs_grid` in 1D, its square root in 2D.
    pub fn rs_grid_axis(&self, dim: usize) -> usize {
        match dim {
            1 => self.rs_grid,
            _ => ((self.rs_grid as f64).powf(1.0 / dim as f64).round() as usize).max(2),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_formulas() {
        assert_eq!(ToyProblem::c1(&[0.0, 0.0]), -1.5);
        assert_eq!(ToyProblem::c2(&[0.0, 0.0]), 1.5);
        assert_eq!(ToyProblem::objective(&[1.0, 1.0]), 2.0);
    }

    #[test]
    fn toy_optimum_is_feasible_and_near_known_solution() {
        let p = ToyProblem::new();
        assert!(p.is_feasible(&p.optimum().location));
        // the published solution of this problem is about 0.5998 at (0.1954, 0.4044)
        assert!((p.optimum().value - 0.5998).abs() < 1e-3, "{:?}", p.optimum());
        assert_eq!(p.penalty(), 2.0);
    }

    #[test]
    fn gaps_follow_the_penalty_rule() {
        let p = ToyProblem::new();
        let opt = p.optimum().location.clone();
        assert!(utility_gap(&p, Some(&opt)) < 1e-15);
        assert!((utility_gap(&p, None) - (2.0 - p.optimum().value)).abs() < 1e-15);
        // infeasible point gets the penalty too
        assert!((utility_gap(&p, Some(&[0.0, 0.0])) - (2.0 - p.optimum().value)).abs() < 1e-15);
        let x = [0.8, 0.8];
        assert!(p.is_feasible(&x));
        assert!((utility_gap(&p, Some(&x)) - (1.6 - p.optimum().value)).abs() < 1e-12);
    }

    #[test]
    fn synthetic_problem_is_deterministic() {
        let a = make_synthetic_problem(1, 1, 17).unwrap();
        let b = make_synthetic_problem(1, 1, 17).unwrap();
        for i in 0..10 {
            let x = [i as f64 / 9.0];
            assert_eq!(a.value(0, &x), b.value(0, &x));
            assert_eq!(a.value(1, &x), b.value(1, &x));
        }
        assert_eq!(a.optimum(), b.optimum());
        assert!(a.is_feasible(&a.optimum().location));
    }

    #[test]
    fn separable_grid_matches_direct_evaluation() {
        let p = make_synthetic_problem(2, 1, 3).unwrap();
        let pts = grid_2d(500);
        let fast = p.values_on(1, &pts);
        for idx in [0, 777, 125_000, 249_999] {
            assert!((fast[idx] - p.value(1, &pts[idx])).abs() < 1e-9);
        }
    }

    #[test]
    fn recommendation_respects_the_rule() {
        let k = KernelParams::isotropic_se(1.0, 0.1, 1);
        let f = TaskModel::new(k.clone(), 1e-4, 0.0, vec![vec![0.3]], vec![0.0]).unwrap();
        let c = TaskModel::new(k.clone(), 1e-4, 0.0, vec![vec![0.3]], vec![3.0]).unwrap();
        let state = ProblemState::new(Bounds::unit(1), vec![f, c]).unwrap();
        let policy = RecommendationPolicy::new(vec![0.05]).unwrap();
        let x = recommend(&state, &policy).unwrap().unwrap();
        assert!(policy.qualifies(&state, &x));
        assert!((x[0] - 0.3).abs() < 0.1);

        let bad = TaskModel::new(k.clone(), 1e-4, -5.0, vec![], vec![]).unwrap();
        let f = TaskModel::prior(k, 1e-4, 0.0).unwrap();
        let state = ProblemState::new(Bounds::unit(1), vec![f, bad]).unwrap();
        assert!(recommend(&state, &policy).unwrap().is_none());
    }

    #[test]
    fn trace_roundtrips_through_jsonl() {
        let p = ToyProblem::new();
        let cfg = BoConfig {
            evaluations: 5,
            hyperparameters: HyperparameterMode::Ml,
            delta: 0.025,
            fit_restarts: 2,
            fit_evals: 40,
            ..Default::default()
        };
        let t = run_bo(&p, Method::Eic, &cfg, 9);
        assert!(t.is_complete(), "{:?}", t.error);
        assert_eq!(t.records.len(), 5);
        let back = ExperimentTrace::from_jsonl(&t.to_jsonl()).unwrap();
        assert_eq!(back, t);
        assert_eq!(t.to_jsonl(), run_bo(&p, Method::Eic, &cfg, 9).to_jsonl());
    }

    #[test]
    fn rs_grid_is_lexicographic() {
        let g = rs_grid(&Bounds::unit(2), 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![0.0, 0.0]);
        assert_eq!(g[1], vec![0.0, 0.5]);
        assert_eq!(g[8], vec![1.0, 1.0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = BoConfig::default();
        assert!(cfg.validate(Method::Rs, 8).is_err());
        assert!(BoConfig { decoupled: true, ..Default::default() }.validate(Method::Eic, 1).is_err());
        assert!(BoConfig { delta: 1.0, ..Default::default() }.validate(Method::Pesc, 1).is_err());
    }
}
