//! Approximate posterior samples of the constrained minimizer.
//!
//! Each task's posterior is sampled pathwise: a random-Fourier-feature draw
//! from the prior plus an exact kernel-space update through the observed
//! data. The resulting cheap functions are then minimized subject to the
//! sampled constraints.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::Bounds;
use crate::error::{input, Result};
use crate::gp::TaskModel;
use crate::kernel::{KernelFamily, KernelParams};
use crate::local::{minimize, PolishOptions};
use crate::qmc::shifted_halton_in;
use crate::state::ProblemState;

/// Random Fourier features `φ_i(x) = √(2a/F) cos(ω_iᵀx + b_i)` whose inner
/// products approximate a stationary kernel.
#[derive(Clone, Debug)]
pub struct RandomFeatures {
    /// `frequencies[j][i]` is component `j` of `ω_i`.
    frequencies: Vec<Vec<f64>>,
    phases: Vec<f64>,
    scale: f64,
}

const CHUNK: usize = 64;

impl RandomFeatures {
    pub fn draw<R: Rng + ?Sized>(kernel: &KernelParams, count: usize, rng: &mut R) -> Result<Self> {
        if count < 1 {
            return input("at least one random feature is required");
        }
        let d = kernel.dim();
        let mut frequencies = vec![Vec::with_capacity(count); d];
        let chi = ChiSquared::new(5.0).expect("valid degrees of freedom");
        for _ in 0..count {
            // Matérn-5/2 spectral density is a multivariate t with 5 dof
            let t_scale = match kernel.family {
                KernelFamily::SquaredExponential => 1.0,
                KernelFamily::Matern52 => {
                    let u: f64 = chi.sample(rng);
                    (5.0 / u).sqrt()
                }
            };
            for (j, l) in kernel.lengthscales.iter().enumerate() {
                let g: f64 = StandardNormal.sample(rng);
                frequencies[j].push(g * t_scale / l);
            }
        }
        let phases = (0..count).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
        Ok(Self { frequencies, phases, scale: (2.0 * kernel.amplitude / count as f64).sqrt() })
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Calls `body(start, cosines)` for consecutive blocks of features.
    #[inline]
    fn for_each_block(&self, x: &[f64], mut body: impl FnMut(usize, &[f64])) {
        let mut buf = [0.0; CHUNK];
        for start in (0..self.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(self.len());
            let args = &mut buf[..end - start];
            args.copy_from_slice(&self.phases[start..end]);
            for (omega, v) in self.frequencies.iter().zip(x) {
                for (a, o) in args.iter_mut().zip(&omega[start..end]) {
                    *a += o * v;
                }
            }
            if args.iter().all(|a| a.abs() < REDUCED_RANGE) {
                args.iter_mut().for_each(|a| *a = cos_reduced(*a));
            } else {
                args.iter_mut().for_each(|a| *a = a.cos());
            }
            body(start, args);
        }
    }

    #[inline]
    pub fn weighted_sum(&self, weights: &[f64], x: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.for_each_block(x, |start, cosines| {
            let w = &weights[start..start + cosines.len()];
            let mut part = [0.0; 4];
            let mut wc = w.chunks_exact(4);
            let mut cc = cosines.chunks_exact(4);
            for (a, b) in (&mut wc).zip(&mut cc) {
                for k in 0..4 {
                    part[k] += a[k] * b[k];
                }
            }
            acc += part.iter().sum::<f64>()
                + wc.remainder().iter().zip(cc.remainder()).map(|(a, b)| a * b).sum::<f64>();
        });
        acc * self.scale
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.for_each_block(x, |_, cosines| out.extend(cosines.iter().map(|c| self.scale * c)));
        out
    }
}

// Beyond this the three-part reduction below loses bits; std's cos takes over.
const REDUCED_RANGE: f64 = 1.0e6;

/// `cos(a)` for `|a| < REDUCED_RANGE`, within an ulp or two of `f64::cos`.
/// Branch-free so the feature loops vectorize; std's cos is several times
/// slower and feature sums dominate minimizer sampling.
#[inline(always)]
fn cos_reduced(a: f64) -> f64 {
    const ROUND: f64 = 6755399441055744.0; // 1.5·2^52
    const PIO2_1: f64 = 1.57079632673412561417e+00;
    const PIO2_2: f64 = 6.07710050630396597660e-11;
    const PIO2_3: f64 = 2.02226624871116645580e-21;
    let t = a * std::f64::consts::FRAC_2_PI + ROUND;
    let quadrant = t.to_bits();
    let n = t - ROUND;
    let r = ((a - n * PIO2_1) - n * PIO2_2) - n * PIO2_3;
    let z = r * r;
    // fdlibm kernels on |r| ≤ π/4
    let c = 1.0 - 0.5 * z
        + z * z
            * (4.16666666666666019037e-02
                + z * (-1.38888888888741095749e-03
                    + z * (2.48015872894767294178e-05
                        + z * (-2.75573143513906633035e-07
                            + z * (2.08757232129817482790e-09 + z * -1.13596475577881948265e-11)))));
    let s = r + r
        * z
        * (-1.66666666666666324348e-01
            + z * (8.33333333332248946124e-03
                + z * (-1.98412698298579493134e-04
                    + z * (2.75573137070700676789e-06
                        + z * (-2.50507602534068634195e-08 + z * 1.58969099521155010221e-10)))));
    let v = if quadrant & 1 == 0 { c } else { s };
    if quadrant.wrapping_add(1) & 2 == 0 {
        v
    } else {
        -v
    }
}

/// Anything that can be evaluated as a sampled task function.
pub trait SampledSurface {
    fn value(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> SampledSurface for F {
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// One approximate posterior draw of a task function:
/// `m + φ(x)ᵀw + k(x, X) u`.
#[derive(Clone, Debug)]
pub struct SampledFunction {
    mean: f64,
    features: RandomFeatures,
    weights: Vec<f64>,
    kernel: KernelParams,
    anchors: Vec<Vec<f64>>,
    update: Vec<f64>,
}

impl SampledFunction {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let prior = self.features.weighted_sum(&self.weights, x);
        let data: f64 = self.anchors.iter().zip(&self.update).map(|(a, u)| u * self.kernel.k(a, x)).sum();
        self.mean + prior + data
    }
}

impl SampledSurface for SampledFunction {
    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
}

pub fn draw_sampled_function<R: Rng + ?Sized>(model: &TaskModel, n_features: usize, rng: &mut R) -> Result<SampledFunction> {
    let kernel = model.kernel().clone();
    let features = RandomFeatures::draw(&kernel, n_features, rng)?;
    let weights: Vec<f64> = (0..n_features).map(|_| StandardNormal.sample(rng)).collect();
    let (anchors, update) = match model.cholesky() {
        None => (Vec::new(), Vec::new()),
        Some(chol) => {
            let noise_sd = model.noise_variance().sqrt();
            let residual = DVector::from_iterator(
                model.len(),
                model.inputs().iter().zip(model.targets()).map(|(x, y)| {
                    let eps: f64 = StandardNormal.sample(rng);
                    y - model.mean_value() - features.weighted_sum(&weights, x) - noise_sd * eps
                }),
            );
            let u = chol.factor.solve(&residual);
            (model.inputs().to_vec(), u.iter().copied().collect())
        }
    };
    Ok(SampledFunction { mean: model.mean_value(), features, weights, kernel, anchors, update })
}

/// A sampled constrained minimizer with the task values it was found with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizerSample {
    pub location: Vec<f64>,
    /// Objective first, then each constraint, at `location`.
    pub sampled_values: Vec<f64>,
    /// All sampled constraints are nonnegative at `location`.
    pub feasible: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct MinimizerSearch {
    pub n_features: usize,
    pub n_candidates: usize,
    pub polish_evals: usize,
}

impl Default for MinimizerSearch {
    fn default() -> Self {
        Self { n_features: 1000, n_candidates: 1000, polish_evals: 100 }
    }
}

fn violation(values: &[f64]) -> f64 {
    values.iter().map(|c| (-c).max(0.0)).sum()
}

/// Minimizes `functions[0]` subject to `functions[k] ≥ 0` for `k ≥ 1` over a
/// randomly rotated Halton set plus `extra` candidates, then polishes the
/// winner without leaving the sampled feasible region. With no feasible
/// candidate the point of least total violation is returned, flagged.
pub fn sample_constrained_minimizer<S: SampledSurface, R: Rng + ?Sized>(
    functions: &[S],
    bounds: &Bounds,
    extra: &[Vec<f64>],
    search: &MinimizerSearch,
    rng: &mut R,
) -> MinimizerSample {
    assert!(!functions.is_empty(), "need at least the objective");
    let mut candidates = shifted_halton_in(bounds, search.n_candidates, rng);
    candidates.extend(extra.iter().filter(|x| bounds.contains(x)).cloned());

    let (objective, constraints) = functions.split_first().expect("nonempty");
    let constraint_values = |x: &[f64]| -> Vec<f64> { constraints.iter().map(|c| c.value(x)).collect() };

    let mut best_feasible: Option<(usize, f64)> = None;
    let mut least_violation: Option<(usize, f64)> = None;
    for (i, x) in candidates.iter().enumerate() {
        let cv = constraint_values(x);
        let viol = violation(&cv);
        if viol == 0.0 {
            let f = objective.value(x);
            if best_feasible.is_none_or(|(_, b)| f < b) {
                best_feasible = Some((i, f));
            }
        } else if best_feasible.is_none() && least_violation.is_none_or(|(_, v)| viol < v) {
            least_violation = Some((i, viol));
        }
    }

    let polish = PolishOptions { max_evals: search.polish_evals, initial_step: 0.02, f_tol: 1e-12 };
    let feasible_objective = |x: &[f64]| -> f64 {
        if constraints.iter().all(|c| c.value(x) >= 0.0) {
            objective.value(x)
        } else {
            f64::INFINITY
        }
    };
    let location = match (best_feasible, least_violation) {
        (Some((i, f)), _) => minimize(feasible_objective, &candidates[i], Some(f), bounds, polish).x,
        (None, Some((i, v))) => {
            let r = minimize(|x: &[f64]| violation(&constraint_values(x)), &candidates[i], Some(v), bounds, polish);
            if r.value == 0.0 {
                let f = objective.value(&r.x);
                minimize(feasible_objective, &r.x, Some(f), bounds, polish).x
            } else {
                r.x
            }
        }
        (None, None) => candidates[0].clone(),
    };
    let sampled_values: Vec<f64> = functions.iter().map(|f| f.value(&location)).collect();
    let feasible = sampled_values[1..].iter().all(|c| *c >= 0.0);
    MinimizerSample { location, sampled_values, feasible }
}

/// Draws `count` independent minimizer samples; sample `m` uses its own
/// ChaCha stream derived from `root_seed`.
pub fn draw_minimizer_batch(
    state: &ProblemState,
    count: usize,
    search: &MinimizerSearch,
    extra: &[Vec<f64>],
    root_seed: u64,
) -> Result<Vec<MinimizerSample>> {
    if count < 1 {
        return input("at least one minimizer sample is required");
    }
    let mut candidates_extra = state.observed_union();
    candidates_extra.extend(extra.iter().cloned());
    (0..count)
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
            rng.set_stream(m as u64 + 1);
            let functions = state
                .tasks()
                .iter()
                .map(|t| draw_sampled_function(t, search.n_features, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(sample_constrained_minimizer(&functions, state.bounds(), &candidates_extra, search, &mut rng))
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::*;

    fn se_model(xs: Vec<Vec<f64>>, ys: Vec<f64>, noise: f64) -> TaskModel {
        TaskModel::new(KernelParams::isotropic_se(1.0, 0.1, 1), noise, 0.0, xs, ys).unwrap()
    }

    #[test]
    fn reduced_cosine_matches_std() {
        let mut worst = 0.0f64;
        for i in 0..200_000 {
            let a = (i as f64 - 100_000.0) * 0.0123456789;
            worst = worst.max((cos_reduced(a) - a.cos()).abs());
        }
        for k in -2000..2000 {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            worst = worst.max((cos_reduced(a) - a.cos()).abs());
        }
        assert!(worst < 1e-15, "{worst:e}");
    }

    #[test]
    fn large_arguments_fall_back_to_std() {
        let kernel = KernelParams::new(KernelFamily::SquaredExponential, 1.0, vec![1e-7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = RandomFeatures::draw(&kernel, 70, &mut rng).unwrap();
        let x = [0.9];
        let direct: Vec<f64> = (0..70)
            .map(|i| f.scale * (f.frequencies[0][i] * x[0] + f.phases[i]).cos())
            .collect();
        assert_eq!(f.features(&x), direct);
    }

    #[test]
    fn zero_features_is_an_input_error() {
        let m = se_model(vec![], vec![], 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(draw_sampled_function(&m, 0, &mut rng).is_err());
    }

    #[test]
    fn prior_draws_have_prior_mean() {
        let m = se_model(vec![], vec![], 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let mean: f64 = (0..n).map(|_| draw_sampled_function(&m, 1000, &mut rng).unwrap().eval(&[0.37])).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * (1.0f64 / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn noiseless_datum_is_hit_by_almost_every_draw() {
        let m = se_model(vec![vec![0.4]], vec![0.8], 0.0);
        let post = m.predict(&[0.4]).unwrap();
        let tol = 3.0 * post.variance.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits = (0..1000)
            .filter(|_| (draw_sampled_function(&m, 1000, &mut rng).unwrap().eval(&[0.4]) - 0.8).abs() <= tol)
            .count();
        assert!(hits >= 990, "{hits} of 1000 within {tol}");
    }

    #[test]
    fn same_seed_same_weights() {
        let m = se_model(vec![vec![0.2]], vec![0.1], 0.01);
        let a = draw_sampled_function(&m, 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = draw_sampled_function(&m, 50, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.eval(&[0.9]), b.eval(&[0.9]));
    }

    #[test]
    fn feature_variance_approximates_amplitude() {
        for family in [KernelFamily::SquaredExponential, KernelFamily::Matern52] {
            let k = KernelParams::new(family, 1.7, vec![0.2, 0.4]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let feats = RandomFeatures::draw(&k, 1000, &mut rng).unwrap();
            let v: f64 = feats.features(&[0.3, 0.6]).iter().map(|p| p * p).sum();
            assert!((v - 1.7).abs() < 0.17, "{family:?}: {v}");
        }
    }

    #[test]
    fn feature_inner_products_approximate_kernel() {
        for family in [KernelFamily::SquaredExponential, KernelFamily::Matern52] {
            let k = KernelParams::new(family, 1.0, vec![0.3]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let feats = RandomFeatures::draw(&k, 20_000, &mut rng).unwrap();
            for r in [0.1, 0.3, 0.6] {
                let a = feats.features(&[0.0]);
                let b = feats.features(&[r]);
                let approx: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                assert!((approx - k.k(&[0.0], &[r])).abs() < 0.03, "{family:?} r={r}: {approx}");
            }
        }
    }

    #[test]
    fn linear_objective_with_slack_constraint() {
        let f = |x: &[f64]| x[0];
        let c = |x: &[f64]| 1.0 + 0.0 * x[0];
        let fs: Vec<&dyn Fn(&[f64]) -> f64> = vec![&f, &c];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_constrained_minimizer(&fs, &Bounds::unit(1), &[], &MinimizerSearch::default(), &mut rng);
        assert!(s.feasible);
        assert!(s.location[0] < 1e-3);
    }

    #[test]
    fn empty_feasible_set_is_flagged() {
        let f = |x: &[f64]| x[0];
        let c = |_: &[f64]| -1.0;
        let fs: Vec<&dyn Fn(&[f64]) -> f64> = vec![&f, &c];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = sample_constrained_minimizer(&fs, &Bounds::unit(1), &[], &MinimizerSearch::default(), &mut rng);
        assert!(!s.feasible);
        assert!(Bounds::unit(1).contains(&s.location));
    }

    #[test]
    fn feasible_samples_satisfy_their_own_constraints() {
        let c_model = se_model(vec![vec![0.5]], vec![-0.5], 0.01);
        let f_model = se_model(vec![vec![0.2], vec![0.8]], vec![0.3, -0.1], 0.01);
        let state = ProblemState::new(Bounds::unit(1), vec![f_model, c_model]).unwrap();
        let search = MinimizerSearch { n_features: 300, n_candidates: 200, polish_evals: 100 };
        for m in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(m);
            let fs: Vec<SampledFunction> =
                state.tasks().iter().map(|t| draw_sampled_function(t, 300, &mut rng).unwrap()).collect();
            let s = sample_constrained_minimizer(&fs, state.bounds(), &[], &search, &mut rng);
            if s.feasible {
                assert!(fs[1].eval(&s.location) >= 0.0);
            }
            assert_eq!(s.sampled_values[0], fs[0].eval(&s.location));
        }
    }

    #[test]
    fn batch_is_deterministic_and_sized() {
        let f_model = se_model(vec![vec![0.2]], vec![0.3], 0.01);
        let c_model = se_model(vec![vec![0.6]], vec![0.2], 0.01);
        let state = ProblemState::new(Bounds::unit(1), vec![f_model, c_model]).unwrap();
        let search = MinimizerSearch { n_features: 100, n_candidates: 100, polish_evals: 30 };
        let a = draw_minimizer_batch(&state, 3, &search, &[], 42).unwrap();
        let b = draw_minimizer_batch(&state, 3, &search, &[], 42).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
        assert!(draw_minimizer_batch(&state, 0, &search, &[], 42).is_err());
        let single = draw_minimizer_batch(&state, 1, &search, &[], 9).unwrap();
        assert_eq!(single, draw_minimizer_batch(&state, 1, &search, &[], 9).unwrap());
    }
}
