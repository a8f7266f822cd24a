//! `cbo acqgrid` and `cbo snapshot`: posterior and acquisition values of a
//! 1D state on a regular grid, and the states they read.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pesc_core::acquisition::{pesc_acquisition, AcquisitionContext, RejectionEstimator};
use pesc_core::benchmarks::{latin_hypercube, make_synthetic_problem, rs_grid, Method, Problem};
use pesc_core::ep::EpOptions;
use pesc_core::sampling::{draw_minimizer_batch, MinimizerSearch};
use pesc_core::state::StateSnapshot;
use pesc_core::{ProblemState, TaskModel};

use crate::error::{io_err, usage, CliError, CliResult};

pub struct AcqGridArgs {
    pub grid: usize,
    pub seed: u64,
    pub minimizer_samples: usize,
    pub features: usize,
    pub rs_samples: usize,
}

pub fn read_snapshot(path: &Path) -> CliResult<ProblemState> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let snap: StateSnapshot =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    snap.to_state().map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn task_label(k: usize) -> String {
    if k == 0 {
        "objective".into()
    } else {
        format!("c{k}")
    }
}

/// Rows of `x`, per-task posterior mean and variance, then one column per
/// requested method.
pub fn acquisition_grid(
    state: &ProblemState,
    methods: &[Method],
    args: &AcqGridArgs,
) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    if state.dim() != 1 {
        return usage(format!("acqgrid needs a 1D snapshot, got d = {}", state.dim()));
    }
    if args.grid < 2 {
        return usage("--grid must be at least 2");
    }
    let grid = rs_grid(state.bounds(), args.grid);
    let mut header = vec!["x".to_string()];
    let mut columns: Vec<Vec<f64>> = vec![grid.iter().map(|x| x[0]).collect()];
    for (k, task) in state.tasks().iter().enumerate() {
        header.push(format!("{}_mean", task_label(k)));
        header.push(format!("{}_var", task_label(k)));
        let moments = grid
            .iter()
            .map(|x| task.predict(x))
            .collect::<pesc_core::Result<Vec<_>>>()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        columns.push(moments.iter().map(|m| m.mean).collect());
        columns.push(moments.iter().map(|m| m.variance).collect());
    }
    let runtime_err = |e: pesc_core::Error| CliError::Runtime(e.to_string());
    for method in methods {
        let values: Vec<f64> = match method {
            Method::Pesc => {
                let search = MinimizerSearch { n_features: args.features, ..Default::default() };
                let samples = draw_minimizer_batch(state, args.minimizer_samples, &search, &[], args.seed)
                    .map_err(runtime_err)?;
                let ctx = AcquisitionContext::new(state.clone(), None, args.seed)
                    .with_minimizers(samples, &EpOptions::default())
                    .map_err(runtime_err)?;
                grid.iter().map(|x| pesc_acquisition(&ctx, x).total).collect()
            }
            Method::Rs => {
                let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
                let est = RejectionEstimator::new(state, grid.clone(), args.rs_samples, &mut rng).map_err(runtime_err)?;
                grid.iter().map(|x| est.evaluate(state, x).total).collect()
            }
            other => return usage(format!("acqgrid supports pesc and rs, not {other}")),
        };
        header.push(method.to_string());
        columns.push(values);
    }
    let rows = (0..grid.len()).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    Ok((header, rows))
}

pub fn write_grid(path: &Path, header: &[String], rows: &[Vec<f64>]) -> CliResult<()> {
    let fail = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(fail)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// A synthetic problem observed at a Latin hypercube design, with the
/// generating hyperparameters.
pub fn synthetic_snapshot(d: usize, k: usize, seed: u64, observations: usize) -> CliResult<StateSnapshot> {
    if observations == 0 {
        return usage("--observations must be positive");
    }
    let problem = make_synthetic_problem(d, k, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let bounds = problem.bounds().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> =
        latin_hypercube(observations, d, &mut rng).iter().map(|u| bounds.from_unit(u)).collect();
    let tasks = (0..=k)
        .map(|t| {
            let (kernel, noise, mean) = problem.known_model(t).expect("synthetic problems know their model");
            let ys = xs
                .iter()
                .map(|x| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    problem.value(t, x) + noise.sqrt() * eps
                })
                .collect();
            TaskModel::new(kernel, noise, mean, xs.clone(), ys)
        })
        .collect::<pesc_core::Result<Vec<_>>>()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let state = ProblemState::new(bounds, tasks).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(StateSnapshot::from_state(&state))
}
