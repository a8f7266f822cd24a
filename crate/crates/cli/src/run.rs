//! `cbo run`: execute a configured benchmark over a seed range.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use pesc_core::benchmarks::{run_bo_streaming, ExperimentTrace, TraceLine};

use crate::config::RunConfig;
use crate::error::{io_err, runtime, usage, CliError, CliResult};

pub struct RunArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

pub fn trace_path(dir: &Path, cfg: &RunConfig, seed: u64) -> PathBuf {
    dir.join("traces").join(format!("{}-{}-seed{seed}.jsonl", cfg.method, cfg.problem_name()))
}

/// A finished trace for exactly this configuration and seed, if one exists.
fn reusable(path: &Path, cfg: &RunConfig, seed: u64) -> Option<ExperimentTrace> {
    let text = fs::read_to_string(path).ok()?;
    let trace = ExperimentTrace::from_jsonl(&text).ok()?;
    let h = &trace.header;
    let same = h.method == cfg.method && h.problem == cfg.problem_name() && h.seed == seed && h.config == cfg.bo;
    (same && trace.is_complete()).then_some(trace)
}

fn run_one(cfg: &RunConfig, seed: u64, path: &Path) -> CliResult<ExperimentTrace> {
    if let Some(t) = reusable(path, cfg, seed) {
        log::info!("seed {seed}: complete trace found, skipping");
        return Ok(t);
    }
    let problem = cfg.make_problem(seed).map_err(|e| CliError::Runtime(format!("seed {seed}: {e}")))?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write_err: Option<std::io::Error> = None;
    let mut sink = |line: &TraceLine| {
        if write_err.is_some() {
            return;
        }
        let json = serde_json::to_string(line).expect("trace lines serialize");
        if let Err(e) = writeln!(out, "{json}").and_then(|_| out.flush()) {
            write_err = Some(e);
        }
    };
    let trace = run_bo_streaming(problem.as_ref(), cfg.method, &cfg.bo, seed, &mut sink);
    if let Some(e) = write_err {
        return Err(io_err(path, e));
    }
    Ok(trace)
}

pub fn write_aggregate(path: &Path, traces: &[(u64, ExperimentTrace)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    w.write_record(["method", "problem", "seed", "iteration", "utility_gap", "wall_ms"]).map_err(fail)?;
    for (seed, t) in traces {
        for r in &t.records {
            w.write_record([
                t.header.method.to_string(),
                t.header.problem.clone(),
                seed.to_string(),
                r.iteration.to_string(),
                r.utility_gap.map(|g| g.to_string()).unwrap_or_default(),
                r.wall_ms.map(|g| g.to_string()).unwrap_or_default(),
            ])
            .map_err(fail)?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn cmd_run(args: RunArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Ok(raw) = std::env::var("CBO_SEED") {
        cfg.override_seed(&raw)?;
    }
    let Some(out) = args.out.or_else(|| cfg.out.clone()) else {
        return usage("no output directory: pass --out or set `out` in the config");
    };
    let jobs = args.jobs.or(cfg.jobs).unwrap_or(1);
    if jobs == 0 {
        return usage("--jobs must be at least 1");
    }
    fs::create_dir_all(out.join("traces")).map_err(|e| io_err(&out, e))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| io_err(&out, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start {jobs} workers: {e}")))?;
    let seeds: Vec<u64> = cfg.seeds().collect();
    let results: Vec<(u64, CliResult<ExperimentTrace>)> = pool.install(|| {
        seeds.par_iter().map(|&seed| (seed, run_one(&cfg, seed, &trace_path(&out, &cfg, seed)))).collect()
    });

    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(t) => {
                if let Some(e) = &t.error {
                    failures.push(format!("seed {seed}: {e}"));
                }
                traces.push((seed, t));
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    write_aggregate(&out.join("aggregate.csv"), &traces)?;
    if !failures.is_empty() {
        return runtime(format!("{} of {} runs failed:\n  {}", failures.len(), seeds.len(), failures.join("\n  ")));
    }
    Ok(())
}
