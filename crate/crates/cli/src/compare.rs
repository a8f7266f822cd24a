//! `cbo compare`: utility-gap curves per method with bootstrap bands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pesc_core::benchmarks::ExperimentTrace;

use crate::error::{io_err, runtime, usage, CliError, CliResult};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_SEED: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stat {
    Median,
    Mean,
}

impl Stat {
    pub fn of(&self, values: &mut [f64]) -> f64 {
        match self {
            Stat::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Stat::Median => {
                values.sort_by(f64::total_cmp);
                let n = values.len();
                if n % 2 == 1 {
                    values[n / 2]
                } else {
                    0.5 * (values[n / 2 - 1] + values[n / 2])
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub method: String,
    pub iteration: usize,
    pub stat: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Trace files directly in `dir` or in its `traces/` subdirectory.
fn trace_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return usage(format!("{}: not a directory", dir.display()));
    }
    let mut files = Vec::new();
    for d in [dir.to_path_buf(), dir.join("traces")] {
        if !d.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&d).map_err(|e| io_err(&d, e))? {
            let p = entry.map_err(|e| io_err(&d, e))?.path();
            if p.extension().is_some_and(|e| e == "jsonl") {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every complete trace; the rest are reported and skipped.
pub fn load_traces(dirs: &[PathBuf]) -> CliResult<Vec<ExperimentTrace>> {
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for dir in dirs {
        for path in trace_files(dir)? {
            let parsed = fs::read_to_string(&path)
                .map_err(|e| e.to_string())
                .and_then(|t| ExperimentTrace::from_jsonl(&t).map_err(|e| e.to_string()));
            match parsed {
                Ok(t) if t.is_complete() => good.push(t),
                Ok(t) => bad.push(format!("{}: incomplete ({})", path.display(), t.error.unwrap_or("no end marker".into()))),
                Err(e) => bad.push(format!("{}: {e}", path.display())),
            }
        }
    }
    for b in &bad {
        log::warn!("skipping {b}");
    }
    if good.is_empty() {
        if bad.is_empty() {
            return usage("no trace files found");
        }
        return runtime(format!("all {} traces were unusable", bad.len()));
    }
    Ok(good)
}

/// Per method and iteration: the statistic across seeds and a 95% percentile
/// bootstrap band over seeds.
pub fn gap_curves(traces: &[ExperimentTrace], stat: Stat) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for t in traces {
        for r in &t.records {
            if let Some(g) = r.utility_gap {
                groups.entry((t.header.method.to_string(), r.iteration)).or_default().push(g);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let mut out = Vec::new();
    for ((method, iteration), values) in groups {
        let center = stat.of(&mut values.clone());
        let mut boot: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
            .map(|_| {
                let mut resample: Vec<f64> = (0..values.len()).map(|_| values[rng.random_range(0..values.len())]).collect();
                stat.of(&mut resample)
            })
            .collect();
        boot.sort_by(f64::total_cmp);
        let lo = boot[(0.025 * BOOTSTRAP_RESAMPLES as f64) as usize];
        let hi = boot[(0.975 * BOOTSTRAP_RESAMPLES as f64) as usize - 1];
        out.push(CurvePoint { method, iteration, stat: center, lo, hi });
    }
    out
}

pub fn cmd_compare(dirs: &[PathBuf], out: &Path, stat: Stat) -> CliResult<()> {
    let traces = load_traces(dirs)?;
    let curves = gap_curves(&traces, stat);
    let fail = |e: csv::Error| CliError::Runtime(format!("{}: {e}", out.display()));
    let mut w = csv::Writer::from_path(out).map_err(fail)?;
    w.write_record(["method", "iteration", "stat", "lo", "hi"]).map_err(fail)?;
    for c in curves {
        w.write_record([c.method, c.iteration.to_string(), c.stat.to_string(), c.lo.to_string(), c.hi.to_string()])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| io_err(out, e))
}
