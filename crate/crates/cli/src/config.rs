//! Run configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pesc_core::benchmarks::{make_synthetic_problem, BoConfig, HyperparameterMode, Method, Problem, ToyProblem};
use pesc_core::Error as CoreError;

use crate::error::{usage, CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;
pub const MAX_DIM: usize = 16;
pub const MAX_CONSTRAINTS: usize = 8;
pub const MAX_SEEDS: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// GP-sampled objective and constraints on the unit cube.
    Synthetic,
    /// The two-constraint toy problem on the unit square.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub family: Family,
    /// Dimension; synthetic problems default to 1, the toy problem is 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Number of constraints; synthetic problems default to 1, the toy problem has 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<usize>,
    /// First seed of the range; `CBO_SEED` overrides it.
    #[serde(default)]
    pub seed: u64,
    /// Number of consecutive seeds.
    #[serde(default = "one_u64")]
    pub seeds: u64,
}

fn one_u64() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub method: Method,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads; `--jobs` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub bo: BoConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(e.to_string().trim_end().to_string()))?;
        cfg.validate().map_err(|(section, key, msg)| {
            let at = match key_line(text, section, key) {
                Some(line) => format!("line {line}: "),
                None => String::new(),
            };
            let name = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            CliError::Usage(format!("{at}invalid `{name}`: {msg}"))
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `(section, key, message)` for the first bad value.
    fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        if self.version != CONFIG_VERSION {
            return Err(("", "version", format!("unsupported version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if self.jobs == Some(0) {
            return Err(("", "jobs", "must be at least 1".into()));
        }
        let p = &self.problem;
        match p.family {
            Family::Synthetic => {
                if !(1..=MAX_DIM).contains(&self.dim()) {
                    return Err(("problem", "d", format!("must lie in 1..={MAX_DIM}, got {}", self.dim())));
                }
                if self.constraints() > MAX_CONSTRAINTS {
                    let msg = format!("at most {MAX_CONSTRAINTS}, got {}", self.constraints());
                    return Err(("problem", "constraints", msg));
                }
            }
            Family::Toy => {
                if p.d.is_some_and(|d| d != 2) {
                    return Err(("problem", "d", "the toy problem is two-dimensional".into()));
                }
                if p.constraints.is_some_and(|k| k != 2) {
                    return Err(("problem", "constraints", "the toy problem has two constraints".into()));
                }
                if self.bo.hyperparameters == HyperparameterMode::Fixed {
                    let msg = "the toy problem has no generating GP; set hyperparameters = \"ml\"".into();
                    return Err(("bo", "hyperparameters", msg));
                }
            }
        }
        if !(1..=MAX_SEEDS).contains(&p.seeds) {
            return Err(("problem", "seeds", format!("must lie in 1..={MAX_SEEDS}, got {}", p.seeds)));
        }
        if p.seed.checked_add(p.seeds).is_none() {
            return Err(("problem", "seed", "seed range overflows".into()));
        }
        match self.bo.validate(self.method, self.dim()) {
            Ok(()) => Ok(()),
            Err(CoreError::Config { key, message }) => {
                let key = BO_KEYS.iter().find(|k| **k == key).copied().unwrap_or("method");
                let section = if key == "method" { "" } else { "bo" };
                Err((section, key, message))
            }
            Err(e) => Err(("bo", "", e.to_string())),
        }
    }

    pub fn dim(&self) -> usize {
        match self.problem.family {
            Family::Synthetic => self.problem.d.unwrap_or(1),
            Family::Toy => 2,
        }
    }

    pub fn constraints(&self) -> usize {
        match self.problem.family {
            Family::Synthetic => self.problem.constraints.unwrap_or(1),
            Family::Toy => 2,
        }
    }

    pub fn seeds(&self) -> std::ops::Range<u64> {
        self.problem.seed..self.problem.seed + self.problem.seeds
    }

    pub fn problem_name(&self) -> String {
        match self.problem.family {
            Family::Synthetic => format!("synthetic-d{}-k{}", self.dim(), self.constraints()),
            Family::Toy => "toy".into(),
        }
    }

    pub fn make_problem(&self, seed: u64) -> pesc_core::Result<Box<dyn Problem>> {
        Ok(match self.problem.family {
            Family::Synthetic => Box::new(make_synthetic_problem(self.dim(), self.constraints(), seed)?),
            Family::Toy => Box::new(ToyProblem::new()),
        })
    }

    /// Replaces the root seed, as `CBO_SEED` does.
    pub fn override_seed(&mut self, raw: &str) -> CliResult<()> {
        match raw.trim().parse::<u64>() {
            Ok(s) if s.checked_add(self.problem.seeds).is_some() => {
                self.problem.seed = s;
                Ok(())
            }
            _ => usage(format!("CBO_SEED must be a nonnegative integer, got {raw:?}")),
        }
    }
}

const BO_KEYS: &[&str] = &[
    "evaluations",
    "initial_points",
    "minimizer_samples",
    "features",
    "sampler_candidates",
    "sampler_polish_evals",
    "acquisition_candidates",
    "polish_starts",
    "polish_evals",
    "rs_samples",
    "rs_grid",
    "delta",
    "recommendation_candidates",
    "hyperparameters",
    "kernel",
    "fit_restarts",
    "fit_evals",
    "decoupled",
    "record_timing",
];

/// 1-based line where `key` is assigned inside `[section]` (top level when
/// `section` is empty).
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim();
        let dotted = if current.is_empty() { lhs.to_string() } else { format!("{current}.{lhs}") };
        let wanted = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        if dotted == wanted {
            return Some(i + 1);
        }
    }
    None
}
