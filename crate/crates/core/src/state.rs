//! The per-iteration modeling state shared by every acquisition.

use serde::{Deserialize, Serialize};

use crate::domain::Bounds;
use crate::error::{input, Result};
use crate::gp::TaskModel;
use crate::kernel::KernelParams;

/// Task 0 is the objective; tasks `1..=K` are the constraints `c_k(x) ≥ 0`.
/// In the decoupled setting each task keeps its own observation set.
#[derive(Clone, Debug)]
pub struct ProblemState {
    bounds: Bounds,
    tasks: Vec<TaskModel>,
}

/// Points closer than this (max-norm) are treated as the same location.
pub const SAME_POINT_TOL: f64 = 1e-12;

impl ProblemState {
    pub fn new(bounds: Bounds, tasks: Vec<TaskModel>) -> Result<Self> {
        if tasks.is_empty() {
            return input("a problem needs at least the objective task");
        }
        for (k, t) in tasks.iter().enumerate() {
            if t.dim() != bounds.dim() {
                return input(format!("task {k} has dimension {} but the domain has {}", t.dim(), bounds.dim()));
            }
            if let Some(x) = t.inputs().iter().find(|x| !bounds.contains(x)) {
                return input(format!("task {k} has an observation outside the domain: {x:?}"));
            }
        }
        Ok(Self { bounds, tasks })
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn tasks(&self) -> &[TaskModel] {
        &self.tasks
    }

    pub fn objective(&self) -> &TaskModel {
        &self.tasks[0]
    }

    pub fn constraints(&self) -> &[TaskModel] {
        &self.tasks[1..]
    }

    pub fn num_constraints(&self) -> usize {
        self.tasks.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Distinct observed locations across all tasks, in first-seen order.
    pub fn observed_union(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for t in &self.tasks {
            for x in t.inputs() {
                if !out.iter().any(|p| same_point(p, x)) {
                    out.push(x.clone());
                }
            }
        }
        out
    }

    pub fn replace_task(&mut self, k: usize, model: TaskModel) -> Result<()> {
        if k >= self.tasks.len() {
            return input(format!("no task {k}"));
        }
        self.tasks[k] = model;
        Ok(())
    }
}

/// Serializable form of one task model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSnapshot {
    pub kernel: KernelParams,
    pub noise_variance: f64,
    pub mean: f64,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Serializable form of a `ProblemState`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSnapshot {
    pub bounds: Bounds,
    pub tasks: Vec<TaskSnapshot>,
}

impl StateSnapshot {
    pub fn from_state(state: &ProblemState) -> Self {
        Self {
            bounds: state.bounds.clone(),
            tasks: state
                .tasks
                .iter()
                .map(|t| TaskSnapshot {
                    kernel: t.kernel().clone(),
                    noise_variance: t.noise_variance(),
                    mean: t.mean_value(),
                    inputs: t.inputs().to_vec(),
                    targets: t.targets().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_state(&self) -> Result<ProblemState> {
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                KernelParams::new(t.kernel.family, t.kernel.amplitude, t.kernel.lengthscales.clone())
                    .and_then(|k| TaskModel::new(k, t.noise_variance, t.mean, t.inputs.clone(), t.targets.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        ProblemState::new(Bounds::new(self.bounds.lower.clone(), self.bounds.upper.clone())?, tasks)
    }
}

pub fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= SAME_POINT_TOL)
}
