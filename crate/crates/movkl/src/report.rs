//! JSON and CSV report schemas.
//!
//! JSON reports keep wall-clock measurements under a `timing` key so that two
//! runs with the same configuration differ only there.

use std::fs;
use std::path::Path;

use movkl_core::linsolve::{SolveReport, SolverKind};
use movkl_core::{CvOutcome, MovklModel};
use serde::{Deserialize, Serialize};

use crate::archive::{Exponent, OperatorRecord, ScalarRecord};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub scalar: ScalarRecord,
    pub operator: OperatorRecord,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub solver: String,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

pub fn solver_name(kind: SolverKind) -> &'static str {
    match kind {
        SolverKind::Dense => "dense",
        SolverKind::Kronecker => "kronecker",
        SolverKind::GaussSeidel => "gauss_seidel",
        SolverKind::Woodbury => "woodbury",
    }
}

impl From<&SolveReport> for SolveSummary {
    fn from(r: &SolveReport) -> Self {
        Self {
            solver: solver_name(r.solver).into(),
            iterations: r.iterations,
            inner_iterations: r.inner_iterations,
            final_residual: r.final_residual,
            converged: r.converged,
        }
    }
}

/// Written by `train` next to the model archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub algorithm: String,
    pub n_train: usize,
    pub lambda: f64,
    pub r: Exponent,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub weights: Vec<f64>,
    pub terms: Vec<TermReport>,
    pub solves: Vec<SolveSummary>,
    pub timing: Timing,
}

/// Display name used in metric tables.
pub fn algorithm_name(model: &MovklModel) -> String {
    let stack = model.stack();
    if stack.len() == 1 {
        let op = match stack.terms()[0].operator.kind() {
            movkl_core::OperatorKind::Identity => "identity",
            movkl_core::OperatorKind::Multiplication => "multiplication",
            movkl_core::OperatorKind::Integral { .. } => "integral",
        };
        return format!("KRR-{op}");
    }
    let r = model.r();
    if r.is_infinite() {
        "MovKL-linf".into()
    } else {
        format!("MovKL-l{r}")
    }
}

impl FitReport {
    pub fn new(model: &MovklModel, wall_time_s: f64) -> Self {
        let stack = model.stack();
        Self {
            algorithm: algorithm_name(model),
            n_train: model.train_inputs().len(),
            lambda: model.lambda(),
            r: Exponent::from_f64(model.r()),
            iterations: model.iterations(),
            converged: model.converged(),
            objective_trace: model.objective_trace().to_vec(),
            weights: model.weights(),
            terms: stack
                .terms()
                .iter()
                .map(|t| TermReport {
                    scalar: ScalarRecord::from_kernel(&t.scalar),
                    operator: t.operator.kind().into(),
                    weight: t.weight,
                })
                .collect(),
            solves: model
                .solve_reports()
                .iter()
                .map(SolveSummary::from)
                .collect(),
            timing: Timing { wall_time_s },
        }
    }
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(rename = "Algorithm")]
    pub algorithm: String,
    #[serde(rename = "RSSE")]
    pub rsse: f64,
    /// Empty when the dataset carries no labels.
    #[serde(rename = "LCR")]
    pub lcr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub label_threshold: f64,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub n_curves: usize,
    pub best_lambda: f64,
    pub best_rank: usize,
    pub best_cv_rsse: f64,
    pub candidates: usize,
    pub timing: Timing,
}

impl CvReport {
    pub fn new(n_curves: usize, out: &CvOutcome, wall_time_s: f64) -> Self {
        Self {
            n_curves,
            best_lambda: out.best_lambda,
            best_rank: out.best_rank,
            best_cv_rsse: out.best_rsse,
            candidates: out.table.len(),
            timing: Timing { wall_time_s },
        }
    }
}

/// One row of `cv_table.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCsvRow {
    pub lambda: f64,
    pub rank: usize,
    pub cv_rsse: f64,
    pub valid: bool,
}

/// One row of `bench.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub instance: usize,
    pub n: usize,
    pub m: usize,
    pub terms: usize,
    pub solver: String,
    pub relative_residual: f64,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub error_vs_dense: f64,
    pub converged: bool,
    pub wall_time_s: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
