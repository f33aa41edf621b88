//! Error metrics and leave-one-curve-out cross-validation.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::funcspace::{check_grid, flat_dist_sq, CurveVec};
use crate::kernels::{assemble_gram, BlockGram, KernelStack, OperatorKind, OutputOperator};
use crate::learn::{combine_prediction, fit_with_gram, FitConfig};

/// Residual sum of squares `Σ_i ‖y_i − ŷ_i‖²` in the grid norm.
pub fn rsse(truth: &CurveVec, pred: &CurveVec) -> Result<f64> {
    check_grid(truth.grid(), pred.grid(), "rsse")?;
    if truth.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "{} true curves but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    Ok(flat_dist_sq(
        truth.grid().weights(),
        truth.as_flat(),
        pred.as_flat(),
    ))
}

/// Label classification rate in percent: predictions `≥ threshold` count as
/// label 1. Labels must be 0 or 1.
pub fn lcr(labels: &CurveVec, pred: &CurveVec, threshold: f64) -> Result<f64> {
    check_grid(labels.grid(), pred.grid(), "lcr")?;
    if labels.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "{} label curves but {} predictions",
            labels.len(),
            pred.len()
        )));
    }
    if !threshold.is_finite() {
        return Err(Error::Domain("threshold must be finite".into()));
    }
    let total = labels.as_flat().len();
    if total == 0 {
        return Err(Error::Domain("no labels to score".into()));
    }
    let mut hits = 0usize;
    for (idx, (&l, &p)) in labels.as_flat().iter().zip(pred.as_flat()).enumerate() {
        let truth = if l.abs() <= 1e-9 {
            false
        } else if (l - 1.0).abs() <= 1e-9 {
            true
        } else {
            return Err(Error::Data(format!(
                "label value {l} at position {idx} is not 0 or 1"
            )));
        };
        if (p >= threshold) == truth {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// Hyperparameter grid: every `(λ, q)` pair is scored. `q` is the integral
/// operator rank and only affects integral terms.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSpec {
    pub lambda_grid: Vec<f64>,
    pub rank_grid: Vec<usize>,
}

impl CvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() || self.rank_grid.is_empty() {
            return Err(Error::Domain("cv grids must be non-empty".into()));
        }
        if let Some(l) = self
            .lambda_grid
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::Domain(format!("lambda {l} must be > 0")));
        }
        if self.rank_grid.contains(&0) {
            return Err(Error::Domain("rank must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvRow {
    pub lambda: f64,
    pub rank: usize,
    /// Sum over folds of the held-out squared error; infinite when invalid.
    pub cv_rsse: f64,
    /// False when some fold failed to fit.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub best_lambda: f64,
    pub best_rank: usize,
    pub best_rsse: f64,
    /// One row per `(λ, q)`, `λ` outermost, in grid order.
    pub table: Vec<CvRow>,
}

/// A leave-one-curve-out problem at a fixed integral rank. The scalar Grams
/// are computed once on all `n` curves and restricted per fold.
#[derive(Debug, Clone)]
pub struct LooProblem {
    gram: BlockGram,
    targets: CurveVec,
}

impl LooProblem {
    pub fn new(stack: &KernelStack, inputs: &CurveVec, targets: &CurveVec) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.len() < 2 {
            return Err(Error::Domain(
                "cross-validation needs at least two curves".into(),
            ));
        }
        let gram = assemble_gram(stack, inputs)?;
        gram.check_vec(targets)?;
        Ok(Self {
            gram,
            targets: targets.clone(),
        })
    }

    /// Rebuild integral operators at rank `q`, keeping the scalar Grams.
    pub fn with_rank(&self, q: usize) -> Result<Self> {
        let grid = self.gram.grid().clone();
        let mut built: Vec<(OperatorKind, Arc<OutputOperator>)> = Vec::new();
        let mut operators = Vec::with_capacity(self.gram.num_terms());
        for k in 0..self.gram.num_terms() {
            let kind = match self.gram.operator(k).kind() {
                OperatorKind::Integral { .. } => OperatorKind::Integral { rank: q },
                other => other,
            };
            let op = match built.iter().find(|(b, _)| *b == kind) {
                Some((_, op)) => op.clone(),
                None => {
                    let op = Arc::new(OutputOperator::from_kind(grid.clone(), kind)?);
                    built.push((kind, op.clone()));
                    op
                }
            };
            operators.push(op);
        }
        Ok(Self {
            gram: self.gram.with_operators(operators)?,
            targets: self.targets.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.gram.n()
    }

    pub fn is_empty(&self) -> bool {
        self.gram.n() == 0
    }

    /// Held-out squared error of curve `i` after fitting on the rest.
    pub fn fold_error(&self, i: usize, cfg: &FitConfig) -> Result<f64> {
        let n = self.gram.n();
        if i >= n {
            return Err(Error::Dimension(format!("fold {i} out of {n}")));
        }
        let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let sub = self.gram.subset(&keep);
        let state = fit_with_gram(&sub, &self.targets.select(&keep), cfg)?;
        let cols: Vec<Vec<f64>> = (0..self.gram.num_terms())
            .map(|k| {
                let g = self.gram.scalar_gram(k);
                keep.iter().map(|&j| g[(j, i)]).collect()
            })
            .collect();
        let cross: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let operators: Vec<Arc<OutputOperator>> = (0..self.gram.num_terms())
            .map(|k| self.gram.operator(k).clone())
            .collect();
        let pred = combine_prediction(&operators, &state.weights, &cross, &state.alpha);
        Ok(flat_dist_sq(
            self.gram.grid().weights(),
            self.targets.row(i),
            &pred,
        ))
    }

    /// Sum of [`fold_error`](Self::fold_error) over every fold.
    pub fn score(&self, cfg: &FitConfig) -> Result<f64> {
        (0..self.gram.n()).map(|i| self.fold_error(i, cfg)).sum()
    }
}

/// Index of the best valid row: lowest score, then smallest `λ`, then
/// smallest rank, then first listed.
pub fn select_best(table: &[CvRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, row) in table.iter().enumerate() {
        if !row.valid {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &table[b];
                let better = row.cv_rsse < cur.cv_rsse
                    || (row.cv_rsse == cur.cv_rsse
                        && (row.lambda < cur.lambda
                            || (row.lambda == cur.lambda && row.rank < cur.rank)));
                if better {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Assemble the outcome from scored rows; fails when no row is valid.
pub fn finish_cv(table: Vec<CvRow>) -> Result<CvOutcome> {
    let b = select_best(&table)
        .ok_or_else(|| Error::Degenerate("no hyperparameter setting could be fitted".into()))?;
    Ok(CvOutcome {
        best_lambda: table[b].lambda,
        best_rank: table[b].rank,
        best_rsse: table[b].cv_rsse,
        table,
    })
}

/// Leave-one-curve-out cross-validation of `template` over the `(λ, q)` grid.
/// `cfg.lambda` is ignored; every other fit setting is used as given.
pub fn loo_cv(
    template: &KernelStack,
    inputs: &CurveVec,
    targets: &CurveVec,
    spec: &CvSpec,
    cfg: &FitConfig,
) -> Result<CvOutcome> {
    spec.validate()?;
    let stack = template.with_exponent(cfg.r)?;
    let base = LooProblem::new(&stack, inputs, targets)?;
    let problems = spec
        .rank_grid
        .iter()
        .map(|&q| base.with_rank(q))
        .collect::<Result<Vec<_>>>()?;
    let mut table = Vec::with_capacity(spec.lambda_grid.len() * spec.rank_grid.len());
    for &lambda in &spec.lambda_grid {
        let fold_cfg = FitConfig { lambda, ..*cfg };
        for (problem, &rank) in problems.iter().zip(&spec.rank_grid) {
            let (cv_rsse, valid) = match problem.score(&fold_cfg) {
                Ok(s) if s.is_finite() => (s, true),
                _ => (f64::INFINITY, false),
            };
            table.push(CvRow {
                lambda,
                rank,
                cv_rsse,
                valid,
            });
        }
    }
    finish_cv(table)
}
