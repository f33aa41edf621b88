//! Functional-response kernel ridge regression and `ℓr`-norm MovKL.
//!
//! With the ridge convention `(𝐊 + λI) α = y` the fitted function is
//! `f = Σ_k f_k`, `f_k = d_k Σ_i K_k(x_i, ·) α_i`, minimizing
//!
//! ```text
//! R(f, d) = Σ_k ‖f_k‖² / (2 d_k) + 1/(2λ) Σ_i ‖y_i − f(x_i)‖²
//! ```
//!
//! over `d ∈ {d ≥ 0, Σ d_k^r ≤ 1}`. [`movkl_fit`] alternates the exact
//! `α`-step for fixed `d` with the closed-form `d`-step for fixed `f`, so the
//! recorded `R` values never increase.

use alloc::boxed::Box;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::funcspace::{check_grid, flat_dist_sq, flat_norm_sq, Curve, CurveVec};
use crate::kernels::{
    assemble_gram, check_exponent, dot_flat, gram_apply, BlockGram, KernelStack, OutputOperator,
    OvKernelTerm, ScalarKernel,
};
use crate::linsolve::{
    dense_solve, gauss_seidel_solve, kron_solve, woodbury_solve, SolveConfig, SolveReport,
};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverChoice {
    /// Kronecker when the active terms share one operator, else Gauss-Seidel.
    Auto,
    Dense,
    Kronecker,
    GaussSeidel,
    /// Exact diagonal-plus-low-rank factorization.
    Woodbury,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    /// Ridge `λ` in `(𝐊 + λI) α = y`.
    pub lambda: f64,
    /// Norm exponent `r ∈ [1, ∞]`; `∞` keeps uniform weights.
    pub r: f64,
    /// Stop once `‖α − α′‖ < mkl_tol`.
    pub mkl_tol: f64,
    pub mkl_max_iter: usize,
    pub solve: SolveConfig,
    pub solver: SolverChoice,
    /// Treat an unconverged `α`-solve as a fit failure.
    pub require_convergence: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            r: 2.0,
            mkl_tol: 1e-4,
            mkl_max_iter: 100,
            solve: SolveConfig::default(),
            solver: SolverChoice::Auto,
            require_convergence: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda {} must be > 0", self.lambda)));
        }
        check_exponent(self.r)?;
        if !(self.mkl_tol > 0.0) {
            return Err(Error::Domain("mkl_tol must be > 0".into()));
        }
        if self.mkl_max_iter == 0 {
            return Err(Error::Domain("mkl_max_iter must be >= 1".into()));
        }
        self.solve.validate()
    }
}

/// A fitted model: dual curves, kernel weights and the training inputs.
#[derive(Debug, Clone)]
pub struct MovklModel {
    alpha: CurveVec,
    stack: KernelStack,
    train_inputs: CurveVec,
    lambda: f64,
    objective_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    solve_reports: Vec<SolveReport>,
}

impl MovklModel {
    /// Rebuild a model from stored parts. `stack` carries the fitted weights.
    pub fn from_parts(
        stack: KernelStack,
        train_inputs: CurveVec,
        alpha: CurveVec,
        lambda: f64,
        objective_trace: Vec<f64>,
        iterations: usize,
        converged: bool,
    ) -> Result<Self> {
        if alpha.len() != train_inputs.len() {
            return Err(Error::Dimension(format!(
                "{} dual curves for {} training inputs",
                alpha.len(),
                train_inputs.len()
            )));
        }
        check_grid(stack.output_grid(), alpha.grid(), "model dual curves")?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda {lambda} must be > 0")));
        }
        Ok(Self {
            alpha,
            stack,
            train_inputs,
            lambda,
            objective_trace,
            iterations,
            converged,
            solve_reports: Vec::new(),
        })
    }

    pub fn alpha(&self) -> &CurveVec {
        &self.alpha
    }

    pub fn weights(&self) -> Vec<f64> {
        self.stack.weights()
    }

    pub fn stack(&self) -> &KernelStack {
        &self.stack
    }

    pub fn train_inputs(&self) -> &CurveVec {
        &self.train_inputs
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn r(&self) -> f64 {
        self.stack.norm_exponent()
    }

    /// Primal objective after each `α`-step.
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    /// Outer (`α`, `d`) iterations performed.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Whether the `α`-change criterion fired before `mkl_max_iter`.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn solve_reports(&self) -> &[SolveReport] {
        &self.solve_reports
    }
}

/// Closed-form minimizer of `Σ_k ‖f_k‖² / d_k` over `Σ d_k^r ≤ 1`:
/// `d_k = ‖f_k‖^{2/(r+1)} / (Σ_l ‖f_l‖^{2r/(r+1)})^{1/r}`.
pub fn weight_update(fnorms_sq: &[f64], r: f64) -> Result<Vec<f64>> {
    check_exponent(r)?;
    if r.is_infinite() {
        return Err(Error::Domain(
            "r = inf keeps uniform weights and has no closed-form update".into(),
        ));
    }
    let mut norms = Vec::with_capacity(fnorms_sq.len());
    for (k, &v) in fnorms_sq.iter().enumerate() {
        if !(v >= -1e-10) || !v.is_finite() {
            return Err(Error::Domain(format!("squared norm {k} is {v}")));
        }
        norms.push(math::sqrt(v.max(0.0)));
    }
    if norms.iter().all(|n| *n == 0.0) {
        return Err(Error::Degenerate("every kernel term has zero norm".into()));
    }
    let den = math::powf(
        norms
            .iter()
            .map(|n| math::powf(*n, 2.0 * r / (r + 1.0)))
            .sum::<f64>(),
        1.0 / r,
    );
    Ok(norms
        .iter()
        .map(|n| math::powf(*n, 2.0 / (r + 1.0)) / den)
        .collect())
}

/// `‖f_k‖² = d_k² ⟨(𝐆_k ⊗ T_k) α, α⟩`.
pub fn fk_norm_sq(g: &BlockGram, alpha: &CurveVec, k: usize) -> Result<f64> {
    let q = g.term_quadratic(k, alpha)?;
    let d = g.weights()[k];
    Ok(d * d * q)
}

/// `R(f, d)` for `f` given by `α` under the weights held in `g`.
fn primal_objective(g: &BlockGram, alpha: &CurveVec, y: &CurveVec, lambda: f64) -> Result<f64> {
    let ka = gram_apply(g, alpha)?;
    let w = g.grid().weights();
    let reg = dot_flat(w, ka.as_flat(), alpha.as_flat());
    let loss = flat_dist_sq(w, y.as_flat(), ka.as_flat());
    Ok(0.5 * reg + loss / (2.0 * lambda))
}

fn solve_alpha(
    g: &BlockGram,
    y: &CurveVec,
    cfg: &FitConfig,
    warm: Option<&CurveVec>,
) -> Result<(CurveVec, SolveReport)> {
    match cfg.solver {
        SolverChoice::Dense => dense_solve(g, cfg.lambda, y),
        SolverChoice::Kronecker => kron_solve(g, cfg.lambda, y),
        SolverChoice::GaussSeidel => gauss_seidel_solve(g, cfg.lambda, y, &cfg.solve, warm),
        SolverChoice::Woodbury => woodbury_solve(g, cfg.lambda, y),
        SolverChoice::Auto => {
            if g.groups().len() <= 1 {
                kron_solve(g, cfg.lambda, y)
            } else {
                gauss_seidel_solve(g, cfg.lambda, y, &cfg.solve, warm)
            }
        }
    }
}

/// Outcome of the alternating loop on a prepared Gram.
#[derive(Debug, Clone)]
pub(crate) struct FitState {
    pub alpha: CurveVec,
    pub weights: Vec<f64>,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reports: Vec<SolveReport>,
}

pub(crate) fn fit_with_gram(
    gram: &BlockGram,
    targets: &CurveVec,
    cfg: &FitConfig,
) -> Result<FitState> {
    cfg.validate()?;
    gram.check_vec(targets)?;
    let m_terms = gram.num_terms();
    let w = gram.grid().weights();
    let mut d = vec![1.0 / m_terms as f64; m_terms];
    let mut alpha = CurveVec::zeros(gram.grid().clone(), gram.n());
    let mut trace = Vec::new();
    let mut reports = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let abort = |iteration: usize, trace: &[f64], e: Error| Error::FitAborted {
        iteration,
        trace: trace.to_vec(),
        source: Box::new(e),
    };

    for t in 1..=cfg.mkl_max_iter {
        iterations = t;
        let g = gram.with_weights(&d)?;
        let (next, report) =
            solve_alpha(&g, targets, cfg, Some(&alpha)).map_err(|e| abort(t, &trace, e))?;
        if cfg.require_convergence && !report.converged {
            let e = Error::NotConverged {
                iterations: report.iterations,
                residual: report.final_residual,
            };
            return Err(abort(t, &trace, e));
        }
        reports.push(report);
        trace.push(primal_objective(&g, &next, targets, cfg.lambda)?);
        let change = math::sqrt(flat_dist_sq(w, next.as_flat(), alpha.as_flat()));
        alpha = next;
        if change < cfg.mkl_tol {
            converged = true;
            break;
        }
        // Keep the returned weights consistent with the returned α.
        if cfg.r.is_finite() && t < cfg.mkl_max_iter {
            let norms = (0..m_terms)
                .map(|k| fk_norm_sq(&g, &alpha, k))
                .collect::<Result<Vec<_>>>()?;
            d = weight_update(&norms, cfg.r).map_err(|e| abort(t, &trace, e))?;
        }
    }
    Ok(FitState {
        alpha,
        weights: d,
        trace,
        iterations,
        converged,
        reports,
    })
}

/// Fit `ℓr`-norm MovKL: weights start at `1/M`, `α` at zero.
pub fn movkl_fit(
    stack: &KernelStack,
    inputs: &CurveVec,
    targets: &CurveVec,
    cfg: &FitConfig,
) -> Result<MovklModel> {
    if inputs.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    cfg.validate()?;
    let stack = stack.with_exponent(cfg.r)?;
    let gram = assemble_gram(&stack, inputs)?;
    let state = fit_with_gram(&gram, targets, cfg)?;
    Ok(MovklModel {
        alpha: state.alpha,
        stack: stack.with_weights(&state.weights)?,
        train_inputs: inputs.clone(),
        lambda: cfg.lambda,
        objective_trace: state.trace,
        iterations: state.iterations,
        converged: state.converged,
        solve_reports: state.reports,
    })
}

/// Single operator-valued kernel ridge regression (`M = 1`, `d = 1`).
pub fn krr_fit(
    term: &OvKernelTerm,
    inputs: &CurveVec,
    targets: &CurveVec,
    cfg: &FitConfig,
) -> Result<MovklModel> {
    let single = OvKernelTerm {
        weight: 1.0,
        ..term.clone()
    };
    let stack = KernelStack::new(vec![single], cfg.r)?;
    let cfg = FitConfig {
        solver: match cfg.solver {
            SolverChoice::Auto => SolverChoice::Kronecker,
            s => s,
        },
        ..*cfg
    };
    movkl_fit(&stack, inputs, targets, &cfg)
}

/// `ŷ = Σ_groups T_o (Σ_i c_{o,i} α_i)` with `c_{o,i} = Σ_{k∈o} d_k cross_k[i]`.
pub(crate) fn combine_prediction(
    operators: &[Arc<OutputOperator>],
    weights: &[f64],
    cross: &[&[f64]],
    alpha: &CurveVec,
) -> Vec<f64> {
    let m = alpha.curve_len();
    let mut out = vec![0.0; m];
    let mut tmp = vec![0.0; m];
    let mut done = vec![false; operators.len()];
    for k in 0..operators.len() {
        if done[k] || weights[k] == 0.0 {
            continue;
        }
        let mut v = vec![0.0; m];
        for l in k..operators.len() {
            if done[l] || weights[l] == 0.0 || *operators[l] != *operators[k] {
                continue;
            }
            done[l] = true;
            for (i, row) in alpha.rows().enumerate() {
                let c = weights[l] * cross[l][i];
                for (o, a) in v.iter_mut().zip(row) {
                    *o += c * a;
                }
            }
        }
        operators[k].apply_slice(&v, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += t;
        }
    }
    out
}

/// `ŷ(x) = Σ_k d_k Σ_i G_k(x_i, x) T_k α_i`.
pub fn predict(model: &MovklModel, x_new: &Curve) -> Result<Curve> {
    check_grid(model.train_inputs.grid(), x_new.grid(), "predict")?;
    let terms = model.stack.terms();
    let mut cache: Vec<(ScalarKernel, Vec<f64>)> = Vec::new();
    let mut idx = Vec::with_capacity(terms.len());
    for t in terms {
        match cache.iter().position(|(k, _)| *k == t.scalar) {
            Some(p) => idx.push(p),
            None => {
                cache.push((t.scalar, t.scalar.cross(&model.train_inputs, x_new)?));
                idx.push(cache.len() - 1);
            }
        }
    }
    let cross: Vec<&[f64]> = idx.iter().map(|&p| cache[p].1.as_slice()).collect();
    let operators: Vec<Arc<OutputOperator>> = terms.iter().map(|t| t.operator.clone()).collect();
    let weights: Vec<f64> = terms.iter().map(|t| t.weight).collect();
    let values = combine_prediction(&operators, &weights, &cross, &model.alpha);
    Ok(Curve::from_raw(model.alpha.grid().clone(), values))
}

/// [`predict`] for every curve of `xs`.
pub fn predict_many(model: &MovklModel, xs: &CurveVec) -> Result<CurveVec> {
    let mut values = Vec::with_capacity(xs.len() * model.alpha.curve_len());
    for i in 0..xs.len() {
        values.extend_from_slice(predict(model, &xs.curve(i))?.values());
    }
    Ok(CurveVec::from_raw(
        model.alpha.grid().clone(),
        xs.len(),
        values,
    ))
}

/// `Σ d_k^r` (or `max d_k` for `r = ∞`), for feasibility checks.
pub fn weight_constraint(d: &[f64], r: f64) -> f64 {
    crate::kernels::weight_norm(d, r)
}

/// Squared `𝒢ⁿ` norm, exposed for diagnostics.
pub fn curvevec_norm_sq(v: &CurveVec) -> f64 {
    flat_norm_sq(v.grid().weights(), v.as_flat())
}
