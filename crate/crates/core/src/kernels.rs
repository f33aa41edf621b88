//! Scalar kernels, output operators and block Gram assembly.
//!
//! An operator-valued kernel here is always a finite sum of separable terms
//! `K(w, z) = Σ_k d_k G_k(w, z) T_k` where `G_k` is a scalar kernel on input
//! curves and `T_k` a self-adjoint positive operator on output curves.
//! [`BlockGram`] keeps the factors `(𝐆_k, T_k, d_k)` and never forms the
//! `(n·m)×(n·m)` block matrix except through [`BlockGram::densify`].

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::funcspace::{check_grid, same_grid, Curve, CurveVec, Grid};
use crate::math;

/// Largest `n·m` accepted by [`BlockGram::densify`].
pub const DENSE_LIMIT: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarKernel {
    /// `exp(-‖x - z‖² / (2σ²))` with the quadrature distance. With
    /// `normalize`, both curves are scaled to unit norm first.
    Gaussian { bandwidth: f64, normalize: bool },
    /// `(⟨x, z⟩ + c)^p`.
    Polynomial { degree: u32, offset: f64 },
}

impl ScalarKernel {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        let k = ScalarKernel::Gaussian {
            bandwidth,
            normalize: false,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn polynomial(degree: u32, offset: f64) -> Result<Self> {
        let k = ScalarKernel::Polynomial { degree, offset };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScalarKernel::Gaussian { bandwidth, .. } => {
                if !(bandwidth.is_finite() && bandwidth > 0.0) {
                    return Err(Error::Domain(format!(
                        "gaussian bandwidth {bandwidth} must be > 0"
                    )));
                }
            }
            ScalarKernel::Polynomial { degree, offset } => {
                if !(1..=3).contains(&degree) {
                    return Err(Error::Domain(format!(
                        "polynomial degree {degree} not in 1..=3"
                    )));
                }
                if !(offset.is_finite() && offset >= 0.0) {
                    return Err(Error::Domain(format!(
                        "polynomial offset {offset} must be >= 0"
                    )));
                }
            }
        }
        Ok(())
    }

    fn eval_raw(&self, w: &[f64], x: &[f64], z: &[f64]) -> f64 {
        match *self {
            ScalarKernel::Gaussian {
                bandwidth,
                normalize,
            } => {
                let d2 = if normalize {
                    let nx = unit_scale(w, x);
                    let nz = unit_scale(w, z);
                    w.iter()
                        .zip(x)
                        .zip(z)
                        .map(|((w, a), b)| {
                            let d = a * nx - b * nz;
                            w * d * d
                        })
                        .sum()
                } else {
                    math::wdist_sq(w, x, z)
                };
                math::exp(-d2 / (2.0 * bandwidth * bandwidth))
            }
            ScalarKernel::Polynomial { degree, offset } => {
                math::powi(math::wdot(w, x, z) + offset, degree)
            }
        }
    }

    /// `𝐆_{ij} = G(x_i, x_j)`, filled symmetrically.
    pub fn gram(&self, inputs: &CurveVec) -> DMatrix<f64> {
        let n = inputs.len();
        let w = inputs.grid().weights();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval_raw(w, inputs.row(i), inputs.row(j));
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// `(G(x_1, x), …, G(x_n, x))`.
    pub fn cross(&self, inputs: &CurveVec, x: &Curve) -> Result<Vec<f64>> {
        check_grid(inputs.grid(), x.grid(), "kernel cross evaluation")?;
        let w = inputs.grid().weights();
        Ok(inputs
            .rows()
            .map(|r| self.eval_raw(w, r, x.values()))
            .collect())
    }
}

fn unit_scale(w: &[f64], x: &[f64]) -> f64 {
    let n = math::sqrt(math::wnorm_sq(w, x));
    if n > 0.0 {
        1.0 / n
    } else {
        0.0
    }
}

pub fn scalar_eval(k: &ScalarKernel, x: &Curve, z: &Curve) -> Result<f64> {
    check_grid(x.grid(), z.grid(), "scalar_eval")?;
    k.validate()?;
    Ok(k.eval_raw(x.grid().weights(), x.values(), z.values()))
}

/// Median of the pairwise quadrature distances `‖x_i - x_j‖`, `i < j`.
pub fn median_pairwise_distance(inputs: &CurveVec) -> f64 {
    let w = inputs.grid().weights();
    let n = inputs.len();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in 0..i {
            d.push(math::sqrt(math::wdist_sq(w, inputs.row(i), inputs.row(j))));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let k = d.len();
    if k % 2 == 1 {
        d[k / 2]
    } else {
        0.5 * (d[k / 2 - 1] + d[k / 2])
    }
}

/// Multipliers applied to the median pairwise distance for the default
/// Gaussian bandwidth menu.
pub const DEFAULT_BANDWIDTH_FACTORS: [f64; 5] = [0.1, 0.5, 1.0, 5.0, 10.0];

/// Default rank cap for integral operators.
pub const DEFAULT_INTEGRAL_RANK: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// `T y = y`.
    Identity,
    /// `(T y)(t) = e^{-t²} y(t)`.
    Multiplication,
    /// `(T y)(t) = ∫ e^{-|t-s|} y(s) ds`, truncated to its top `rank`
    /// eigenpairs when `rank < m`.
    Integral { rank: usize },
}

/// Eigenpairs of an output operator. Columns of `vectors` are orthonormal in
/// the quadrature inner product; `values` are sorted descending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

#[derive(Debug, Clone)]
enum Repr {
    Identity,
    Diagonal(Vec<f64>),
    Integral {
        /// Row-major `κ(t_j, t_l)·w_l`, kept only at full rank.
        dense: Option<Vec<f64>>,
        values: Vec<f64>,
        /// `m × q`, quadrature-orthonormal columns.
        vectors: DMatrix<f64>,
    },
}

/// A structured self-adjoint positive operator on curves of one grid.
#[derive(Debug, Clone)]
pub struct OutputOperator {
    grid: Arc<Grid>,
    kind: OperatorKind,
    repr: Repr,
}

impl PartialEq for OutputOperator {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && same_grid(&self.grid, &other.grid)
    }
}

impl OutputOperator {
    pub fn identity(grid: Arc<Grid>) -> Self {
        Self {
            grid,
            kind: OperatorKind::Identity,
            repr: Repr::Identity,
        }
    }

    pub fn multiplication(grid: Arc<Grid>) -> Self {
        let h = grid.points().iter().map(|t| math::exp(-t * t)).collect();
        Self {
            grid,
            kind: OperatorKind::Multiplication,
            repr: Repr::Diagonal(h),
        }
    }

    /// Integral operator with kernel `e^{-|t-s|}`. `rank` is capped at the
    /// grid size; `rank == m` keeps the exact quadrature operator.
    pub fn integral(grid: Arc<Grid>, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Domain("integral operator rank must be >= 1".into()));
        }
        let m = grid.len();
        let q = rank.min(m);
        let t = grid.points();
        let w = grid.weights();
        let sw: Vec<f64> = w.iter().map(|w| math::sqrt(*w)).collect();
        let sym = DMatrix::from_fn(m, m, |j, l| sw[j] * math::exp(-(t[j] - t[l]).abs()) * sw[l]);
        let eig = sym
            .try_symmetric_eigen(f64::EPSILON, 0)
            .ok_or_else(|| Error::Numerical(format!("symmetric eigensolver failed for m = {m}")))?;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values: Vec<f64> = order[..q]
            .iter()
            .map(|&i| eig.eigenvalues[i].max(0.0))
            .collect();
        let vectors = DMatrix::from_fn(m, q, |j, c| eig.eigenvectors[(j, order[c])] / sw[j]);
        let dense = (q == m).then(|| {
            let mut kw = vec![0.0; m * m];
            for j in 0..m {
                for l in 0..m {
                    kw[j * m + l] = math::exp(-(t[j] - t[l]).abs()) * w[l];
                }
            }
            kw
        });
        Ok(Self {
            grid,
            kind: OperatorKind::Integral { rank: q },
            repr: Repr::Integral {
                dense,
                values,
                vectors,
            },
        })
    }

    pub fn from_kind(grid: Arc<Grid>, kind: OperatorKind) -> Result<Self> {
        match kind {
            OperatorKind::Identity => Ok(Self::identity(grid)),
            OperatorKind::Multiplication => Ok(Self::multiplication(grid)),
            OperatorKind::Integral { rank } => Self::integral(grid, rank),
        }
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Largest eigenvalue.
    pub fn norm_bound(&self) -> f64 {
        match &self.repr {
            Repr::Identity => 1.0,
            Repr::Diagonal(h) => h.iter().copied().fold(0.0, f64::max),
            Repr::Integral { values, .. } => values.first().copied().unwrap_or(0.0),
        }
    }

    /// Diagonal of `T` on the grid, when `T` is diagonal.
    pub(crate) fn diagonal(&self) -> Option<Vec<f64>> {
        match &self.repr {
            Repr::Identity => Some(vec![1.0; self.grid.len()]),
            Repr::Diagonal(h) => Some(h.clone()),
            Repr::Integral { .. } => None,
        }
    }

    /// `(λ, V)` with `T = V diag(λ) Vᵀ W`, for integral operators.
    pub(crate) fn low_rank(&self) -> Option<(&[f64], &DMatrix<f64>)> {
        match &self.repr {
            Repr::Integral {
                values, vectors, ..
            } => Some((values, vectors)),
            _ => None,
        }
    }

    pub(crate) fn is_identity(&self) -> bool {
        matches!(self.repr, Repr::Identity)
    }

    pub(crate) fn apply_slice(&self, a: &[f64], out: &mut [f64]) {
        match &self.repr {
            Repr::Identity => out.copy_from_slice(a),
            Repr::Diagonal(h) => {
                for ((o, h), a) in out.iter_mut().zip(h).zip(a) {
                    *o = h * a;
                }
            }
            Repr::Integral {
                dense: Some(kw), ..
            } => {
                let m = a.len();
                for (j, o) in out.iter_mut().enumerate() {
                    *o = kw[j * m..(j + 1) * m]
                        .iter()
                        .zip(a)
                        .map(|(k, a)| k * a)
                        .sum();
                }
            }
            Repr::Integral {
                dense: None,
                values,
                vectors,
            } => {
                let w = self.grid.weights();
                out.fill(0.0);
                for (c, lambda) in values.iter().enumerate() {
                    let v = vectors.column(c);
                    let p: f64 = (0..a.len()).map(|j| v[j] * w[j] * a[j]).sum::<f64>() * lambda;
                    for (o, vj) in out.iter_mut().zip(v.iter()) {
                        *o += p * vj;
                    }
                }
            }
        }
    }

    /// Solve `(scale·T + shift·I) u = b` into `out`. Requires every
    /// `scale·λ_i + shift` to be positive.
    pub(crate) fn shifted_solve_slice(
        &self,
        scale: f64,
        shift: f64,
        b: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let bad = |den: f64| !(den > 0.0 && den.is_finite());
        match &self.repr {
            Repr::Identity => {
                let den = scale + shift;
                if bad(den) {
                    return Err(Error::Numerical(format!(
                        "singular shifted identity ({den})"
                    )));
                }
                for (o, b) in out.iter_mut().zip(b) {
                    *o = b / den;
                }
            }
            Repr::Diagonal(h) => {
                for ((o, h), b) in out.iter_mut().zip(h).zip(b) {
                    let den = scale * h + shift;
                    if bad(den) {
                        return Err(Error::Numerical(format!(
                            "singular shifted multiplication ({den})"
                        )));
                    }
                    *o = b / den;
                }
            }
            Repr::Integral {
                values, vectors, ..
            } => {
                if bad(shift) {
                    return Err(Error::Numerical(format!("non-positive shift {shift}")));
                }
                let w = self.grid.weights();
                for (o, b) in out.iter_mut().zip(b) {
                    *o = b / shift;
                }
                for (c, lambda) in values.iter().enumerate() {
                    let den = scale * lambda + shift;
                    if bad(den) {
                        return Err(Error::Numerical(format!(
                            "singular shifted integral ({den})"
                        )));
                    }
                    let v = vectors.column(c);
                    let p: f64 = (0..b.len()).map(|j| v[j] * w[j] * b[j]).sum();
                    let f = p * (1.0 / den - 1.0 / shift);
                    for (o, vj) in out.iter_mut().zip(v.iter()) {
                        *o += f * vj;
                    }
                }
            }
        }
        Ok(())
    }

    /// Coordinate matrix of `T` (column `l` is `T e_l`).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let m = self.grid.len();
        let mut out = DMatrix::zeros(m, m);
        let mut e = vec![0.0; m];
        let mut col = vec![0.0; m];
        for l in 0..m {
            e[l] = 1.0;
            self.apply_slice(&e, &mut col);
            out.column_mut(l).copy_from_slice(&col);
            e[l] = 0.0;
        }
        out
    }
}

pub fn op_apply(t: &OutputOperator, a: &Curve) -> Result<Curve> {
    check_grid(&t.grid, a.grid(), "op_apply")?;
    let mut out = vec![0.0; a.len()];
    t.apply_slice(a.values(), &mut out);
    Ok(Curve::from_raw(a.grid().clone(), out))
}

pub fn op_spectrum(t: &OutputOperator) -> Result<Spectrum> {
    let w = t.grid.weights();
    let m = w.len();
    let coordinate = |order: &[usize]| {
        DMatrix::from_fn(m, m, |j, c| {
            if j == order[c] {
                1.0 / math::sqrt(w[j])
            } else {
                0.0
            }
        })
    };
    Ok(match &t.repr {
        Repr::Identity => {
            let order: Vec<usize> = (0..m).collect();
            Spectrum {
                values: vec![1.0; m],
                vectors: coordinate(&order),
            }
        }
        Repr::Diagonal(h) => {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| h[b].total_cmp(&h[a]));
            Spectrum {
                values: order.iter().map(|&j| h[j]).collect(),
                vectors: coordinate(&order),
            }
        }
        Repr::Integral {
            values, vectors, ..
        } => Spectrum {
            values: values.clone(),
            vectors: vectors.clone(),
        },
    })
}

/// Solve `(scale·T + c·I) u = b`.
pub fn op_shifted_solve(t: &OutputOperator, c: f64, scale: f64, b: &Curve) -> Result<Curve> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!("shift {c} must be > 0")));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("scale {scale} must be >= 0")));
    }
    check_grid(&t.grid, b.grid(), "op_shifted_solve")?;
    let mut out = vec![0.0; b.len()];
    t.shifted_solve_slice(scale, c, b.values(), &mut out)?;
    Ok(Curve::from_raw(b.grid().clone(), out))
}

/// Template for one kernel term, independent of any grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermSpec {
    pub scalar: ScalarKernel,
    pub operator: OperatorKind,
}

/// One weighted term `d_k G_k T_k`.
#[derive(Debug, Clone)]
pub struct OvKernelTerm {
    pub scalar: ScalarKernel,
    pub operator: Arc<OutputOperator>,
    pub weight: f64,
}

impl OvKernelTerm {
    pub fn spec(&self) -> TermSpec {
        TermSpec {
            scalar: self.scalar,
            operator: self.operator.kind(),
        }
    }
}

/// A weighted sum of operator-valued kernel terms on one output grid with
/// weights in `{d ≥ 0, Σ d_k^r ≤ 1}`.
#[derive(Debug, Clone)]
pub struct KernelStack {
    terms: Vec<OvKernelTerm>,
    norm_exponent: f64,
}

const FEASIBILITY_SLACK: f64 = 1e-9;

pub(crate) fn check_exponent(r: f64) -> Result<()> {
    if r.is_nan() || r < 1.0 {
        return Err(Error::Domain(format!(
            "norm exponent {r} must be in [1, inf]"
        )));
    }
    Ok(())
}

/// `Σ d_k^r`, or `max d_k` for `r = ∞`.
pub(crate) fn weight_norm(d: &[f64], r: f64) -> f64 {
    if r.is_infinite() {
        d.iter().copied().fold(0.0, f64::max)
    } else {
        d.iter().map(|x| math::powf(*x, r)).sum()
    }
}

impl KernelStack {
    pub fn new(terms: Vec<OvKernelTerm>, norm_exponent: f64) -> Result<Self> {
        check_exponent(norm_exponent)?;
        let first = terms
            .first()
            .ok_or_else(|| Error::Domain("a kernel stack needs at least one term".into()))?;
        let grid = first.operator.grid().clone();
        for (k, t) in terms.iter().enumerate() {
            t.scalar.validate()?;
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(Error::Domain(format!("term {k} has weight {}", t.weight)));
            }
            if !same_grid(&grid, t.operator.grid()) {
                return Err(Error::Dimension(format!(
                    "term {k} uses a different output grid"
                )));
            }
        }
        let d: Vec<f64> = terms.iter().map(|t| t.weight).collect();
        let norm = weight_norm(&d, norm_exponent);
        if norm > 1.0 + FEASIBILITY_SLACK {
            return Err(Error::Domain(format!(
                "weights violate the l{norm_exponent} constraint (norm {norm})"
            )));
        }
        Ok(Self {
            terms,
            norm_exponent,
        })
    }

    /// Build terms from templates on `grid` with uniform weights `1/M`.
    /// Operators with the same kind are shared. `rank_override` replaces the
    /// rank of every integral operator.
    pub fn from_specs(
        specs: &[TermSpec],
        grid: &Arc<Grid>,
        norm_exponent: f64,
        rank_override: Option<usize>,
    ) -> Result<Self> {
        let mut built: Vec<(OperatorKind, Arc<OutputOperator>)> = Vec::new();
        let mut terms = Vec::with_capacity(specs.len());
        let weight = 1.0 / specs.len().max(1) as f64;
        for spec in specs {
            let kind = match (spec.operator, rank_override) {
                (OperatorKind::Integral { .. }, Some(q)) => OperatorKind::Integral { rank: q },
                (k, _) => k,
            };
            let op = match built.iter().find(|(k, _)| *k == kind) {
                Some((_, op)) => op.clone(),
                None => {
                    let op = Arc::new(OutputOperator::from_kind(grid.clone(), kind)?);
                    built.push((kind, op.clone()));
                    op
                }
            };
            terms.push(OvKernelTerm {
                scalar: spec.scalar,
                operator: op,
                weight,
            });
        }
        Self::new(terms, norm_exponent)
    }

    pub fn terms(&self) -> &[OvKernelTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn norm_exponent(&self) -> f64 {
        self.norm_exponent
    }

    pub fn weights(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.weight).collect()
    }

    pub fn output_grid(&self) -> &Arc<Grid> {
        self.terms[0].operator.grid()
    }

    pub fn specs(&self) -> Vec<TermSpec> {
        self.terms.iter().map(OvKernelTerm::spec).collect()
    }

    pub fn with_weights(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.terms.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} terms",
                d.len(),
                self.terms.len()
            )));
        }
        let terms = self
            .terms
            .iter()
            .zip(d)
            .map(|(t, &w)| OvKernelTerm {
                weight: w,
                ..t.clone()
            })
            .collect();
        Self::new(terms, self.norm_exponent)
    }

    pub fn with_exponent(&self, r: f64) -> Result<Self> {
        Self::new(self.terms.clone(), r)
    }

    /// True when every term shares one output operator.
    pub fn single_operator(&self) -> bool {
        let first = &self.terms[0].operator;
        self.terms.iter().all(|t| *t.operator == **first)
    }
}

/// Terms sharing one operator, with `Σ d_k 𝐆_k` over those terms.
#[derive(Debug, Clone)]
pub(crate) struct OperatorGroup {
    pub operator: Arc<OutputOperator>,
    pub gram: DMatrix<f64>,
}

/// Factored block operator kernel matrix `𝐊 = Σ_k d_k 𝐆_k ⊗ T_k`.
#[derive(Debug, Clone)]
pub struct BlockGram {
    n: usize,
    grid: Arc<Grid>,
    grams: Vec<Arc<DMatrix<f64>>>,
    operators: Vec<Arc<OutputOperator>>,
    weights: Vec<f64>,
}

impl BlockGram {
    /// Build from precomputed factors. Each gram must be `n × n` symmetric.
    pub fn from_parts(
        grams: Vec<DMatrix<f64>>,
        operators: Vec<Arc<OutputOperator>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if grams.is_empty() || grams.len() != operators.len() || grams.len() != weights.len() {
            return Err(Error::Dimension(
                "grams, operators and weights must align".into(),
            ));
        }
        let n = grams[0].nrows();
        let grid = operators[0].grid().clone();
        for (k, g) in grams.iter().enumerate() {
            if g.nrows() != n || g.ncols() != n {
                return Err(Error::Dimension(format!("gram {k} is not {n} x {n}")));
            }
            if !same_grid(&grid, operators[k].grid()) {
                return Err(Error::Dimension(format!(
                    "operator {k} uses a different grid"
                )));
            }
        }
        if let Some(k) = weights.iter().position(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::Domain(format!("weight {k} must be >= 0")));
        }
        Ok(Self {
            n,
            grid,
            grams: grams.into_iter().map(Arc::new).collect(),
            operators,
            weights,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_terms(&self) -> usize {
        self.grams.len()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scalar_gram(&self, k: usize) -> &DMatrix<f64> {
        &self.grams[k]
    }

    pub fn operator(&self, k: usize) -> &Arc<OutputOperator> {
        &self.operators[k]
    }

    /// Same factors, new weights.
    pub fn with_weights(&self, d: &[f64]) -> Result<Self> {
        if d.len() != self.weights.len() {
            return Err(Error::Dimension(format!(
                "{} weights for {} terms",
                d.len(),
                self.weights.len()
            )));
        }
        if let Some(k) = d.iter().position(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::Domain(format!("weight {k} must be >= 0")));
        }
        Ok(Self {
            weights: d.to_vec(),
            ..self.clone()
        })
    }

    /// Restrict to the sample indices `idx` (rows and columns of every 𝐆_k).
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut grams: Vec<Arc<DMatrix<f64>>> = Vec::with_capacity(self.grams.len());
        for (k, g) in self.grams.iter().enumerate() {
            let shared = (0..k).find(|&l| Arc::ptr_eq(&self.grams[l], g));
            grams.push(match shared {
                Some(l) => grams[l].clone(),
                None => Arc::new(DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
                    g[(idx[a], idx[b])]
                })),
            });
        }
        Self {
            n: idx.len(),
            grams,
            ..self.clone()
        }
    }

    /// Same scalar Grams bound to other operators (one per term).
    pub(crate) fn with_operators(&self, operators: Vec<Arc<OutputOperator>>) -> Result<Self> {
        if operators.len() != self.grams.len() {
            return Err(Error::Dimension("one operator per term required".into()));
        }
        let grid = operators[0].grid().clone();
        if operators.iter().any(|o| !same_grid(&grid, o.grid())) {
            return Err(Error::Dimension("operators must share one grid".into()));
        }
        Ok(Self {
            grid,
            operators,
            ..self.clone()
        })
    }

    /// Active terms (`d_k > 0`) merged by operator, in first-seen order.
    pub(crate) fn groups(&self) -> Vec<OperatorGroup> {
        let mut groups: Vec<OperatorGroup> = Vec::new();
        for k in 0..self.grams.len() {
            let d = self.weights[k];
            if d == 0.0 {
                continue;
            }
            let op = &self.operators[k];
            match groups.iter_mut().find(|g| *g.operator == **op) {
                Some(g) => g.gram += &*self.grams[k] * d,
                None => groups.push(OperatorGroup {
                    operator: op.clone(),
                    gram: &*self.grams[k] * d,
                }),
            }
        }
        groups
    }

    /// `⟨(𝐆_k ⊗ T_k) α, α⟩` (unweighted by `d_k`).
    pub fn term_quadratic(&self, k: usize, alpha: &CurveVec) -> Result<f64> {
        if k >= self.grams.len() {
            return Err(Error::Domain(format!("term index {k} out of range")));
        }
        self.check_vec(alpha)?;
        let group = OperatorGroup {
            operator: self.operators[k].clone(),
            gram: (*self.grams[k]).clone(),
        };
        let mut out = vec![0.0; alpha.as_flat().len()];
        apply_groups(core::slice::from_ref(&group), alpha.as_flat(), &mut out);
        Ok(dot_flat(self.grid.weights(), &out, alpha.as_flat()))
    }

    pub(crate) fn check_vec(&self, v: &CurveVec) -> Result<()> {
        check_grid(&self.grid, v.grid(), "block gram")?;
        if v.len() != self.n {
            return Err(Error::Dimension(format!(
                "{} curves for an n = {} system",
                v.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// Explicit `(n·m) × (n·m)` matrix `Σ_k d_k 𝐆_k ⊗ [T_k]` in coordinates.
    pub fn densify(&self) -> Result<DMatrix<f64>> {
        let m = self.grid.len();
        let size = self.n * m;
        if size > DENSE_LIMIT {
            return Err(Error::Capacity {
                size,
                limit: DENSE_LIMIT,
            });
        }
        let mut out = DMatrix::zeros(size, size);
        for g in self.groups() {
            let t = g.operator.to_matrix();
            for i in 0..self.n {
                for j in 0..self.n {
                    let c = g.gram[(i, j)];
                    if c == 0.0 {
                        continue;
                    }
                    let mut block = out.view_mut((i * m, j * m), (m, m));
                    block += &t * c;
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn dot_flat(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let m = w.len();
    a.chunks_exact(m)
        .zip(b.chunks_exact(m))
        .map(|(x, y)| math::wdot(w, x, y))
        .sum()
}

/// `out = Σ_groups (Gc ⊗ T) α` on flat row-major buffers.
pub(crate) fn apply_groups(groups: &[OperatorGroup], alpha: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let Some(first) = groups.first() else {
        return;
    };
    let m = first.operator.grid().len();
    let n = alpha.len() / m;
    let mut t_alpha = vec![0.0; alpha.len()];
    for g in groups {
        for j in 0..n {
            g.operator
                .apply_slice(&alpha[j * m..(j + 1) * m], &mut t_alpha[j * m..(j + 1) * m]);
        }
        accumulate_gram_rows(&g.gram, &t_alpha, m, out);
    }
}

/// `out_i += Σ_j G_ij v_j` for row-major curves `v`.
pub(crate) fn accumulate_gram_rows(gram: &DMatrix<f64>, v: &[f64], m: usize, out: &mut [f64]) {
    let n = gram.nrows();
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for j in 0..n {
            let c = gram[(i, j)];
            if c == 0.0 {
                continue;
            }
            for (o, x) in row.iter_mut().zip(&v[j * m..(j + 1) * m]) {
                *o += c * x;
            }
        }
    }
}

/// Compute the scalar Gram matrices of `stack` on `inputs` (each distinct
/// scalar kernel once) and bind them to the stack's operators and weights.
pub fn assemble_gram(stack: &KernelStack, inputs: &CurveVec) -> Result<BlockGram> {
    if inputs.is_empty() {
        return Err(Error::Domain("need at least one input curve".into()));
    }
    let mut cache: Vec<(ScalarKernel, Arc<DMatrix<f64>>)> = Vec::new();
    let mut grams = Vec::with_capacity(stack.len());
    for t in stack.terms() {
        let g = match cache.iter().find(|(k, _)| *k == t.scalar) {
            Some((_, g)) => g.clone(),
            None => {
                let g = Arc::new(t.scalar.gram(inputs));
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite gram entry {bad}")));
                }
                cache.push((t.scalar, g.clone()));
                g
            }
        };
        grams.push(g);
    }
    Ok(BlockGram {
        n: inputs.len(),
        grid: stack.output_grid().clone(),
        grams,
        operators: stack.terms().iter().map(|t| t.operator.clone()).collect(),
        weights: stack.weights(),
    })
}

/// `(𝐊 α)_i = Σ_k d_k Σ_j (𝐆_k)_{ij} T_k α_j`.
pub fn gram_apply(g: &BlockGram, alpha: &CurveVec) -> Result<CurveVec> {
    g.check_vec(alpha)?;
    let mut out = vec![0.0; alpha.as_flat().len()];
    apply_groups(&g.groups(), alpha.as_flat(), &mut out);
    Ok(CurveVec::from_raw(g.grid.clone(), g.n, out))
}
