//! Solvers for the block ridge system `(𝐊 + λ′I) α = y`.
//!
//! * [`dense_solve`] densifies `𝐊` and factorizes it. Reference only.
//! * [`kron_solve`] handles stacks whose active terms share one operator `T`:
//!   with `Σ d_k 𝐆_k = UΛUᵀ` the system decouples into `n` shifted operator
//!   solves `(Λ_a T + λ′I) û_a = (Uᵀ y)_a`.
//! * [`gauss_seidel_solve`] sweeps `i = 1..n` solving the diagonal blocks
//!   `[K(x_i, x_i) + λ′I] α_i = s_i`; diagonal blocks that mix several
//!   operators go through [`split_block_solve`].
//! * [`woodbury_solve`] is exact for any operator mix: diagonal operators
//!   decouple per grid point and truncated integral operators enter as a
//!   low-rank correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::funcspace::{check_grid, flat_dist_sq, flat_norm_sq, Curve, CurveVec};
use crate::kernels::{apply_groups, BlockGram, OperatorGroup, OutputOperator, DENSE_LIMIT};
use crate::math;

/// Largest diagonal block the splitting solver falls back to factorizing.
pub const BLOCK_FALLBACK_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveConfig {
    /// Relative threshold on both the iterate change and the final residual.
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    /// Relative residual threshold for the split diagonal-block solves.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Record the true residual after every sweep (costs one block product).
    pub track_residuals: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            outer_tol: 1e-8,
            outer_max_iter: 500,
            inner_tol: 1e-10,
            inner_max_iter: 200,
            track_residuals: false,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0) {
            return Err(Error::Domain("solver tolerances must be > 0".into()));
        }
        if self.outer_max_iter == 0 || self.inner_max_iter == 0 {
            return Err(Error::Domain("iteration caps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Dense,
    Kronecker,
    GaussSeidel,
    Woodbury,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solver: SolverKind,
    /// Factorizations count as one iteration; Gauss-Seidel counts sweeps.
    pub iterations: usize,
    /// `‖(𝐊 + λ′I)α − y‖ / ‖y‖` (absolute when `y = 0`).
    pub final_residual: f64,
    pub converged: bool,
    /// Per-sweep true residuals when tracking is enabled.
    pub residual_history: Vec<f64>,
    /// Total splitting iterations spent on diagonal blocks.
    pub inner_iterations: usize,
    /// Diagonal blocks that needed the dense fallback.
    pub dense_fallbacks: usize,
}

impl SolveReport {
    fn direct(solver: SolverKind, final_residual: f64, tol: f64) -> Self {
        Self {
            solver,
            iterations: 1,
            final_residual,
            converged: final_residual <= tol,
            residual_history: Vec::new(),
            inner_iterations: 0,
            dense_fallbacks: 0,
        }
    }
}

fn check_ridge(ridge: f64) -> Result<()> {
    if ridge > 0.0 && ridge.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("ridge {ridge} must be > 0")))
    }
}

/// Relative residual of `(Σ groups + ridge) α = y` on flat buffers.
fn relative_residual(
    groups: &[OperatorGroup],
    w: &[f64],
    ridge: f64,
    alpha: &[f64],
    y: &[f64],
    scratch: &mut [f64],
) -> f64 {
    apply_groups(groups, alpha, scratch);
    for ((s, a), y) in scratch.iter_mut().zip(alpha).zip(y) {
        *s += ridge * a - y;
    }
    let r = math::sqrt(flat_norm_sq(w, scratch));
    let ny = math::sqrt(flat_norm_sq(w, y));
    if ny > 0.0 {
        r / ny
    } else {
        r
    }
}

fn check_system(g: &BlockGram, ridge: f64, y: &CurveVec) -> Result<()> {
    check_ridge(ridge)?;
    g.check_vec(y)
}

/// `α = y / ridge` when every weight is zero.
fn pure_ridge(
    g: &BlockGram,
    ridge: f64,
    y: &CurveVec,
    solver: SolverKind,
) -> (CurveVec, SolveReport) {
    let a: Vec<f64> = y.as_flat().iter().map(|v| v / ridge).collect();
    let mut scratch = vec![0.0; a.len()];
    let res = relative_residual(
        &[],
        g.grid().weights(),
        ridge,
        &a,
        y.as_flat(),
        &mut scratch,
    );
    (
        CurveVec::from_raw(g.grid().clone(), g.n(), a),
        SolveReport::direct(solver, res, f64::INFINITY),
    )
}

/// Reference solve by LU factorization of the densified system, with one
/// step of iterative refinement.
pub fn dense_solve(g: &BlockGram, ridge: f64, y: &CurveVec) -> Result<(CurveVec, SolveReport)> {
    check_system(g, ridge, y)?;
    let size = g.n() * g.grid().len();
    if size > DENSE_LIMIT {
        return Err(Error::Capacity {
            size,
            limit: DENSE_LIMIT,
        });
    }
    let mut a = g.densify()?;
    for d in 0..size {
        a[(d, d)] += ridge;
    }
    let rhs = DVector::from_column_slice(y.as_flat());
    let lu = a.clone().lu();
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("dense system is singular".into()))?;
    let r = &rhs - &a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let alpha: Vec<f64> = x.iter().copied().collect();
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "dense solve produced non-finite values".into(),
        ));
    }
    let mut scratch = vec![0.0; size];
    let res = relative_residual(
        &g.groups(),
        g.grid().weights(),
        ridge,
        &alpha,
        y.as_flat(),
        &mut scratch,
    );
    Ok((
        CurveVec::from_raw(g.grid().clone(), g.n(), alpha),
        SolveReport::direct(SolverKind::Dense, res, 1e-10),
    ))
}

/// Kronecker solve for a single shared operator: `(𝐆 ⊗ T + ridge·I) α = y`.
pub fn kron_solve_factors(
    gram: &DMatrix<f64>,
    op: &OutputOperator,
    ridge: f64,
    y: &CurveVec,
) -> Result<CurveVec> {
    check_ridge(ridge)?;
    check_grid(op.grid(), y.grid(), "kron_solve")?;
    let n = gram.nrows();
    if gram.ncols() != n || y.len() != n {
        return Err(Error::Dimension(format!(
            "{}x{} gram for {} curves",
            n,
            gram.ncols(),
            y.len()
        )));
    }
    let m = y.curve_len();
    let eig = gram
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical(format!("eigensolver failed on the {n}x{n} gram")))?;
    let u = &eig.eigenvectors;
    let yf = y.as_flat();
    // C = Uᵀ Y, then û_a = (Λ_a T + ridge)⁻¹ C_a, then α = U Û
    let mut c = vec![0.0; n * m];
    for a in 0..n {
        let row = &mut c[a * m..(a + 1) * m];
        for i in 0..n {
            let uia = u[(i, a)];
            for (o, v) in row.iter_mut().zip(&yf[i * m..(i + 1) * m]) {
                *o += uia * v;
            }
        }
    }
    let mut hat = vec![0.0; n * m];
    for a in 0..n {
        op.shifted_solve_slice(
            eig.eigenvalues[a],
            ridge,
            &c[a * m..(a + 1) * m],
            &mut hat[a * m..(a + 1) * m],
        )?;
    }
    let mut alpha = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut alpha[i * m..(i + 1) * m];
        for a in 0..n {
            let uia = u[(i, a)];
            for (o, v) in row.iter_mut().zip(&hat[a * m..(a + 1) * m]) {
                *o += uia * v;
            }
        }
    }
    Ok(CurveVec::from_raw(y.grid().clone(), n, alpha))
}

/// Case of one shared operator. Fails with a precondition error when the
/// active terms use more than one operator.
pub fn kron_solve(g: &BlockGram, ridge: f64, y: &CurveVec) -> Result<(CurveVec, SolveReport)> {
    check_system(g, ridge, y)?;
    let groups = g.groups();
    match groups.as_slice() {
        [] => Ok(pure_ridge(g, ridge, y, SolverKind::Kronecker)),
        [group] => {
            let alpha = kron_solve_factors(&group.gram, &group.operator, ridge, y)?;
            let mut scratch = vec![0.0; alpha.as_flat().len()];
            let res = relative_residual(
                &groups,
                g.grid().weights(),
                ridge,
                alpha.as_flat(),
                y.as_flat(),
                &mut scratch,
            );
            Ok((alpha, SolveReport::direct(SolverKind::Kronecker, res, 1e-8)))
        }
        _ => Err(Error::Precondition(format!(
            "kron_solve needs a single shared operator but the stack uses {}; use gauss_seidel_solve",
            groups.len()
        ))),
    }
}

struct LowRankGroup {
    gram: DMatrix<f64>,
    values: Vec<f64>,
    offset: usize,
}

/// Factorization of `𝐊 + ridge·I = D + U S Z` where `D` collects the
/// diagonal operators (one `n × n` block per grid point) and `U S Z` the
/// integral groups, `U = I ⊗ V`, `S = 𝐆 ⊗ Λ`, `Z = I ⊗ VᵀW`.
struct WoodburyFactor {
    n: usize,
    m: usize,
    w: Vec<f64>,
    /// `A_j⁻¹` per grid point.
    block_inv: Vec<DMatrix<f64>>,
    groups: Vec<LowRankGroup>,
    /// `m × R` concatenation of every group's eigenvectors.
    basis: DMatrix<f64>,
    rank: usize,
    capacitance: Option<nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl WoodburyFactor {
    fn new(groups: &[OperatorGroup], ridge: f64, n: usize, w: &[f64]) -> Result<Self> {
        let m = w.len();
        let mut diag: Vec<(&DMatrix<f64>, Vec<f64>)> = Vec::new();
        let mut low: Vec<(&DMatrix<f64>, &[f64], &DMatrix<f64>)> = Vec::new();
        for gr in groups {
            if let Some(h) = gr.operator.diagonal() {
                diag.push((&gr.gram, h));
            } else if let Some((values, vectors)) = gr.operator.low_rank() {
                low.push((&gr.gram, values, vectors));
            }
        }
        let rank: usize = low.iter().map(|(_, v, _)| v.len()).sum();
        if n * rank > DENSE_LIMIT {
            return Err(Error::Capacity {
                size: n * rank,
                limit: DENSE_LIMIT,
            });
        }
        let mut block_inv = Vec::with_capacity(m);
        for j in 0..m {
            let mut a = DMatrix::<f64>::identity(n, n) * ridge;
            for (gram, h) in &diag {
                if h[j] != 0.0 {
                    a += *gram * h[j];
                }
            }
            let inv = match a.clone().cholesky() {
                Some(c) => c.inverse(),
                None => a
                    .try_inverse()
                    .ok_or_else(|| Error::Numerical(format!("grid block {j} is singular")))?,
            };
            block_inv.push(inv);
        }
        let mut basis = DMatrix::zeros(m, rank);
        let mut lr_groups = Vec::with_capacity(low.len());
        let mut offset = 0;
        for (gram, values, vectors) in &low {
            let q = values.len();
            basis.columns_mut(offset, q).copy_from(*vectors);
            lr_groups.push(LowRankGroup {
                gram: (*gram).clone(),
                values: values.to_vec(),
                offset,
            });
            offset += q;
        }
        let mut f = Self {
            n,
            m,
            w: w.to_vec(),
            block_inv,
            groups: lr_groups,
            basis,
            rank,
            capacitance: None,
        };
        if rank > 0 {
            f.capacitance = Some(f.build_capacitance().lu());
        }
        Ok(f)
    }

    /// Index of coefficient `(group, sample i, eigenvector c)`.
    fn idx(&self, g: &LowRankGroup, i: usize, c: usize) -> usize {
        self.n * g.offset + i * g.values.len() + c
    }

    /// `I + S Z D⁻¹ U`.
    fn build_capacitance(&self) -> DMatrix<f64> {
        let (n, m, r) = (self.n, self.m, self.rank);
        // Z D⁻¹ U, block (i, i') = Vᵀ diag(w_j (A_j⁻¹)_{i i'}) V
        let mut zdu = DMatrix::<f64>::zeros(n * r, n * r);
        let mut scaled = DMatrix::<f64>::zeros(m, r);
        for i in 0..n {
            for i2 in i..n {
                for j in 0..m {
                    let s = self.w[j] * self.block_inv[j][(i, i2)];
                    for c in 0..r {
                        scaled[(j, c)] = s * self.basis[(j, c)];
                    }
                }
                let block = self.basis.transpose() * &scaled;
                for a in 0..r {
                    for b in 0..r {
                        let (ra, rb) = (self.row_of(a, i), self.row_of(b, i2));
                        zdu[(ra, rb)] = block[(a, b)];
                        zdu[(self.row_of(a, i2), self.row_of(b, i))] = block[(a, b)];
                    }
                }
            }
        }
        // S (Z D⁻¹ U): rows of eigenvector c in group g mix through 𝐆_g
        let mut out = DMatrix::<f64>::identity(n * r, n * r);
        for g in &self.groups {
            for (c, lam) in g.values.iter().enumerate() {
                let rows: Vec<usize> = (0..n).map(|i| self.idx(g, i, c)).collect();
                let sub = DMatrix::from_fn(n, n * r, |i, col| zdu[(rows[i], col)]);
                let mixed = &g.gram * sub * *lam;
                for (i, &row) in rows.iter().enumerate() {
                    for col in 0..n * r {
                        out[(row, col)] += mixed[(i, col)];
                    }
                }
            }
        }
        out
    }

    /// Row index of basis column `a` (global over groups) for sample `i`.
    fn row_of(&self, a: usize, i: usize) -> usize {
        let g = self
            .groups
            .iter()
            .rev()
            .find(|g| g.offset <= a)
            .expect("basis column belongs to a group");
        self.idx(g, i, a - g.offset)
    }

    fn apply_block_inv(&self, b: &[f64], out: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        let mut col = DVector::<f64>::zeros(n);
        for j in 0..m {
            for i in 0..n {
                col[i] = b[i * m + j];
            }
            let x = &self.block_inv[j] * &col;
            for i in 0..n {
                out[i * m + j] = x[i];
            }
        }
    }

    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let (n, m) = (self.n, self.m);
        let mut x = vec![0.0; n * m];
        self.apply_block_inv(b, &mut x);
        let Some(lu) = &self.capacitance else {
            return Ok(x);
        };
        // rhs = S Z x
        let mut zx = vec![0.0; n * self.rank];
        for g in &self.groups {
            for i in 0..n {
                let row = &x[i * m..(i + 1) * m];
                for c in 0..g.values.len() {
                    let v = self.basis.column(g.offset + c);
                    zx[self.idx(g, i, c)] = (0..m).map(|j| v[j] * self.w[j] * row[j]).sum();
                }
            }
        }
        let mut rhs = DVector::<f64>::zeros(n * self.rank);
        for g in &self.groups {
            for (c, lam) in g.values.iter().enumerate() {
                for i in 0..n {
                    let mut acc = 0.0;
                    for i2 in 0..n {
                        acc += g.gram[(i, i2)] * zx[self.idx(g, i2, c)];
                    }
                    rhs[self.idx(g, i, c)] = lam * acc;
                }
            }
        }
        let coef = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("capacitance matrix is singular".into()))?;
        // x -= D⁻¹ U coef
        let mut u = vec![0.0; n * m];
        for g in &self.groups {
            for i in 0..n {
                let row = &mut u[i * m..(i + 1) * m];
                for c in 0..g.values.len() {
                    let k = coef[self.idx(g, i, c)];
                    let v = self.basis.column(g.offset + c);
                    for (o, vj) in row.iter_mut().zip(v.iter()) {
                        *o += k * vj;
                    }
                }
            }
        }
        let mut du = vec![0.0; n * m];
        self.apply_block_inv(&u, &mut du);
        for (o, d) in x.iter_mut().zip(&du) {
            *o -= d;
        }
        Ok(x)
    }
}

/// Exact structured solve for any mix of operators. Identity and
/// multiplication terms are diagonal on the grid, giving one `n × n` system
/// `A_j = ridge·I + Σ h(t_j) 𝐆` per grid point; integral terms add a
/// correction of rank `n·q` that is absorbed through the Woodbury identity.
/// Needs `n · Σq ≤ 5000`.
pub fn woodbury_solve(g: &BlockGram, ridge: f64, y: &CurveVec) -> Result<(CurveVec, SolveReport)> {
    check_system(g, ridge, y)?;
    let groups = g.groups();
    if groups.is_empty() {
        return Ok(pure_ridge(g, ridge, y, SolverKind::Woodbury));
    }
    let w = g.grid().weights();
    let factor = WoodburyFactor::new(&groups, ridge, g.n(), w)?;
    let yf = y.as_flat();
    let mut alpha = factor.solve(yf)?;
    // one refinement step
    let mut r = vec![0.0; yf.len()];
    apply_groups(&groups, &alpha, &mut r);
    for ((r, a), y) in r.iter_mut().zip(&alpha).zip(yf) {
        *r = y - *r - ridge * a;
    }
    let dx = factor.solve(&r)?;
    for (a, d) in alpha.iter_mut().zip(&dx) {
        *a += d;
    }
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "structured solve produced non-finite values".into(),
        ));
    }
    let mut scratch = vec![0.0; yf.len()];
    let res = relative_residual(&groups, w, ridge, &alpha, yf, &mut scratch);
    Ok((
        CurveVec::from_raw(g.grid().clone(), g.n(), alpha),
        SolveReport::direct(SolverKind::Woodbury, res, 1e-8),
    ))
}

/// Block Gauss-Seidel in ascending sample order. Stops when the relative
/// iterate change and then the true residual both fall below `outer_tol`;
/// hitting `outer_max_iter` returns with `converged = false`.
pub fn gauss_seidel_solve(
    g: &BlockGram,
    ridge: f64,
    y: &CurveVec,
    cfg: &SolveConfig,
    warm: Option<&CurveVec>,
) -> Result<(CurveVec, SolveReport)> {
    check_system(g, ridge, y)?;
    cfg.validate()?;
    let groups = g.groups();
    if groups.is_empty() {
        return Ok(pure_ridge(g, ridge, y, SolverKind::GaussSeidel));
    }
    let n = g.n();
    let m = g.grid().len();
    let w = g.grid().weights();
    let yf = y.as_flat();

    let mut alpha = match warm {
        Some(a) => {
            g.check_vec(a)?;
            a.as_flat().to_vec()
        }
        None => vec![0.0; n * m],
    };
    // T_o α_j for every group o
    let mut t_alpha: Vec<Vec<f64>> = groups
        .iter()
        .map(|gr| {
            let mut buf = vec![0.0; n * m];
            for j in 0..n {
                gr.operator
                    .apply_slice(&alpha[j * m..(j + 1) * m], &mut buf[j * m..(j + 1) * m]);
            }
            buf
        })
        .collect();

    let mut prev = alpha.clone();
    let mut s = vec![0.0; m];
    let mut next = vec![0.0; m];
    let mut scratch = vec![0.0; n * m];
    let mut split = SplitWorkspace::default();
    let mut report = SolveReport {
        solver: SolverKind::GaussSeidel,
        iterations: 0,
        final_residual: f64::INFINITY,
        converged: false,
        residual_history: Vec::new(),
        inner_iterations: 0,
        dense_fallbacks: 0,
    };

    for sweep in 1..=cfg.outer_max_iter {
        prev.copy_from_slice(&alpha);
        for i in 0..n {
            s.copy_from_slice(&yf[i * m..(i + 1) * m]);
            let mut diag: Vec<(f64, &OutputOperator)> = Vec::with_capacity(groups.len());
            for (gr, ta) in groups.iter().zip(&t_alpha) {
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let c = gr.gram[(i, j)];
                    if c == 0.0 {
                        continue;
                    }
                    for (o, v) in s.iter_mut().zip(&ta[j * m..(j + 1) * m]) {
                        *o -= c * v;
                    }
                }
                diag.push((gr.gram[(i, i)], &*gr.operator));
            }
            if diag.len() == 1 {
                diag[0]
                    .1
                    .shifted_solve_slice(diag[0].0, ridge, &s, &mut next)?;
            } else {
                let out = split.solve(
                    &diag,
                    ridge,
                    &s,
                    cfg,
                    Some(&alpha[i * m..(i + 1) * m]),
                    &mut next,
                )?;
                report.inner_iterations += out.iterations;
                report.dense_fallbacks += usize::from(out.fallback);
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite iterate in sweep {sweep} at block {i}"
                )));
            }
            alpha[i * m..(i + 1) * m].copy_from_slice(&next);
            for (gr, ta) in groups.iter().zip(t_alpha.iter_mut()) {
                gr.operator.apply_slice(&next, &mut ta[i * m..(i + 1) * m]);
            }
        }
        report.iterations = sweep;
        let change = math::sqrt(flat_dist_sq(w, &alpha, &prev));
        let scale = math::sqrt(flat_norm_sq(w, &alpha)).max(1.0);
        let small_change = change / scale <= cfg.outer_tol;
        if cfg.track_residuals || small_change {
            let res = relative_residual(&groups, w, ridge, &alpha, yf, &mut scratch);
            if cfg.track_residuals {
                report.residual_history.push(res);
            }
            report.final_residual = res;
            if small_change && res <= cfg.outer_tol {
                report.converged = true;
                break;
            }
        }
    }
    if !report.converged {
        report.final_residual = relative_residual(&groups, w, ridge, &alpha, yf, &mut scratch);
    }
    Ok((CurveVec::from_raw(g.grid().clone(), n, alpha), report))
}

struct SplitOutcome {
    iterations: usize,
    fallback: bool,
}

#[derive(Default)]
struct SplitWorkspace {
    z: Vec<f64>,
    gamma: Vec<Vec<f64>>,
    parts: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    tmp: Vec<f64>,
}

impl SplitWorkspace {
    /// Solve `(Σ_k c_k T_k + ridge·I) α = s` by variable splitting.
    ///
    /// Every term gets its own copy `α_k` of the unknown, tied to a consensus
    /// `z` through multipliers `γ_k`; the ridge is one more term `ridge·I`.
    /// One pass updates each `α_k` from `(c_k T_k + β) α_k = β z − γ_k`, then
    /// `z`, then `γ_k += β (α_k − z)`. At a fixed point `γ_k = −c_k T_k z`
    /// and `Σ_k c_k T_k z + ridge z = s`.
    fn solve(
        &mut self,
        terms: &[(f64, &OutputOperator)],
        ridge: f64,
        s: &[f64],
        cfg: &SolveConfig,
        warm: Option<&[f64]>,
        out: &mut [f64],
    ) -> Result<SplitOutcome> {
        let m = s.len();
        // identity terms fold into the ridge; equal operators merge
        let mut shift = ridge;
        let mut ops: Vec<(f64, &OutputOperator)> = Vec::with_capacity(terms.len());
        for &(c, op) in terms {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Domain(format!(
                    "diagonal coefficient {c} must be >= 0"
                )));
            }
            if c == 0.0 {
                continue;
            }
            if op.is_identity() {
                shift += c;
            } else if let Some(e) = ops.iter_mut().find(|(_, o)| **o == *op) {
                e.0 += c;
            } else {
                ops.push((c, op));
            }
        }
        match ops.as_slice() {
            [] => {
                for (o, v) in out.iter_mut().zip(s) {
                    *o = v / shift;
                }
                return Ok(SplitOutcome {
                    iterations: 1,
                    fallback: false,
                });
            }
            [(c, op)] => {
                op.shifted_solve_slice(*c, shift, s, out)?;
                return Ok(SplitOutcome {
                    iterations: 1,
                    fallback: false,
                });
            }
            _ => {}
        }

        let w = ops[0].1.grid().weights();
        let blocks = ops.len() + 1;
        let upper = shift + ops.iter().map(|(c, op)| c * op.norm_bound()).sum::<f64>();
        let beta = math::sqrt(shift * upper) / blocks as f64;

        self.z.clear();
        match warm {
            Some(a) => self.z.extend_from_slice(a),
            None => self.z.extend(s.iter().map(|v| v / upper)),
        }
        self.gamma.resize_with(blocks, Vec::new);
        self.parts.resize_with(blocks, Vec::new);
        self.tmp.resize(m, 0.0);
        self.rhs.resize(m, 0.0);
        for (k, &(c, op)) in ops.iter().enumerate() {
            self.gamma[k].resize(m, 0.0);
            op.apply_slice(&self.z, &mut self.tmp);
            for (g, t) in self.gamma[k].iter_mut().zip(&self.tmp) {
                *g = -c * t;
            }
        }
        let last = blocks - 1;
        self.gamma[last].clear();
        self.gamma[last].extend(self.z.iter().map(|v| -shift * v));
        for p in self.parts.iter_mut() {
            p.resize(m, 0.0);
        }

        let s_norm = math::sqrt(math::wnorm_sq(w, s)).max(1.0);
        let target = cfg.inner_tol * s_norm;
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.inner_max_iter {
            iterations += 1;
            for (k, &(c, op)) in ops.iter().enumerate() {
                for ((r, z), g) in self.rhs.iter_mut().zip(&self.z).zip(&self.gamma[k]) {
                    *r = beta * z - g;
                }
                op.shifted_solve_slice(c, beta, &self.rhs, &mut self.parts[k])?;
            }
            for ((p, z), g) in self.parts[last]
                .iter_mut()
                .zip(&self.z)
                .zip(&self.gamma[last])
            {
                *p = (beta * z - g) / (shift + beta);
            }
            for j in 0..m {
                let mut acc = s[j];
                for k in 0..blocks {
                    acc += self.gamma[k][j] + beta * self.parts[k][j];
                }
                self.z[j] = acc / (blocks as f64 * beta);
            }
            for k in 0..blocks {
                for ((g, p), z) in self.gamma[k].iter_mut().zip(&self.parts[k]).zip(&self.z) {
                    *g += beta * (p - z);
                }
            }
            if iterations % 4 == 0 || iterations == cfg.inner_max_iter {
                let r = block_residual(&ops, shift, &self.z, s, &mut self.tmp, &mut self.rhs);
                if math::sqrt(math::wnorm_sq(w, &self.rhs)) <= target && r {
                    converged = true;
                    break;
                }
            }
        }
        if converged {
            out.copy_from_slice(&self.z);
            return Ok(SplitOutcome {
                iterations,
                fallback: false,
            });
        }
        if m > BLOCK_FALLBACK_LIMIT {
            let res = math::sqrt(math::wnorm_sq(w, &self.rhs)) / s_norm;
            return Err(Error::NotConverged {
                iterations,
                residual: res,
            });
        }
        log::warn!(
            "split block solve did not reach {:e} in {} iterations; using a dense {}x{} factorization",
            cfg.inner_tol,
            iterations,
            m,
            m
        );
        dense_block_solve(&ops, shift, s, out)?;
        Ok(SplitOutcome {
            iterations,
            fallback: true,
        })
    }
}

/// Writes `(Σ c_k T_k + shift) z − s` into `res`; false on non-finite values.
fn block_residual(
    ops: &[(f64, &OutputOperator)],
    shift: f64,
    z: &[f64],
    s: &[f64],
    tmp: &mut [f64],
    res: &mut [f64],
) -> bool {
    for ((r, z), s) in res.iter_mut().zip(z).zip(s) {
        *r = shift * z - s;
    }
    for &(c, op) in ops {
        op.apply_slice(z, tmp);
        for (r, t) in res.iter_mut().zip(tmp.iter()) {
            *r += c * t;
        }
    }
    res.iter().all(|v| v.is_finite())
}

fn dense_block_solve(
    ops: &[(f64, &OutputOperator)],
    shift: f64,
    s: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let m = s.len();
    let mut a = DMatrix::<f64>::identity(m, m) * shift;
    for &(c, op) in ops {
        a += op.to_matrix() * c;
    }
    let x = a
        .lu()
        .solve(&DVector::from_column_slice(s))
        .ok_or_else(|| Error::Numerical("diagonal block is singular".into()))?;
    out.copy_from_slice(x.as_slice());
    Ok(())
}

/// Solve one diagonal block `(Σ_k c_k T_k + ridge·I) α = s`, where
/// `c_k = d_k G_k(x_i, x_i)`, by variable splitting. Falls back to a dense
/// factorization (with a logged warning) when `inner_max_iter` is exhausted.
pub fn split_block_solve(
    diag_terms: &[(f64, &OutputOperator)],
    ridge: f64,
    s: &Curve,
    cfg: &SolveConfig,
) -> Result<Curve> {
    check_ridge(ridge)?;
    cfg.validate()?;
    for (_, op) in diag_terms {
        check_grid(op.grid(), s.grid(), "split_block_solve")?;
    }
    let mut out = vec![0.0; s.len()];
    SplitWorkspace::default().solve(diag_terms, ridge, s.values(), cfg, None, &mut out)?;
    Ok(Curve::from_raw(s.grid().clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcspace::Grid;
    use crate::kernels::{assemble_gram, KernelStack, OperatorKind, ScalarKernel, TermSpec};
    use alloc::sync::Arc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(m: usize) -> Arc<Grid> {
        Arc::new(Grid::uniform(0.0, 1.0, m).unwrap())
    }

    fn random_vec(rng: &mut ChaCha8Rng, g: &Arc<Grid>, n: usize) -> CurveVec {
        let v = (0..n * g.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        CurveVec::from_flat(g.clone(), n, v).unwrap()
    }

    fn gram_for(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
        specs: &[TermSpec],
        d: &[f64],
    ) -> (BlockGram, Arc<Grid>) {
        let gi = unit(5);
        let go = unit(m);
        let x = random_vec(rng, &gi, n);
        let stack = KernelStack::from_specs(specs, &go, 1.0, None)
            .unwrap()
            .with_weights(d)
            .unwrap();
        (assemble_gram(&stack, &x).unwrap(), go)
    }

    fn rel_err(a: &CurveVec, b: &CurveVec) -> f64 {
        let w = a.grid().weights();
        math::sqrt(
            flat_dist_sq(w, a.as_flat(), b.as_flat()) / flat_norm_sq(w, b.as_flat()).max(1e-300),
        )
    }

    fn gauss(bw: f64, op: OperatorKind) -> TermSpec {
        TermSpec {
            scalar: ScalarKernel::gaussian(bw).unwrap(),
            operator: op,
        }
    }

    #[test]
    fn trivial_single_block_halves_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (g, go) = gram_for(
            &mut rng,
            1,
            4,
            &[gauss(1.0, OperatorKind::Identity)],
            &[1.0],
        );
        let y = random_vec(&mut rng, &go, 1);
        let half: Vec<f64> = y.as_flat().iter().map(|v| v / 2.0).collect();
        let (a, _) = dense_solve(&g, 1.0, &y).unwrap();
        for (u, v) in a.as_flat().iter().zip(&half) {
            assert!((u - v).abs() < 1e-14);
        }
        let (a, _) = kron_solve(&g, 1.0, &y).unwrap();
        for (u, v) in a.as_flat().iter().zip(&half) {
            assert!((u - v).abs() < 1e-14);
        }
        let (a, rep) = gauss_seidel_solve(&g, 1.0, &y, &SolveConfig::default(), None).unwrap();
        for (u, v) in a.as_flat().iter().zip(&half) {
            assert!((u - v).abs() < 1e-14);
        }
        assert!(rep.converged);
        assert!(rep.iterations <= 2);
    }

    #[test]
    fn zero_weights_give_pure_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (g, go) = gram_for(
            &mut rng,
            3,
            4,
            &[
                gauss(1.0, OperatorKind::Identity),
                gauss(0.5, OperatorKind::Multiplication),
            ],
            &[0.0, 0.0],
        );
        let y = random_vec(&mut rng, &go, 3);
        for (a, _) in [
            dense_solve(&g, 0.25, &y).unwrap(),
            kron_solve(&g, 0.25, &y).unwrap(),
            gauss_seidel_solve(&g, 0.25, &y, &SolveConfig::default(), None).unwrap(),
        ] {
            for (u, v) in a.as_flat().iter().zip(y.as_flat()) {
                assert!((u - v * 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_residual_self_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, go) = gram_for(
            &mut rng,
            3,
            4,
            &[
                gauss(0.8, OperatorKind::Multiplication),
                gauss(2.0, OperatorKind::Integral { rank: 4 }),
            ],
            &[0.6, 0.4],
        );
        let y = random_vec(&mut rng, &go, 3);
        let (_, rep) = dense_solve(&g, 0.05, &y).unwrap();
        assert!(rep.final_residual <= 1e-10, "{}", rep.final_residual);
        assert!(rep.converged);
    }

    #[test]
    fn kron_matches_dense_and_rejects_mixed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let specs = [
            gauss(0.5, OperatorKind::Integral { rank: 8 }),
            TermSpec {
                scalar: ScalarKernel::polynomial(2, 1.0).unwrap(),
                operator: OperatorKind::Integral { rank: 8 },
            },
        ];
        let (g, go) = gram_for(&mut rng, 6, 8, &specs, &[0.7, 0.3]);
        let y = random_vec(&mut rng, &go, 6);
        let (a, _) = kron_solve(&g, 0.1, &y).unwrap();
        let (b, _) = dense_solve(&g, 0.1, &y).unwrap();
        assert!(rel_err(&a, &b) < 1e-8);

        let (g, go) = gram_for(
            &mut rng,
            3,
            4,
            &[
                gauss(1.0, OperatorKind::Identity),
                gauss(0.5, OperatorKind::Multiplication),
            ],
            &[0.5, 0.5],
        );
        let y = random_vec(&mut rng, &go, 3);
        assert!(matches!(
            kron_solve(&g, 1.0, &y),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn kron_single_sample_reduces_to_shifted_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, go) = gram_for(
            &mut rng,
            1,
            9,
            &[gauss(1.0, OperatorKind::Integral { rank: 9 })],
            &[0.8],
        );
        let y = random_vec(&mut rng, &go, 1);
        let (a, _) = kron_solve(&g, 0.3, &y).unwrap();
        let direct =
            crate::kernels::op_shifted_solve(g.operator(0), 0.3, 0.8, &y.curve(0)).unwrap();
        for (u, v) in a.as_flat().iter().zip(direct.values()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gauss_seidel_zero_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, go) = gram_for(
            &mut rng,
            4,
            5,
            &[
                gauss(1.0, OperatorKind::Identity),
                gauss(0.5, OperatorKind::Integral { rank: 5 }),
            ],
            &[0.5, 0.5],
        );
        let y = CurveVec::zeros(go, 4);
        let (a, rep) = gauss_seidel_solve(&g, 1.0, &y, &SolveConfig::default(), None).unwrap();
        assert!(a.as_flat().iter().all(|v| *v == 0.0));
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
    }

    fn three_ops() -> [TermSpec; 3] {
        [
            gauss(1.0, OperatorKind::Identity),
            TermSpec {
                scalar: ScalarKernel::polynomial(1, 1.0).unwrap(),
                operator: OperatorKind::Multiplication,
            },
            gauss(0.4, OperatorKind::Integral { rank: 6 }),
        ]
    }

    #[test]
    fn gauss_seidel_matches_dense_with_three_operators() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (g, go) = gram_for(&mut rng, 5, 6, &three_ops(), &[0.3, 0.3, 0.4]);
        let y = random_vec(&mut rng, &go, 5);
        let (a, rep) = gauss_seidel_solve(&g, 0.1, &y, &SolveConfig::default(), None).unwrap();
        let (b, _) = dense_solve(&g, 0.1, &y).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(rel_err(&a, &b) < 1e-6);
    }

    #[test]
    fn woodbury_matches_dense_for_operator_mixes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mixes: [&[TermSpec]; 4] = [
            &three_ops(),
            &[
                gauss(0.7, OperatorKind::Integral { rank: 3 }),
                gauss(2.0, OperatorKind::Integral { rank: 7 }),
            ],
            &[
                gauss(0.7, OperatorKind::Identity),
                gauss(0.3, OperatorKind::Multiplication),
            ],
            &[gauss(0.9, OperatorKind::Integral { rank: 4 })],
        ];
        for specs in mixes {
            let d: Vec<f64> = specs.iter().map(|_| 1.0 / specs.len() as f64).collect();
            for ridge in [1e-4, 0.1, 3.0] {
                let (g, go) = gram_for(&mut rng, 6, 7, specs, &d);
                let y = random_vec(&mut rng, &go, 6);
                let (a, rep) = woodbury_solve(&g, ridge, &y).unwrap();
                let (b, _) = dense_solve(&g, ridge, &y).unwrap();
                assert!(rep.converged, "{rep:?}");
                assert!(rel_err(&a, &b) < 1e-8, "ridge {ridge}: {}", rel_err(&a, &b));
            }
        }
    }

    #[test]
    fn woodbury_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (g, go) = gram_for(&mut rng, 4, 5, &three_ops(), &[0.0, 0.0, 0.0]);
        let y = random_vec(&mut rng, &go, 4);
        let (a, _) = woodbury_solve(&g, 2.0, &y).unwrap();
        for (a, y) in a.as_flat().iter().zip(y.as_flat()) {
            assert!((a - y / 2.0).abs() < 1e-15);
        }
        let (g, go) = gram_for(
            &mut rng,
            1,
            5,
            &[gauss(1.0, OperatorKind::Identity)],
            &[1.0],
        );
        let y = random_vec(&mut rng, &go, 1);
        let (a, _) = woodbury_solve(&g, 1.0, &y).unwrap();
        for (a, y) in a.as_flat().iter().zip(y.as_flat()) {
            assert!((a - y / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gauss_seidel_residual_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let raw: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.01..1.0));
            let total: f64 = raw.iter().sum();
            let d = raw.map(|v| v / total);
            let (g, go) = gram_for(&mut rng, 6, 7, &three_ops(), &d);
            let y = random_vec(&mut rng, &go, 6);
            let cfg = SolveConfig {
                track_residuals: true,
                ..SolveConfig::default()
            };
            let (_, rep) = gauss_seidel_solve(&g, 0.2, &y, &cfg, None).unwrap();
            assert!(rep.converged);
            for w in rep.residual_history.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-9) + 1e-14,
                    "{:?}",
                    rep.residual_history
                );
            }
        }
    }

    #[test]
    fn warm_start_at_solution_converges_fast() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (g, go) = gram_for(&mut rng, 5, 6, &three_ops(), &[0.2, 0.5, 0.3]);
        let y = random_vec(&mut rng, &go, 5);
        let (exact, _) = dense_solve(&g, 0.3, &y).unwrap();
        let (_, rep) =
            gauss_seidel_solve(&g, 0.3, &y, &SolveConfig::default(), Some(&exact)).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 2, "{}", rep.iterations);
    }

    #[test]
    fn solutions_are_linear_in_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (g, go) = gram_for(&mut rng, 4, 6, &three_ops(), &[0.4, 0.4, 0.2]);
        let y1 = random_vec(&mut rng, &go, 4);
        let y2 = random_vec(&mut rng, &go, 4);
        let sum: Vec<f64> = y1
            .as_flat()
            .iter()
            .zip(y2.as_flat())
            .map(|(a, b)| a + b)
            .collect();
        let ys = CurveVec::from_flat(go.clone(), 4, sum).unwrap();
        let cfg = SolveConfig::default();
        let (a1, _) = gauss_seidel_solve(&g, 0.5, &y1, &cfg, None).unwrap();
        let (a2, _) = gauss_seidel_solve(&g, 0.5, &y2, &cfg, None).unwrap();
        let (as_, _) = gauss_seidel_solve(&g, 0.5, &ys, &cfg, None).unwrap();
        let combined: Vec<f64> = a1
            .as_flat()
            .iter()
            .zip(a2.as_flat())
            .map(|(a, b)| a + b)
            .collect();
        let combined = CurveVec::from_flat(go, 4, combined).unwrap();
        assert!(rel_err(&as_, &combined) < 1e-8);
    }

    #[test]
    fn split_block_trivial_cases() {
        let g = unit(7);
        let s = Curve::from_fn(g.clone(), |t| 1.0 - t).unwrap();
        let id = OutputOperator::identity(g.clone());
        let cfg = SolveConfig::default();
        let a = split_block_solve(&[(1.0, &id)], 1.0, &s, &cfg).unwrap();
        assert_eq!(a, s.scaled(0.5));
        let mult = OutputOperator::multiplication(g.clone());
        let integ = OutputOperator::integral(g.clone(), 7).unwrap();
        let a = split_block_solve(&[(0.0, &mult), (0.0, &integ)], 0.25, &s, &cfg).unwrap();
        assert_eq!(a, s.scaled(4.0));
    }

    #[test]
    fn split_block_matches_dense_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = unit(31);
        let mult = OutputOperator::multiplication(g.clone());
        let integ = OutputOperator::integral(g.clone(), 31).unwrap();
        let s = Curve::new(
            g.clone(),
            (0..31).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let cfg = SolveConfig::default();
        for (c1, c2, ridge) in [(0.7, 1.3, 0.1), (2.0, 0.5, 1.0), (5.0, 5.0, 0.01)] {
            let a = split_block_solve(&[(c1, &mult), (c2, &integ)], ridge, &s, &cfg).unwrap();
            let m =
                mult.to_matrix() * c1 + integ.to_matrix() * c2 + DMatrix::identity(31, 31) * ridge;
            let x = m
                .lu()
                .solve(&DVector::from_column_slice(s.values()))
                .unwrap();
            let err = (0..31)
                .map(|j| (x[j] - a.values()[j]).abs())
                .fold(0.0, f64::max);
            let scale = x.amax();
            assert!(err <= 1e-8 * scale, "({c1},{c2},{ridge}): {err}");
        }
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (g, go) = gram_for(&mut rng, 6, 5, &three_ops(), &[0.3, 0.3, 0.4]);
        let y = random_vec(&mut rng, &go, 6);
        let cfg = SolveConfig {
            outer_max_iter: 1,
            ..SolveConfig::default()
        };
        let (_, rep) = gauss_seidel_solve(&g, 1e-3, &y, &cfg, None).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 1);
        assert!(rep.final_residual > cfg.outer_tol);
    }

    #[test]
    fn bad_ridge_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (g, go) = gram_for(
            &mut rng,
            2,
            3,
            &[gauss(1.0, OperatorKind::Identity)],
            &[1.0],
        );
        let y = random_vec(&mut rng, &go, 2);
        assert!(matches!(dense_solve(&g, 0.0, &y), Err(Error::Domain(_))));
        assert!(matches!(kron_solve(&g, -1.0, &y), Err(Error::Domain(_))));
    }
}
