//! Discretized `L²(Ω)` spaces.
//!
//! A [`Grid`] fixes sample locations and trapezoid quadrature weights; a
//! [`Curve`] is a function sampled on a grid and a [`CurveVec`] is an
//! `n`-tuple of curves on one grid, stored flat in row-major order. All inner
//! products are quadrature sums `Σ_j w_j a_j b_j`.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Ordered sample locations with positive quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::InvalidGrid(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        if let Some(i) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "points not strictly increasing at index {}",
                i + 1
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidGrid(format!("weight {i} is not positive")));
        }
        Ok(Self { points, weights })
    }

    /// Trapezoid weights on arbitrary increasing points.
    pub fn trapezoid(points: Vec<f64>) -> Result<Self> {
        let m = points.len();
        if m < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {m}"
            )));
        }
        let mut weights = alloc::vec![0.0; m];
        for j in 0..m - 1 {
            let half = 0.5 * (points[j + 1] - points[j]);
            weights[j] += half;
            weights[j + 1] += half;
        }
        Self::new(points, weights)
    }

    /// `m` equispaced points on `[start, end]` with trapezoid weights
    /// (`Δt/2` at both ends, `Δt` inside).
    pub fn uniform(start: f64, end: f64, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {m}"
            )));
        }
        if !(start.is_finite() && end.is_finite() && end > start) {
            return Err(Error::InvalidGrid(format!("bad interval [{start}, {end}]")));
        }
        let dt = (end - start) / (m - 1) as f64;
        let points = (0..m)
            .map(|j| {
                if j == m - 1 {
                    end
                } else {
                    start + dt * j as f64
                }
            })
            .collect();
        let mut weights = alloc::vec![dt; m];
        weights[0] = 0.5 * dt;
        weights[m - 1] = 0.5 * dt;
        Self::new(points, weights)
    }

    /// Concatenate channel grids into one stacked grid. Each channel keeps its
    /// own quadrature weights; its points are shifted past the previous
    /// channel so the stacked points stay strictly increasing.
    pub fn stack(channels: &[Grid]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::InvalidGrid("no channels to stack".into()));
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for g in channels {
            let offset = match points.last() {
                None => 0.0,
                Some(&last) => {
                    let gap = g.points[1] - g.points[0];
                    last + gap - g.points[0]
                }
            };
            points.extend(g.points.iter().map(|p| p + offset));
            weights.extend_from_slice(&g.weights);
        }
        Self::new(points, weights)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Pointer equality first, then value equality.
pub(crate) fn same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

pub(crate) fn check_grid(a: &Arc<Grid>, b: &Arc<Grid>, what: &str) -> Result<()> {
    if same_grid(a, b) {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{what}: curves live on different grids"
        )))
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// A function sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl Curve {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "curve has {} values on a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points.iter().map(|&t| f(t)).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Result<Self> {
        Self::from_fn(grid, |_| c)
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let m = grid.len();
        Self {
            grid,
            values: alloc::vec![0.0; m],
        }
    }

    pub(crate) fn from_raw(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `c · self`.
    pub fn scaled(&self, c: f64) -> Curve {
        Curve::from_raw(
            self.grid.clone(),
            self.values.iter().map(|v| c * v).collect(),
        )
    }
}

/// `l2_inner(a, b) = Σ_j w_j a_j b_j`.
pub fn l2_inner(a: &Curve, b: &Curve) -> Result<f64> {
    check_grid(&a.grid, &b.grid, "l2_inner")?;
    Ok(math::wdot(&a.grid.weights, &a.values, &b.values))
}

pub fn l2_norm_sq(a: &Curve) -> f64 {
    math::wnorm_sq(&a.grid.weights, &a.values)
}

/// `n` curves on one grid, stored row-major: curve `i` occupies
/// `values[i*m .. (i+1)*m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveVec {
    grid: Arc<Grid>,
    n: usize,
    values: Vec<f64>,
}

impl CurveVec {
    pub fn from_curves(grid: Arc<Grid>, curves: &[Curve]) -> Result<Self> {
        let m = grid.len();
        let mut values = Vec::with_capacity(curves.len() * m);
        for (i, c) in curves.iter().enumerate() {
            if !same_grid(&grid, &c.grid) {
                return Err(Error::Dimension(format!(
                    "curve {i} is not on the shared grid"
                )));
            }
            values.extend_from_slice(&c.values);
        }
        Ok(Self {
            grid,
            n: curves.len(),
            values,
        })
    }

    pub fn from_flat(grid: Arc<Grid>, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * grid.len() {
            return Err(Error::Dimension(format!(
                "{} values for {n} curves of length {}",
                values.len(),
                grid.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self { grid, n, values })
    }

    pub(crate) fn from_raw(grid: Arc<Grid>, n: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n * grid.len());
        Self { grid, n, values }
    }

    pub fn zeros(grid: Arc<Grid>, n: usize) -> Self {
        let len = n * grid.len();
        Self {
            grid,
            n,
            values: alloc::vec![0.0; len],
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Number of curves.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Samples per curve.
    pub fn curve_len(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.grid.len();
        &self.values[i * m..(i + 1) * m]
    }

    pub fn curve(&self, i: usize) -> Curve {
        Curve::from_raw(self.grid.clone(), self.row(i).to_vec())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values
            .chunks_exact(self.grid.len().max(1))
            .take(self.n)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    /// Curves at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> CurveVec {
        let mut values = Vec::with_capacity(indices.len() * self.grid.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        CurveVec::from_raw(self.grid.clone(), indices.len(), values)
    }

    pub fn norm_sq(&self) -> f64 {
        self.rows()
            .map(|r| math::wnorm_sq(&self.grid.weights, r))
            .sum()
    }
}

/// `Σ_i l2_inner(a_i, b_i)`.
pub fn vec_inner(a: &CurveVec, b: &CurveVec) -> Result<f64> {
    check_grid(&a.grid, &b.grid, "vec_inner")?;
    if a.n != b.n {
        return Err(Error::Dimension(format!(
            "{} curves vs {} curves",
            a.n, b.n
        )));
    }
    let w = &a.grid.weights;
    Ok(a.rows()
        .zip(b.rows())
        .map(|(x, y)| math::wdot(w, x, y))
        .sum())
}

/// Squared `𝒢ⁿ` norm of a flat row-major buffer of curves on `w`.
pub(crate) fn flat_norm_sq(w: &[f64], flat: &[f64]) -> f64 {
    let m = w.len();
    flat.chunks_exact(m).map(|r| math::wnorm_sq(w, r)).sum()
}

pub(crate) fn flat_dist_sq(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let m = w.len();
    a.chunks_exact(m)
        .zip(b.chunks_exact(m))
        .map(|(x, y)| math::wdist_sq(w, x, y))
        .sum()
}
