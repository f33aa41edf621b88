#![allow(dead_code)]

use std::sync::Arc;

use movkl_core::nalgebra::DMatrix;
use movkl_core::{CurveVec, Grid, KernelStack, OperatorKind, ScalarKernel, TermSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_grid(m: usize) -> Arc<Grid> {
    Arc::new(Grid::uniform(0.0, 1.0, m).unwrap())
}

pub fn random_vec(rng: &mut ChaCha8Rng, g: &Arc<Grid>, n: usize) -> CurveVec {
    let vals = (0..n * g.len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    CurveVec::from_flat(g.clone(), n, vals).unwrap()
}

pub fn random_operator(rng: &mut ChaCha8Rng, m: usize) -> OperatorKind {
    match rng.random_range(0..3) {
        0 => OperatorKind::Identity,
        1 => OperatorKind::Multiplication,
        _ => OperatorKind::Integral {
            rank: rng.random_range(1..=m),
        },
    }
}

pub fn random_scalar(rng: &mut ChaCha8Rng) -> ScalarKernel {
    if rng.random_bool(0.5) {
        ScalarKernel::gaussian(rng.random_range(0.3..3.0)).unwrap()
    } else {
        ScalarKernel::polynomial(rng.random_range(1..=3), 1.0).unwrap()
    }
}

/// A stack of `terms` on `grid` with random weights summing to one.
pub fn random_stack(rng: &mut ChaCha8Rng, grid: &Arc<Grid>, terms: &[TermSpec]) -> KernelStack {
    let base = KernelStack::from_specs(terms, grid, 1.0, None).unwrap();
    let raw: Vec<f64> = (0..terms.len())
        .map(|_| rng.random_range(0.05..1.0))
        .collect();
    let s: f64 = raw.iter().sum();
    let d: Vec<f64> = raw.iter().map(|x| x / s).collect();
    base.with_weights(&d).unwrap()
}

/// Every term kind of the experiment menu: Gaussians at the given bandwidths
/// and polynomials of degree 1..=3, each with the three operators.
pub fn full_menu(bandwidths: &[f64], rank: usize) -> Vec<TermSpec> {
    let ops = [
        OperatorKind::Identity,
        OperatorKind::Multiplication,
        OperatorKind::Integral { rank },
    ];
    let mut scalars: Vec<ScalarKernel> = bandwidths
        .iter()
        .map(|&b| ScalarKernel::gaussian(b).unwrap())
        .collect();
    scalars.extend((1..=3).map(|p| ScalarKernel::polynomial(p, 1.0).unwrap()));
    scalars
        .into_iter()
        .flat_map(|s| {
            ops.iter().map(move |&o| TermSpec {
                scalar: s,
                operator: o,
            })
        })
        .collect()
}

/// `W`-weighted inner product of two flat curve collections.
pub fn winner(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| w[i % w.len()] * x * y)
        .sum()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Solve `(K + ridge I) x = y` by dense LU on an explicit matrix.
pub fn lu_solve(k: &DMatrix<f64>, ridge: f64, y: &[f64]) -> Vec<f64> {
    let n = k.nrows();
    let a = k + DMatrix::identity(n, n) * ridge;
    let b = movkl_core::nalgebra::DVector::from_column_slice(y);
    a.lu().solve(&b).unwrap().as_slice().to_vec()
}
