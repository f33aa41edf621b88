mod common;

use common::*;
use movkl_core::nalgebra::{DMatrix, DVector};
use movkl_core::{
    assemble_gram, gram_apply, krr_fit, loo_cv, movkl_fit, predict, predict_many, rsse, CurveVec,
    CvSpec, FitConfig, KernelStack, LooProblem, OperatorKind, OutputOperator, OvKernelTerm,
    ScalarKernel, SolverChoice, TermSpec,
};
use std::sync::Arc;

fn data(seed: u64, n: usize, m: usize) -> (CurveVec, CurveVec) {
    let mut r = rng(seed);
    let grid = unit_grid(m);
    (random_vec(&mut r, &grid, n), random_vec(&mut r, &grid, n))
}

fn three_terms() -> Vec<TermSpec> {
    vec![
        TermSpec {
            scalar: ScalarKernel::gaussian(0.5).unwrap(),
            operator: OperatorKind::Identity,
        },
        TermSpec {
            scalar: ScalarKernel::polynomial(2, 1.0).unwrap(),
            operator: OperatorKind::Multiplication,
        },
        TermSpec {
            scalar: ScalarKernel::gaussian(2.0).unwrap(),
            operator: OperatorKind::Integral { rank: 6 },
        },
    ]
}

/// `½⟨y, (K_d + λI)⁻¹ y⟩`, the optimal regularized risk at fixed weights.
fn risk_at(stack: &KernelStack, x: &CurveVec, y: &CurveVec, d: &[f64], lambda: f64) -> f64 {
    let g = assemble_gram(&stack.with_weights(d).unwrap(), x).unwrap();
    let k = g.densify().unwrap();
    let n = k.nrows();
    let a = (k + DMatrix::identity(n, n) * lambda)
        .lu()
        .solve(&DVector::from_column_slice(y.as_flat()))
        .unwrap();
    0.5 * winner(y.grid().weights(), y.as_flat(), a.as_slice())
}

#[test]
fn fitted_weights_minimize_the_risk_over_a_weight_grid() {
    let (x, y) = data(21, 8, 6);
    let stack = KernelStack::from_specs(&three_terms(), y.grid(), 2.0, None).unwrap();
    let cfg = FitConfig {
        lambda: 0.1,
        r: 2.0,
        mkl_tol: 1e-10,
        mkl_max_iter: 500,
        solver: SolverChoice::Dense,
        ..FitConfig::default()
    };
    let model = movkl_fit(&stack, &x, &y, &cfg).unwrap();
    assert!(model.converged());
    let fitted = risk_at(&stack, &x, &y, &model.weights(), 0.1);
    let last = *model.objective_trace().last().unwrap();
    assert!((fitted - last).abs() <= 1e-8 * last);

    let steps = 120;
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps {
            let theta = core::f64::consts::FRAC_PI_2 * i as f64 / steps as f64;
            let phi = core::f64::consts::FRAC_PI_2 * j as f64 / steps as f64;
            let d = [
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ];
            best = best.min(risk_at(&stack, &x, &y, &d, 0.1));
        }
    }
    assert!(fitted <= best * (1.0 + 1e-9), "fit {fitted} grid {best}");
    assert!(fitted >= best * (1.0 - 1e-4), "fit {fitted} grid {best}");
}

#[test]
fn objective_traces_decrease_and_fits_converge() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let (x, y) = data(100 + seed, 5, 6);
        let specs: Vec<TermSpec> = (0..3)
            .map(|_| TermSpec {
                scalar: random_scalar(&mut r),
                operator: random_operator(&mut r, 6),
            })
            .collect();
        let stack = KernelStack::from_specs(&specs, y.grid(), 2.0, None).unwrap();
        let cfg = FitConfig {
            lambda: 0.5,
            mkl_tol: 1e-6,
            solver: SolverChoice::Woodbury,
            ..FitConfig::default()
        };
        let model = movkl_fit(&stack, &x, &y, &cfg).unwrap();
        assert!(model.converged(), "seed {seed}");
        for w in model.objective_trace().windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "seed {seed}: {w:?}");
        }
    }
}

#[test]
fn stationarity_holds_on_training_points() {
    let (x, y) = data(5, 7, 8);
    let stack = KernelStack::from_specs(&three_terms(), y.grid(), 1.5, None).unwrap();
    let cfg = FitConfig {
        lambda: 0.2,
        r: 1.5,
        solver: SolverChoice::Woodbury,
        ..FitConfig::default()
    };
    let model = movkl_fit(&stack, &x, &y, &cfg).unwrap();
    let fitted = predict_many(&model, &x).unwrap();
    let resid: Vec<f64> = y
        .as_flat()
        .iter()
        .zip(fitted.as_flat())
        .map(|(a, b)| a - b)
        .collect();
    let scaled: Vec<f64> = model.alpha().as_flat().iter().map(|a| 0.2 * a).collect();
    assert!(rel_err(&scaled, &resid) <= 1e-6);
}

#[test]
fn tiny_ridge_interpolates_training_curves() {
    let (x, y) = data(8, 10, 12);
    let term = OvKernelTerm {
        scalar: ScalarKernel::gaussian(0.5).unwrap(),
        operator: Arc::new(OutputOperator::identity(y.grid().clone())),
        weight: 1.0,
    };
    let model = krr_fit(
        &term,
        &x,
        &y,
        &FitConfig {
            lambda: 1e-6,
            ..FitConfig::default()
        },
    )
    .unwrap();
    let fitted = predict_many(&model, &x).unwrap();
    assert!(rsse(&y, &fitted).unwrap() <= 1e-4);
}

#[test]
fn prediction_at_a_training_point_is_the_gram_row() {
    let (x, y) = data(13, 6, 7);
    let stack = KernelStack::from_specs(&three_terms(), y.grid(), 2.0, None).unwrap();
    let model = movkl_fit(
        &stack,
        &x,
        &y,
        &FitConfig {
            lambda: 0.3,
            ..FitConfig::default()
        },
    )
    .unwrap();
    let g = assemble_gram(model.stack(), &x).unwrap();
    let k_alpha = gram_apply(&g, model.alpha()).unwrap();
    for i in 0..x.len() {
        let p = predict(&model, &x.curve(i)).unwrap();
        assert!(rel_err(p.values(), k_alpha.row(i)) <= 1e-8);
    }
}

fn integral_template(grid: &Arc<movkl_core::Grid>) -> KernelStack {
    let spec = TermSpec {
        scalar: ScalarKernel::gaussian(1.0).unwrap(),
        operator: OperatorKind::Integral { rank: 4 },
    };
    KernelStack::from_specs(&[spec], grid, 2.0, None).unwrap()
}

#[test]
fn cv_scores_match_explicit_refits() {
    let (x, y) = data(17, 6, 5);
    let template = integral_template(y.grid());
    let cfg = FitConfig::default();
    let out = loo_cv(
        &template,
        &x,
        &y,
        &CvSpec {
            lambda_grid: vec![0.01, 1.0],
            rank_grid: vec![2, 5],
        },
        &cfg,
    )
    .unwrap();
    assert_eq!(out.table.len(), 4);
    for row in &out.table {
        let stack =
            KernelStack::from_specs(&template.specs(), y.grid(), 2.0, Some(row.rank)).unwrap();
        let mut total = 0.0;
        for i in 0..x.len() {
            let keep: Vec<usize> = (0..x.len()).filter(|&j| j != i).collect();
            let model = krr_fit(
                &stack.terms()[0],
                &x.select(&keep),
                &y.select(&keep),
                &FitConfig {
                    lambda: row.lambda,
                    ..cfg
                },
            )
            .unwrap();
            let p = predict(&model, &x.curve(i)).unwrap();
            total += rsse(
                &y.select(&[i]),
                &CurveVec::from_curves(y.grid().clone(), &[p]).unwrap(),
            )
            .unwrap();
        }
        assert!(
            (row.cv_rsse - total).abs() <= 1e-9 * total,
            "{row:?} vs {total}"
        );
    }
}

#[test]
fn cv_rejects_an_oversmoothed_candidate() {
    let mut r = rng(4);
    let grid = unit_grid(6);
    let x = random_vec(&mut r, &grid, 8);
    let y = CurveVec::from_flat(
        grid.clone(),
        8,
        x.as_flat().iter().map(|v| 3.0 * v).collect(),
    )
    .unwrap();
    let out = loo_cv(
        &integral_template(&grid),
        &x,
        &y,
        &CvSpec {
            lambda_grid: vec![1e6, 1e-2],
            rank_grid: vec![6],
        },
        &FitConfig::default(),
    )
    .unwrap();
    assert_eq!(out.best_lambda, 1e-2);
}

#[test]
fn cv_single_candidate_and_ties() {
    let (x, y) = data(2, 5, 4);
    let template = integral_template(y.grid());
    let single = loo_cv(
        &template,
        &x,
        &y,
        &CvSpec {
            lambda_grid: vec![0.5],
            rank_grid: vec![3],
        },
        &FitConfig::default(),
    )
    .unwrap();
    assert_eq!((single.best_lambda, single.best_rank), (0.5, 3));
    let problem = LooProblem::new(&template, &x, &y)
        .unwrap()
        .with_rank(3)
        .unwrap();
    let direct = problem
        .score(&FitConfig {
            lambda: 0.5,
            ..FitConfig::default()
        })
        .unwrap();
    assert!((single.best_rsse - direct).abs() <= 1e-12 * direct);

    let dup = loo_cv(
        &template,
        &x,
        &y,
        &CvSpec {
            lambda_grid: vec![0.5, 0.5],
            rank_grid: vec![4, 4],
        },
        &FitConfig::default(),
    )
    .unwrap();
    assert_eq!(dup.table.len(), 4);
    assert_eq!((dup.best_lambda, dup.best_rank), (0.5, 4));
    assert!(dup.table.iter().all(|r| r.cv_rsse == dup.table[0].cv_rsse));
}
