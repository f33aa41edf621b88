//! Subcommand implementations. Each writes its artifacts under the configured
//! output directory and returns the in-memory result for callers and tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use movkl_core::{
    assemble_gram, dense_solve, gauss_seidel_solve, generate_synthetic, gram_apply, kron_solve,
    lcr, loo_cv, movkl_fit, predict_many, rsse, woodbury_solve, CurveDataset, CurveVec, CvOutcome,
    Grid, KernelStack, MovklModel, OperatorKind, ScalarKernel, TermSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{load_model, save_model};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{CliError, Result};
use crate::report::{
    algorithm_name, solver_name, write_csv, write_json, BenchRow, CvCsvRow, CvReport, FitReport,
    MetricsReport, MetricsRow,
};

pub const MODEL_FILE: &str = "model.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const CV_TABLE_FILE: &str = "cv_table.csv";
pub const CV_REPORT_FILE: &str = "cv_report.json";
pub const BENCH_FILE: &str = "bench.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Training and optional test data named by the config: files when given,
/// otherwise generated data split at `train_count`.
pub fn resolve_data(cfg: &RunConfig) -> Result<(CurveDataset, Option<CurveDataset>)> {
    let test = cfg.data.test.as_deref().map(load_dataset).transpose()?;
    if let Some(path) = &cfg.data.train {
        return Ok((load_dataset(path)?, test));
    }
    let synth =
        cfg.data.synth.as_ref().ok_or_else(|| {
            CliError::Config("no training data: set data.train or data.synth".into())
        })?;
    let full = generate_synthetic(&synth.to_spec(cfg.seed))?;
    let k = cfg.data.train_count.unwrap_or(full.len());
    if k == 0 || k > full.len() {
        return Err(CliError::Config(format!(
            "data.train_count {k} not in 1..={}",
            full.len()
        )));
    }
    let (train, rest) = full.split_at(k);
    let test = test.or(if rest.is_empty() { None } else { Some(rest) });
    Ok((train, test))
}

fn non_empty(ds: &CurveDataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(CliError::Usage(format!("{what} dataset is empty")));
    }
    Ok(())
}

/// Generate the configured synthetic dataset and write it to `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<CurveDataset> {
    let synth = cfg.data.synth.clone().unwrap_or_default();
    let ds = generate_synthetic(&synth.to_spec(cfg.seed))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_dataset(out, &ds)?;
    log::info!("wrote {} samples to {}", ds.len(), out.display());
    Ok(ds)
}

pub struct TrainOutput {
    pub model: MovklModel,
    pub model_path: PathBuf,
    pub report_path: PathBuf,
}

/// Fit the configured model on the training data and write the archive and
/// the fit report. A fit that stops before converging still writes both and
/// then fails with a non-convergence error.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let (train, _) = resolve_data(cfg)?;
    non_empty(&train, "training")?;
    let stack = cfg.kernel_stack(train.inputs(), train.output_grid())?;
    let fit_cfg = cfg.fit_config();
    let start = Instant::now();
    let model = movkl_fit(&stack, train.inputs(), train.targets(), &fit_cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    ensure_dir(&cfg.output_dir)?;
    let model_path = cfg.output_dir.join(MODEL_FILE);
    let report_path = cfg.output_dir.join(TRAIN_REPORT_FILE);
    save_model(&model_path, &model)?;
    write_json(&report_path, &FitReport::new(&model, elapsed))?;
    log::info!(
        "{} terms, {} outer iterations, objective {:?}",
        model.stack().len(),
        model.iterations(),
        model.objective_trace().last()
    );
    if !model.converged() {
        return Err(CliError::NotConverged(format!(
            "weight updates did not settle within {} iterations",
            fit_cfg.mkl_max_iter
        )));
    }
    Ok(TrainOutput {
        model,
        model_path,
        report_path,
    })
}

/// Predict target curves for every input of `data` and write them to `out`,
/// either as a dataset file or, for a `.csv` path, as long-format rows
/// `sample,t,prediction` for plotting.
pub fn cmd_predict(model_path: &Path, data: &Path, out: &Path) -> Result<CurveVec> {
    let model = load_model(model_path)?;
    let ds = load_dataset(data)?;
    non_empty(&ds, "prediction")?;
    let pred = predict_many(&model, ds.inputs())?;
    if out.extension().is_some_and(|e| e == "csv") {
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["sample", "t", "prediction"])?;
        let points = pred.grid().points();
        for (i, row) in pred.rows().enumerate() {
            for (t, v) in points.iter().zip(row) {
                w.write_record([i.to_string(), t.to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| CliError::io(out, e))?;
    } else {
        save_dataset(
            out,
            &CurveDataset::new(ds.inputs().clone(), pred.clone(), None)?,
        )?;
    }
    Ok(pred)
}

/// RSSE and, when labels are present, LCR of a model on a dataset.
pub fn evaluate(model: &MovklModel, ds: &CurveDataset, threshold: f64) -> Result<MetricsRow> {
    non_empty(ds, "evaluation")?;
    let pred = predict_many(model, ds.inputs())?;
    Ok(MetricsRow {
        algorithm: algorithm_name(model),
        rsse: rsse(ds.targets(), &pred)?,
        lcr: ds.labels().map(|l| lcr(l, &pred, threshold)).transpose()?,
    })
}

/// Score a stored model and write `metrics.json` and `metrics.csv`.
pub fn cmd_eval(
    model_path: &Path,
    data: &Path,
    out_dir: &Path,
    threshold: f64,
) -> Result<MetricsReport> {
    let model = load_model(model_path)?;
    let ds = load_dataset(data)?;
    let row = evaluate(&model, &ds, threshold)?;
    let report = MetricsReport {
        n_samples: ds.len(),
        label_threshold: threshold,
        rows: vec![row],
    };
    ensure_dir(out_dir)?;
    write_json(&out_dir.join(METRICS_JSON_FILE), &report)?;
    write_csv(&out_dir.join(METRICS_CSV_FILE), &report.rows)?;
    Ok(report)
}

/// Leave-one-curve-out search over the configured `(λ, q)` grid.
pub fn cmd_cv(cfg: &RunConfig) -> Result<CvOutcome> {
    let (train, _) = resolve_data(cfg)?;
    non_empty(&train, "training")?;
    let stack = cfg.kernel_stack(train.inputs(), train.output_grid())?;
    let start = Instant::now();
    let out = loo_cv(
        &stack,
        train.inputs(),
        train.targets(),
        &cfg.cv_spec(),
        &cfg.fit_config(),
    )?;
    let elapsed = start.elapsed().as_secs_f64();
    ensure_dir(&cfg.output_dir)?;
    let rows: Vec<CvCsvRow> = out
        .table
        .iter()
        .map(|r| CvCsvRow {
            lambda: r.lambda,
            rank: r.rank,
            cv_rsse: r.cv_rsse,
            valid: r.valid,
        })
        .collect();
    write_csv(&cfg.output_dir.join(CV_TABLE_FILE), &rows)?;
    write_json(
        &cfg.output_dir.join(CV_REPORT_FILE),
        &CvReport::new(train.len(), &out, elapsed),
    )?;
    log::info!("selected lambda {} rank {}", out.best_lambda, out.best_rank);
    Ok(out)
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
    terms: usize,
) -> Result<(movkl_core::BlockGram, CurveVec)> {
    let grid = Arc::new(Grid::uniform(0.0, 1.0, m)?);
    let specs: Vec<TermSpec> = (0..terms)
        .map(|_| TermSpec {
            scalar: if rng.random_bool(0.5) {
                ScalarKernel::Gaussian {
                    bandwidth: rng.random_range(0.3..3.0),
                    normalize: false,
                }
            } else {
                ScalarKernel::Polynomial {
                    degree: rng.random_range(1..=3),
                    offset: 1.0,
                }
            },
            operator: match rng.random_range(0..3) {
                0 => OperatorKind::Identity,
                1 => OperatorKind::Multiplication,
                _ => OperatorKind::Integral {
                    rank: rng.random_range(1..=m),
                },
            },
        })
        .collect();
    let raw: Vec<f64> = (0..terms).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let d: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let stack = KernelStack::from_specs(&specs, &grid, 1.0, None)?.with_weights(&d)?;
    let mut draw = || -> Result<CurveVec> {
        let v = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        Ok(CurveVec::from_flat(grid.clone(), n, v)?)
    };
    let x = draw()?;
    let y = draw()?;
    Ok((assemble_gram(&stack, &x)?, y))
}

fn distance(a: &CurveVec, b: &CurveVec) -> f64 {
    let num: f64 = a
        .as_flat()
        .iter()
        .zip(b.as_flat())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let den: f64 = b.as_flat().iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Compare the solvers on random instances against the dense solution and
/// write `bench.csv`. Kronecker rows appear only for single-operator
/// instances.
pub fn cmd_bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let b = cfg.bench;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let solve_cfg = cfg.fit_config().solve;
    let mut rows = Vec::new();
    for instance in 0..b.instances {
        let (g, y) = random_instance(&mut rng, b.n, b.m, b.terms)?;
        let start = Instant::now();
        let (reference, report) = dense_solve(&g, b.ridge, &y)?;
        let mut results = vec![(reference.clone(), report, start.elapsed().as_secs_f64())];
        if (1..g.num_terms()).all(|k| g.operator(k) == g.operator(0)) {
            let start = Instant::now();
            let (a, r) = kron_solve(&g, b.ridge, &y)?;
            results.push((a, r, start.elapsed().as_secs_f64()));
        }
        let start = Instant::now();
        let (a, r) = gauss_seidel_solve(&g, b.ridge, &y, &solve_cfg, None)?;
        results.push((a, r, start.elapsed().as_secs_f64()));
        let start = Instant::now();
        let (a, r) = woodbury_solve(&g, b.ridge, &y)?;
        results.push((a, r, start.elapsed().as_secs_f64()));
        for (alpha, report, secs) in results {
            rows.push(BenchRow {
                instance,
                n: b.n,
                m: b.m,
                terms: b.terms,
                solver: solver_name(report.solver).into(),
                relative_residual: residual(&g, b.ridge, &alpha, &y)?,
                iterations: report.iterations,
                inner_iterations: report.inner_iterations,
                error_vs_dense: distance(&alpha, &reference),
                converged: report.converged,
                wall_time_s: secs,
            });
        }
    }
    ensure_dir(&cfg.output_dir)?;
    write_csv(&cfg.output_dir.join(BENCH_FILE), &rows)?;
    Ok(rows)
}

fn residual(g: &movkl_core::BlockGram, ridge: f64, alpha: &CurveVec, y: &CurveVec) -> Result<f64> {
    let ka = gram_apply(g, alpha)?;
    let r: Vec<f64> = ka
        .as_flat()
        .iter()
        .zip(alpha.as_flat())
        .zip(y.as_flat())
        .map(|((k, a), y)| k + ridge * a - y)
        .collect();
    let r = CurveVec::from_flat(y.grid().clone(), y.len(), r)?;
    Ok((r.norm_sq() / y.norm_sq().max(f64::MIN_POSITIVE)).sqrt())
}
