//! Versioned TOML run configuration.
//!
//! ```toml
//! version = 1
//! seed = 7
//! output_dir = "out"
//!
//! [data]
//! train_count = 65                 # split of generated data
//! [data.synth]
//! n_samples = 100
//! grid_size = 200
//! latency = 15
//! noise_std = 0.1
//! filter = { kind = "fir", taps = 10 }
//!
//! [model]
//! r = 2.0                          # or "inf"
//! lambda = 1e-3
//! preset = "menu"                  # or a [[model.terms]] list
//!
//! [solver]
//! kind = "woodbury"
//!
//! [cv]
//! lambdas = [1e-4, 1e-2, 1.0]
//! ranks = [20]
//! ```
//!
//! Unknown keys are rejected. Data paths are resolved relative to the current
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use movkl_core::kernels::{
    median_pairwise_distance, DEFAULT_BANDWIDTH_FACTORS, DEFAULT_INTEGRAL_RANK,
};
use movkl_core::linsolve::SolveConfig;
use movkl_core::{
    ChannelFilter, CurveVec, CvSpec, FitConfig, Grid, KernelStack, OperatorKind, ScalarKernel,
    SolverChoice, SynthSpec, TermSpec,
};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::archive::{Exponent, OperatorRecord};
use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("movkl-out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: default_output_dir(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            cv: CvConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    /// Samples of generated data used for training; the rest is test data.
    pub train_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub grid_size: usize,
    pub latency: usize,
    pub channel_count: usize,
    pub noise_std: f64,
    pub duration: f64,
    pub filter: FilterConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        Self {
            n_samples: s.n_samples,
            grid_size: s.grid_size,
            latency: s.latency,
            channel_count: s.channel_count,
            noise_std: s.noise_std,
            duration: s.duration,
            filter: FilterConfig::Identity,
        }
    }
}

impl SynthConfig {
    pub fn to_spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            n_samples: self.n_samples,
            grid_size: self.grid_size,
            latency: self.latency,
            channel_count: self.channel_count,
            noise_std: self.noise_std,
            seed,
            filter: match self.filter {
                FilterConfig::Identity => ChannelFilter::Identity,
                FilterConfig::Fir { taps } => ChannelFilter::RandomFir { taps },
            },
            duration: self.duration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterConfig {
    Identity,
    Fir { taps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Gaussians at every bandwidth factor plus polynomials of degree 1..=3,
    /// each paired with the identity, multiplication and integral operators.
    Menu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_r")]
    pub r: Exponent,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub preset: Option<Preset>,
    #[serde(default = "default_factors")]
    pub bandwidth_factors: Vec<f64>,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default)]
    pub terms: Vec<TermConfig>,
}

fn default_r() -> Exponent {
    Exponent::Finite(2.0)
}

fn default_lambda() -> f64 {
    1.0
}

fn default_factors() -> Vec<f64> {
    DEFAULT_BANDWIDTH_FACTORS.to_vec()
}

fn default_rank() -> usize {
    DEFAULT_INTEGRAL_RANK
}

impl ModelConfig {
    /// The preset in effect; the menu when no terms are listed.
    pub fn preset(&self) -> Option<Preset> {
        match self.preset {
            Some(p) => Some(p),
            None if self.terms.is_empty() => Some(Preset::Menu),
            None => None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            r: default_r(),
            lambda: default_lambda(),
            preset: Some(Preset::Menu),
            bandwidth_factors: default_factors(),
            rank: default_rank(),
            terms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub scalar: ScalarConfig,
    pub operator: OperatorRecord,
}

/// Gaussian bandwidths are absolute or a factor of the median pairwise
/// distance between training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarConfig {
    Gaussian {
        bandwidth: Option<f64>,
        bandwidth_factor: Option<f64>,
        #[serde(default)]
        normalize: bool,
    },
    Polynomial {
        degree: u32,
        #[serde(default = "default_offset")]
        offset: f64,
    },
}

fn default_offset() -> f64 {
    1.0
}

impl ScalarConfig {
    fn resolve(&self, median: f64) -> Result<ScalarKernel> {
        let k = match *self {
            ScalarConfig::Gaussian {
                bandwidth,
                bandwidth_factor,
                normalize,
            } => {
                let bandwidth = match (bandwidth, bandwidth_factor) {
                    (Some(b), None) => b,
                    (None, Some(f)) => f * median,
                    _ => return Err(CliError::Config(
                        "a gaussian term needs exactly one of `bandwidth` and `bandwidth_factor`"
                            .into(),
                    )),
                };
                ScalarKernel::Gaussian {
                    bandwidth,
                    normalize,
                }
            }
            ScalarConfig::Polynomial { degree, offset } => {
                ScalarKernel::Polynomial { degree, offset }
            }
        };
        k.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKindConfig {
    Auto,
    Dense,
    Kronecker,
    GaussSeidel,
    Woodbury,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub kind: SolverKindConfig,
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub mkl_tol: f64,
    pub mkl_max_iter: usize,
    pub require_convergence: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolveConfig::default();
        let f = FitConfig::default();
        Self {
            kind: SolverKindConfig::Auto,
            outer_tol: s.outer_tol,
            outer_max_iter: s.outer_max_iter,
            inner_tol: s.inner_tol,
            inner_max_iter: s.inner_max_iter,
            mkl_tol: f.mkl_tol,
            mkl_max_iter: f.mkl_max_iter,
            require_convergence: f.require_convergence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub lambdas: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![1e-4, 10f64.powf(-2.5), 1e-1, 10f64.powf(0.5), 1e2],
            ranks: vec![DEFAULT_INTEGRAL_RANK],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub instances: usize,
    pub n: usize,
    pub m: usize,
    pub terms: usize,
    pub ridge: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            instances: 10,
            n: 6,
            m: 10,
            terms: 3,
            ridge: 1.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Schema checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if let Some(s) = &self.data.synth {
            s.to_spec(self.seed)
                .validate()
                .map_err(|e| CliError::Config(format!("data.synth: {e}")))?;
        }
        let m = &self.model;
        if m.preset.is_some() && !m.terms.is_empty() {
            return bad("model takes either `preset` or `terms`, not both".into());
        }
        if m.preset().is_some() && m.bandwidth_factors.is_empty() {
            return bad("model.bandwidth_factors must not be empty".into());
        }
        self.fit_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.cv_spec()
            .validate()
            .map_err(|e| CliError::Config(format!("cv: {e}")))?;
        let b = &self.bench;
        if b.instances == 0 || b.n == 0 || b.m < 2 || b.terms == 0 || !(b.ridge > 0.0) {
            return bad("bench needs instances, n, terms >= 1, m >= 2 and ridge > 0".into());
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        let s = &self.solver;
        FitConfig {
            lambda: self.model.lambda,
            r: self.model.r.value(),
            mkl_tol: s.mkl_tol,
            mkl_max_iter: s.mkl_max_iter,
            solve: SolveConfig {
                outer_tol: s.outer_tol,
                outer_max_iter: s.outer_max_iter,
                inner_tol: s.inner_tol,
                inner_max_iter: s.inner_max_iter,
                track_residuals: false,
            },
            solver: match s.kind {
                SolverKindConfig::Auto => SolverChoice::Auto,
                SolverKindConfig::Dense => SolverChoice::Dense,
                SolverKindConfig::Kronecker => SolverChoice::Kronecker,
                SolverKindConfig::GaussSeidel => SolverChoice::GaussSeidel,
                SolverKindConfig::Woodbury => SolverChoice::Woodbury,
            },
            require_convergence: s.require_convergence,
        }
    }

    pub fn cv_spec(&self) -> CvSpec {
        CvSpec {
            lambda_grid: self.cv.lambdas.clone(),
            rank_grid: self.cv.ranks.clone(),
        }
    }

    /// Term templates with bandwidths resolved against `train_inputs`.
    pub fn term_specs(&self, train_inputs: &CurveVec) -> Result<Vec<TermSpec>> {
        let m = &self.model;
        let median = median_pairwise_distance(train_inputs);
        let needs_median = m.preset().is_some()
            || m.terms.iter().any(|t| {
                matches!(
                    t.scalar,
                    ScalarConfig::Gaussian {
                        bandwidth_factor: Some(_),
                        ..
                    }
                )
            });
        if needs_median && !(median > 0.0) {
            return Err(CliError::Data(
                "relative bandwidths need distinct training inputs".into(),
            ));
        }
        match m.preset() {
            Some(Preset::Menu) => {
                let mut scalars = Vec::new();
                for f in &m.bandwidth_factors {
                    scalars.push(
                        ScalarKernel::gaussian(f * median)
                            .map_err(|e| CliError::Config(e.to_string()))?,
                    );
                }
                scalars.extend((1..=3).map(|p| ScalarKernel::Polynomial {
                    degree: p,
                    offset: 1.0,
                }));
                let ops = [
                    OperatorKind::Identity,
                    OperatorKind::Multiplication,
                    OperatorKind::Integral { rank: m.rank },
                ];
                Ok(scalars
                    .into_iter()
                    .flat_map(|s| {
                        ops.iter().map(move |&o| TermSpec {
                            scalar: s,
                            operator: o,
                        })
                    })
                    .collect())
            }
            None => m
                .terms
                .iter()
                .map(|t| {
                    Ok(TermSpec {
                        scalar: t.scalar.resolve(median)?,
                        operator: t.operator.into(),
                    })
                })
                .collect(),
        }
    }

    /// The configured kernel stack on `output_grid` with uniform weights.
    pub fn kernel_stack(
        &self,
        train_inputs: &CurveVec,
        output_grid: &Arc<Grid>,
    ) -> Result<KernelStack> {
        let specs = self.term_specs(train_inputs)?;
        KernelStack::from_specs(&specs, output_grid, self.model.r.value(), None)
            .map_err(|e| CliError::Config(e.to_string()))
    }
}
