//! Versioned JSON model archive.
//!
//! Every float is written in shortest round-trip form and parsed back exactly,
//! so a save/load cycle reproduces grids, dual curves and weights bit for bit.
//! An infinite norm exponent is stored as the string `"inf"`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use movkl_core::{CurveVec, Grid, KernelStack, MovklModel, OperatorKind, ScalarKernel, TermSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MODEL_FORMAT: &str = "movkl-model";
pub const MODEL_VERSION: u32 = 1;

/// A norm exponent that may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Exponent {
    Finite(f64),
    Named(InfName),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfName {
    Inf,
}

impl Exponent {
    pub fn from_f64(r: f64) -> Self {
        if r.is_infinite() {
            Exponent::Named(InfName::Inf)
        } else {
            Exponent::Finite(r)
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Exponent::Finite(r) => r,
            Exponent::Named(InfName::Inf) => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarRecord {
    Gaussian {
        bandwidth: f64,
        #[serde(default)]
        normalize: bool,
    },
    Polynomial {
        degree: u32,
        offset: f64,
    },
}

impl ScalarRecord {
    pub fn from_kernel(k: &ScalarKernel) -> Self {
        match *k {
            ScalarKernel::Gaussian {
                bandwidth,
                normalize,
            } => ScalarRecord::Gaussian {
                bandwidth,
                normalize,
            },
            ScalarKernel::Polynomial { degree, offset } => {
                ScalarRecord::Polynomial { degree, offset }
            }
        }
    }

    pub fn to_kernel(self) -> Result<ScalarKernel> {
        let k = match self {
            ScalarRecord::Gaussian {
                bandwidth,
                normalize,
            } => ScalarKernel::Gaussian {
                bandwidth,
                normalize,
            },
            ScalarRecord::Polynomial { degree, offset } => {
                ScalarKernel::Polynomial { degree, offset }
            }
        };
        k.validate()?;
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorRecord {
    Identity,
    Multiplication,
    Integral { rank: usize },
}

impl From<OperatorKind> for OperatorRecord {
    fn from(k: OperatorKind) -> Self {
        match k {
            OperatorKind::Identity => OperatorRecord::Identity,
            OperatorKind::Multiplication => OperatorRecord::Multiplication,
            OperatorKind::Integral { rank } => OperatorRecord::Integral { rank },
        }
    }
}

impl From<OperatorRecord> for OperatorKind {
    fn from(k: OperatorRecord) -> Self {
        match k {
            OperatorRecord::Identity => OperatorKind::Identity,
            OperatorRecord::Multiplication => OperatorKind::Multiplication,
            OperatorRecord::Integral { rank } => OperatorKind::Integral { rank },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecord {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GridRecord {
    pub fn from_grid(g: &Grid) -> Self {
        Self {
            points: g.points().to_vec(),
            weights: g.weights().to_vec(),
        }
    }

    pub fn to_grid(&self) -> Result<Arc<Grid>> {
        Ok(Arc::new(Grid::new(
            self.points.clone(),
            self.weights.clone(),
        )?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermRecord {
    pub scalar: ScalarRecord,
    pub operator: OperatorRecord,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArchive {
    pub format: String,
    pub version: u32,
    pub lambda: f64,
    pub r: Exponent,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub input_grid: GridRecord,
    pub output_grid: GridRecord,
    pub terms: Vec<TermRecord>,
    pub train_inputs: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

fn rows(v: &CurveVec) -> Vec<Vec<f64>> {
    v.rows().map(<[f64]>::to_vec).collect()
}

fn flatten(grid: Arc<Grid>, rows: &[Vec<f64>], what: &str) -> Result<CurveVec> {
    let m = grid.len();
    if let Some(i) = rows.iter().position(|r| r.len() != m) {
        return Err(CliError::Data(format!(
            "{what} curve {i} does not match its grid"
        )));
    }
    Ok(CurveVec::from_flat(grid, rows.len(), rows.concat())?)
}

impl ModelArchive {
    pub fn from_model(model: &MovklModel) -> Self {
        let stack = model.stack();
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            lambda: model.lambda(),
            r: Exponent::from_f64(model.r()),
            iterations: model.iterations(),
            converged: model.converged(),
            objective_trace: model.objective_trace().to_vec(),
            input_grid: GridRecord::from_grid(model.train_inputs().grid()),
            output_grid: GridRecord::from_grid(stack.output_grid()),
            terms: stack
                .terms()
                .iter()
                .map(|t| TermRecord {
                    scalar: ScalarRecord::from_kernel(&t.scalar),
                    operator: t.operator.kind().into(),
                    weight: t.weight,
                })
                .collect(),
            train_inputs: rows(model.train_inputs()),
            alpha: rows(model.alpha()),
        }
    }

    pub fn to_model(&self) -> Result<MovklModel> {
        if self.format != MODEL_FORMAT {
            return Err(CliError::Data(format!(
                "not a model archive (format `{}`)",
                self.format
            )));
        }
        if self.version != MODEL_VERSION {
            return Err(CliError::Data(format!(
                "unsupported model archive version {} (expected {MODEL_VERSION})",
                self.version
            )));
        }
        let out_grid = self.output_grid.to_grid()?;
        let specs = self
            .terms
            .iter()
            .map(|t| {
                Ok(TermSpec {
                    scalar: t.scalar.to_kernel()?,
                    operator: t.operator.into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = self.terms.iter().map(|t| t.weight).collect();
        let stack = KernelStack::from_specs(&specs, &out_grid, self.r.value(), None)?
            .with_weights(&weights)?;
        let inputs = flatten(
            self.input_grid.to_grid()?,
            &self.train_inputs,
            "training input",
        )?;
        let alpha = flatten(out_grid, &self.alpha, "dual")?;
        Ok(MovklModel::from_parts(
            stack,
            inputs,
            alpha,
            self.lambda,
            self.objective_trace.clone(),
            self.iterations,
            self.converged,
        )?)
    }
}

pub fn model_to_string(model: &MovklModel) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&ModelArchive::from_model(model))?;
    s.push('\n');
    Ok(s)
}

pub fn save_model(path: &Path, model: &MovklModel) -> Result<()> {
    fs::write(path, model_to_string(model)?).map_err(|e| CliError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<MovklModel> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let archive: ModelArchive = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    archive.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use movkl_core::{movkl_fit, FitConfig};

    fn model(r: f64) -> MovklModel {
        let g = Arc::new(Grid::uniform(0.0, 1.0, 5).unwrap());
        let x = CurveVec::from_flat(
            g.clone(),
            3,
            (0..15).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let y = CurveVec::from_flat(
            g.clone(),
            3,
            (0..15).map(|i| (i as f64 * 0.21).cos()).collect(),
        )
        .unwrap();
        let specs = [
            TermSpec {
                scalar: ScalarKernel::gaussian(0.7).unwrap(),
                operator: OperatorKind::Integral { rank: 3 },
            },
            TermSpec {
                scalar: ScalarKernel::polynomial(2, 1.0).unwrap(),
                operator: OperatorKind::Multiplication,
            },
        ];
        let stack = KernelStack::from_specs(&specs, &g, r, None).unwrap();
        movkl_fit(
            &stack,
            &x,
            &y,
            &FitConfig {
                lambda: 0.3,
                r,
                ..FitConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn archive_round_trips_exactly() {
        for r in [2.0, f64::INFINITY] {
            let m = model(r);
            let text = model_to_string(&m).unwrap();
            let archive: ModelArchive = serde_json::from_str(&text).unwrap();
            let back = archive.to_model().unwrap();
            assert_eq!(
                ModelArchive::from_model(&back),
                ModelArchive::from_model(&m)
            );
            assert_eq!(model_to_string(&back).unwrap(), text);
            let bits = |v: &CurveVec| v.as_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(back.alpha()), bits(m.alpha()));
        }
    }

    #[test]
    fn infinite_exponent_is_spelled_out() {
        let text = model_to_string(&model(f64::INFINITY)).unwrap();
        assert!(text.contains("\"r\": \"inf\""));
    }

    #[test]
    fn foreign_or_future_archives_are_rejected() {
        let mut a = ModelArchive::from_model(&model(2.0));
        a.version = 2;
        assert!(a.to_model().is_err());
        a.version = MODEL_VERSION;
        a.format = "other".into();
        assert!(a.to_model().is_err());
        let text = model_to_string(&model(2.0))
            .unwrap()
            .replacen("{", "{\"extra\": 1,", 1);
        assert!(serde_json::from_str::<ModelArchive>(&text).is_err());
    }
}
