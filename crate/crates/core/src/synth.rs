//! Synthetic latency task: the response is a rectified smooth amplitude
//! curve, the input is the same amplitude delayed by `τ` grid steps, passed
//! through per-channel random filters and corrupted by white noise.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::funcspace::{check_grid, CurveVec, Grid};
use crate::math;

const COMPONENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelFilter {
    /// Pass the delayed amplitude through unchanged.
    Identity,
    /// Random positive FIR filter with `taps` coefficients and a random gain.
    RandomFir { taps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub grid_size: usize,
    /// Delay in grid steps, `0 ≤ τ < m`.
    pub latency: usize,
    pub channel_count: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub filter: ChannelFilter,
    /// Length of the observation window.
    pub duration: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 100,
            grid_size: 200,
            latency: 15,
            channel_count: 1,
            noise_std: 0.1,
            seed: 0,
            filter: ChannelFilter::Identity,
            duration: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Domain("n_samples must be >= 1".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Domain("grid_size must be >= 2".into()));
        }
        if self.latency >= self.grid_size {
            return Err(Error::Domain(format!(
                "latency {} must be below grid_size {}",
                self.latency, self.grid_size
            )));
        }
        if self.channel_count == 0 {
            return Err(Error::Domain("channel_count must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Domain(format!(
                "noise_std {} must be >= 0",
                self.noise_std
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Domain("duration must be > 0".into()));
        }
        if let ChannelFilter::RandomFir { taps: 0 } = self.filter {
            return Err(Error::Domain("filter needs at least one tap".into()));
        }
        Ok(())
    }
}

/// Paired input and target curves, with optional 0/1 label curves on the
/// target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveDataset {
    inputs: CurveVec,
    targets: CurveVec,
    labels: Option<CurveVec>,
}

impl CurveDataset {
    pub fn new(inputs: CurveVec, targets: CurveVec, labels: Option<CurveVec>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != targets.len() {
                return Err(Error::Data(format!(
                    "{} label curves for {} targets",
                    l.len(),
                    targets.len()
                )));
            }
            check_grid(targets.grid(), l.grid(), "labels")?;
            if let Some(v) = l.as_flat().iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::Data(format!("label value {v} is not 0 or 1")));
            }
        }
        Ok(Self {
            inputs,
            targets,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_grid(&self) -> &Arc<Grid> {
        self.inputs.grid()
    }

    pub fn output_grid(&self) -> &Arc<Grid> {
        self.targets.grid()
    }

    pub fn inputs(&self) -> &CurveVec {
        &self.inputs
    }

    pub fn targets(&self) -> &CurveVec {
        &self.targets
    }

    pub fn labels(&self) -> Option<&CurveVec> {
        self.labels.as_ref()
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(indices),
            targets: self.targets.select(indices),
            labels: self.labels.as_ref().map(|l| l.select(indices)),
        }
    }

    /// First `k` samples and the rest.
    pub fn split_at(&self, k: usize) -> (Self, Self) {
        let k = k.min(self.len());
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

struct Amplitude {
    offset: f64,
    parts: [(f64, f64, f64); COMPONENTS],
}

impl Amplitude {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let offset = rng.random_range(-0.3..0.3);
        let parts = core::array::from_fn(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.2..1.0),
                rng.random_range(0.0..2.0 * PI),
            )
        });
        Self { offset, parts }
    }

    fn at(&self, t: f64, duration: f64) -> f64 {
        let s: f64 = self
            .parts
            .iter()
            .map(|(f, a, p)| a * math::sin(2.0 * PI * f * t / duration + p))
            .sum();
        (self.offset + s).max(0.0)
    }
}

struct Channel {
    gain: f64,
    taps: Vec<f64>,
}

impl Channel {
    fn draw(rng: &mut ChaCha8Rng, filter: ChannelFilter) -> Self {
        match filter {
            ChannelFilter::Identity => Self {
                gain: 1.0,
                taps: vec![1.0],
            },
            ChannelFilter::RandomFir { taps } => {
                let raw: Vec<f64> = (0..taps).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                Self {
                    gain: rng.random_range(0.5..1.5),
                    taps: raw.into_iter().map(|h| h / total).collect(),
                }
            }
        }
    }
}

/// Deterministic in `spec.seed`. Inputs of several channels are concatenated
/// over a stacked grid.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<CurveDataset> {
    spec.validate()?;
    let m = spec.grid_size;
    let out_grid = Arc::new(Grid::uniform(0.0, spec.duration, m)?);
    let in_grid = if spec.channel_count == 1 {
        out_grid.clone()
    } else {
        let channels = vec![(*out_grid).clone(); spec.channel_count];
        Arc::new(Grid::stack(&channels)?)
    };
    let dt = spec.duration / (m - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let channels: Vec<Channel> = (0..spec.channel_count)
        .map(|_| Channel::draw(&mut rng, spec.filter))
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Domain(format!("{e}")))?;
    let points = out_grid.points().to_vec();

    let mut inputs = Vec::with_capacity(spec.n_samples * m * spec.channel_count);
    let mut targets = Vec::with_capacity(spec.n_samples * m);
    let mut labels = Vec::with_capacity(spec.n_samples * m);
    for _ in 0..spec.n_samples {
        let amp = Amplitude::draw(&mut rng);
        let y: Vec<f64> = points.iter().map(|&t| amp.at(t, spec.duration)).collect();
        let peak = y.iter().cloned().fold(0.0, f64::max);
        labels.extend(y.iter().map(|&a| {
            if peak > 0.0 && a > 0.1 * peak {
                1.0
            } else {
                0.0
            }
        }));
        for ch in &channels {
            for &t in &points {
                let mut v = 0.0;
                for (l, h) in ch.taps.iter().enumerate() {
                    let shift = (spec.latency + l) as f64 * dt;
                    v += h * amp.at(t - shift, spec.duration);
                }
                let eps = if spec.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                inputs.push(ch.gain * v + eps);
            }
        }
        targets.extend(y);
    }
    CurveDataset::new(
        CurveVec::from_flat(in_grid, spec.n_samples, inputs)?,
        CurveVec::from_flat(out_grid.clone(), spec.n_samples, targets)?,
        Some(CurveVec::from_flat(out_grid, spec.n_samples, labels)?),
    )
}
