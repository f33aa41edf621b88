//! Line-oriented dataset files.
//!
//! ```text
//! movkl-dataset v1
//! n 2
//! input_points 0.0000000000000000e0,5.0000000000000000e-1,1.0000000000000000e0
//! input_weights ...
//! output_points ...
//! output_weights ...
//! labels 1
//! x 0 <input values>
//! y 0 <target values>
//! l 0 <label values>
//! x 1 ...
//! ```
//!
//! Values are written with 17 significant digits, so a save/load cycle
//! reproduces every bit. `labels 0` omits the `l` records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use movkl_core::{CurveDataset, CurveVec, Grid};

use crate::error::{CliError, Result};

pub const DATASET_HEADER: &str = "movkl-dataset v1";

fn push_values(out: &mut String, values: &[f64]) {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        write!(out, "{v:.16e}").unwrap();
    }
    out.push('\n');
}

/// Render a dataset in the text format.
pub fn dataset_to_string(ds: &CurveDataset) -> String {
    let mut out = String::new();
    out.push_str(DATASET_HEADER);
    out.push('\n');
    writeln!(out, "n {}", ds.len()).unwrap();
    for (name, grid) in [("input", ds.input_grid()), ("output", ds.output_grid())] {
        out.push_str(&format!("{name}_points "));
        push_values(&mut out, grid.points());
        out.push_str(&format!("{name}_weights "));
        push_values(&mut out, grid.weights());
    }
    writeln!(out, "labels {}", u8::from(ds.labels().is_some())).unwrap();
    for i in 0..ds.len() {
        out.push_str(&format!("x {i} "));
        push_values(&mut out, ds.inputs().row(i));
        out.push_str(&format!("y {i} "));
        push_values(&mut out, ds.targets().row(i));
        if let Some(l) = ds.labels() {
            out.push_str(&format!("l {i} "));
            push_values(&mut out, l.row(i));
        }
    }
    out
}

pub fn save_dataset(path: &Path, ds: &CurveDataset) -> Result<()> {
    fs::write(path, dataset_to_string(ds)).map_err(|e| CliError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<CurveDataset> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_dataset(path, &text)
}

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> CliError {
        CliError::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    /// Next non-empty line split into its key and the remainder.
    fn record(&mut self, what: &str) -> Result<(&'a str, &'a str)> {
        loop {
            let Some((i, raw)) = self.inner.next() else {
                return Err(self.err(format!("unexpected end of file, expected {what}")));
            };
            self.line = i + 1;
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            return Ok(raw.split_once(' ').unwrap_or((raw, "")));
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let (k, rest) = self.record(key)?;
        if k != key {
            return Err(self.err(format!("expected `{key}`, found `{k}`")));
        }
        Ok(rest.trim())
    }

    fn values(&self, text: &str, expect: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(expect);
        for (j, tok) in text.split(',').enumerate() {
            let v: f64 = tok.trim().parse().map_err(|_| {
                self.err(format!(
                    "{what}: value {j} `{}` is not a number",
                    tok.trim()
                ))
            })?;
            if !v.is_finite() {
                return Err(self.err(format!("{what}: value {j} is not finite")));
            }
            out.push(v);
        }
        if out.len() != expect {
            return Err(self.err(format!(
                "{what}: expected {expect} values, found {}",
                out.len()
            )));
        }
        Ok(out)
    }

    fn grid(&mut self, name: &str) -> Result<Arc<Grid>> {
        let key = format!("{name}_points");
        let text = self.keyed(&key)?;
        let count = text.split(',').count();
        let points = self.values(text, count, &key)?;
        let key = format!("{name}_weights");
        let text = self.keyed(&key)?;
        let weights = self.values(text, count, &key)?;
        Grid::new(points, weights)
            .map(Arc::new)
            .map_err(|e| self.err(format!("{name} grid: {e}")))
    }

    fn sample(&mut self, key: &str, i: usize, m: usize) -> Result<Vec<f64>> {
        let rest = self.keyed(key)?;
        let (idx, vals) = rest.split_once(' ').unwrap_or((rest, ""));
        if idx.parse::<usize>().ok() != Some(i) {
            return Err(self.err(format!("expected record `{key} {i}`, found index `{idx}`")));
        }
        self.values(vals, m, &format!("record {key} {i}"))
    }
}

/// Parse the text format; `path` only labels diagnostics.
pub fn parse_dataset(path: &Path, text: &str) -> Result<CurveDataset> {
    let mut lines = Lines {
        path,
        inner: text.lines().enumerate(),
        line: 0,
    };
    let (k, rest) = lines.record("header")?;
    if format!("{k} {rest}").trim() != DATASET_HEADER {
        return Err(lines.err(format!("missing `{DATASET_HEADER}` header")));
    }
    let n: usize = lines
        .keyed("n")?
        .parse()
        .map_err(|_| lines.err("`n` must be a non-negative integer"))?;
    let in_grid = lines.grid("input")?;
    let out_grid = lines.grid("output")?;
    let has_labels = match lines.keyed("labels")? {
        "0" => false,
        "1" => true,
        other => return Err(lines.err(format!("`labels` must be 0 or 1, found `{other}`"))),
    };
    let (m_in, m_out) = (in_grid.len(), out_grid.len());
    let mut xs = Vec::with_capacity(n * m_in);
    let mut ys = Vec::with_capacity(n * m_out);
    let mut ls = Vec::new();
    for i in 0..n {
        xs.extend(lines.sample("x", i, m_in)?);
        ys.extend(lines.sample("y", i, m_out)?);
        if has_labels {
            ls.extend(lines.sample("l", i, m_out)?);
        }
    }
    if let Ok((k, _)) = lines.record("end of file") {
        return Err(lines.err(format!("unexpected record `{k}` after {n} samples")));
    }
    let labels = if has_labels {
        Some(CurveVec::from_flat(out_grid.clone(), n, ls)?)
    } else {
        None
    };
    CurveDataset::new(
        CurveVec::from_flat(in_grid, n, xs)?,
        CurveVec::from_flat(out_grid, n, ys)?,
        labels,
    )
    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Import pre-extracted features from CSV.
///
/// Expected columns: `sample,kind,channel,v0,...,v{m-1}` with `kind` one of
/// `input`, `target` or `label`. Every sample needs `channels` input rows
/// (channel `0..channels`), one target row and optionally one label row
/// (channel `0`). Curves are placed on uniform grids over `[0, 1]`; input
/// channels are stacked. Rows may come in any order.
pub fn import_feature_csv(path: &Path, channels: usize) -> Result<CurveDataset> {
    if channels == 0 {
        return Err(CliError::Usage("channel count must be >= 1".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<(usize, String, usize, Vec<f64>)> = Vec::new();
    let mut m = None;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = r + 2;
        let bad = |message: String| CliError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if rec.len() < 5 {
            return Err(bad(format!(
                "expected at least 5 columns, found {}",
                rec.len()
            )));
        }
        let sample = rec[0].parse().map_err(|_| bad("bad sample index".into()))?;
        let channel = rec[2]
            .parse()
            .map_err(|_| bad("bad channel index".into()))?;
        let values = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| bad("non-numeric or non-finite value".into()))?;
        if *m.get_or_insert(values.len()) != values.len() {
            return Err(bad("inconsistent row length".into()));
        }
        rows.push((sample, rec[1].to_string(), channel, values));
    }
    let m = m.ok_or_else(|| CliError::Data(format!("{}: no rows", path.display())))?;
    let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut xs = vec![None; n * channels];
    let mut ys = vec![None; n];
    let mut ls = vec![None; n];
    for (sample, kind, channel, values) in rows {
        let slot = match kind.as_str() {
            "input" if channel < channels => &mut xs[sample * channels + channel],
            "target" if channel == 0 => &mut ys[sample],
            "label" if channel == 0 => &mut ls[sample],
            _ => {
                return Err(CliError::Data(format!(
                    "unexpected row kind `{kind}` channel {channel}"
                )))
            }
        };
        if slot.replace(values).is_some() {
            return Err(CliError::Data(format!(
                "duplicate {kind} row for sample {sample}"
            )));
        }
    }
    let missing = |what: &str, i: usize| CliError::Data(format!("sample {i} has no {what} row"));
    let grid = Arc::new(Grid::uniform(0.0, 1.0, m)?);
    let in_grid = if channels == 1 {
        grid.clone()
    } else {
        Arc::new(Grid::stack(&vec![(*grid).clone(); channels])?)
    };
    let mut flat_x = Vec::with_capacity(n * channels * m);
    for (k, x) in xs.into_iter().enumerate() {
        flat_x.extend(x.ok_or_else(|| missing("input", k / channels))?);
    }
    let mut flat_y = Vec::with_capacity(n * m);
    for (i, y) in ys.into_iter().enumerate() {
        flat_y.extend(y.ok_or_else(|| missing("target", i))?);
    }
    let labels = if ls.iter().all(Option::is_none) {
        None
    } else {
        let mut flat = Vec::with_capacity(n * m);
        for (i, l) in ls.into_iter().enumerate() {
            flat.extend(l.ok_or_else(|| missing("label", i))?);
        }
        Some(CurveVec::from_flat(grid.clone(), n, flat)?)
    };
    Ok(CurveDataset::new(
        CurveVec::from_flat(in_grid, n, flat_x)?,
        CurveVec::from_flat(grid, n, flat_y)?,
        labels,
    )?)
}
