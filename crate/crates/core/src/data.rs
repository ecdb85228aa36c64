//! CSV ingestion with per-dataset presets, hourly resampling and synthetic
//! series generators.

use std::io::Read;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frame::TimeSeriesFrame;
use crate::tensor::Tensor;

/// Columns with a larger fraction of missing cells are dropped.
pub const MAX_MISSING_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    pub delimiter: u8,
    pub decimal: char,
    /// Cells equal to this value are treated as missing.
    pub sentinel: Option<f64>,
    /// Columns joined with a space to form the timestamp; empty = none.
    pub timestamp_columns: Vec<String>,
    /// chrono format of the joined timestamp (date-only formats allowed).
    pub timestamp_format: String,
    /// Value columns to keep, in order; `None` keeps every non-timestamp column.
    pub columns: Option<Vec<String>>,
    pub resample_hourly: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            decimal: '.',
            sentinel: None,
            timestamp_columns: Vec::new(),
            timestamp_format: "%Y-%m-%d %H:%M:%S".into(),
            columns: None,
            resample_hourly: false,
        }
    }
}

impl CsvOptions {
    /// Options for the four public datasets (see README for file layouts).
    pub fn preset(name: &str) -> Result<Self> {
        let base = CsvOptions::default();
        Ok(match name {
            "generic" => base,
            "airquality" => CsvOptions {
                delimiter: b';',
                decimal: ',',
                sentinel: Some(-200.0),
                timestamp_columns: vec!["Date".into(), "Time".into()],
                timestamp_format: "%d/%m/%Y %H.%M.%S".into(),
                ..base
            },
            "electricity" => CsvOptions {
                delimiter: b';',
                decimal: ',',
                timestamp_columns: vec![String::new()],
                resample_hourly: true,
                ..base
            },
            "stock" => CsvOptions {
                timestamp_columns: vec!["Date".into()],
                timestamp_format: "%Y-%m-%d".into(),
                ..base
            },
            "smartphone" => base,
            other => return Err(Error::Config(format!("unknown dataset preset `{other}`"))),
        })
    }
}

/// Reads a CSV file; see [`parse_csv`].
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<TimeSeriesFrame> {
    let file = std::fs::File::open(path)?;
    let (frame, warnings) = parse_csv(file, options, path)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(frame)
}

fn parse_timestamp(text: &str, format: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(text, format)
        .ok()
        .or_else(|| {
            NaiveDate::parse_from_str(text, format)
                .ok()
                .map(|d| d.and_hms_opt(0, 0, 0).unwrap())
        })
}

/// Parses CSV text: header row, sentinel and empty cells become missing,
/// columns with more than half their cells missing are dropped, remaining
/// gaps are forward-filled (leading gaps back-filled). Returns the frame and
/// any warnings.
pub fn parse_csv<R: Read>(
    reader: R,
    options: &CsvOptions,
    source: &Path,
) -> Result<(TimeSeriesFrame, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let fmt_err = |line: usize, message: String| Error::Format {
        path: source.to_path_buf(),
        line,
        message,
    };
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| fmt_err(1, e.to_string()))?
        .iter()
        .map(|h| h.trim_matches('"').to_string())
        .collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let ts_idx: Vec<usize> = options
        .timestamp_columns
        .iter()
        .map(|c| find(c).ok_or_else(|| fmt_err(1, format!("timestamp column `{c}` not found"))))
        .collect::<Result<_>>()?;
    let value_idx: Vec<usize> = match &options.columns {
        Some(cols) => cols
            .iter()
            .map(|c| find(c).ok_or_else(|| fmt_err(1, format!("column `{c}` not found"))))
            .collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|i| !ts_idx.contains(i) && !headers[*i].is_empty())
            .collect(),
    };

    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    let mut stamps: Vec<NaiveDateTime> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            fmt_err(line, e.to_string())
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if !ts_idx.is_empty() {
            let text = ts_idx
                .iter()
                .map(|&i| record.get(i).unwrap_or(""))
                .collect::<Vec<_>>()
                .join(" ");
            let ts = parse_timestamp(&text, &options.timestamp_format)
                .ok_or_else(|| fmt_err(line, format!("cannot parse timestamp `{text}`")))?;
            stamps.push(ts);
        }
        let mut row = Vec::with_capacity(value_idx.len());
        for &i in &value_idx {
            let raw = record.get(i).unwrap_or("").trim_matches('"');
            if raw.is_empty() {
                row.push(None);
                continue;
            }
            let normalized = if options.decimal == '.' {
                raw.to_string()
            } else {
                raw.replace(options.decimal, ".")
            };
            let v: f64 = normalized.parse().map_err(|_| {
                fmt_err(
                    line,
                    format!("column `{}`: cannot parse `{raw}` as a number", headers[i]),
                )
            })?;
            let missing = !v.is_finite() || options.sentinel.is_some_and(|s| v == s);
            row.push(if missing { None } else { Some(v) });
        }
        cells.push(row);
    }
    if cells.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", source.display())));
    }

    let rows = cells.len();
    let mut warnings = Vec::new();
    let mut kept_names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (c, &i) in value_idx.iter().enumerate() {
        let missing = cells.iter().filter(|r| r[c].is_none()).count();
        if missing as f64 > MAX_MISSING_FRACTION * rows as f64 {
            warnings.push(format!(
                "dropping column `{}`: {missing} of {rows} values missing",
                headers[i]
            ));
            continue;
        }
        let raw: Vec<Option<f64>> = cells.iter().map(|r| r[c]).collect();
        columns.push(fill_gaps(&raw));
        kept_names.push(headers[i].clone());
    }
    if columns.is_empty() {
        return Err(Error::Data(format!(
            "{}: no usable columns",
            source.display()
        )));
    }
    let n = columns.len();
    let mut data = Vec::with_capacity(rows * n);
    for r in 0..rows {
        data.extend(columns.iter().map(|col| col[r]));
    }
    let values = Tensor::matrix(rows, n, data)?;
    let timestamps = if ts_idx.is_empty() {
        None
    } else {
        Some(stamps)
    };
    let frame = TimeSeriesFrame::new(kept_names, timestamps, values, source.display().to_string())?;
    let frame = if options.resample_hourly {
        resample_hourly(&frame)?
    } else {
        frame
    };
    Ok((frame, warnings))
}

/// Forward-fill, with leading gaps back-filled from the first observation.
/// The column must contain at least one value.
fn fill_gaps(col: &[Option<f64>]) -> Vec<f64> {
    let first = col.iter().flatten().next().copied().unwrap_or(0.0);
    let mut last = first;
    col.iter()
        .map(|v| {
            if let Some(v) = v {
                last = *v;
            }
            last
        })
        .collect()
}

/// Hourly mean aggregation; hours without readings repeat the previous hour.
pub fn resample_hourly(frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
    let ts = frame
        .timestamps
        .as_ref()
        .ok_or_else(|| Error::Config("hourly resampling needs timestamps".into()))?;
    if ts.is_empty() {
        return Err(Error::Data("empty frame".into()));
    }
    let floor = |t: &NaiveDateTime| t.date().and_hms_opt(t.hour(), 0, 0).unwrap();
    let start = floor(&ts[0]);
    let end = floor(ts.last().unwrap());
    if end < start {
        return Err(Error::Data("timestamps are not in time order".into()));
    }
    let hours = (end - start).num_hours() as usize + 1;
    let n = frame.n_vars();
    let mut sums = vec![0.0; hours * n];
    let mut counts = vec![0usize; hours];
    for (r, t) in ts.iter().enumerate() {
        let h = (floor(t) - start).num_hours();
        if h < 0 {
            return Err(Error::Data("timestamps are not in time order".into()));
        }
        let h = h as usize;
        counts[h] += 1;
        for (s, v) in sums[h * n..(h + 1) * n].iter_mut().zip(frame.values.row(r)) {
            *s += v;
        }
    }
    let mut data = Vec::with_capacity(hours * n);
    let mut stamps = Vec::with_capacity(hours);
    for h in 0..hours {
        if counts[h] > 0 {
            data.extend(
                sums[h * n..(h + 1) * n]
                    .iter()
                    .map(|s| s / counts[h] as f64),
            );
        } else {
            let prev = data[(h - 1) * n..h * n].to_vec();
            data.extend(prev);
        }
        stamps.push(start + Duration::hours(h as i64));
    }
    TimeSeriesFrame::new(
        frame.names.clone(),
        Some(stamps),
        Tensor::matrix(hours, n, data)?,
        frame.source.clone(),
    )
}

/// Sinusoids (periods 24, 36, 48, ... steps) plus AR(1) noise
/// (coefficient 0.6, innovation std 0.2), one variable each.
pub fn synthetic_sinusoid_ar(len: usize, n_vars: usize, seed: u64) -> TimeSeriesFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.2).expect("valid normal");
    let mut data = vec![0.0; len * n_vars];
    for v in 0..n_vars {
        let period = 24.0 + 12.0 * v as f64;
        let phase = v as f64 * 0.7;
        let mut ar = 0.0;
        for t in 0..len {
            ar = 0.6 * ar + noise.sample(&mut rng);
            let s = (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin();
            data[t * n_vars + v] = s + ar;
        }
    }
    let values = Tensor::matrix(len, n_vars, data).expect("shape matches");
    TimeSeriesFrame::from_values(values, "synthetic:sinusoid+ar1").expect("finite synthetic data")
}

/// Independent standard normal draws.
pub fn synthetic_gaussian(len: usize, n_vars: usize, seed: u64) -> TimeSeriesFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let data = (0..len * n_vars).map(|_| normal.sample(&mut rng)).collect();
    let values = Tensor::matrix(len, n_vars, data).expect("shape matches");
    TimeSeriesFrame::from_values(values, "synthetic:gaussian").expect("finite synthetic data")
}
