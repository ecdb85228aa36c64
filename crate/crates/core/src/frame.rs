use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A multivariate series: `len()` rows in time order, one column per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    pub names: Vec<String>,
    pub timestamps: Option<Vec<NaiveDateTime>>,
    pub values: Tensor,
    pub source: String,
}

impl TimeSeriesFrame {
    pub fn new(
        names: Vec<String>,
        timestamps: Option<Vec<NaiveDateTime>>,
        values: Tensor,
        source: impl Into<String>,
    ) -> Result<Self> {
        if values.shape().len() != 2 || values.cols() != names.len() {
            return Err(Error::dim("frame", values.shape(), &[names.len()]));
        }
        if names.is_empty() {
            return Err(Error::Data("frame has no variables".into()));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.rows() {
                return Err(Error::dim("frame timestamps", values.shape(), &[ts.len()]));
            }
        }
        if !values.is_finite() {
            return Err(Error::Data("frame contains non-finite values".into()));
        }
        Ok(TimeSeriesFrame {
            names,
            timestamps,
            values,
            source: source.into(),
        })
    }

    /// A frame without timestamps and with generated variable names.
    pub fn from_values(values: Tensor, source: impl Into<String>) -> Result<Self> {
        let names = (0..values.cols()).map(|i| format!("v{i}")).collect();
        TimeSeriesFrame::new(names, None, values, source)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.values.cols()
    }

    /// Rows `start..end` as a new frame.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeriesFrame {
        TimeSeriesFrame {
            names: self.names.clone(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
            values: self.values.slice_rows(start, end - start),
            source: self.source.clone(),
        }
    }

    /// Deterministic text serialisation: header, then one line per row with
    /// round-trip float formatting.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str("timestamp,");
        out.push_str(&self.names.join(","));
        out.push('\n');
        for r in 0..self.len() {
            if let Some(ts) = &self.timestamps {
                out.push_str(&ts[r].format("%Y-%m-%dT%H:%M:%S").to_string());
            }
            for v in self.values.row(r) {
                out.push(',');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}
