//! Windowing, first differences, embeddings, normalisation and the
//! per-window covariance shared by both attention mechanisms.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::frame::TimeSeriesFrame;
use crate::params::ParamVars;
use crate::tensor::{regularized_inverse, Tensor};

/// An input span `x` immediately followed by its target span `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub x: Tensor,
    pub y: Tensor,
    /// Row of the source series where `x` starts.
    pub origin: usize,
}

/// Windows over `values` rows `start..end`, ordered by origin.
pub fn make_windows_in(
    values: &Tensor,
    start: usize,
    end: usize,
    input_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if stride == 0 || input_len == 0 || pred_len == 0 {
        return Err(Error::Config(
            "window lengths and stride must be positive".into(),
        ));
    }
    let need = input_len + pred_len;
    let available = end.saturating_sub(start);
    if available < need {
        return Err(Error::InsufficientData {
            required: need,
            available,
        });
    }
    let count = (available - need) / stride + 1;
    Ok((0..count)
        .map(|k| {
            let origin = start + k * stride;
            Window {
                x: values.slice_rows(origin, input_len),
                y: values.slice_rows(origin + input_len, pred_len),
                origin,
            }
        })
        .collect())
}

pub fn make_windows(
    series: &TimeSeriesFrame,
    input_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    make_windows_in(&series.values, 0, series.len(), input_len, pred_len, stride)
}

/// Forward difference, raw values and backward difference of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTriple {
    pub d_fwd: Tensor,
    pub raw: Tensor,
    pub d_bwd: Tensor,
}

/// `d_fwd[t] = x[t+1] - x[t]`, `d_bwd[t] = x[t] - x[t-1]`. The last forward
/// row and the first backward row have no in-window partner and are zero,
/// so nothing from the target span leaks in.
pub fn difference(x: &Tensor) -> Result<DiffTriple> {
    let (l, n) = (x.rows(), x.cols());
    if l < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            available: l,
        });
    }
    let mut d_fwd = Tensor::zeros(&[l, n]);
    let mut d_bwd = Tensor::zeros(&[l, n]);
    for t in 0..l - 1 {
        for v in 0..n {
            let d = x.get(t + 1, v) - x.get(t, v);
            d_fwd.set(t, v, d);
            d_bwd.set(t + 1, v, d);
        }
    }
    Ok(DiffTriple {
        d_fwd,
        raw: x.clone(),
        d_bwd,
    })
}

/// Σ, λ and `(Σ + λI)⁻¹` for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceContext {
    pub sigma: Tensor,
    pub sigma_inv_reg: Tensor,
    pub lambda: f64,
}

/// Sample covariance of the 2L pooled forward and backward difference rows,
/// treated as draws from a single distribution.
pub fn estimate_covariance(
    d_fwd: &Tensor,
    d_bwd: &Tensor,
    lambda: f64,
) -> Result<CovarianceContext> {
    if d_fwd.shape() != d_bwd.shape() {
        return Err(Error::dim(
            "estimate_covariance",
            d_fwd.shape(),
            d_bwd.shape(),
        ));
    }
    let (l, n) = (d_fwd.rows(), d_fwd.cols());
    let total = 2 * l;
    let mut mean = vec![0.0; n];
    for t in 0..l {
        for v in 0..n {
            mean[v] += d_fwd.get(t, v) + d_bwd.get(t, v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= total as f64);
    let mut sigma = Tensor::zeros(&[n, n]);
    for src in [d_fwd, d_bwd] {
        for t in 0..l {
            let row = src.row(t);
            for a in 0..n {
                let da = row[a] - mean[a];
                for b in a..n {
                    let s = sigma.get(a, b) + da * (row[b] - mean[b]);
                    sigma.set(a, b, s);
                }
            }
        }
    }
    let denom = (total - 1).max(1) as f64;
    for a in 0..n {
        for b in a..n {
            let s = sigma.get(a, b) / denom;
            sigma.set(a, b, s);
            sigma.set(b, a, s);
        }
    }
    let sigma_inv_reg = regularized_inverse(&sigma, lambda)?;
    Ok(CovarianceContext {
        sigma,
        sigma_inv_reg,
        lambda,
    })
}

/// Linear embeddings of a [`DiffTriple`], each L × d_model.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedTriple {
    pub ex_fwd: Var,
    pub ex_raw: Var,
    pub ex_bwd: Var,
}

/// Embedding maps W_f, W_x, W_b (each N × d_model, no bias).
#[derive(Debug, Clone, Copy)]
pub struct EmbedParams {
    pub w_fwd: Var,
    pub w_raw: Var,
    pub w_bwd: Var,
}

impl EmbedParams {
    pub fn bind(vars: &ParamVars) -> Result<Self> {
        Ok(EmbedParams {
            w_fwd: vars.get("embed.w_f")?,
            w_raw: vars.get("embed.w_x")?,
            w_bwd: vars.get("embed.w_b")?,
        })
    }
}

pub fn embed(g: &mut Graph, triple: &DiffTriple, params: &EmbedParams) -> Result<EmbeddedTriple> {
    let f = g.constant(triple.d_fwd.clone());
    let x = g.constant(triple.raw.clone());
    let b = g.constant(triple.d_bwd.clone());
    Ok(EmbeddedTriple {
        ex_fwd: g.matmul(f, params.w_fwd)?,
        ex_raw: g.matmul(x, params.w_raw)?,
        ex_bwd: g.matmul(b, params.w_bwd)?,
    })
}

/// Per-variable z-score statistics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl NormStats {
    /// Fits on rows `start..end` (the training split). A variable with zero
    /// variance gets unit scale and a warning.
    pub fn fit(values: &Tensor, start: usize, end: usize, names: &[String]) -> Result<Self> {
        if end <= start || end > values.rows() {
            return Err(Error::InsufficientData {
                required: 1,
                available: end.saturating_sub(start),
            });
        }
        let n = values.cols();
        let count = (end - start) as f64;
        let mut mean = vec![0.0; n];
        for r in start..end {
            mean.iter_mut()
                .zip(values.row(r))
                .for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for r in start..end {
            for (k, v) in values.row(r).iter().enumerate() {
                var[k] += (v - mean[k]) * (v - mean[k]);
            }
        }
        let mut warnings = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let s = (v / count).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    let name = names.get(k).map(String::as_str).unwrap_or("?");
                    let msg = format!("variable `{name}` has zero variance on the training split; using unit scale");
                    log::warn!("{msg}");
                    warnings.push(msg);
                    1.0
                }
            })
            .collect();
        Ok(NormStats {
            mean,
            std,
            warnings,
        })
    }

    pub fn apply(&self, values: &Tensor) -> Tensor {
        let mut out = values.clone();
        for r in 0..out.rows() {
            for (k, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        out
    }

    pub fn invert(&self, values: &Tensor) -> Tensor {
        let mut out = values.clone();
        for r in 0..out.rows() {
            for (k, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[k] + self.mean[k];
            }
        }
        out
    }
}

/// Z-score normalisation of a whole frame with pre-fitted statistics.
pub fn normalize(series: &TimeSeriesFrame, stats: &NormStats) -> TimeSeriesFrame {
    TimeSeriesFrame {
        values: stats.apply(&series.values),
        ..series.clone()
    }
}
