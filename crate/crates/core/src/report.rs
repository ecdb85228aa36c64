//! Output artifacts: metrics and prediction CSVs, the JSONL training log and
//! SVG forecast plots.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::series::{NormStats, Window};
use crate::tensor::Tensor;
use crate::train::{AblationRow, LogRecord, MetricsReport};

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `split,horizon,mae,mse` rows; `horizon` is the full forecast length for
/// the overall row followed by any requested horizons.
pub fn metrics_csv(reports: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::from("split,horizon,mae,mse\n");
    for (split, m) in reports {
        let steps = m.per_step_mse.len();
        let _ = writeln!(out, "{split},{steps},{},{}", fmt_f64(m.mae), fmt_f64(m.mse));
        for (h, mae, mse) in &m.horizons {
            if *h != steps {
                let _ = writeln!(out, "{split},{h},{},{}", fmt_f64(*mae), fmt_f64(*mse));
            }
        }
    }
    out
}

/// `window_id,step,variable,actual,predicted` on the original data scale.
pub fn predictions_csv(
    names: &[String],
    stats: &NormStats,
    items: &[(usize, &Window, &Tensor)],
) -> Result<String> {
    let mut out = String::from("window_id,step,variable,actual,predicted\n");
    for (id, w, p) in items {
        if p.shape() != w.y.shape() {
            return Err(Error::dim("predictions_csv", p.shape(), w.y.shape()));
        }
        let actual = stats.invert(&w.y);
        let pred = stats.invert(p);
        for t in 0..actual.rows() {
            for (v, name) in names.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{id},{t},{},{},{}",
                    csv_field(name),
                    fmt_f64(actual.get(t, v)),
                    fmt_f64(pred.get(t, v))
                );
            }
        }
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn log_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_log_jsonl(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("log line {}: {e}", i + 1)))
        })
        .collect()
}

/// Key-value report lines (JSON objects), one per split, with runtime info.
pub fn metrics_jsonl(
    reports: &[(&str, &MetricsReport)],
    extra: &serde_json::Value,
) -> Result<String> {
    let mut out = String::new();
    for (split, m) in reports {
        let mut v = serde_json::to_value(m).map_err(|e| Error::Data(e.to_string()))?;
        if let (Some(obj), Some(ex)) = (v.as_object_mut(), extra.as_object()) {
            obj.insert("split".into(), (*split).into());
            for (k, x) in ex {
                obj.insert(k.clone(), x.clone());
            }
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

/// Comparison table of an ablation run as CSV.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,horizon,params,test_mae,test_mse,val_mse\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant.label(),
            r.horizon,
            r.param_count,
            fmt_f64(r.test_mae),
            fmt_f64(r.test_mse),
            fmt_f64(r.val_mse)
        );
    }
    out
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart of one variable: input history and ground truth in one
/// colour, the forecast in another.
pub fn forecast_svg(
    title: &str,
    history: &[f64],
    actual: &[f64],
    predicted: &[f64],
) -> Result<String> {
    if actual.len() != predicted.len() || actual.is_empty() {
        return Err(Error::dim(
            "forecast_svg",
            &[actual.len()],
            &[predicted.len()],
        ));
    }
    let all = history.iter().chain(actual).chain(predicted);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(*v), b.max(*v))
    });
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Data("cannot plot non-finite values".into()));
    }
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let (w, h, pad) = (800.0, 400.0, 40.0);
    let n = history.len() + actual.len();
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n.max(2) - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let line = |offset: usize, vals: &[f64]| {
        vals.iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", x(offset + i), y(*v)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let truth: Vec<f64> = history.iter().chain(actual).copied().collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape_xml(title)
    );
    let split_x = x(history.len());
    let _ = writeln!(
        svg,
        r##"<line x1="{split_x:.2}" y1="{pad}" x2="{split_x:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 4"/>"##,
        h - pad
    );
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##,
        line(0, &truth)
    );
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#d62728" stroke-width="1.5" points="{}"/>"##,
        line(history.len(), predicted)
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" fill="#1f77b4">actual</text>"##,
        w - 3.0 * pad,
        pad
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" fill="#d62728">predicted</text>"##,
        w - 3.0 * pad,
        pad + 16.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}
