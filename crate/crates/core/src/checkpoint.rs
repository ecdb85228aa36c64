//! Self-describing text checkpoints.
//!
//! ```text
//! draformer-checkpoint 1
//! n_vars 2
//! config {"input_len":48,...}
//! norm {"mean":[...],"std":[...]}
//! tensors 57
//! tensor dec.pos 2 72 32
//! <values, space separated>
//! ...
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so save → load is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Draformer;
use crate::params::ParamStore;
use crate::series::NormStats;
use crate::tensor::Tensor;

pub const MAGIC: &str = "draformer-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Draformer,
    pub stats: NormStats,
}

impl Checkpoint {
    pub fn to_text(&self) -> Result<String> {
        let m = &self.model;
        let config =
            serde_json::to_string(&m.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let norm =
            serde_json::to_string(&self.stats).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = format!(
            "{MAGIC} {VERSION}\nn_vars {}\nconfig {config}\nnorm {norm}\ntensors {}\n",
            m.n_vars,
            m.params.len()
        );
        for (name, t) in m.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "tensor {name} {} {}", dims.len(), dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let cursor = std::cell::Cell::new(0usize);
        let next = |what: &str| {
            let i = cursor.get();
            cursor.set(i + 1);
            lines.get(i).map(|l| (i + 1, *l)).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected end of file, expected {what}"))
            })
        };
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));

        let (ln, header) = next("header")?;
        match header.split_once(' ') {
            Some((MAGIC, v)) if v.trim().parse() == Ok(VERSION) => {}
            Some((MAGIC, v)) => return Err(bad(ln, &format!("unsupported version {v}"))),
            _ => return Err(bad(ln, "not a checkpoint file")),
        }
        let field = |key: &str| -> Result<(usize, String)> {
            let (ln, l) = next(key)?;
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(|r| (ln, r.to_string()))
                .ok_or_else(|| bad(ln, &format!("expected `{key}`")))
        };
        let (ln, n_vars) = field("n_vars")?;
        let n_vars: usize = n_vars.parse().map_err(|_| bad(ln, "bad n_vars"))?;
        let (ln, config) = field("config")?;
        let config: TrainConfig =
            serde_json::from_str(&config).map_err(|e| bad(ln, &e.to_string()))?;
        let (ln, norm) = field("norm")?;
        let stats: NormStats = serde_json::from_str(&norm).map_err(|e| bad(ln, &e.to_string()))?;
        if stats.mean.len() != n_vars || stats.std.len() != n_vars {
            return Err(bad(ln, "normalisation statistics do not match n_vars"));
        }
        let (ln, count) = field("tensors")?;
        let count: usize = count.parse().map_err(|_| bad(ln, "bad tensor count"))?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (ln, head) = field("tensor")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let (name, rank) = match parts.as_slice() {
                [name, rank, ..] => (
                    *name,
                    rank.parse::<usize>().map_err(|_| bad(ln, "bad rank"))?,
                ),
                _ => return Err(bad(ln, "bad tensor header")),
            };
            if parts.len() != 2 + rank {
                return Err(bad(ln, "tensor header rank mismatch"));
            }
            let shape = parts[2..]
                .iter()
                .map(|d| d.parse::<usize>().map_err(|_| bad(ln, "bad dimension")))
                .collect::<Result<Vec<_>>>()?;
            let (ln, body) = next("tensor values")?;
            let data = body
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| bad(ln, &format!("bad value `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| bad(ln, &e.to_string()))?;
            if !t.is_finite() {
                return Err(bad(ln, "non-finite parameter value"));
            }
            params.insert(name, t);
        }
        let model = Draformer::from_params(config, n_vars, params)?;
        Ok(Checkpoint { model, stats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_text(&std::fs::read_to_string(path)?)
    }
}
