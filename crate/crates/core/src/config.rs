//! Model/training hyperparameters and the flat run-configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CsvOptions;
use crate::error::{Error, Result};

/// Every knob of the architecture and of the training protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub input_len: usize,
    pub pred_len: usize,
    pub d_model: usize,
    /// Features kept by time distillation.
    pub k: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Feed-forward width; 0 means `4 * d_model`.
    pub d_ff: usize,
    /// Heads of every dot-product attention (decoder, and the encoder when
    /// the reconstructed attention is ablated).
    pub n_heads: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub replace_recon_attention: bool,
    pub replace_recon_sequence: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            input_len: 96,
            pred_len: 96,
            d_model: 512,
            k: 8,
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_ff: 0,
            n_heads: 8,
            batch_size: 32,
            epochs: 5,
            lr0: 5e-4,
            lr_decay: 0.9,
            lambda: 0.01,
            epsilon: 1e-3,
            grad_clip: 5.0,
            seed: 0,
            replace_recon_attention: false,
            replace_recon_sequence: false,
        }
    }
}

impl TrainConfig {
    /// Small configuration that trains in minutes on a CPU.
    pub fn desk_scale() -> Self {
        TrainConfig {
            input_len: 48,
            pred_len: 24,
            d_model: 32,
            n_heads: 4,
            ..TrainConfig::default()
        }
    }

    pub fn ffn_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    /// Checks structural constraints; returns warnings for allowed but
    /// unusual settings.
    pub fn validate(&self, n_vars: usize) -> Result<Vec<String>> {
        let positive = [
            ("input_len", self.input_len),
            ("pred_len", self.pred_len),
            ("d_model", self.d_model),
            ("k", self.k),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.input_len < 2 {
            return Err(Error::Config("input_len must be at least 2".into()));
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("lambda", self.lambda),
            ("epsilon", self.epsilon),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k > self.d_model {
            return Err(Error::Config(format!(
                "k={} exceeds d_model={}",
                self.k, self.d_model
            )));
        }
        if n_vars == 0 {
            return Err(Error::Config("dataset has no variables".into()));
        }
        let mut warnings = Vec::new();
        if n_vars == 1 && !self.replace_recon_attention {
            warnings.push(
                "univariate input: the divergence attention is identically zero and only the distance attention contributes"
                    .to_string(),
            );
        }
        if self.replace_recon_attention && self.replace_recon_sequence {
            warnings.push("both ablation toggles are set; this variant has no counterpart in the reference experiments".into());
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(warnings)
    }
}

/// Where the data come from and where outputs go, plus per-command options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    /// CSV file; when absent a synthetic sinusoid-plus-AR(1) series is used.
    pub data: Option<PathBuf>,
    /// One of `generic`, `airquality`, `electricity`, `stock`, `smartphone`.
    pub preset: String,
    pub delimiter: Option<String>,
    pub decimal: Option<String>,
    pub sentinel: Option<f64>,
    pub timestamp_columns: Option<Vec<String>>,
    pub timestamp_format: Option<String>,
    pub columns: Option<Vec<String>>,
    pub resample_hourly: Option<bool>,
    /// Keep only the first `max_rows` rows after ingestion (0 = all).
    pub max_rows: usize,
    pub synthetic_len: usize,
    pub synthetic_vars: usize,
    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Horizons for `ablate`; empty means `[pred_len]`.
    pub horizons: Vec<usize>,
    /// Test window used by `plot`.
    pub window: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            data: None,
            preset: "generic".into(),
            delimiter: None,
            decimal: None,
            sentinel: None,
            timestamp_columns: None,
            timestamp_format: None,
            columns: None,
            resample_hourly: None,
            max_rows: 0,
            synthetic_len: 5000,
            synthetic_vars: 2,
            output_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            horizons: Vec::new(),
            window: 0,
        }
    }
}

impl RunSettings {
    /// CSV options from the preset with explicit keys layered on top.
    pub fn csv_options(&self) -> Result<CsvOptions> {
        let mut o = CsvOptions::preset(&self.preset)?;
        if let Some(d) = &self.delimiter {
            o.delimiter = single_byte("delimiter", d)?;
        }
        if let Some(d) = &self.decimal {
            o.decimal = single_byte("decimal", d)? as char;
        }
        if self.sentinel.is_some() {
            o.sentinel = self.sentinel;
        }
        if let Some(t) = &self.timestamp_columns {
            o.timestamp_columns = t.clone();
        }
        if let Some(f) = &self.timestamp_format {
            o.timestamp_format = f.clone();
        }
        if let Some(c) = &self.columns {
            o.columns = Some(c.clone());
        }
        if let Some(r) = self.resample_hourly {
            o.resample_hourly = r;
        }
        Ok(o)
    }
}

fn single_byte(key: &str, s: &str) -> Result<u8> {
    let s = if s == "\\t" { "\t" } else { s };
    match s.as_bytes() {
        [b] => Ok(*b),
        _ => Err(Error::Config(format!(
            "{key} must be a single character, got {s:?}"
        ))),
    }
}

/// The contents of a run-configuration file: a flat list of `key = value`
/// lines (TOML syntax). Keys belong either to [`TrainConfig`] or to
/// [`RunSettings`]; anything else is rejected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub run: RunSettings,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let train_keys = keys_of(&TrainConfig::default())?;
        let run_keys = keys_of(&RunSettings::default()).map(|mut k| {
            // optional keys are omitted when serialising defaults
            k.extend(
                [
                    "data",
                    "delimiter",
                    "decimal",
                    "sentinel",
                    "timestamp_columns",
                    "timestamp_format",
                    "columns",
                    "resample_hourly",
                    "checkpoint",
                ]
                .map(String::from),
            );
            k
        })?;
        let mut train = toml::Table::new();
        let mut run = toml::Table::new();
        for (k, v) in table {
            if train_keys.contains(&k) {
                train.insert(k, v);
            } else if run_keys.contains(&k) {
                run.insert(k, v);
            } else {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
        }
        let train: TrainConfig = toml::Value::Table(train)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let run: RunSettings = toml::Value::Table(run)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(RunConfig { train, run })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }
}

fn keys_of<T: Serialize>(value: &T) -> Result<Vec<String>> {
    let v = toml::Value::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
    Ok(v.as_table()
        .map(|t| t.keys().cloned().collect())
        .unwrap_or_default())
}
