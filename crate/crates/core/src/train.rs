//! Optimisation, chronological splits, evaluation and ablation runs.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::frame::TimeSeriesFrame;
use crate::model::Draformer;
use crate::series::{make_windows_in, NormStats, Window};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr0 · decay^epoch`.
pub fn lr_schedule(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected Adam update of every tensor that has a gradient.
    pub fn update<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, p) in params {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim("adam_step", p.shape(), g.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Convenience wrapper over [`AdamState::update`] for a parameter map.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.update(params.iter_mut().map(|(k, v)| (k.as_str(), v)), grads, lr)
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Row ranges of the three chronological splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl Split {
    /// 6:2:2 split of `len` rows; every part must hold one full window.
    pub fn chronological(len: usize, input_len: usize, pred_len: usize) -> Result<Split> {
        let need = input_len + pred_len;
        let train_end = len * 6 / 10;
        let val_end = len * 8 / 10;
        let smallest = train_end.min(val_end - train_end).min(len - val_end);
        if smallest < need {
            return Err(Error::InsufficientData {
                required: need * 5,
                available: len,
            });
        }
        Ok(Split {
            train: (0, train_end),
            val: (train_end, val_end),
            test: (val_end, len),
        })
    }
}

/// Normalised windows for each split: stride 1 for training, `pred_len`
/// (non-overlapping targets) for validation and test.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: Split,
    pub stats: NormStats,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

pub fn prepare(frame: &TimeSeriesFrame, config: &TrainConfig) -> Result<PreparedData> {
    let split = Split::chronological(frame.len(), config.input_len, config.pred_len)?;
    prepare_with_split(frame, config, split)
}

pub fn prepare_with_split(
    frame: &TimeSeriesFrame,
    config: &TrainConfig,
    split: Split,
) -> Result<PreparedData> {
    let stats = NormStats::fit(&frame.values, split.train.0, split.train.1, &frame.names)?;
    prepare_with_stats(frame, config, split, stats)
}

/// Windows normalised with previously fitted statistics (e.g. from a checkpoint).
pub fn prepare_with_stats(
    frame: &TimeSeriesFrame,
    config: &TrainConfig,
    split: Split,
    stats: NormStats,
) -> Result<PreparedData> {
    if stats.mean.len() != frame.n_vars() {
        return Err(Error::dim(
            "prepare",
            &[stats.mean.len()],
            &[frame.n_vars()],
        ));
    }
    let values = stats.apply(&frame.values);
    let (lx, ly) = (config.input_len, config.pred_len);
    Ok(PreparedData {
        split,
        train: make_windows_in(&values, split.train.0, split.train.1, lx, ly, 1)?,
        val: make_windows_in(&values, split.val.0, split.val.1, lx, ly, ly)?,
        test: make_windows_in(&values, split.test.0, split.test.1, lx, ly, ly)?,
        stats,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Optimiser steps taken so far.
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mse: f64,
    /// Set on the closing record, which describes the returned checkpoint.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MSE.
    pub model: Draformer,
    pub log: Vec<LogRecord>,
    /// Loss of the initial parameters on the first mini-batch.
    pub initial_loss: Option<f64>,
    pub best_val_mse: Option<f64>,
    pub stats: NormStats,
    pub split: Split,
}

/// Plain full-batch Adam at a constant learning rate; returns the loss
/// before each step.
pub fn fit_batch(
    model: &mut Draformer,
    batch: &[Window],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut adam = AdamState::new();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, mut grads) = model.loss_and_grads(batch)?;
        clip_gradients(&mut grads, model.config.grad_clip);
        adam.update(model.params.iter_mut(), &grads, lr)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean squared error over a window set (normalised scale).
pub fn window_mse(model: &Draformer, windows: &[Window]) -> Result<f64> {
    Ok(evaluate(model, windows, &[])?.mse)
}

/// Trains on the 6:2:2 split of `frame`; see [`train_prepared`].
pub fn train(config: &TrainConfig, frame: &TimeSeriesFrame) -> Result<TrainOutcome> {
    let data = prepare(frame, config)?;
    train_prepared(config, frame.n_vars(), &data)
}

/// Shuffled mini-batch training for `config.epochs` epochs with decaying
/// learning rate and gradient clipping. Validation MSE is computed after
/// every epoch and the best parameters are kept.
pub fn train_prepared(
    config: &TrainConfig,
    n_vars: usize,
    data: &PreparedData,
) -> Result<TrainOutcome> {
    let mut model = Draformer::new(config.clone(), n_vars)?;
    let mut adam = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, Draformer, usize)> = None;
    let mut initial_loss = None;
    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config.lr0, config.lr_decay);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Window> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (loss, mut grads) = model.loss_and_grads(&batch)?;
            if initial_loss.is_none() {
                initial_loss = Some(loss);
            }
            clip_gradients(&mut grads, config.grad_clip);
            adam.update(model.params.iter_mut(), &grads, lr)?;
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        let val_mse = window_mse(&model, &data.val)?;
        log::info!("epoch {epoch}: lr {lr:.3e} train loss {train_loss:.6} val mse {val_mse:.6}");
        log.push(LogRecord {
            epoch,
            step: adam.step,
            lr,
            train_loss,
            val_mse,
            best: false,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_mse < *b) {
            best = Some((val_mse, model.clone(), epoch));
        }
    }
    let best_val_mse = best.as_ref().map(|b| b.0);
    if let Some((val, m, epoch)) = best {
        let src = &log[epoch];
        log.push(LogRecord {
            epoch,
            step: src.step,
            lr: src.lr,
            train_loss: src.train_loss,
            val_mse: val,
            best: true,
        });
        model = m;
    }
    Ok(TrainOutcome {
        model,
        log,
        initial_loss,
        best_val_mse,
        stats: data.stats.clone(),
        split: data.split,
    })
}

/// Error metrics over a window set, normalised scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub n_windows: usize,
    /// MSE at each forecast step, averaged over windows and variables.
    pub per_step_mse: Vec<f64>,
    pub per_step_mae: Vec<f64>,
    /// `(h, mae, mse)` over the first `h` steps.
    pub horizons: Vec<(usize, f64, f64)>,
}

/// Scores arbitrary predictions against window targets.
pub fn score(
    predictions: &[Tensor],
    windows: &[Window],
    horizons: &[usize],
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Evaluation("no windows to evaluate".into()));
    }
    if predictions.len() != windows.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} windows",
            predictions.len(),
            windows.len()
        )));
    }
    let (steps, n) = (windows[0].y.rows(), windows[0].y.cols());
    let mut se = vec![0.0; steps];
    let mut ae = vec![0.0; steps];
    for (p, w) in predictions.iter().zip(windows) {
        if p.shape() != w.y.shape() {
            return Err(Error::dim("evaluate", p.shape(), w.y.shape()));
        }
        for t in 0..steps {
            for (a, b) in p.row(t).iter().zip(w.y.row(t)) {
                let e = a - b;
                se[t] += e * e;
                ae[t] += e.abs();
            }
        }
    }
    let per = (windows.len() * n) as f64;
    let per_step_mse: Vec<f64> = se.iter().map(|s| s / per).collect();
    let per_step_mae: Vec<f64> = ae.iter().map(|s| s / per).collect();
    let upto = |h: usize| {
        let mse = se[..h].iter().sum::<f64>() / (per * h as f64);
        let mae = ae[..h].iter().sum::<f64>() / (per * h as f64);
        (mae, mse)
    };
    let (mae, mse) = upto(steps);
    let mut hs = Vec::new();
    for &h in horizons {
        if h == 0 || h > steps {
            return Err(Error::Evaluation(format!(
                "horizon {h} outside 1..={steps}"
            )));
        }
        let (a, s) = upto(h);
        hs.push((h, a, s));
    }
    if !(mae.is_finite() && mse.is_finite()) {
        return Err(Error::Evaluation("non-finite metrics".into()));
    }
    debug_assert!(mae <= mse.sqrt() * (1.0 + 1e-12) + 1e-15);
    Ok(MetricsReport {
        mae,
        mse,
        n_windows: windows.len(),
        per_step_mse,
        per_step_mae,
        horizons: hs,
    })
}

/// Predicts every window with `model` and scores the result.
pub fn evaluate(
    model: &Draformer,
    windows: &[Window],
    horizons: &[usize],
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Evaluation("no windows to evaluate".into()));
    }
    let preds = windows
        .iter()
        .map(|w| model.predict(&w.x))
        .collect::<Result<Vec<_>>>()?;
    score(&preds, windows, horizons)
}

/// Forecast that repeats the last observed row.
pub fn repeat_last(window: &Window) -> Tensor {
    let last = window.x.row(window.x.rows() - 1);
    let rows = window.y.rows();
    let data = (0..rows).flat_map(|_| last.iter().copied()).collect();
    Tensor::matrix(rows, last.len(), data).expect("shape matches")
}

pub fn evaluate_repeat_last(windows: &[Window], horizons: &[usize]) -> Result<MetricsReport> {
    let preds: Vec<Tensor> = windows.iter().map(repeat_last).collect();
    score(&preds, windows, horizons)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// Reconstructed attention replaced by multi-head attention.
    NoReconAttention,
    /// Reconstructed decoder input replaced by positional placeholders.
    NoReconSequence,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Full,
        Variant::NoReconAttention,
        Variant::NoReconSequence,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReconAttention => "-attention",
            Variant::NoReconSequence => "-sequence",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.replace_recon_attention = self == Variant::NoReconAttention;
        c.replace_recon_sequence = self == Variant::NoReconSequence;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub horizon: usize,
    pub param_count: usize,
    pub param_names: Vec<String>,
    pub test_mae: f64,
    pub test_mse: f64,
    pub val_mse: f64,
}

/// Trains the full model and both ablated variants for every horizon
/// (one model per horizon, `pred_len = horizon`).
pub fn ablate(
    base: &TrainConfig,
    frame: &TimeSeriesFrame,
    horizons: &[usize],
) -> Result<Vec<AblationRow>> {
    let horizons = if horizons.is_empty() {
        vec![base.pred_len]
    } else {
        horizons.to_vec()
    };
    let mut rows = Vec::new();
    for &h in &horizons {
        let base_h = TrainConfig {
            pred_len: h,
            ..base.clone()
        };
        let data = prepare(frame, &base_h)?;
        for v in Variant::ALL {
            let cfg = v.apply(&base_h);
            let start = Instant::now();
            let out = train_prepared(&cfg, frame.n_vars(), &data)?;
            let m = evaluate(&out.model, &data.test, &[])?;
            log::info!(
                "{} horizon {h}: test mse {:.6} ({:.1}s)",
                v.label(),
                m.mse,
                start.elapsed().as_secs_f64()
            );
            rows.push(AblationRow {
                variant: v,
                horizon: h,
                param_count: out.model.params.num_scalars(),
                param_names: out.model.params.names().map(String::from).collect(),
                test_mae: m.mae,
                test_mse: m.mse,
                val_mse: out.best_val_mse.unwrap_or(f64::NAN),
            });
        }
    }
    Ok(rows)
}
