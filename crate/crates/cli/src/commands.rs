use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use draformer::checkpoint::Checkpoint;
use draformer::data::{load_csv, synthetic_sinusoid_ar};
use draformer::gradcheck::gradient_suite;
use draformer::report;
use draformer::train::{self, evaluate_repeat_last, prepare_with_stats, PreparedData, Split};
use draformer::{RunConfig, TimeSeriesFrame};

/// Seed of the built-in synthetic series used when no data file is given.
const SYNTHETIC_SEED: u64 = 0;
const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Debug, Parser)]
#[command(
    name = "draformer",
    version,
    about = "Train, evaluate and ablate DRAformer forecasters"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes the checkpoint and training log.
    Train(RunArgs),
    /// Score a checkpoint on the validation and test splits.
    Evaluate(RunArgs),
    /// Export predicted vs actual values for test windows as CSV.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        /// Test window indices (comma separated); default all.
        #[arg(long, value_delimiter = ',')]
        windows: Vec<usize>,
    },
    /// Train the full model and both ablated variants and compare them.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Forecast horizons (comma separated); one model per variant and horizon.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Plot one test window's forecast as SVG.
    Plot {
        #[command(flatten)]
        run: RunArgs,
        /// Test window index.
        #[arg(long)]
        window: Option<usize>,
        /// Variable index.
        #[arg(long, default_value_t = 0)]
        variable: usize,
        /// Output file; default `<output_dir>/plot_w<window>_v<variable>.svg`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Configuration file plus flags that override its values.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration file (flat `key = value` TOML).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset preset: generic, airquality, electricity, stock, smartphone.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub max_rows: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub input_len: Option<usize>,
    #[arg(long)]
    pub pred_len: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    /// Replace the reconstructed attention with multi-head attention.
    #[arg(long)]
    pub replace_recon_attention: bool,
    /// Replace the reconstructed decoder input with positional placeholders.
    #[arg(long)]
    pub replace_recon_sequence: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let (t, r) = (&mut cfg.train, &mut cfg.run);
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if self.data.is_some() {
            r.data = self.data.clone();
        }
        if self.checkpoint.is_some() {
            r.checkpoint = self.checkpoint.clone();
        }
        set!(r.preset, self.preset);
        set!(r.output_dir, self.output_dir);
        set!(r.max_rows, self.max_rows);
        set!(t.seed, self.seed);
        set!(t.epochs, self.epochs);
        set!(t.input_len, self.input_len);
        set!(t.pred_len, self.pred_len);
        set!(t.d_model, self.d_model);
        set!(t.n_heads, self.n_heads);
        set!(t.batch_size, self.batch_size);
        set!(t.lr0, self.lr0);
        t.replace_recon_attention |= self.replace_recon_attention;
        t.replace_recon_sequence |= self.replace_recon_sequence;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args.resolve()?),
        Command::Evaluate(args) => cmd_evaluate(&args.resolve()?),
        Command::Predict { run, windows } => cmd_predict(&run.resolve()?, &windows),
        Command::Ablate { run, horizons } => cmd_ablate(&run.resolve()?, &horizons),
        Command::Gradcheck => cmd_gradcheck(),
        Command::Plot {
            run,
            window,
            variable,
            out,
        } => cmd_plot(&run.resolve()?, window, variable, out),
    }
}

fn load_frame(cfg: &RunConfig) -> Result<TimeSeriesFrame> {
    let run = &cfg.run;
    let frame = match &run.data {
        Some(path) => {
            let opts = run.csv_options()?;
            load_csv(path, &opts).with_context(|| format!("loading {}", path.display()))?
        }
        None => {
            log::info!(
                "no data file given; using synthetic series ({} rows, {} variables)",
                run.synthetic_len,
                run.synthetic_vars
            );
            synthetic_sinusoid_ar(run.synthetic_len, run.synthetic_vars, SYNTHETIC_SEED)
        }
    };
    if run.max_rows > 0 && frame.len() > run.max_rows {
        return Ok(frame.slice(0, run.max_rows));
    }
    Ok(frame)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.run
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.run.output_dir.join(CHECKPOINT_FILE))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Loads the checkpoint and rebuilds the splits with its normalisation.
fn load_trained(cfg: &RunConfig) -> Result<(Checkpoint, TimeSeriesFrame, PreparedData)> {
    let path = checkpoint_path(cfg);
    let ckpt = Checkpoint::load(&path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let frame = load_frame(cfg)?;
    if frame.n_vars() != ckpt.model.n_vars {
        bail!(
            "checkpoint expects {} variables but the data has {}",
            ckpt.model.n_vars,
            frame.n_vars()
        );
    }
    let mc = &ckpt.model.config;
    let split = Split::chronological(frame.len(), mc.input_len, mc.pred_len)?;
    let data = prepare_with_stats(&frame, mc, split, ckpt.stats.clone())?;
    Ok((ckpt, frame, data))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let frame = load_frame(cfg)?;
    let out = train::train(&cfg.train, &frame)?;
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt = Checkpoint {
        model: out.model,
        stats: out.stats,
    };
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    ckpt.save(&ckpt_path)?;
    write(&dir.join("train_log.jsonl"), &report::log_jsonl(&out.log)?)?;
    println!(
        "trained {} parameters on {} rows in {:.1}s",
        ckpt.model.params.num_scalars(),
        frame.len(),
        start.elapsed().as_secs_f64()
    );
    for r in &out.log {
        if !r.best {
            println!(
                "epoch {}  lr {:.3e}  train loss {:.6}  val mse {:.6}",
                r.epoch, r.lr, r.train_loss, r.val_mse
            );
        }
    }
    if let Some(best) = out.best_val_mse {
        println!("best val mse {best:.17e}");
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let (ckpt, _, data) = load_trained(cfg)?;
    let model = &ckpt.model;
    let mut horizons = cfg.run.horizons.clone();
    horizons.retain(|h| (1..model.config.pred_len).contains(h));
    let val = train::evaluate(model, &data.val, &horizons)?;
    let test = train::evaluate(model, &data.test, &horizons)?;
    let base = evaluate_repeat_last(&data.test, &horizons)?;
    let reports = [("val", &val), ("test", &test), ("test_repeat_last", &base)];
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir)?;
    write(&dir.join("metrics.csv"), &report::metrics_csv(&reports))?;
    let extra = serde_json::json!({
        "runtime_secs": start.elapsed().as_secs_f64(),
        "seed": model.config.seed,
        "config": model.config,
    });
    write(
        &dir.join("metrics.jsonl"),
        &report::metrics_jsonl(&reports, &extra)?,
    )?;
    println!(
        "{:<18} {:>8} {:>24} {:>24}",
        "split", "windows", "mae", "mse"
    );
    for (name, m) in reports {
        println!(
            "{name:<18} {:>8} {:>24.17e} {:>24.17e}",
            m.n_windows, m.mae, m.mse
        );
    }
    println!(
        "test mse vs repeat-last: {:+.1}%",
        100.0 * (test.mse / base.mse - 1.0)
    );
    println!("metrics: {}", dir.join("metrics.csv").display());
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, windows: &[usize]) -> Result<()> {
    let (ckpt, frame, data) = load_trained(cfg)?;
    let ids: Vec<usize> = if windows.is_empty() {
        (0..data.test.len()).collect()
    } else {
        windows.to_vec()
    };
    let mut preds = Vec::with_capacity(ids.len());
    for &id in &ids {
        let w = data
            .test
            .get(id)
            .with_context(|| format!("test window {id} out of range (0..{})", data.test.len()))?;
        preds.push((id, w, ckpt.model.predict(&w.x)?));
    }
    let items: Vec<_> = preds.iter().map(|(id, w, p)| (*id, *w, p)).collect();
    let csv = report::predictions_csv(&frame.names, &ckpt.stats, &items)?;
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir)?;
    let path = dir.join("predictions.csv");
    write(&path, &csv)?;
    println!("wrote {} windows to {}", ids.len(), path.display());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, horizons: &[usize]) -> Result<()> {
    let frame = load_frame(cfg)?;
    let horizons = if horizons.is_empty() {
        &cfg.run.horizons[..]
    } else {
        horizons
    };
    let rows = train::ablate(&cfg.train, &frame, horizons)?;
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir)?;
    let path = dir.join("ablation.csv");
    write(&path, &report::ablation_csv(&rows))?;
    println!(
        "{:<12} {:>7} {:>8} {:>12} {:>12}",
        "variant", "horizon", "params", "test mae", "test mse"
    );
    for r in &rows {
        println!(
            "{:<12} {:>7} {:>8} {:>12.6} {:>12.6}",
            r.variant.label(),
            r.horizon,
            r.param_count,
            r.test_mae,
            r.test_mse
        );
    }
    println!("table: {}", path.display());
    Ok(())
}

fn cmd_gradcheck() -> Result<()> {
    let start = Instant::now();
    let entries = gradient_suite()?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<20} max rel err {:.3e} (tol {:.0e}, {} scalars) {status}",
            e.name, e.max_rel_error, e.tolerance, e.checked
        );
        failed += usize::from(!e.passed());
    }
    println!("{:.2}s", start.elapsed().as_secs_f64());
    if failed > 0 {
        bail!("{failed} gradient check(s) failed");
    }
    Ok(())
}

fn cmd_plot(
    cfg: &RunConfig,
    window: Option<usize>,
    variable: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let (ckpt, frame, data) = load_trained(cfg)?;
    let w_id = window.unwrap_or(cfg.run.window);
    let w = data
        .test
        .get(w_id)
        .with_context(|| format!("test window {w_id} out of range (0..{})", data.test.len()))?;
    if variable >= frame.n_vars() {
        bail!("variable {variable} out of range (0..{})", frame.n_vars());
    }
    let pred = ckpt.stats.invert(&ckpt.model.predict(&w.x)?);
    let hist = ckpt.stats.invert(&w.x);
    let actual = ckpt.stats.invert(&w.y);
    let col = |t: &draformer::Tensor| {
        (0..t.rows())
            .map(|r| t.get(r, variable))
            .collect::<Vec<_>>()
    };
    let title = format!("{} - test window {w_id}", frame.names[variable]);
    let svg = report::forecast_svg(&title, &col(&hist), &col(&actual), &col(&pred))?;
    let path = out.unwrap_or_else(|| {
        cfg.run
            .output_dir
            .join(format!("plot_w{w_id}_v{variable}.svg"))
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write(&path, &svg)?;
    println!("plot: {}", path.display());
    Ok(())
}
