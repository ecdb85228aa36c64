//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! and prints one PASS/FAIL line per criterion; exits non-zero if any fail.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use draformer::checkpoint::Checkpoint;
use draformer::data::{synthetic_sinusoid_ar, CsvOptions};
use draformer::gradcheck::gradient_suite;
use draformer::ida::{ida_forward, ida_forward_with, mahalanobis_sq, IdaParams};
use draformer::jsa::{js_matrix, jsa_forward, JsaParams, DEFAULT_EPSILON};
use draformer::model::param_specs;
use draformer::series::{difference, estimate_covariance};
use draformer::train::{fit_batch, prepare_with_stats, window_mse, Split, Variant};
use draformer::{load_csv, make_windows, Draformer, Graph, RunConfig, Tensor, TrainConfig, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const DESK_CONFIG: &str = "input_len = 48
pred_len = 24
d_model = 32
n_heads = 4
n_enc_layers = 2
n_dec_layers = 1
epochs = 5
seed = 0
";

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_draformer"))
        .args(args)
        .output()
        .map_err(|e| format!("cannot run cli: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`draformer {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// `split -> mse` of the overall (all-step) row of each split in metrics.csv.
fn overall_mse(csv: &str) -> Result<BTreeMap<String, (f64, f64)>, String> {
    let mut lines = csv.lines();
    if lines.next() != Some("split,horizon,mae,mse") {
        return Err("metrics.csv header".into());
    }
    let mut out = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(format!("metrics.csv row `{line}`"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
        // first row of each split is the full-horizon aggregate
        out.entry(f[0].to_string())
            .or_insert((num(f[2])?, num(f[3])?));
    }
    Ok(out)
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .unwrap()
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let entries = gradient_suite().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let mut detail = String::new();
    for e in &entries {
        let _ = write!(
            detail,
            "{} {:.1e}/{:.0e}; ",
            e.name, e.max_rel_error, e.tolerance
        );
    }
    let _ = write!(detail, "{secs:.1}s");
    let names: Vec<&str> = entries.iter().map(|e| e.name).collect();
    let all = [
        "ida_forward",
        "jsa_forward",
        "encoder_layer",
        "time_distill",
        "dimension_converge",
        "decode",
        "end_to_end_loss",
    ];
    let tol_ok = entries.iter().all(|e| {
        let want = if e.name.starts_with("ida") || e.name.starts_with("jsa") {
            1e-4
        } else {
            1e-3
        };
        e.tolerance <= want
    });
    check(
        entries.iter().all(|e| e.passed())
            && all.iter().all(|n| names.contains(n))
            && tol_ok
            && secs < 60.0,
        detail,
    )
}

fn c2_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut row_sum, mut md2_min, mut j_lo, mut j_hi, mut j_same, mut pre) = (
        0.0f64,
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        0.0f64,
        0.0f64,
    );
    for _ in 0..1000 {
        let l = rng.random_range(2..13);
        let n = rng.random_range(1..5);
        let d = 4;
        let x = random(&mut rng, l, n, 3.0);
        let triple = difference(&x).unwrap();
        let cov = estimate_covariance(&triple.d_fwd, &triple.d_bwd, 0.01).unwrap();
        let md2 = mahalanobis_sq(&triple.d_fwd, &triple.d_bwd, &cov).unwrap();
        md2_min = md2.data().iter().fold(md2_min, |a, b| a.min(*b));

        let mut g = Graph::new();
        let emb = g.constant(random(&mut rng, l, d, 1.0));
        let ip = IdaParams {
            w_sigma: g.constant(random(&mut rng, n, 1, 2.0)),
            w_v: g.constant(random(&mut rng, d, d, 1.0)),
        };
        let with = ida_forward_with(&mut g, emb, &triple, md2.clone(), &ip, true).unwrap();
        let without = ida_forward_with(&mut g, emb, &triple, md2, &ip, false).unwrap();
        let w = g.value(with.weights);
        for r in 0..l {
            row_sum = row_sum.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        pre = pre.max(w.max_abs_diff(g.value(without.weights)));

        let jp = JsaParams {
            w_mu: g.constant(random(&mut rng, n, 1, 2.0)),
            w_s: g.constant(random(&mut rng, n, 1, 2.0)),
            w_vf: g.constant(random(&mut rng, n, d, 1.0)),
            w_vb: g.constant(random(&mut rng, n, d, 1.0)),
        };
        let s = jsa_forward(&mut g, &triple, &cov, &jp, DEFAULT_EPSILON).unwrap();
        for v in g.value(s.j).data() {
            j_lo = j_lo.min(*v);
            j_hi = j_hi.max(*v);
        }
        let (_, _, same) = js_matrix(&mut g, s.z_fwd, s.z_fwd).unwrap();
        let same = g.value(same);
        for r in 0..l {
            j_same = j_same.max(same.get(r, r).abs());
        }
    }
    let subchecks = [
        ("row-stochastic", row_sum <= 1e-9),
        ("MD2 >= -1e-10", md2_min >= -1e-10),
        ("J in [0, 1]", j_lo >= -1e-12 && j_hi <= 1.0 + 1e-12),
        ("J = 0 on identical rows", j_same == 0.0),
        ("prefactor invariance", pre < 1e-12),
    ];
    let failing: Vec<&str> = subchecks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let mut detail = format!(
        "row-sum err {row_sum:.1e}, min MD2 {md2_min:.1e}, J in [{j_lo:.1e}, {j_hi:.15}], \
         J(identical) {j_same:.1e}, prefactor effect {pre:.1e} (bound 1e-12)"
    );
    if !failing.is_empty() {
        let _ = write!(detail, "; failing: {}", failing.join(", "));
    }
    check(failing.is_empty(), detail)
}

fn c3_oracle() -> Outcome {
    let (l, n, d, lambda) = (3, 2, 4, 0.01);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = random(&mut rng, l, n, 1.5);
        let emb = random(&mut rng, l, d, 1.0);
        let w_sigma = random(&mut rng, n, 1, 1.0);
        let w_v = random(&mut rng, d, d, 1.0);
        let w_mu = random(&mut rng, n, 1, 1.0);
        let w_s = random(&mut rng, n, 1, 1.0);
        let w_vf = random(&mut rng, n, d, 1.0);
        let w_vb = random(&mut rng, n, d, 1.0);
        let m = |t: &Tensor| {
            (0..t.rows())
                .map(|r| t.row(r).to_vec())
                .collect::<oracle::Mat>()
        };
        let col = |t: &Tensor| t.data().to_vec();
        let (_, ida_want) = oracle::ida(&m(&x), &m(&emb), &col(&w_sigma), &m(&w_v), lambda);
        let (_, jsa_want) = oracle::jsa(
            &m(&x),
            &col(&w_mu),
            &col(&w_s),
            &m(&w_vf),
            &m(&w_vb),
            DEFAULT_EPSILON,
        );

        let triple = difference(&x).unwrap();
        let cov = estimate_covariance(&triple.d_fwd, &triple.d_bwd, lambda).unwrap();
        let mut g = Graph::new();
        let e = g.constant(emb);
        let ip = IdaParams {
            w_sigma: g.constant(w_sigma),
            w_v: g.constant(w_v),
        };
        let ida = ida_forward(&mut g, e, &triple, &cov, &ip).unwrap();
        let jp = JsaParams {
            w_mu: g.constant(w_mu),
            w_s: g.constant(w_s),
            w_vf: g.constant(w_vf),
            w_vb: g.constant(w_vb),
        };
        let jsa = jsa_forward(&mut g, &triple, &cov, &jp, DEFAULT_EPSILON).unwrap();
        worst = worst.max(
            g.value(ida.output)
                .max_abs_diff(&Tensor::from_rows(&ida_want).unwrap()),
        );
        worst = worst.max(
            g.value(jsa.output)
                .max_abs_diff(&Tensor::from_rows(&jsa_want).unwrap()),
        );
    }
    check(
        worst <= 1e-10,
        format!("20 seeds, max |diff| {worst:.1e} (bound 1e-10)"),
    )
}

fn c4_differencing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0;
    for _ in 0..100 {
        let l = rng.random_range(2..64);
        let n = rng.random_range(1..5);
        // quarter-integer values keep every sum and difference exact in f64
        let data: Vec<f64> = (0..l * n)
            .map(|_| rng.random_range(-4000i32..4000) as f64 * 0.25)
            .collect();
        let x = Tensor::matrix(l, n, data).unwrap();
        let c = rng.random_range(-400i32..400) as f64 * 0.5;
        let t = difference(&x).unwrap();
        let shifted = difference(&x.map(|v| v + c)).unwrap();
        let shift_ok = (0..l - 1).all(|r| t.d_fwd.row(r) == t.d_bwd.row(r + 1));
        let level_ok = shifted.d_fwd == t.d_fwd && shifted.d_bwd == t.d_bwd;
        let round_trip = (0..n).all(|v| {
            let mut acc = x.get(0, v);
            (1..l).all(|r| {
                acc += t.d_bwd.get(r, v);
                acc == x.get(r, v)
            })
        });
        if !(shift_ok && level_ok && round_trip) {
            failures += 1;
        }
    }
    check(
        failures == 0,
        format!("100 series, {failures} with an inexact identity"),
    )
}

fn c5_overfit() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        input_len: 16,
        pred_len: 4,
        d_model: 16,
        k: 4,
        n_heads: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let frame = synthetic_sinusoid_ar(200, 2, 5);
    let windows: Vec<Window> = make_windows(&frame, 16, 4, 20)
        .map_err(|e| e.to_string())?
        .into_iter()
        .take(8)
        .collect();
    let mut model = Draformer::new(cfg, 2).map_err(|e| e.to_string())?;
    let losses = fit_batch(&mut model, &windows, 500, 5e-4).map_err(|e| e.to_string())?;
    let fin = window_mse(&model, &windows).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    check(
        windows.len() == 8 && fin < 1e-2 && secs < 300.0,
        format!(
            "{} windows, mse {:.3e} -> {fin:.3e} (bound 1e-2), {secs:.1}s",
            windows.len(),
            losses[0]
        ),
    )
}

struct DeskRun {
    dir: PathBuf,
    elapsed: Duration,
}

fn desk_run(root: &Path, name: &str) -> Result<DeskRun, String> {
    let dir = root.join(name);
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let config = dir.join("run.toml");
    let text = format!("{DESK_CONFIG}output_dir = {:?}\n", path_str(&dir));
    fs::write(&config, text).map_err(|e| e.to_string())?;
    let start = Instant::now();
    cli(&["train", "-c", path_str(&config)])?;
    cli(&["evaluate", "-c", path_str(&config)])?;
    Ok(DeskRun {
        dir,
        elapsed: start.elapsed(),
    })
}

fn c6_forecast(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let csv = fs::read_to_string(run.dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let m = overall_mse(&csv)?;
    let (model, base) = match (m.get("test"), m.get("test_repeat_last")) {
        (Some(a), Some(b)) => (a.1, b.1),
        _ => return Err("metrics.csv lacks test rows".into()),
    };
    let gain = 1.0 - model / base;
    let secs = run.elapsed.as_secs_f64();
    check(
        gain >= 0.30 && secs < 900.0,
        format!(
            "test mse {model:.4} vs repeat-last {base:.4}: {:.1}% better (need 30%), {secs:.0}s",
            100.0 * gain
        ),
    )
}

fn c6b_round_trip(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let log = fs::read_to_string(run.dir.join("train_log.jsonl")).map_err(|e| e.to_string())?;
    let last: serde_json::Value =
        serde_json::from_str(log.lines().last().ok_or("empty log")?).map_err(|e| e.to_string())?;
    let logged = last["val_mse"].as_f64().ok_or("val_mse missing")?;
    let csv = fs::read_to_string(run.dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let val = overall_mse(&csv)?.get("val").ok_or("no val row")?.1;
    check(
        (val - logged).abs() <= 1e-9,
        format!("logged val mse {logged:.12} vs reloaded checkpoint {val:.12}"),
    )
}

fn c7_ablation(root: &Path) -> Outcome {
    let dir = root.join("ablate");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let config = dir.join("run.toml");
    fs::write(
        &config,
        format!("{DESK_CONFIG}output_dir = {:?}\n", path_str(&dir)),
    )
    .map_err(|e| e.to_string())?;
    cli(&["ablate", "-c", path_str(&config), "--horizons", "24"])?;
    let csv = fs::read_to_string(dir.join("ablation.csv")).map_err(|e| e.to_string())?;
    let mut mse = BTreeMap::new();
    let mut params = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        mse.insert(
            f[0].to_string(),
            f[4].parse::<f64>().map_err(|e| e.to_string())?,
        );
        params.insert(
            f[0].to_string(),
            f[2].parse::<usize>().map_err(|e| e.to_string())?,
        );
    }
    let base = RunConfig::parse(DESK_CONFIG)
        .map_err(|e| e.to_string())?
        .train;
    let names: Vec<Vec<String>> = Variant::ALL
        .iter()
        .map(|v| {
            param_specs(&v.apply(&base), 2)
                .unwrap()
                .into_iter()
                .map(|s| s.name)
                .collect()
        })
        .collect();
    let distinct = names[0] != names[1] && names[0] != names[2] && names[1] != names[2];
    let get = |k: &str| {
        mse.get(k)
            .copied()
            .ok_or(format!("ablation.csv lacks `{k}`"))
    };
    let (full, att, seq) = (get("full")?, get("-attention")?, get("-sequence")?);
    let counts_ok = params["-attention"] != params["full"] && params["-sequence"] < params["full"];
    check(
        distinct && counts_ok && full <= att * 1.2 && full <= seq * 1.2,
        format!(
            "test mse full {full:.4} / -attention {att:.4} / -sequence {seq:.4}; params {} / {} / {}; name sets distinct: {distinct}",
            params["full"], params["-attention"], params["-sequence"]
        ),
    )
}

fn c8_no_leakage(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| e.clone())?;
    let ckpt = Checkpoint::load(&run.dir.join("checkpoint.ckpt")).map_err(|e| e.to_string())?;
    let cfg = &ckpt.model.config;
    let frame = synthetic_sinusoid_ar(5000, 2, 0);
    let split = Split::chronological(frame.len(), cfg.input_len, cfg.pred_len)
        .map_err(|e| e.to_string())?;
    let prepare = |f: &draformer::TimeSeriesFrame| {
        prepare_with_stats(f, cfg, split, ckpt.stats.clone()).map_err(|e| e.to_string())
    };
    let data = prepare(&frame)?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mut same = 0;
    let mut zero_rows = true;
    for (i, w) in data.test.iter().enumerate() {
        // wipe this window's target rows in the source series, then rebuild
        let mut blanked = frame.clone();
        for r in w.origin + cfg.input_len..w.origin + cfg.input_len + cfg.pred_len {
            for v in 0..frame.n_vars() {
                blanked.values.set(r, v, 0.0);
            }
        }
        let rebuilt = &prepare(&blanked)?.test[i];
        let a = ckpt.model.predict(&w.x).map_err(|e| e.to_string())?;
        let b = ckpt.model.predict(&rebuilt.x).map_err(|e| e.to_string())?;
        if bits(&a) == bits(&b) && rebuilt.y != w.y {
            same += 1;
        }
        let mut g = Graph::new();
        let vars = ckpt.model.params.bind_frozen(&mut g);
        let out = ckpt
            .model
            .forward(&mut g, &vars, &rebuilt.x)
            .map_err(|e| e.to_string())?;
        let rec = g.value(out.x_rec);
        zero_rows &= (cfg.input_len..rec.rows()).all(|r| rec.row(r).iter().all(|v| *v == 0.0));
    }
    check(
        same == data.test.len() && zero_rows,
        format!(
            "{same}/{} test windows bit-identical with zeroed targets; placeholder rows zero: {zero_rows}",
            data.test.len()
        ),
    )
}

fn c9_determinism(first: &Result<DeskRun, String>, root: &Path) -> Outcome {
    let first = first.as_ref().map_err(|e| e.clone())?;
    let second = desk_run(root, "desk_repeat")?;
    let a = fs::read(first.dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let b = fs::read(second.dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    check(
        a == b,
        format!(
            "metrics.csv identical across runs: {} ({} bytes)",
            a == b,
            a.len()
        ),
    )
}

/// Air Quality layout: `;` separated, `,` decimals, -200 for missing, a
/// mostly empty NMHC(GT) column and two trailing empty columns.
fn air_quality_fixture(rows: usize) -> String {
    let header = [
        "Date",
        "Time",
        "CO(GT)",
        "PT08.S1(CO)",
        "NMHC(GT)",
        "C6H6(GT)",
        "PT08.S2(NMHC)",
        "NOx(GT)",
        "PT08.S3(NOx)",
        "NO2(GT)",
        "PT08.S4(NO2)",
        "PT08.S5(O3)",
        "T",
        "RH",
        "AH",
    ];
    let mut out = header.join(";");
    out.push_str(";;\n");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let start = chrono::NaiveDate::from_ymd_opt(2004, 3, 10)
        .unwrap()
        .and_hms_opt(18, 0, 0)
        .unwrap();
    let base = [
        2.0, 1100.0, 150.0, 10.0, 950.0, 170.0, 830.0, 110.0, 1450.0, 1000.0, 18.0, 49.0, 1.0,
    ];
    let amp = [
        1.2, 200.0, 80.0, 6.0, 230.0, 120.0, 250.0, 40.0, 300.0, 350.0, 7.0, 15.0, 0.3,
    ];
    for t in 0..rows {
        let ts = start + chrono::Duration::hours(t as i64);
        let _ = write!(out, "{};{}", ts.format("%d/%m/%Y"), ts.format("%H.%M.%S"));
        let daily = (2.0 * std::f64::consts::PI * (t % 24) as f64 / 24.0).sin();
        for (c, (b, a)) in base.iter().zip(amp).enumerate() {
            let missing = if c == 2 {
                t > 150
            } else {
                rng.random::<f64>() < 0.04
            };
            if missing {
                out.push_str(";-200");
            } else {
                let v = b + a * (daily + 0.3 * rng.random_range(-1.0..1.0));
                let _ = write!(out, ";{}", format!("{v:.1}").replace('.', ","));
            }
        }
        out.push_str(";;\n");
    }
    out
}

fn c10_air_quality(root: &Path) -> Outcome {
    let start = Instant::now();
    let dir = root.join("airquality");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let csv = dir.join("AirQualityUCI.csv");
    fs::write(&csv, air_quality_fixture(2000)).map_err(|e| e.to_string())?;
    let config = dir.join("run.toml");
    let text = format!(
        "{DESK_CONFIG}data = {:?}\npreset = \"airquality\"\nmax_rows = 2000\noutput_dir = {:?}\n",
        path_str(&csv),
        path_str(&dir)
    );
    fs::write(&config, text).map_err(|e| e.to_string())?;
    let frame =
        load_csv(&csv, &CsvOptions::preset("airquality").unwrap()).map_err(|e| e.to_string())?;
    cli(&["train", "-c", path_str(&config)])?;
    cli(&["evaluate", "-c", path_str(&config)])?;
    let svg_path = dir.join("plot.svg");
    cli(&[
        "plot",
        "-c",
        path_str(&config),
        "--window",
        "0",
        "--variable",
        "0",
        "--out",
        path_str(&svg_path),
    ])?;
    let metrics =
        overall_mse(&fs::read_to_string(dir.join("metrics.csv")).map_err(|e| e.to_string())?)?;
    let finite = metrics
        .values()
        .all(|(mae, mse)| mae.is_finite() && mse.is_finite())
        && !metrics.is_empty();
    let svg = fs::read_to_string(&svg_path).map_err(|e| e.to_string())?;
    let doc = roxmltree::Document::parse(&svg).map_err(|e| format!("invalid SVG: {e}"))?;
    let is_svg = doc.root_element().tag_name().name() == "svg";
    let secs = start.elapsed().as_secs_f64();
    let test = metrics.get("test").map(|m| m.1).unwrap_or(f64::NAN);
    check(
        finite && is_svg && !frame.names.iter().any(|n| n == "NMHC(GT)") && secs < 1200.0,
        format!(
            "{} rows x {} variables (NMHC(GT) dropped), test mse {test:.4}, metrics finite: {finite}, svg root ok: {is_svg}, {secs:.0}s",
            frame.len(),
            frame.n_vars()
        ),
    )
}

fn main() -> ExitCode {
    // libtest flags (e.g. --nocapture) may be forwarded by cargo; `--list`
    // is answered so test discovery tools do not run the whole suite.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // bare numbers select criteria, e.g. `cargo test --test acceptance -- 2 5`
    let selected: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.parse::<u32>().is_ok())
        .collect();
    let want = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let root = tempfile::tempdir().expect("temp dir");
    let root = root.path();
    let mut passed = 0;
    let mut failed = 0;
    let mut report = |name: &str, r: Outcome| match r {
        Ok(d) => {
            passed += 1;
            println!("PASS  {name}: {d}");
        }
        Err(d) => {
            failed += 1;
            println!("FAIL  {name}: {d}");
        }
    };
    if want("1") {
        report("1 gradient correctness", c1_gradients());
    }
    if want("2") {
        report("2 attention invariants", c2_invariants());
    }
    if want("3") {
        report("3 oracle equivalence", c3_oracle());
    }
    if want("4") {
        report("4 differencing suite", c4_differencing());
    }
    if want("5") {
        report("5 overfit", c5_overfit());
    }
    if ["6", "8", "9"].iter().any(|c| want(c)) {
        let desk = desk_run(root, "desk");
        report("6 forecast sanity", c6_forecast(&desk));
        report("6b checkpoint round trip", c6b_round_trip(&desk));
        if want("8") {
            report("8 no leakage", c8_no_leakage(&desk));
        }
        if want("9") {
            report("9 determinism", c9_determinism(&desk, root));
        }
    }
    if want("7") {
        report("7 ablation structure", c7_ablation(root));
    }
    if want("10") {
        report("10 air quality end to end", c10_air_quality(root));
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
