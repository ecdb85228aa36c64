//! Central finite-difference checks of tape gradients.

use crate::autodiff::{Graph, Var};
use crate::config::TrainConfig;
use crate::encoder::{encoder_layer, EncoderLayerParams, WindowContext};
use crate::error::{Error, Result};
use crate::ida::{ida_forward_with, IdaParams};
use crate::jsa::{jsa_forward, JsaParams};
use crate::model::Draformer;
use crate::params::{ParamStore, ParamVars};
use crate::recon::{
    build_triple_stack, decode, dimension_converge, time_distill, DecoderLayerParams, DecoderParams,
};
use crate::series::{embed, EmbedParams, Window};
use crate::tensor::Tensor;

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

fn eval_scalar(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::dim("grad_check", v.shape(), &[1, 1]));
    }
    Ok(v.item())
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_step(h)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        eval_scalar(&g, out)
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[idx] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[idx], numeric));
        }
    }
    Ok(worst)
}

/// [`grad_check`] over every tensor of a parameter store, with `f` reading
/// parameters by name.
pub fn grad_check_params<F>(f: F, store: &ParamStore, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    check_step(h)?;
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let out = f(&mut g, &vars)?;
    eval_scalar(&g, out)?;
    let grads = g.backward(out);
    let analytic = g.param_gradients(&grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let vars = s.bind_frozen(&mut g);
        let out = f(&mut g, &vars)?;
        eval_scalar(&g, out)
    };

    let mut worst = 0.0f64;
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in &names {
        let len = store.get(name).map(Tensor::len).unwrap_or(0);
        for idx in 0..len {
            let orig = store.get(name).unwrap().data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = orig + h;
            let up = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig - h;
            let down = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[name].data()[idx], numeric));
        }
    }
    Ok(worst)
}

/// Outcome of one entry of [`gradient_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Number of scalars perturbed.
    pub checked: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Toy configuration used by [`gradient_suite`].
pub fn suite_config() -> TrainConfig {
    TrainConfig {
        input_len: 5,
        pred_len: 3,
        d_model: 8,
        k: 4,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        n_heads: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn smooth(rows: usize, cols: usize, a: f64, b: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((i / cols) as f64 * a + (i % cols) as f64 * b).sin() + 0.1 * (i % cols) as f64)
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

/// Fixed-weight sum, so every output entry reaches the scalar with a distinct
/// coefficient.
fn weighted_sum(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(
        shape,
        (0..n).map(|i| 0.3 + (i as f64 * 0.7).sin()).collect(),
    )?;
    let w = g.constant(w);
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

fn subset(store: &ParamStore, keep: impl Fn(&str) -> bool) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in store.iter().filter(|(n, _)| keep(n)) {
        s.insert(name, t.clone());
    }
    s
}

/// Finite-difference checks of every model component on toy shapes
/// (L_x=5, N=3, d_model=8). Attention modules use a 1e-4 tolerance, the
/// rest 1e-3.
pub fn gradient_suite() -> Result<Vec<SuiteEntry>> {
    const H: f64 = 1e-6;
    let cfg = suite_config();
    let n_vars = 3;
    let model = Draformer::new(cfg.clone(), n_vars)?;
    let x = smooth(cfg.input_len, n_vars, 0.9, 1.3);
    let y = smooth(cfg.pred_len, n_vars, 0.5, 2.1);
    let ctx = WindowContext::new(&x, cfg.lambda)?;
    let store = &model.params;
    let mut out = Vec::new();
    let mut run = |name: &'static str,
                   tol: f64,
                   s: ParamStore,
                   f: &dyn Fn(&mut Graph, &ParamVars) -> Result<Var>| {
        let err = grad_check_params(f, &s, H)?;
        out.push(SuiteEntry {
            name,
            max_rel_error: err,
            tolerance: tol,
            checked: s.num_scalars(),
        });
        Ok::<(), Error>(())
    };

    run(
        "ida_forward",
        1e-4,
        subset(store, |n| n == "embed.w_x" || n.starts_with("enc.0.ida.")),
        &|g, v| {
            let raw = g.constant(ctx.triple.raw.clone());
            let emb = g.matmul(raw, v.get("embed.w_x")?)?;
            let p = IdaParams::bind(v, "enc.0.ida")?;
            let o = ida_forward_with(g, emb, &ctx.triple, ctx.md2.clone(), &p, true)?.output;
            weighted_sum(g, o)
        },
    )?;
    run(
        "jsa_forward",
        1e-4,
        subset(store, |n| n.starts_with("enc.0.jsa.")),
        &|g, v| {
            let p = JsaParams::bind(v, "enc.0.jsa")?;
            let o = jsa_forward(g, &ctx.triple, &ctx.cov, &p, cfg.epsilon)?.output;
            weighted_sum(g, o)
        },
    )?;
    run(
        "encoder_layer",
        1e-3,
        subset(store, |n| n == "embed.w_x" || n.starts_with("enc.0.")),
        &|g, v| {
            let raw = g.constant(ctx.triple.raw.clone());
            let emb = g.matmul(raw, v.get("embed.w_x")?)?;
            let p = EncoderLayerParams::bind(v, "enc.0", None)?;
            let o = encoder_layer(g, emb, &ctx, &p, cfg.epsilon)?;
            weighted_sum(g, o)
        },
    )?;
    run(
        "time_distill",
        1e-3,
        subset(store, |n| {
            n.starts_with("embed.") || n.starts_with("recon.conv")
        }),
        &|g, v| {
            let e = embed(g, &ctx.triple, &EmbedParams::bind(v)?)?;
            let stack = build_triple_stack(g, &e)?;
            let o = time_distill(
                g,
                stack,
                v.get("recon.conv_w")?,
                v.get("recon.conv_b")?,
                cfg.k,
            )?;
            weighted_sum(g, o)
        },
    )?;
    run(
        "dimension_converge",
        1e-3,
        subset(store, |n| n.starts_with("embed.") || n == "recon.w_g"),
        &|g, v| {
            let e = embed(g, &ctx.triple, &EmbedParams::bind(v)?)?;
            let stack = build_triple_stack(g, &e)?;
            let o = dimension_converge(g, stack, v.get("recon.w_g")?)?;
            weighted_sum(g, o)
        },
    )?;
    let x_rec = smooth(cfg.input_len + cfg.pred_len, cfg.d_model, 0.4, 0.8);
    let memory = smooth(cfg.input_len, cfg.d_model, 1.1, 0.3);
    run(
        "decode",
        1e-3,
        subset(store, |n| n.starts_with("dec.") || n.starts_with("out.")),
        &|g, v| {
            let layers = [DecoderLayerParams::bind(v, "dec.0")?];
            let params = DecoderParams {
                position: v.get("dec.pos")?,
                layers: &layers,
                out_w: v.get("out.w")?,
                out_b: v.get("out.b")?,
                n_heads: cfg.n_heads,
            };
            let xr = g.constant(x_rec.clone());
            let mem = g.constant(memory.clone());
            let o = decode(g, xr, mem, &params, cfg.pred_len)?.predictions;
            weighted_sum(g, o)
        },
    )?;
    let window = Window { x, y, origin: 0 };
    run("end_to_end_loss", 1e-3, store.clone(), &|g, v| {
        model.window_loss(g, v, &window)
    })?;
    Ok(out)
}
