//! The full forecaster: embeddings, encoder, reconstructed decoder input,
//! decoder and output projection, plus its parameter layout.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::TrainConfig;
use crate::encoder::{encode, EncoderLayerParams, WindowContext};
use crate::error::{Error, Result};
use crate::params::{uniform_init, ParamStore, ParamVars};
use crate::recon::{
    decode, distill_channels, reconstruct, DecoderLayerParams, DecoderParams, ReconParams,
    DISTILL_KERNEL,
};
use crate::series::{embed, EmbedParams, EmbeddedTriple, Window};
use crate::tensor::Tensor;

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform {
        fan_in: usize,
    },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// `softplus(ln(e - 1)) = 1`.
pub fn unit_softplus_logit() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Every parameter of the model for `n_vars` input variables.
pub fn param_specs(config: &TrainConfig, n_vars: usize) -> Result<Vec<ParamSpec>> {
    let d = config.d_model;
    let n = n_vars;
    let ff = config.ffn_width();
    let mut specs = Vec::new();
    let mut w = |name: String, shape: &[usize], fan_in: usize| {
        specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init: Init::Uniform { fan_in },
        })
    };
    w("embed.w_x".into(), &[n, d], n);
    if !config.replace_recon_sequence {
        w("embed.w_f".into(), &[n, d], n);
        w("embed.w_b".into(), &[n, d], n);
    }
    let mut consts: Vec<ParamSpec> = Vec::new();
    let mut c = |name: String, shape: &[usize], v: f64| {
        consts.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init: Init::Constant(v),
        })
    };
    let mha = |w: &mut dyn FnMut(String, &[usize], usize), p: &str| {
        for m in ["wq", "wk", "wv", "wo"] {
            w(format!("{p}.{m}"), &[d, d], d);
        }
    };
    let ffn_norm = |w: &mut dyn FnMut(String, &[usize], usize),
                    c: &mut dyn FnMut(String, &[usize], f64),
                    p: &str,
                    norms: usize| {
        w(format!("{p}.ffn.w1"), &[d, ff], d);
        c(format!("{p}.ffn.b1"), &[1, ff], 0.0);
        w(format!("{p}.ffn.w2"), &[ff, d], ff);
        c(format!("{p}.ffn.b2"), &[1, d], 0.0);
        for i in 1..=norms {
            c(format!("{p}.norm{i}.gain"), &[1, d], 1.0);
            c(format!("{p}.norm{i}.bias"), &[1, d], 0.0);
        }
    };
    for l in 0..config.n_enc_layers {
        let p = format!("enc.{l}");
        if config.replace_recon_attention {
            mha(&mut w, &format!("{p}.mha"));
        } else {
            w(format!("{p}.ida.w_sigma"), &[n, 1], n);
            w(format!("{p}.ida.w_v"), &[d, d], d);
            w(format!("{p}.jsa.w_mu"), &[n, 1], n);
            w(format!("{p}.jsa.w_s"), &[n, 1], n);
            w(format!("{p}.jsa.w_vf"), &[n, d], n);
            w(format!("{p}.jsa.w_vb"), &[n, d], n);
            c(format!("{p}.alpha_ida"), &[1, 1], unit_softplus_logit());
            c(format!("{p}.alpha_jsa"), &[1, 1], unit_softplus_logit());
        }
        ffn_norm(&mut w, &mut c, &p, 2);
    }
    if !config.replace_recon_sequence {
        let channels = distill_channels(d, config.k)?;
        w("recon.w_g".into(), &[3, 1], 3);
        w(
            "recon.conv_w".into(),
            &[DISTILL_KERNEL * d, channels],
            DISTILL_KERNEL * d,
        );
        c("recon.conv_b".into(), &[1, channels], 0.0);
        w("recon.w_c".into(), &[config.k + d, d], config.k + d);
    }
    w(
        "dec.pos".into(),
        &[config.input_len + config.pred_len, d],
        d,
    );
    for l in 0..config.n_dec_layers {
        let p = format!("dec.{l}");
        mha(&mut w, &format!("{p}.self"));
        mha(&mut w, &format!("{p}.cross"));
        ffn_norm(&mut w, &mut c, &p, 3);
    }
    w("out.w".into(), &[d, n], d);
    c("out.b".into(), &[1, n], 0.0);
    specs.extend(consts);
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(specs)
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub embedded: Option<EmbeddedTriple>,
    pub encoder_out: Var,
    /// Decoder input before positions, (L_x + L_y) × d_model.
    pub x_rec: Var,
    /// L_y × N.
    pub predictions: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Draformer {
    pub config: TrainConfig,
    pub n_vars: usize,
    pub params: ParamStore,
}

impl Draformer {
    /// Validates the configuration and initialises parameters from `config.seed`.
    pub fn new(config: TrainConfig, n_vars: usize) -> Result<Self> {
        config.validate(n_vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        for spec in param_specs(&config, n_vars)? {
            let t = match spec.init {
                Init::Uniform { fan_in } => uniform_init(&mut rng, &spec.shape, fan_in),
                Init::Constant(v) => Tensor::filled(&spec.shape, v),
            };
            params.insert(spec.name, t);
        }
        Ok(Draformer {
            config,
            n_vars,
            params,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: TrainConfig, n_vars: usize, params: ParamStore) -> Result<Self> {
        let specs = param_specs(&config, n_vars)?;
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            match params.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        s.name,
                        t.shape(),
                        s.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{}`", s.name))),
            }
        }
        Ok(Draformer {
            config,
            n_vars,
            params,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.input_len, self.n_vars];
        if x.shape() != want {
            return Err(Error::dim("forward", x.shape(), &want));
        }
        if !x.is_finite() {
            return Err(Error::Data(
                "input window contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Builds the forward pass of one normalised window on `g`.
    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, x: &Tensor) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let cfg = &self.config;
        let ctx = WindowContext::new(x, cfg.lambda)?;
        let multi_head = cfg.replace_recon_attention.then_some(cfg.n_heads);
        let enc_layers = (0..cfg.n_enc_layers)
            .map(|l| EncoderLayerParams::bind(vars, &format!("enc.{l}"), multi_head))
            .collect::<Result<Vec<_>>>()?;
        let dec_layers = (0..cfg.n_dec_layers)
            .map(|l| DecoderLayerParams::bind(vars, &format!("dec.{l}")))
            .collect::<Result<Vec<_>>>()?;

        let (embedded, x_emb, x_rec) = if cfg.replace_recon_sequence {
            let raw = g.constant(ctx.triple.raw.clone());
            let x_emb = g.matmul(raw, vars.get("embed.w_x")?)?;
            let zeros = g.constant(Tensor::zeros(&[cfg.input_len + cfg.pred_len, cfg.d_model]));
            (None, x_emb, zeros)
        } else {
            let e = embed(g, &ctx.triple, &EmbedParams::bind(vars)?)?;
            let rec = reconstruct(g, &e, &ReconParams::bind(vars)?, cfg.k, cfg.pred_len)?;
            (Some(e), e.ex_raw, rec.x_rec)
        };
        let encoder_out = encode(g, x_emb, &ctx, &enc_layers, cfg.epsilon)?;
        let dec = DecoderParams {
            position: vars.get("dec.pos")?,
            layers: &dec_layers,
            out_w: vars.get("out.w")?,
            out_b: vars.get("out.b")?,
            n_heads: cfg.n_heads,
        };
        let out = decode(g, x_rec, encoder_out, &dec, cfg.pred_len)?;
        Ok(ForwardOutput {
            embedded,
            encoder_out,
            x_rec,
            predictions: out.predictions,
        })
    }

    /// Forecast (L_y × N) for one normalised window.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &vars, x)?;
        let pred = g.value(out.predictions).clone();
        if !pred.is_finite() {
            return Err(Error::Evaluation(
                "model produced non-finite predictions".into(),
            ));
        }
        Ok(pred)
    }

    /// Mean squared error of one window, as a graph node.
    pub fn window_loss(&self, g: &mut Graph, vars: &ParamVars, window: &Window) -> Result<Var> {
        let out = self.forward(g, vars, &window.x)?;
        let target = g.constant(window.y.clone());
        mse_node(g, out.predictions, target)
    }

    /// Batch-mean MSE and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &[Window]) -> Result<(f64, BTreeMap<String, Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        for w in batch {
            let mut g = Graph::new();
            let vars = self.params.bind(&mut g);
            let loss = self.window_loss(&mut g, &vars, w)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite loss on window at row {}",
                    w.origin
                )));
            }
            total += value * scale;
            let grads = g.backward(loss);
            for (name, grad) in g.param_gradients(&grads) {
                let grad = grad.scale(scale);
                match acc.get_mut(&name) {
                    Some(a) => a.add_assign(&grad),
                    None => {
                        acc.insert(name, grad);
                    }
                }
            }
        }
        Ok((total, acc))
    }
}

/// `mean((pred - target)²)`.
pub fn mse_node(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}
