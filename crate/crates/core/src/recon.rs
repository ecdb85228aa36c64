//! Reconstructed decoder input and the one-shot decoder.
//!
//! The embedded triple `(X_f^t, X^t, X_b^t)` is stacked per time step into
//! a 3L × d_model sequence `g`. Two feature extractors read it:
//!
//! * time distillation: conv (kernel 3, stride 3, so exactly one output per
//!   time step) → ELU → max-pool across channel groups down to `k` features;
//! * dimension convergence: `e_t = Σ_m w_g[m] g_t[m]`, gated by
//!   `sigmoid(e_{t-1})` with a zero virtual predecessor at `t = 0`.
//!
//! Their concatenation is fused to d_model and followed by `L_y` zero
//! placeholder rows. The decoder consumes the whole sequence in a single pass
//! and the last `L_y` rows are projected to the forecast.

use crate::attention::{feed_forward, multi_head_attention, FfnParams, MhaParams, NormParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamVars;
use crate::series::EmbeddedTriple;
use crate::tensor::Tensor;

pub const DISTILL_KERNEL: usize = 3;
pub const DISTILL_STRIDE: usize = 3;

/// Output channels of the distillation conv: `d_model` when `k` divides it
/// (pooled down by groups of `d_model / k`), otherwise `k` directly.
pub fn distill_channels(d_model: usize, k: usize) -> Result<usize> {
    if k == 0 || k > d_model {
        return Err(Error::Config(format!(
            "distilled feature count k={k} must be in 1..={d_model}"
        )));
    }
    Ok(if d_model.is_multiple_of(k) {
        d_model
    } else {
        k
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ReconParams {
    /// 3 × 1.
    pub w_g: Var,
    /// (3 · d_model) × channels.
    pub conv_w: Var,
    /// 1 × channels.
    pub conv_b: Var,
    /// (k + d_model) × d_model.
    pub w_c: Var,
}

impl ReconParams {
    pub fn bind(vars: &ParamVars) -> Result<Self> {
        Ok(ReconParams {
            w_g: vars.get("recon.w_g")?,
            conv_w: vars.get("recon.conv_w")?,
            conv_b: vars.get("recon.conv_b")?,
            w_c: vars.get("recon.w_c")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReconSequence {
    /// 3L × d_model, rows `3t, 3t+1, 3t+2` = forward, raw, backward at step t.
    pub g: Var,
    pub t_feat: Var,
    pub d_feat: Var,
    pub x_reg: Var,
    pub x_rec: Var,
}

pub fn build_triple_stack(g: &mut Graph, embedded: &EmbeddedTriple) -> Result<Var> {
    g.interleave_rows(&[embedded.ex_fwd, embedded.ex_raw, embedded.ex_bwd])
}

pub fn time_distill(g: &mut Graph, stack: Var, conv_w: Var, conv_b: Var, k: usize) -> Result<Var> {
    let d_model = g.shape(stack)[1];
    let channels = distill_channels(d_model, k)?;
    if g.shape(conv_w) != [DISTILL_KERNEL * d_model, channels] {
        return Err(Error::dim("time_distill", g.shape(stack), g.shape(conv_w)));
    }
    let conv = g.conv1d(stack, conv_w, Some(conv_b), DISTILL_KERNEL, DISTILL_STRIDE)?;
    let act = g.elu(conv);
    let window = channels / k;
    if window == 1 {
        Ok(act)
    } else {
        g.max_pool_cols(act, window)
    }
}

pub fn dimension_converge(g: &mut Graph, stack: Var, w_g: Var) -> Result<Var> {
    let e = g.group_combine(stack, w_g)?;
    let (l, d) = (g.shape(e)[0], g.shape(e)[1]);
    let zero = g.constant(Tensor::zeros(&[1, d]));
    let prev = if l > 1 {
        let head = g.slice_rows(e, 0, l - 1)?;
        g.concat_rows(&[zero, head])?
    } else {
        zero
    };
    let gate = g.sigmoid(prev);
    g.mul(e, gate)
}

/// Returns `(x_reg, x_rec)`.
pub fn fuse_and_pad(
    g: &mut Graph,
    t_feat: Var,
    d_feat: Var,
    w_c: Var,
    pred_len: usize,
) -> Result<(Var, Var)> {
    let c = g.concat_cols(&[t_feat, d_feat])?;
    let x_reg = g.matmul(c, w_c)?;
    let d = g.shape(x_reg)[1];
    let placeholder = g.constant(Tensor::zeros(&[pred_len, d]));
    let x_rec = g.concat_rows(&[x_reg, placeholder])?;
    Ok((x_reg, x_rec))
}

pub fn reconstruct(
    g: &mut Graph,
    embedded: &EmbeddedTriple,
    params: &ReconParams,
    k: usize,
    pred_len: usize,
) -> Result<ReconSequence> {
    let stack = build_triple_stack(g, embedded)?;
    let t_feat = time_distill(g, stack, params.conv_w, params.conv_b, k)?;
    let d_feat = dimension_converge(g, stack, params.w_g)?;
    let (x_reg, x_rec) = fuse_and_pad(g, t_feat, d_feat, params.w_c, pred_len)?;
    Ok(ReconSequence {
        g: stack,
        t_feat,
        d_feat,
        x_reg,
        x_rec,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerParams {
    pub self_attn: MhaParams,
    pub cross_attn: MhaParams,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub norm3: NormParams,
}

impl DecoderLayerParams {
    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(DecoderLayerParams {
            self_attn: MhaParams::bind(vars, &format!("{prefix}.self"))?,
            cross_attn: MhaParams::bind(vars, &format!("{prefix}.cross"))?,
            ffn: FfnParams::bind(vars, &format!("{prefix}.ffn"))?,
            norm1: NormParams::bind(vars, &format!("{prefix}.norm1"))?,
            norm2: NormParams::bind(vars, &format!("{prefix}.norm2"))?,
            norm3: NormParams::bind(vars, &format!("{prefix}.norm3"))?,
        })
    }
}

/// Causally masked self-attention sublayer: `norm1(x + SA(x))`.
pub fn decoder_self_attention(
    g: &mut Graph,
    x: Var,
    p: &DecoderLayerParams,
    n_heads: usize,
) -> Result<Var> {
    let sa = multi_head_attention(g, x, x, &p.self_attn, n_heads, true)?;
    let r = g.add(x, sa)?;
    p.norm1.apply(g, r)
}

pub fn decoder_layer(
    g: &mut Graph,
    x: Var,
    memory: Var,
    p: &DecoderLayerParams,
    n_heads: usize,
) -> Result<Var> {
    let h = decoder_self_attention(g, x, p, n_heads)?;
    let ca = multi_head_attention(g, h, memory, &p.cross_attn, n_heads, false)?;
    let r = g.add(h, ca)?;
    let h = p.norm2.apply(g, r)?;
    let f = feed_forward(g, h, &p.ffn)?;
    let r = g.add(h, f)?;
    p.norm3.apply(g, r)
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderParams<'a> {
    /// (L_x + L_y) × d_model learned positions.
    pub position: Var,
    pub layers: &'a [DecoderLayerParams],
    /// d_model × N_y.
    pub out_w: Var,
    /// 1 × N_y.
    pub out_b: Var,
    pub n_heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeOutput {
    pub hidden: Var,
    pub predictions: Var,
}

/// Runs the decoder over the full `x_rec` at once and projects the last
/// `pred_len` rows.
pub fn decode(
    g: &mut Graph,
    x_rec: Var,
    encoder_out: Var,
    params: &DecoderParams<'_>,
    pred_len: usize,
) -> Result<DecodeOutput> {
    let mut h = g.add(x_rec, params.position)?;
    for layer in params.layers {
        h = decoder_layer(g, h, encoder_out, layer, params.n_heads)?;
    }
    let total = g.shape(h)[0];
    if pred_len > total {
        return Err(Error::dim("decode", g.shape(h), &[pred_len]));
    }
    let tail = g.slice_rows(h, total - pred_len, pred_len)?;
    let proj = g.matmul(tail, params.out_w)?;
    let predictions = g.add_row(proj, params.out_b)?;
    Ok(DecodeOutput {
        hidden: h,
        predictions,
    })
}
