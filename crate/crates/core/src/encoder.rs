//! Encoder stack. Each layer mixes the two reconstructed attentions with
//! softplus weights, then applies the usual residual, layer-norm and
//! feed-forward sublayers.
//!
//! Distances (MD², J) come from the window's differences in every layer;
//! only the value/residual path carries hidden state between layers.

use crate::attention::{feed_forward, multi_head_attention, FfnParams, MhaParams, NormParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ida::{ida_forward_with, mahalanobis_sq, IdaParams};
use crate::jsa::{jsa_forward, JsaParams};
use crate::params::ParamVars;
use crate::series::{difference, estimate_covariance, CovarianceContext, DiffTriple};
use crate::tensor::Tensor;

/// Data-derived constants for one input window.
#[derive(Debug, Clone)]
pub struct WindowContext {
    pub triple: DiffTriple,
    pub cov: CovarianceContext,
    pub md2: Tensor,
}

impl WindowContext {
    pub fn new(x: &Tensor, lambda: f64) -> Result<Self> {
        let triple = difference(x)?;
        let cov = estimate_covariance(&triple.d_fwd, &triple.d_bwd, lambda)?;
        let md2 = mahalanobis_sq(&triple.d_fwd, &triple.d_bwd, &cov)?;
        Ok(WindowContext { triple, cov, md2 })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum EncoderAttention {
    Reconstructed {
        ida: IdaParams,
        jsa: JsaParams,
        /// 1×1, passed through softplus at use.
        alpha_ida: Var,
        alpha_jsa: Var,
    },
    /// Dot-product multi-head self-attention (ablation).
    MultiHead { mha: MhaParams, n_heads: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerParams {
    pub attention: EncoderAttention,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

impl EncoderLayerParams {
    pub fn bind(vars: &ParamVars, prefix: &str, multi_head: Option<usize>) -> Result<Self> {
        let attention = match multi_head {
            None => EncoderAttention::Reconstructed {
                ida: IdaParams::bind(vars, &format!("{prefix}.ida"))?,
                jsa: JsaParams::bind(vars, &format!("{prefix}.jsa"))?,
                alpha_ida: vars.get(&format!("{prefix}.alpha_ida"))?,
                alpha_jsa: vars.get(&format!("{prefix}.alpha_jsa"))?,
            },
            Some(n_heads) => EncoderAttention::MultiHead {
                mha: MhaParams::bind(vars, &format!("{prefix}.mha"))?,
                n_heads,
            },
        };
        Ok(EncoderLayerParams {
            attention,
            ffn: FfnParams::bind(vars, &format!("{prefix}.ffn"))?,
            norm1: NormParams::bind(vars, &format!("{prefix}.norm1"))?,
            norm2: NormParams::bind(vars, &format!("{prefix}.norm2"))?,
        })
    }
}

/// The attention sublayer alone: `softplus(α_ida)·IDA + softplus(α_jsa)·JSA`.
pub fn encoder_attention(
    g: &mut Graph,
    x: Var,
    ctx: &WindowContext,
    attention: &EncoderAttention,
    epsilon: f64,
) -> Result<Var> {
    match attention {
        EncoderAttention::Reconstructed {
            ida,
            jsa,
            alpha_ida,
            alpha_jsa,
        } => {
            let ida_out = ida_forward_with(g, x, &ctx.triple, ctx.md2.clone(), ida, true)?.output;
            let jsa_out = jsa_forward(g, &ctx.triple, &ctx.cov, jsa, epsilon)?.output;
            let wi = g.softplus(*alpha_ida);
            let wj = g.softplus(*alpha_jsa);
            let a = g.mul_scalar(ida_out, wi)?;
            let b = g.mul_scalar(jsa_out, wj)?;
            g.add(a, b)
        }
        EncoderAttention::MultiHead { mha, n_heads } => {
            multi_head_attention(g, x, x, mha, *n_heads, false)
        }
    }
}

pub fn encoder_layer(
    g: &mut Graph,
    x: Var,
    ctx: &WindowContext,
    params: &EncoderLayerParams,
    epsilon: f64,
) -> Result<Var> {
    let a = encoder_attention(g, x, ctx, &params.attention, epsilon)?;
    let r = g.add(x, a)?;
    let h = params.norm1.apply(g, r)?;
    let f = feed_forward(g, h, &params.ffn)?;
    let r = g.add(h, f)?;
    params.norm2.apply(g, r)
}

pub fn encode(
    g: &mut Graph,
    x_embedded: Var,
    ctx: &WindowContext,
    layers: &[EncoderLayerParams],
    epsilon: f64,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    let mut h = x_embedded;
    for layer in layers {
        h = encoder_layer(g, h, ctx, layer, epsilon)?;
    }
    Ok(h)
}
