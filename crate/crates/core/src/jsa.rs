//! Distributed difference attention: difference rows are standardised by a
//! learnable covariance-weighted mean and spread, mapped to distributions by
//! a row softmax, and compared pairwise with the base-2 Jensen-Shannon
//! divergence. The divergence matrix then weights the value maps.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamVars;
use crate::series::{CovarianceContext, DiffTriple};

/// Guard added to the spread before division.
pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct JsaParams {
    pub w_mu: Var,
    pub w_s: Var,
    /// N × d_model value map for the forward rows.
    pub w_vf: Var,
    /// N × d_model value map for the backward rows.
    pub w_vb: Var,
}

impl JsaParams {
    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(JsaParams {
            w_mu: vars.get(&format!("{prefix}.w_mu"))?,
            w_s: vars.get(&format!("{prefix}.w_s"))?,
            w_vf: vars.get(&format!("{prefix}.w_vf"))?,
            w_vb: vars.get(&format!("{prefix}.w_vb"))?,
        })
    }
}

/// Intermediate values of one standardisation.
#[derive(Debug, Clone, Copy)]
pub struct ZTransform {
    /// N × 1 mean weights, sums to 1.
    pub a_mu: Var,
    /// N × 1 spread weights, sums to 1.
    pub a_s: Var,
    /// L × 1 per-row weighted mean.
    pub mu: Var,
    /// L × 1 per-row weighted spread.
    pub s: Var,
    /// L × N standardised rows.
    pub z: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct JsaScores {
    pub z_fwd: Var,
    pub z_bwd: Var,
    pub p_fwd: Var,
    pub p_bwd: Var,
    pub j: Var,
    pub output: Var,
}

/// Softmax over the entries of `Σ · w` as an N × 1 column.
fn covariance_weights(g: &mut Graph, sigma: Var, w: Var) -> Result<Var> {
    let lin = g.matmul(sigma, w)?;
    let row = g.transpose(lin);
    let sm = g.softmax_rows(row)?;
    Ok(g.transpose(sm))
}

/// `z_t = (x_t - μ_t) / (s_t + ε)` with `μ_t = x_t · φ(Σ w_mu)` and
/// `s_t = sqrt(Σ_n (x_tn - μ_t)² φ(Σ w_s)_n)`.
pub fn z_transform(
    g: &mut Graph,
    x: Var,
    cov: &CovarianceContext,
    w_mu: Var,
    w_s: Var,
    epsilon: f64,
) -> Result<ZTransform> {
    let sigma = g.constant(cov.sigma.clone());
    let a_mu = covariance_weights(g, sigma, w_mu)?;
    let a_s = covariance_weights(g, sigma, w_s)?;
    let mu = g.matmul(x, a_mu)?;
    let centered = g.sub_col(x, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.matmul(sq, a_s)?;
    let s = g.sqrt(var)?;
    let denom = g.add_scalar(s, epsilon);
    let z = g.div_col(centered, denom)?;
    Ok(ZTransform {
        a_mu,
        a_s,
        mu,
        s,
        z,
    })
}

/// Row softmax of both inputs, then pairwise JS divergence:
/// returns `(p_fwd, p_bwd, J)`.
pub fn js_matrix(g: &mut Graph, z_fwd: Var, z_bwd: Var) -> Result<(Var, Var, Var)> {
    let p = g.softmax_rows(z_fwd)?;
    let q = g.softmax_rows(z_bwd)?;
    let j = g.js_divergence(p, q)?;
    Ok((p, q, j))
}

pub fn jsa_forward(
    g: &mut Graph,
    triple: &DiffTriple,
    cov: &CovarianceContext,
    params: &JsaParams,
    epsilon: f64,
) -> Result<JsaScores> {
    let f = g.constant(triple.d_fwd.clone());
    let b = g.constant(triple.d_bwd.clone());
    let zf = z_transform(g, f, cov, params.w_mu, params.w_s, epsilon)?.z;
    let zb = z_transform(g, b, cov, params.w_mu, params.w_s, epsilon)?.z;
    let (p_fwd, p_bwd, j) = js_matrix(g, zf, zb)?;
    let vf = g.matmul(zf, params.w_vf)?;
    let vb = g.matmul(zb, params.w_vb)?;
    let fwd = g.matmul(j, vf)?;
    let jt = g.transpose(j);
    let bwd = g.matmul(jt, vb)?;
    let output = g.add(fwd, bwd)?;
    Ok(JsaScores {
        z_fwd: zf,
        z_bwd: zb,
        p_fwd,
        p_bwd,
        j,
        output,
    })
}
