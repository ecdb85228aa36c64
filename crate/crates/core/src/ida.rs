//! Integrated distance attention: a learnable Gaussian kernel over the
//! product of squared temporal distance and squared Mahalanobis distance
//! between forward and backward difference rows.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamVars;
use crate::series::{CovarianceContext, DiffTriple};
use crate::tensor::Tensor;

/// Lower bound added to the softplus bandwidth.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct IdaParams {
    /// N × 1, bandwidth map.
    pub w_sigma: Var,
    /// d_model × d_model, value map.
    pub w_v: Var,
}

impl IdaParams {
    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(IdaParams {
            w_sigma: vars.get(&format!("{prefix}.w_sigma"))?,
            w_v: vars.get(&format!("{prefix}.w_v"))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct IdaScores {
    pub md2: Tensor,
    pub sigma: Var,
    /// Pre-softmax Gaussian kernel, L × L.
    pub kernel: Var,
    /// Row-stochastic attention weights, L × L.
    pub weights: Var,
    pub output: Var,
}

/// `MD²[i][j] = (f_i - b_j) (Σ + λI)⁻¹ (f_i - b_j)ᵀ` for forward rows `f`
/// and backward rows `b`.
pub fn mahalanobis_sq(d_fwd: &Tensor, d_bwd: &Tensor, cov: &CovarianceContext) -> Result<Tensor> {
    let n = d_fwd.cols();
    if d_fwd.shape() != d_bwd.shape() || cov.sigma_inv_reg.shape() != [n, n] {
        return Err(Error::dim(
            "mahalanobis_sq",
            d_fwd.shape(),
            cov.sigma_inv_reg.shape(),
        ));
    }
    let l = d_fwd.rows();
    let s = &cov.sigma_inv_reg;
    let mut out = Tensor::zeros(&[l, l]);
    let mut u = vec![0.0; n];
    for i in 0..l {
        let f = d_fwd.row(i);
        for j in 0..l {
            let b = d_bwd.row(j);
            u.iter_mut()
                .zip(f.iter().zip(b))
                .for_each(|(u, (x, y))| *u = x - y);
            let mut q = 0.0;
            for a in 0..n {
                let row = s.row(a);
                q += u[a] * row.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>();
            }
            out.set(i, j, q.max(0.0));
        }
    }
    Ok(out)
}

/// `|i - j|² · MD²[i][j]`, the constant exponent numerator of the kernel.
pub fn temporal_distance(md2: &Tensor) -> Tensor {
    let l = md2.rows();
    let mut out = md2.clone();
    for i in 0..l {
        for j in 0..l {
            let dt = i as f64 - j as f64;
            out.set(i, j, dt * dt * md2.get(i, j));
        }
    }
    out
}

/// `σ_i = softplus(x_i · w_sigma) + SIGMA_FLOOR`, an L × 1 column.
pub fn sigma_vector(g: &mut Graph, x_raw: Var, params: &IdaParams) -> Result<Var> {
    let pre = g.matmul(x_raw, params.w_sigma)?;
    let sp = g.softplus(pre);
    Ok(g.add_scalar(sp, SIGMA_FLOOR))
}

pub fn ida_forward(
    g: &mut Graph,
    x_embedded: Var,
    triple: &DiffTriple,
    cov: &CovarianceContext,
    params: &IdaParams,
) -> Result<IdaScores> {
    let md2 = mahalanobis_sq(&triple.d_fwd, &triple.d_bwd, cov)?;
    ida_forward_with(g, x_embedded, triple, md2, params, true)
}

/// [`ida_forward`] with a precomputed MD² matrix and an explicit choice of
/// the `1/(√(2π)σ_i)` prefactor. The prefactor scales each softmax row, so
/// it acts as a per-row temperature and does change the weights.
pub fn ida_forward_with(
    g: &mut Graph,
    x_embedded: Var,
    triple: &DiffTriple,
    md2: Tensor,
    params: &IdaParams,
    prefactor: bool,
) -> Result<IdaScores> {
    let l = triple.raw.rows();
    if md2.shape() != [l, l] || g.shape(x_embedded)[0] != l {
        return Err(Error::dim("ida_forward", g.shape(x_embedded), md2.shape()));
    }
    let x_raw = g.constant(triple.raw.clone());
    let sigma = sigma_vector(g, x_raw, params)?;
    let kernel = g.gaussian_kernel(sigma, &temporal_distance(&md2), prefactor)?;
    let weights = g.softmax_rows(kernel)?;
    let values = g.matmul(x_embedded, params.w_v)?;
    let output = g.matmul(weights, values)?;
    Ok(IdaScores {
        md2,
        sigma,
        kernel,
        weights,
        output,
    })
}
