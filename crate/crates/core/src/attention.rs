//! Standard building blocks: scaled dot-product multi-head attention,
//! position-wise feed-forward and layer normalisation.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamVars;

#[derive(Debug, Clone, Copy)]
pub struct MhaParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl MhaParams {
    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(MhaParams {
            wq: vars.get(&format!("{prefix}.wq"))?,
            wk: vars.get(&format!("{prefix}.wk"))?,
            wv: vars.get(&format!("{prefix}.wv"))?,
            wo: vars.get(&format!("{prefix}.wo"))?,
        })
    }
}

/// Multi-head attention of `query` rows over `memory` rows. With `causal`
/// set, query row `i` only sees memory rows `0..=i` (requires equal lengths).
pub fn multi_head_attention(
    g: &mut Graph,
    query: Var,
    memory: Var,
    params: &MhaParams,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = g.shape(query)[1];
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "d_model {d} is not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = g.matmul(query, params.wq)?;
    let k = g.matmul(memory, params.wk)?;
    let v = g.matmul(memory, params.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let weights = if causal {
            g.causal_softmax_rows(scores)?
        } else {
            g.softmax_rows(scores)?
        };
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(joined, params.wo)
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnParams {
    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(FfnParams {
            w1: vars.get(&format!("{prefix}.w1"))?,
            b1: vars.get(&format!("{prefix}.b1"))?,
            w2: vars.get(&format!("{prefix}.w2"))?,
            b2: vars.get(&format!("{prefix}.b2"))?,
        })
    }
}

/// linear → ELU → linear.
pub fn feed_forward(g: &mut Graph, x: Var, p: &FfnParams) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.elu(h);
    let o = g.matmul(h, p.w2)?;
    g.add_row(o, p.b2)
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gain: Var,
    pub bias: Var,
}

impl NormParams {
    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(NormParams {
            gain: vars.get(&format!("{prefix}.gain"))?,
            bias: vars.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn causal_attention_ignores_later_rows() {
        let base =
            Tensor::matrix(4, 4, (0..16).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let w = |s: f64| {
            Tensor::matrix(4, 4, (0..16).map(|v| (v as f64 * s).cos() * 0.5).collect()).unwrap()
        };
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let p = MhaParams {
                wq: g.constant(w(0.3)),
                wk: g.constant(w(0.7)),
                wv: g.constant(w(1.1)),
                wo: g.constant(w(1.9)),
            };
            let out = multi_head_attention(&mut g, xv, xv, &p, 2, true).unwrap();
            g.value(out).clone()
        };
        let a = run(&base);
        let mut perturbed = base.clone();
        perturbed.row_mut(2).iter_mut().for_each(|v| *v += 1.0);
        let b = run(&perturbed);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 6]));
        let w = g.constant(Tensor::zeros(&[6, 6]));
        let p = MhaParams {
            wq: w,
            wk: w,
            wv: w,
            wo: w,
        };
        assert!(multi_head_attention(&mut g, x, x, &p, 4, false).is_err());
    }
}
