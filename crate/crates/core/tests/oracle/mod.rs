//! Scalar-loop reference evaluation of the two attention mechanisms, written
//! directly from their defining formulas with plain nested `Vec`s. Shares no
//! code with the library (different inverse algorithm, no tape).

#![allow(dead_code, clippy::needless_range_loop)]

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = zeros(a.len(), b[0].len());
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for p in 0..b.len() {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// Forward and backward first differences with zero boundary rows.
pub fn differences(x: &Mat) -> (Mat, Mat) {
    let (l, n) = (x.len(), x[0].len());
    let mut f = zeros(l, n);
    let mut b = zeros(l, n);
    for t in 0..l {
        for k in 0..n {
            if t + 1 < l {
                f[t][k] = x[t + 1][k] - x[t][k];
            }
            if t > 0 {
                b[t][k] = x[t][k] - x[t - 1][k];
            }
        }
    }
    (f, b)
}

/// Sample covariance of the 2L pooled difference rows.
pub fn pooled_covariance(f: &Mat, b: &Mat) -> Mat {
    let rows: Vec<&Vec<f64>> = f.iter().chain(b.iter()).collect();
    let n = f[0].len();
    let count = rows.len() as f64;
    let mut mean = vec![0.0; n];
    for r in &rows {
        for k in 0..n {
            mean[k] += r[k] / count;
        }
    }
    let mut cov = zeros(n, n);
    for r in &rows {
        for a in 0..n {
            for c in 0..n {
                cov[a][c] += (r[a] - mean[a]) * (r[c] - mean[c]) / (count - 1.0);
            }
        }
    }
    cov
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(m: &Mat) -> Mat {
    let n = m.len();
    let mut a: Mat = m.clone();
    let mut inv = zeros(n, n);
    for i in 0..n {
        inv[i][i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..n {
            if r != col {
                let factor = a[r][col];
                for j in 0..n {
                    a[r][j] -= factor * a[col][j];
                    inv[r][j] -= factor * inv[col][j];
                }
            }
        }
    }
    inv
}

fn regularized_inverse(cov: &Mat, lambda: f64) -> Mat {
    let mut m = cov.clone();
    for i in 0..m.len() {
        m[i][i] += lambda;
    }
    inverse(&m)
}

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Squared Mahalanobis distance between forward row i and backward row j.
pub fn md2(f: &Mat, b: &Mat, inv: &Mat) -> Mat {
    let (l, n) = (f.len(), f[0].len());
    let mut out = zeros(l, l);
    for i in 0..l {
        for j in 0..l {
            let d: Vec<f64> = (0..n).map(|k| f[i][k] - b[j][k]).collect();
            let mut q = 0.0;
            for a in 0..n {
                for c in 0..n {
                    q += d[a] * inv[a][c] * d[c];
                }
            }
            out[i][j] = q;
        }
    }
    out
}

/// Gaussian-kernel attention weights and output.
/// `x` is the raw window (L×N), `x_emb` its embedding (L×d).
pub fn ida(x: &Mat, x_emb: &Mat, w_sigma: &[f64], w_v: &Mat, lambda: f64) -> (Mat, Mat) {
    let l = x.len();
    let (f, b) = differences(x);
    let inv = regularized_inverse(&pooled_covariance(&f, &b), lambda);
    let m = md2(&f, &b, &inv);
    let mut weights = zeros(l, l);
    for i in 0..l {
        let pre: f64 = x[i].iter().zip(w_sigma).map(|(a, w)| a * w).sum();
        let sigma = softplus(pre) + 1e-3;
        let scores: Vec<f64> = (0..l)
            .map(|j| {
                let dt = i as f64 - j as f64;
                let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
                norm * (-(dt * dt) * m[i][j] / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        weights[i] = softmax(&scores);
    }
    let v = matmul(x_emb, w_v);
    (weights.clone(), matmul(&weights, &v))
}

fn standardize(x: &Mat, cov: &Mat, w_mu: &[f64], w_s: &[f64], eps: f64) -> Mat {
    let n = cov.len();
    let lin = |w: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|a| (0..n).map(|c| cov[a][c] * w[c]).sum())
            .collect()
    };
    let a_mu = softmax(&lin(w_mu));
    let a_s = softmax(&lin(w_s));
    x.iter()
        .map(|row| {
            let mu: f64 = row.iter().zip(&a_mu).map(|(v, a)| v * a).sum();
            let var: f64 = row
                .iter()
                .zip(&a_s)
                .map(|(v, a)| (v - mu) * (v - mu) * a)
                .sum();
            let s = var.sqrt();
            row.iter().map(|v| (v - mu) / (s + eps)).collect()
        })
        .collect()
}

fn kl2(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, mv)| pv * (pv / mv).log2())
        .sum()
}

pub fn js(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl2(p, &m) + 0.5 * kl2(q, &m)
}

/// Divergence attention: returns (J, output).
pub fn jsa(x: &Mat, w_mu: &[f64], w_s: &[f64], w_vf: &Mat, w_vb: &Mat, eps: f64) -> (Mat, Mat) {
    let l = x.len();
    let (f, b) = differences(x);
    let cov = pooled_covariance(&f, &b);
    let zf = standardize(&f, &cov, w_mu, w_s, eps);
    let zb = standardize(&b, &cov, w_mu, w_s, eps);
    let mut j = zeros(l, l);
    for a in 0..l {
        for c in 0..l {
            j[a][c] = js(&softmax(&zf[a]), &softmax(&zb[c]));
        }
    }
    let vf = matmul(&zf, w_vf);
    let vb = matmul(&zb, w_vb);
    let mut jt = zeros(l, l);
    for a in 0..l {
        for c in 0..l {
            jt[a][c] = j[c][a];
        }
    }
    let fwd = matmul(&j, &vf);
    let bwd = matmul(&jt, &vb);
    let out = fwd
        .iter()
        .zip(&bwd)
        .map(|(r1, r2)| r1.iter().zip(r2).map(|(a, b)| a + b).collect())
        .collect();
    (j, out)
}
