//! Forward and backward passes for one sequence through the pre-norm
//! causal transformer. Row-vector convention: `y = x W` with `W` stored
//! row-major as `in x out`.

use super::layout::Layout;
use super::ModelConfig;
use crate::belief::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `a (n x k) * b (k x m)`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for l in 0..k {
            let x = a[i * k + l];
            if x == 0.0 {
                continue;
            }
            for (o, w) in row.iter_mut().zip(&b[l * m..(l + 1) * m]) {
                *o += x * w;
            }
        }
    }
    out
}

/// `out (k x m) += a^T b` for `a (n x k)`, `b (n x m)`.
fn add_at_b(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for l in 0..k {
            let x = a[i * k + l];
            if x == 0.0 {
                continue;
            }
            for (o, y) in out[l * m..(l + 1) * m].iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// `a (n x m) * b^T` for `b (k x m)`, giving `n x k`.
fn matmul_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            out[i * k + j] = arow
                .iter()
                .zip(&b[j * m..(j + 1) * m])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

fn add_rows(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn sum_rows(x: &[f64], width: usize, out: &mut [f64]) {
    for row in x.chunks(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

struct Norm {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], d: usize) -> (Vec<f64>, Norm) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let h = (row[c] - mean) * r;
            xhat[i * d + c] = h;
            y[i * d + c] = gamma[c] * h + beta[c];
        }
    }
    (y, Norm { xhat, rstd })
}

fn layer_norm_backward(
    dy: &[f64],
    norm: &Norm,
    gamma: &[f64],
    d: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &norm.xhat[i * d..(i + 1) * d];
        for c in 0..d {
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
            dxhat[c] = dyr[c] * gamma[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for c in 0..d {
            dx[i * d + c] = norm.rstd[i] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    norm1: Norm,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `n x n`, zero above the diagonal.
    p: Vec<f64>,
    o: Vec<f64>,
    norm2: Norm,
    b: Vec<f64>,
    h: Vec<f64>,
    u: Vec<f64>,
}

pub(crate) struct Cache {
    layers: Vec<LayerCache>,
    normf: Norm,
    f: Vec<f64>,
}

/// Returns `n x out_width` logits and the activations needed for backward.
pub(crate) fn forward(
    cfg: &ModelConfig,
    lay: &Layout,
    w: &[f64],
    tokens: &[TokenId],
) -> (Vec<f64>, Cache) {
    let (n, d, hid) = (tokens.len(), cfg.dim, cfg.hidden);
    let scale = 1.0 / (d as f64).sqrt();
    let mut x = vec![0.0; n * d];
    for (j, &t) in tokens.iter().enumerate() {
        let te = &w[lay.tok_emb + t as usize * d..][..d];
        let pe = &w[lay.pos_emb + j * d..][..d];
        for c in 0..d {
            x[j * d + c] = te[c] + pe[c];
        }
    }

    let mut layers = Vec::with_capacity(lay.layers.len());
    for l in &lay.layers {
        let (a, norm1) = layer_norm(&x, &w[l.ln1_g..][..d], &w[l.ln1_b..][..d], d);
        let q = matmul(&a, &w[l.wq..][..d * d], n, d, d);
        let k = matmul(&a, &w[l.wk..][..d * d], n, d, d);
        let v = matmul(&a, &w[l.wv..][..d * d], n, d, d);
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            let qi = &q[i * d..(i + 1) * d];
            let row = &mut p[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = qi
                    .iter()
                    .zip(&k[j * d..(j + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    * scale;
                row[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for r in row[..=i].iter_mut() {
                *r = (*r - max).exp();
                z += *r;
            }
            row[..=i].iter_mut().for_each(|r| *r /= z);
        }
        let o = matmul(&p, &v, n, n, d);
        let proj = matmul(&o, &w[l.wo..][..d * d], n, d, d);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }

        let (b, norm2) = layer_norm(&x, &w[l.ln2_g..][..d], &w[l.ln2_b..][..d], d);
        let mut h = matmul(&b, &w[l.w1..][..d * hid], n, d, hid);
        add_rows(&mut h, &w[l.b1..][..hid]);
        let u: Vec<f64> = h.iter().map(|&z| gelu(z)).collect();
        let mut ff = matmul(&u, &w[l.w2..][..hid * d], n, hid, d);
        add_rows(&mut ff, &w[l.b2..][..d]);
        for (xv, fv) in x.iter_mut().zip(&ff) {
            *xv += fv;
        }
        layers.push(LayerCache {
            norm1,
            a,
            q,
            k,
            v,
            p,
            o,
            norm2,
            b,
            h,
            u,
        });
    }

    let (f, normf) = layer_norm(&x, &w[lay.lnf_g..][..d], &w[lay.lnf_b..][..d], d);
    let out = lay.out_width;
    let mut logits = matmul(&f, &w[lay.head_w..][..d * out], n, d, out);
    add_rows(&mut logits, &w[lay.head_b..][..out]);
    (logits, Cache { layers, normf, f })
}

/// Accumulates the parameter gradient for `dlogits` (`n x out_width`) into
/// `grad`.
pub(crate) fn backward(
    cfg: &ModelConfig,
    lay: &Layout,
    w: &[f64],
    tokens: &[TokenId],
    cache: &Cache,
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let (n, d, hid, out) = (tokens.len(), cfg.dim, cfg.hidden, lay.out_width);
    let scale = 1.0 / (d as f64).sqrt();

    add_at_b(
        &cache.f,
        dlogits,
        n,
        d,
        out,
        &mut grad[lay.head_w..][..d * out],
    );
    sum_rows(dlogits, out, &mut grad[lay.head_b..][..out]);
    let df = matmul_bt(dlogits, &w[lay.head_w..][..d * out], n, out, d);
    let (gg, gb) = grad[lay.lnf_g..].split_at_mut(d);
    let mut dx = layer_norm_backward(&df, &cache.normf, &w[lay.lnf_g..][..d], d, gg, &mut gb[..d]);

    for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
        // Feed-forward block.
        add_at_b(&c.u, &dx, n, hid, d, &mut grad[l.w2..][..hid * d]);
        sum_rows(&dx, d, &mut grad[l.b2..][..d]);
        let du = matmul_bt(&dx, &w[l.w2..][..hid * d], n, d, hid);
        let dh: Vec<f64> = du
            .iter()
            .zip(&c.h)
            .map(|(g, &z)| g * gelu_grad(z))
            .collect();
        add_at_b(&c.b, &dh, n, d, hid, &mut grad[l.w1..][..d * hid]);
        sum_rows(&dh, hid, &mut grad[l.b1..][..hid]);
        let db = matmul_bt(&dh, &w[l.w1..][..d * hid], n, hid, d);
        let (gg, gb) = grad[l.ln2_g..].split_at_mut(d);
        let dres = layer_norm_backward(&db, &c.norm2, &w[l.ln2_g..][..d], d, gg, &mut gb[..d]);
        for (a, b) in dx.iter_mut().zip(&dres) {
            *a += b;
        }

        // Attention block.
        add_at_b(&c.o, &dx, n, d, d, &mut grad[l.wo..][..d * d]);
        let dout = matmul_bt(&dx, &w[l.wo..][..d * d], n, d, d);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for i in 0..n {
            let doi = &dout[i * d..(i + 1) * d];
            let prow = &c.p[i * n..(i + 1) * n];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &c.v[j * d..(j + 1) * d];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += prow[j] * dp[j];
                for (g, x) in dv[j * d..(j + 1) * d].iter_mut().zip(doi) {
                    *g += prow[j] * x;
                }
            }
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for cidx in 0..d {
                    dq[i * d + cidx] += ds * c.k[j * d + cidx];
                    dk[j * d + cidx] += ds * c.q[i * d + cidx];
                }
            }
        }
        add_at_b(&c.a, &dq, n, d, d, &mut grad[l.wq..][..d * d]);
        add_at_b(&c.a, &dk, n, d, d, &mut grad[l.wk..][..d * d]);
        add_at_b(&c.a, &dv, n, d, d, &mut grad[l.wv..][..d * d]);
        let mut da = matmul_bt(&dq, &w[l.wq..][..d * d], n, d, d);
        for (src, off) in [(&dk, l.wk), (&dv, l.wv)] {
            for (a, b) in da
                .iter_mut()
                .zip(matmul_bt(src, &w[off..][..d * d], n, d, d))
            {
                *a += b;
            }
        }
        let (gg, gb) = grad[l.ln1_g..].split_at_mut(d);
        let dres = layer_norm_backward(&da, &c.norm1, &w[l.ln1_g..][..d], d, gg, &mut gb[..d]);
        for (a, b) in dx.iter_mut().zip(&dres) {
            *a += b;
        }
    }

    for (j, &t) in tokens.iter().enumerate() {
        let g = &dx[j * d..(j + 1) * d];
        for (a, b) in grad[lay.tok_emb + t as usize * d..][..d].iter_mut().zip(g) {
            *a += b;
        }
        for (a, b) in grad[lay.pos_emb + j * d..][..d].iter_mut().zip(g) {
            *a += b;
        }
    }
}
