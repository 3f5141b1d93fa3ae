//! Naive-loop reference implementations shared by the integration tests.
//!
//! Everything here works on flat row-major `Vec<f64>` with explicit
//! dimensions and deliberately avoids the library's kernels.

#![allow(dead_code)]

use rand::Rng;

pub fn rand_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Same-padded stride-1 convolution: `x[n,c,h,w]`, `k[o,c,kh,kw]`, `b[o]`.
pub fn conv2d(x: &[f64], k: &[f64], b: &[f64], dims: [usize; 6]) -> Vec<f64> {
    let [n, c, h, w, o, ks] = dims;
    let pad = (ks / 2) as isize;
    let mut out = vec![0.0; n * o * h * w];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..h {
                for xw in 0..w {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xw as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k[((oi * c + ci) * ks + ky) * ks + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * o + oi) * h + y) * w + xw] = acc;
                }
            }
        }
    }
    out
}

/// Non-overlapping max pooling over the last two axes. An axis shorter
/// than the window is left as is; trailing cells that do not fill a
/// window are dropped.
pub fn maxpool2d(x: &[f64], planes: usize, h: usize, w: usize, win: usize) -> (Vec<f64>, usize, usize) {
    let (oh, wy) = if h < win { (h, 1) } else { (h / win, win) };
    let (ow, wx) = if w < win { (w, 1) } else { (w / win, win) };
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for xw in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..wy {
                    for dx in 0..wx {
                        best = best.max(x[(p * h + y * wy + dy) * w + xw * wx + dx]);
                    }
                }
                out.push(best);
            }
        }
    }
    (out, oh, ow)
}

/// `x[r, d_in] · w[d_in, d_out] + b`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, r: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * d_out];
    for i in 0..r {
        for j in 0..d_out {
            let mut acc = b.map_or(0.0, |b| b[j]);
            for k in 0..d_in {
                acc += x[i * d_in + k] * w[k * d_out + j];
            }
            out[i * d_out + j] = acc;
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    linear(a, b, None, m, k, n)
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Softmax of a `[r, c]` matrix along `axis` (0 = down columns, 1 = along rows).
pub fn softmax2(x: &[f64], r: usize, c: usize, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    if axis == 1 {
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                out[i * c + j] = (row[j] - m).exp() / z;
            }
        }
    } else {
        let t = softmax2(&transpose(x, r, c), c, r, 1);
        out = transpose(&t, c, r);
    }
    out
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Row-wise layer normalisation with biased variance.
pub fn layernorm(x: &[f64], gain: &[f64], shift: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * gain[j] + shift[j]);
        }
    }
    out
}

pub struct MhaWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub gain: &'a [f64],
    pub shift: &'a [f64],
}

/// One attention block without dropout. Returns the output `[tq, d]`
/// and per-head weights `[tq, tkv]`.
#[allow(clippy::too_many_arguments)]
pub fn mha_block(
    hq: &[f64],
    hkv: &[f64],
    w: &MhaWeights<'_>,
    tq: usize,
    tkv: usize,
    d_kv: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let q = matmul(hq, w.wq, tq, d, d);
    let k = matmul(hkv, w.wk, tkv, d_kv, d);
    let v = matmul(hkv, w.wv, tkv, d_kv, d);
    let dh = d / heads;
    let mut concat = vec![0.0; tq * d];
    let mut maps = Vec::new();
    for h in 0..heads {
        let mut scores = vec![0.0; tq * tkv];
        for i in 0..tq {
            for j in 0..tkv {
                let mut s = 0.0;
                for e in 0..dh {
                    s += q[i * d + h * dh + e] * k[j * d + h * dh + e];
                }
                scores[i * tkv + j] = s / (dh as f64).sqrt();
            }
        }
        let a = softmax2(&scores, tq, tkv, 1);
        for i in 0..tq {
            for e in 0..dh {
                let mut acc = 0.0;
                for j in 0..tkv {
                    acc += a[i * tkv + j] * v[j * d + h * dh + e];
                }
                concat[i * d + h * dh + e] = acc;
            }
        }
        maps.push(a);
    }
    let proj = matmul(&concat, w.wo, tq, d, d);
    let resid: Vec<f64> = proj.iter().zip(hq).map(|(a, b)| a + b).collect();
    (layernorm(&resid, w.gain, w.shift, d, 1e-5), maps)
}

pub struct PoolHeadWeights {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub wv: Vec<f64>,
}

/// Multi-head attention pooling of `x[t, d]`.
pub fn attention_pool(x: &[f64], t: usize, d: usize, attn: usize, dh: usize, heads: &[PoolHeadWeights]) -> Vec<f64> {
    let mut out = Vec::new();
    for h in heads {
        let mut scores = vec![0.0; t];
        for (i, s) in scores.iter_mut().enumerate() {
            for a in 0..attn {
                let mut z = 0.0;
                for k in 0..d {
                    z += x[i * d + k] * h.w1[k * attn + a];
                }
                *s += z.tanh() * h.w2[a];
            }
        }
        let wts = softmax2(&scores, t, 1, 0);
        for e in 0..dh {
            let mut acc = 0.0;
            for i in 0..t {
                let mut val = 0.0;
                for k in 0..d {
                    val += x[i * d + k] * h.wv[k * dh + e];
                }
                acc += wts[i] * val;
            }
            out.push(acc);
        }
    }
    out
}

/// `−Σ q_i log softmax(z / T)_i`, summed term by term.
pub fn distill(z: &[f64], q: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z_sum: f64 = scaled.iter().map(|v| (v - m).exp()).sum();
    let mut loss = 0.0;
    for i in 0..z.len() {
        let log_p = scaled[i] - m - z_sum.ln();
        loss -= q[i] * log_p;
    }
    loss
}

pub fn entropy(q: &[f64]) -> f64 {
    q.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

/// Random probability vector; some entries may be exactly zero.
pub fn rand_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                -rng.random_range(1e-12f64..1.0).ln()
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut one = vec![0.0; k];
        one[0] = 1.0;
        return one;
    }
    raw.iter().map(|v| v / s).collect()
}

/// Per-class accuracy averaged over classes present in `labels`.
pub fn macro_accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut sum = 0.0;
    for &c in &classes {
        let mut hit = 0;
        let mut n = 0;
        for i in 0..labels.len() {
            if labels[i] == c {
                n += 1;
                if pred[i] == c {
                    hit += 1;
                }
            }
        }
        sum += hit as f64 / n as f64;
    }
    sum / classes.len() as f64
}
pub mod grad;
pub mod checks;
