//! Library ops against the naive loops in the parent module over random
//! instances. Each function returns the largest deviation it saw.

use crosstask_core::attention::{attention_pool as lib_pool, mha_block as lib_mha, AttnPoolParams, MhaParams, PoolHead};
use crosstask_core::tensor::{Tape, Tensor};
use crosstask_core::training::{distill_loss, macro_accuracy as lib_macro};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

pub fn conv2d_matches_direct_sum(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..cases {
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let ks = [1, 3, 5][rng.random_range(0..3)];
        let x = rand_vec(&mut rng, n * c * h * w, 1.0);
        let k = rand_vec(&mut rng, o * c * ks * ks, 1.0);
        let b = rand_vec(&mut rng, o, 1.0);
        let mut tape = Tape::new();
        let vx = tape.constant(t(&[n, c, h, w], x.clone()));
        let vk = tape.constant(t(&[o, c, ks, ks], k.clone()));
        let vb = tape.constant(t(&[o], b.clone()));
        let y = tape.conv2d(vx, vk, vb).unwrap();
        let want = conv2d(&x, &k, &b, [n, c, h, w, o, ks]);
        if tape.shape(y) != [n, o, h, w] {
            return f64::INFINITY;
        }
        worst = worst.max(max_abs_diff(tape.value(y).data(), &want));
    }
    worst
}

pub fn maxpool2d_matches_window_scan(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..cases {
        let (n, c) = (rng.random_range(1..3), rng.random_range(1..4));
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let win = rng.random_range(1..4);
        let x = rand_vec(&mut rng, n * c * h * w, 1.0);
        let mut tape = Tape::new();
        let vx = tape.constant(t(&[n, c, h, w], x.clone()));
        let y = tape.maxpool2d(vx, win).unwrap();
        let (want, oh, ow) = maxpool2d(&x, n * c, h, w, win);
        if tape.shape(y) != [n, c, oh, ow] {
            return f64::INFINITY;
        }
        worst = worst.max(max_abs_diff(tape.value(y).data(), &want));
    }
    worst
}

pub fn linear_matches_row_loops(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..cases {
        let (r, di, dout) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..9));
        let x = rand_vec(&mut rng, r * di, 2.0);
        let w = rand_vec(&mut rng, di * dout, 2.0);
        let b = rand_vec(&mut rng, dout, 2.0);
        let mut tape = Tape::new();
        let vx = tape.constant(t(&[r, di], x.clone()));
        let vw = tape.constant(t(&[di, dout], w.clone()));
        let vb = tape.constant(t(&[dout], b.clone()));
        let y = tape.linear(vx, vw, Some(vb)).unwrap();
        worst = worst.max(max_abs_diff(tape.value(y).data(), &linear(&x, &w, Some(&b), r, di, dout)));
    }
    worst
}

pub fn softmax_matches_explicit_normalisation(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..cases {
        let (r, c) = (rng.random_range(1..7), rng.random_range(1..7));
        let axis = rng.random_range(0..2);
        let x = rand_vec(&mut rng, r * c, 10.0);
        let mut tape = Tape::new();
        let vx = tape.constant(t(&[r, c], x.clone()));
        let y = tape.softmax(vx, axis).unwrap();
        worst = worst.max(max_abs_diff(tape.value(y).data(), &softmax2(&x, r, c, axis)));
        let ls = tape.log_softmax(vx).unwrap();
        let want: Vec<f64> = x.chunks(c).flat_map(log_softmax).collect();
        worst = worst.max(max_abs_diff(tape.value(ls).data(), &want));
    }
    worst
}

pub fn layernorm_matches_biased_variance_formula(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..cases {
        let (r, d) = (rng.random_range(1..6), rng.random_range(2..10));
        let x = rand_vec(&mut rng, r * d, 3.0);
        let g = rand_vec(&mut rng, d, 2.0);
        let s = rand_vec(&mut rng, d, 2.0);
        let mut tape = Tape::new();
        let vx = tape.constant(t(&[r, d], x.clone()));
        let vg = tape.constant(t(&[d], g.clone()));
        let vs = tape.constant(t(&[d], s.clone()));
        let y = tape.layernorm(vx, vg, vs, 1e-5).unwrap();
        worst = worst.max(max_abs_diff(tape.value(y).data(), &layernorm(&x, &g, &s, d, 1e-5)));
    }
    worst
}

pub fn mha_block_matches_per_head_loops(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..cases {
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        let (tq, tkv, dkv) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..7));
        let hq = rand_vec(&mut rng, tq * d, 1.0);
        let hkv = rand_vec(&mut rng, tkv * dkv, 1.0);
        let wq = rand_vec(&mut rng, d * d, 0.8);
        let wk = rand_vec(&mut rng, dkv * d, 0.8);
        let wv = rand_vec(&mut rng, dkv * d, 0.8);
        let wo = rand_vec(&mut rng, d * d, 0.8);
        let gain = rand_vec(&mut rng, d, 1.5);
        let shift = rand_vec(&mut rng, d, 0.5);
        let mut tape = Tape::new();
        let q = tape.constant(t(&[tq, d], hq.clone()));
        let kv = tape.constant(t(&[tkv, dkv], hkv.clone()));
        let params = MhaParams {
            w_q: tape.constant(t(&[d, d], wq.clone())),
            w_k: tape.constant(t(&[dkv, d], wk.clone())),
            w_v: tape.constant(t(&[dkv, d], wv.clone())),
            w_o: tape.constant(t(&[d, d], wo.clone())),
            ln_gain: tape.constant(t(&[d], gain.clone())),
            ln_shift: tape.constant(t(&[d], shift.clone())),
            n_heads: heads,
            dropout: 0.5,
        };
        let out = lib_mha(&mut tape, q, kv, &params, false, &mut drop_rng).unwrap();
        let w = MhaWeights {
            wq: &wq,
            wk: &wk,
            wv: &wv,
            wo: &wo,
            gain: &gain,
            shift: &shift,
        };
        let (want, maps) = mha_block(&hq, &hkv, &w, tq, tkv, dkv, d, heads);
        worst = worst.max(max_abs_diff(tape.value(out.output).data(), &want));
        for (got, want) in out.weights.iter().zip(&maps) {
            worst = worst.max(max_abs_diff(tape.value(*got).data(), want));
        }
    }
    worst
}

pub fn attention_pool_matches_weighted_sum(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..cases {
        let (tlen, d, attn) = (rng.random_range(1..8), rng.random_range(1..7), rng.random_range(1..6));
        let n_heads = rng.random_range(1..4);
        let dh = AttnPoolParams::head_dim(d, n_heads);
        let x = rand_vec(&mut rng, tlen * d, 2.0);
        let weights: Vec<PoolHeadWeights> = (0..n_heads)
            .map(|_| PoolHeadWeights {
                w1: rand_vec(&mut rng, d * attn, 1.0),
                w2: rand_vec(&mut rng, attn, 2.0),
                wv: rand_vec(&mut rng, d * dh, 1.0),
            })
            .collect();
        let mut tape = Tape::new();
        let vx = tape.constant(t(&[tlen, d], x.clone()));
        let heads = weights
            .iter()
            .map(|h| PoolHead {
                w1: tape.constant(t(&[d, attn], h.w1.clone())),
                w2: tape.constant(t(&[attn, 1], h.w2.clone())),
                wv: tape.constant(t(&[d, dh], h.wv.clone())),
            })
            .collect();
        let out = lib_pool(&mut tape, vx, &AttnPoolParams { heads }).unwrap();
        let want = attention_pool(&x, tlen, d, attn, dh, &weights);
        worst = worst.max(max_abs_diff(tape.value(out.pooled).data(), &want));
    }
    worst
}

pub fn distill_loss_matches_term_sum(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..cases {
        let k = rng.random_range(2..12);
        let z = rand_vec(&mut rng, k, 6.0);
        let q = rand_simplex(&mut rng, k);
        let temp = [1.0, 0.5, 2.0, 4.0][rng.random_range(0..4)];
        let got = distill_loss(&z, &q, temp).unwrap();
        worst = worst.max((got - distill(&z, &q, temp)).abs());
    }
    worst
}

pub fn macro_accuracy_matches_per_class_count(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..cases {
        let k = rng.random_range(1..6);
        let n = rng.random_range(1..40);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let got = lib_macro(&pred, &labels).unwrap();
        worst = worst.max((got - macro_accuracy(&pred, &labels)).abs());
    }
    worst
}

pub type OracleCheck = fn(usize) -> f64;

pub const ORACLE_SUITE: [(&str, OracleCheck); 9] = [
    ("conv2d", conv2d_matches_direct_sum),
    ("maxpool2d", maxpool2d_matches_window_scan),
    ("linear", linear_matches_row_loops),
    ("softmax", softmax_matches_explicit_normalisation),
    ("layernorm", layernorm_matches_biased_variance_formula),
    ("mha_block", mha_block_matches_per_head_loops),
    ("attention_pool", attention_pool_matches_weighted_sum),
    ("distill_loss", distill_loss_matches_term_sum),
    ("macro_accuracy", macro_accuracy_matches_per_class_count),
];

fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn permute_rows(x: &[f64], d: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect()
}

fn rand_mha(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, d: usize, heads: usize) -> MhaParams {
    let mut m = |shape: &[usize], s: f64| {
        let n = shape.iter().product();
        tape.constant(t(shape, rand_vec(rng, n, s)))
    };
    MhaParams {
        w_q: m(&[d, d], 0.8),
        w_k: m(&[d, d], 0.8),
        w_v: m(&[d, d], 0.8),
        w_o: m(&[d, d], 0.8),
        ln_gain: m(&[d], 1.5),
        ln_shift: m(&[d], 0.5),
        n_heads: heads,
        dropout: 0.0,
    }
}

fn rand_pool(tape: &mut Tape<f64>, rng: &mut ChaCha8Rng, d: usize, heads: usize, attn: usize) -> AttnPoolParams {
    let dh = AttnPoolParams::head_dim(d, heads);
    let heads = (0..heads)
        .map(|_| PoolHead {
            w1: tape.constant(t(&[d, attn], rand_vec(rng, d * attn, 1.0))),
            w2: tape.constant(t(&[attn, 1], rand_vec(rng, attn, 2.0))),
            wv: tape.constant(t(&[d, dh], rand_vec(rng, d * dh, 1.0))),
        })
        .collect();
    AttnPoolParams { heads }
}

/// Largest `‖f(Px) − P f(x)‖∞` for self-attention over random inputs and
/// row permutations.
pub fn self_attention_equivariance(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        let tl = rng.random_range(2..8);
        let x = rand_vec(&mut rng, tl * d, 1.5);
        let perm = random_perm(&mut rng, tl);
        let mut tape = Tape::new();
        let p = rand_mha(&mut tape, &mut rng, d, heads);
        let vx = tape.constant(t(&[tl, d], x.clone()));
        let vp = tape.constant(t(&[tl, d], permute_rows(&x, d, &perm)));
        let mut drop = ChaCha8Rng::seed_from_u64(0);
        let a = lib_mha(&mut tape, vx, vx, &p, false, &mut drop).unwrap();
        let b = lib_mha(&mut tape, vp, vp, &p, false, &mut drop).unwrap();
        let want = permute_rows(tape.value(a.output).data(), d, &perm);
        worst = worst.max(max_abs_diff(tape.value(b.output).data(), &want));
    }
    worst
}

/// Largest change of the pooled vector under a permutation of time steps.
pub fn pool_permutation_invariance(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (tl, d, heads, attn) = (rng.random_range(2..10), rng.random_range(1..8), rng.random_range(1..4), rng.random_range(1..6));
        let x = rand_vec(&mut rng, tl * d, 2.0);
        let perm = random_perm(&mut rng, tl);
        let mut tape = Tape::new();
        let p = rand_pool(&mut tape, &mut rng, d, heads, attn);
        let vx = tape.constant(t(&[tl, d], x.clone()));
        let vp = tape.constant(t(&[tl, d], permute_rows(&x, d, &perm)));
        let a = lib_pool(&mut tape, vx, &p).unwrap();
        let b = lib_pool(&mut tape, vp, &p).unwrap();
        worst = worst.max(max_abs_diff(tape.value(a.pooled).data(), tape.value(b.pooled).data()));
    }
    worst
}

/// Largest `|Σ_j w_ij − 1|` over every query row of every attention map
/// and every pooling head.
pub fn attention_weight_sums(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        let (tq, tkv) = (rng.random_range(1..8), rng.random_range(1..8));
        let mut tape = Tape::new();
        let p = rand_mha(&mut tape, &mut rng, d, heads);
        let q = tape.constant(t(&[tq, d], rand_vec(&mut rng, tq * d, 3.0)));
        let kv = tape.constant(t(&[tkv, d], rand_vec(&mut rng, tkv * d, 3.0)));
        let mut drop = ChaCha8Rng::seed_from_u64(0);
        let out = lib_mha(&mut tape, q, kv, &p, false, &mut drop).unwrap();
        for w in &out.weights {
            for row in tape.value(*w).data().chunks(tkv) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let pool = rand_pool(&mut tape, &mut rng, d, heads, 3);
        let pooled = lib_pool(&mut tape, kv, &pool).unwrap();
        for w in &pooled.weights {
            worst = worst.max((tape.value(*w).data().iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

/// Largest `|distill(ln q, q) − H(q)|` over strictly positive `q`.
pub fn distill_self_entropy_gap(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = rng.random_range(2..20);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1e-3..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let logits: Vec<f64> = q.iter().map(|v| v.ln()).collect();
        let got = distill_loss(&logits, &q, 1.0).unwrap();
        worst = worst.max((got - entropy(&q)).abs());
    }
    worst
}

/// Smallest `distill(z, q) − H(q)` over random logits and targets; Gibbs'
/// inequality says it is never negative.
pub fn distill_min_excess(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut lowest = f64::INFINITY;
    for _ in 0..cases {
        let k = rng.random_range(2..20);
        let q = rand_simplex(&mut rng, k);
        let z = rand_vec(&mut rng, k, 8.0);
        let got = distill_loss(&z, &q, 1.0).unwrap();
        lowest = lowest.min(got - entropy(&q));
    }
    lowest
}

/// `k · d^-1/2 · min(n^-1/2, n · w^-3/2)` for `k = 1/2`, evaluated with
/// integer square roots at 10^-60 resolution.
pub fn warmup_oracle(n: u64, d_model: u64, warmup_n: u64) -> f64 {
    use num_bigint::BigUint;
    let scale = BigUint::from(10u32).pow(120);
    let decay = (&scale / (BigUint::from(4u32) * d_model * n)).sqrt();
    let warm = (&scale * n * n / (BigUint::from(4u32) * d_model * warmup_n * warmup_n * warmup_n)).sqrt();
    let v = decay.min(warm);
    format!("{v}e-60").parse().unwrap()
}
