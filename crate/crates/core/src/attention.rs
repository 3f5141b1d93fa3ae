//! Multi-head attention blocks, sinusoidal positions and attention pooling.
//!
//! One [`mha_block`] is exactly
//!
//! ```text
//! Q = Hq·W_Q    K = Hkv·W_K    V = Hkv·W_V
//! O_i = softmax(Q_i K_iᵀ / √d) V_i          (per head, d = D_model / heads)
//! O_a = concat(O_1..O_n) · W_O
//! O   = LayerNorm(Dropout(O_a) + Hq)
//! ```
//!
//! with no feed-forward sublayer. Self-attention is the case `Hq == Hkv`.

use rand::Rng;

use crate::models::params::{BoundParams, Init, ParamDecl};
use crate::tensor::{invalid, shape_err, Real, Result, Tape, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// `PE[t, 2i] = sin(t / 10000^(2i/D))`, `PE[t, 2i+1] = cos(...)`.
pub fn positional_encoding<F: Real>(t: usize, d: usize) -> Result<Tensor<F>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(invalid("positional_encoding", format!("width {d} must be even")));
    }
    Ok(Tensor::from_fn(&[t, d], |idx| {
        let (pos, col) = (idx / d, idx % d);
        let pair = (col / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        F::lit(if col % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Tape handles for one attention block.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln_gain: Var,
    pub ln_shift: Var,
    pub n_heads: usize,
    pub dropout: f64,
}

impl MhaParams {
    /// Declarations for a block reading queries of width `d_query` and
    /// keys/values of width `d_kv`. The residual needs `d_query == d_model`.
    pub fn declare(prefix: &str, d_query: usize, d_kv: usize, d_model: usize) -> Vec<ParamDecl> {
        let proj = |name: &str, d_in: usize| {
            ParamDecl::new(
                format!("{prefix}.{name}"),
                &[d_in, d_model],
                Init::XavierUniform {
                    fan_in: d_in,
                    fan_out: d_model,
                },
            )
        };
        vec![
            proj("w_q", d_query),
            proj("w_k", d_kv),
            proj("w_v", d_kv),
            proj("w_o", d_model),
            ParamDecl::new(format!("{prefix}.ln_gain"), &[d_model], Init::Ones),
            ParamDecl::new(format!("{prefix}.ln_shift"), &[d_model], Init::Zeros),
        ]
    }

    pub fn bind(params: &BoundParams, prefix: &str, n_heads: usize, dropout: f64) -> Result<Self> {
        let get = |name: &str| params.get(&format!("{prefix}.{name}"));
        Ok(Self {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_o: get("w_o")?,
            ln_gain: get("ln_gain")?,
            ln_shift: get("ln_shift")?,
            n_heads,
            dropout,
        })
    }
}

/// Block output plus the per-head `[T_q, T_kv]` attention maps.
#[derive(Debug, Clone)]
pub struct MhaOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn mha_block<F: Real, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    query_src: Var,
    kv_src: Var,
    params: &MhaParams,
    training: bool,
    rng: &mut R,
) -> Result<MhaOutput> {
    let (t_q, d_query) = tape.value(query_src).dims2()?;
    let (t_kv, d_kv) = tape.value(kv_src).dims2()?;
    if t_q == 0 || t_kv == 0 {
        return Err(invalid("mha_block", "empty query or key sequence"));
    }
    let (wq_in, d_model) = tape.value(params.w_q).dims2()?;
    let (wk_in, _) = tape.value(params.w_k).dims2()?;
    if wq_in != d_query || wk_in != d_kv {
        return Err(shape_err(
            "mha_block",
            format!("inputs of width {d_query}/{d_kv} against projections {wq_in}/{wk_in}"),
        ));
    }
    if d_query != d_model {
        return Err(shape_err(
            "mha_block",
            format!("residual needs query width {d_query} == model width {d_model}"),
        ));
    }
    let heads = params.n_heads;
    if heads == 0 || d_model % heads != 0 {
        return Err(invalid("mha_block", format!("{d_model} not divisible into {heads} heads")));
    }
    let d = d_model / heads;
    let inv_sqrt_d = F::lit(1.0 / (d as f64).sqrt());

    let q = tape.matmul(query_src, params.w_q)?;
    let k = tape.matmul(kv_src, params.w_k)?;
    let v = tape.matmul(kv_src, params.w_v)?;

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * d, d)?;
        let kh = tape.slice(k, 1, h * d, d)?;
        let vh = tape.slice(v, 1, h * d, d)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt_d)?;
        let attn = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let concat = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let projected = tape.matmul(concat, params.w_o)?;
    let dropped = tape.dropout(projected, params.dropout, training, rng)?;
    let residual = tape.add(dropped, query_src)?;
    let output = tape.layernorm(residual, params.ln_gain, params.ln_shift, LAYERNORM_EPS)?;
    Ok(MhaOutput { output, weights })
}

/// Applies `layers` in order with queries, keys and values all taken
/// from the running representation.
pub fn self_attention_stack<F: Real, R: Rng + ?Sized>(
    tape: &mut Tape<F>,
    input: Var,
    layers: &[MhaParams],
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    layers.iter().try_fold(input, |x, layer| {
        mha_block(tape, x, x, layer, training, rng).map(|o| o.output)
    })
}

/// One scoring head of the pooling layer.
#[derive(Debug, Clone)]
pub struct PoolHead {
    /// `[D, attn_dim]`
    pub w1: Var,
    /// `[attn_dim, 1]`
    pub w2: Var,
    /// `[D, head_dim]`
    pub wv: Var,
}

#[derive(Debug, Clone)]
pub struct AttnPoolParams {
    pub heads: Vec<PoolHead>,
}

impl AttnPoolParams {
    /// Value width per head: the input width split across heads, at least 1.
    pub fn head_dim(d_in: usize, n_heads: usize) -> usize {
        (d_in / n_heads.max(1)).max(1)
    }

    pub fn declare(prefix: &str, d_in: usize, n_heads: usize, attn_dim: usize) -> Vec<ParamDecl> {
        let head_dim = Self::head_dim(d_in, n_heads);
        (0..n_heads)
            .flat_map(|h| {
                let p = format!("{prefix}.head{h}");
                [
                    ParamDecl::new(
                        format!("{p}.w1"),
                        &[d_in, attn_dim],
                        Init::XavierUniform {
                            fan_in: d_in,
                            fan_out: attn_dim,
                        },
                    ),
                    ParamDecl::new(
                        format!("{p}.w2"),
                        &[attn_dim, 1],
                        Init::XavierUniform {
                            fan_in: attn_dim,
                            fan_out: 1,
                        },
                    ),
                    ParamDecl::new(
                        format!("{p}.wv"),
                        &[d_in, head_dim],
                        Init::XavierUniform {
                            fan_in: d_in,
                            fan_out: head_dim,
                        },
                    ),
                ]
            })
            .collect()
    }

    pub fn bind(params: &BoundParams, prefix: &str, n_heads: usize) -> Result<Self> {
        let heads = (0..n_heads)
            .map(|h| {
                let p = format!("{prefix}.head{h}");
                Ok(PoolHead {
                    w1: params.get(&format!("{p}.w1"))?,
                    w2: params.get(&format!("{p}.w2"))?,
                    wv: params.get(&format!("{p}.wv"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { heads })
    }

    pub fn output_dim(d_in: usize, n_heads: usize) -> usize {
        n_heads * Self::head_dim(d_in, n_heads)
    }
}

/// Pooled vector `[n_heads·head_dim]` plus per-head `[T, 1]` weights over time.
#[derive(Debug, Clone)]
pub struct PoolOutput {
    pub pooled: Var,
    pub weights: Vec<Var>,
}

/// Collapses `[T, D]` to one vector: per head, softmax over time of
/// `tanh(x·W1)·w2` weights a sum of the value projections `x·Wv`.
pub fn attention_pool<F: Real>(
    tape: &mut Tape<F>,
    input: Var,
    params: &AttnPoolParams,
) -> Result<PoolOutput> {
    let (t, _) = tape.value(input).dims2()?;
    if t == 0 || params.heads.is_empty() {
        return Err(invalid("attention_pool", "need at least one frame and one head"));
    }
    let mut pooled = Vec::with_capacity(params.heads.len());
    let mut weights = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let hidden = tape.matmul(input, head.w1)?;
        let hidden = tape.tanh(hidden)?;
        let scores = tape.matmul(hidden, head.w2)?;
        let attn = tape.softmax(scores, 0)?;
        let values = tape.matmul(input, head.wv)?;
        let attn_t = tape.transpose(attn)?;
        pooled.push(tape.matmul(attn_t, values)?);
        weights.push(attn);
    }
    let joined = if pooled.len() == 1 {
        pooled[0]
    } else {
        tape.concat(&pooled, 1)?
    };
    let width = tape.value(joined).len();
    let pooled = tape.reshape(joined, &[width])?;
    Ok(PoolOutput { pooled, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let pe: Tensor<f64> = positional_encoding(3, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.at(&[0, 2 * i]), 0.0);
            assert_eq!(pe.at(&[0, 2 * i + 1]), 1.0);
        }
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(positional_encoding::<f32>(4, 7).is_err());
    }

    #[test]
    fn pool_head_dim_splits_input() {
        assert_eq!(AttnPoolParams::head_dim(256, 4), 64);
        assert_eq!(AttnPoolParams::output_dim(256, 4), 256);
        assert_eq!(AttnPoolParams::head_dim(2, 4), 1);
    }
}
