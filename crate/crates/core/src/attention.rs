//! Transformer block pieces shared by the base model and the content block.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// Additive bias that removes an attention entry.
pub const MASK: f64 = -1e9;
pub const LN_EPS: f64 = 1e-5;

pub(crate) struct Norm {
    pub gain: Var,
    pub shift: Var,
}

pub(crate) struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub(crate) struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub(crate) struct BlockVars {
    pub ln1: Norm,
    pub attn: AttnVars,
    pub ln2: Norm,
    pub mlp: MlpVars,
}

pub(crate) fn bind_norm(tape: &mut Tape, store: &ParameterStore, prefix: &str) -> Result<Norm> {
    Ok(Norm {
        gain: tape.param(store, &format!("{prefix}/g"))?,
        shift: tape.param(store, &format!("{prefix}/b"))?,
    })
}

pub(crate) fn bind_block(tape: &mut Tape, store: &ParameterStore, prefix: &str) -> Result<BlockVars> {
    let p = |name: &str| format!("{prefix}/{name}");
    Ok(BlockVars {
        ln1: bind_norm(tape, store, &p("ln1"))?,
        attn: AttnVars {
            wq: tape.param(store, &p("attn/wq"))?,
            bq: tape.param(store, &p("attn/bq"))?,
            wk: tape.param(store, &p("attn/wk"))?,
            bk: tape.param(store, &p("attn/bk"))?,
            wv: tape.param(store, &p("attn/wv"))?,
            bv: tape.param(store, &p("attn/bv"))?,
            wo: tape.param(store, &p("attn/wo"))?,
            bo: tape.param(store, &p("attn/bo"))?,
        },
        ln2: bind_norm(tape, store, &p("ln2"))?,
        mlp: MlpVars {
            w1: tape.param(store, &p("mlp/w1"))?,
            b1: tape.param(store, &p("mlp/b1"))?,
            w2: tape.param(store, &p("mlp/w2"))?,
            b2: tape.param(store, &p("mlp/b2"))?,
        },
    })
}

pub(crate) fn init_norm(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}/g"), Tensor::filled(&[d], 1.0))?;
    store.insert(format!("{prefix}/b"), Tensor::zeros(&[d]))
}

/// GPT-2 style init: N(0, 0.02) weights, zero biases, residual output
/// projections scaled down by `residual_scale`.
pub(crate) fn init_block(
    store: &mut ParameterStore,
    prefix: &str,
    d: usize,
    d_ff: usize,
    residual_scale: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let std = 0.02;
    init_norm(store, &format!("{prefix}/ln1"), d)?;
    for name in ["q", "k", "v"] {
        store.insert_normal(&format!("{prefix}/attn/w{name}"), &[d, d], std, rng)?;
        store.insert(format!("{prefix}/attn/b{name}"), Tensor::zeros(&[d]))?;
    }
    store.insert_normal(&format!("{prefix}/attn/wo"), &[d, d], std * residual_scale, rng)?;
    store.insert(format!("{prefix}/attn/bo"), Tensor::zeros(&[d]))?;
    init_norm(store, &format!("{prefix}/ln2"), d)?;
    store.insert_normal(&format!("{prefix}/mlp/w1"), &[d, d_ff], std, rng)?;
    store.insert(format!("{prefix}/mlp/b1"), Tensor::zeros(&[d_ff]))?;
    store.insert_normal(&format!("{prefix}/mlp/w2"), &[d_ff, d], std * residual_scale, rng)?;
    store.insert(format!("{prefix}/mlp/b2"), Tensor::zeros(&[d]))
}

pub(crate) fn norm(tape: &mut Tape, x: Var, n: &Norm) -> Result<Var> {
    tape.layer_norm(x, n.gain, n.shift, LN_EPS)
}

/// `x · w + b`
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub(crate) fn mlp(tape: &mut Tape, x: Var, m: &MlpVars) -> Result<Var> {
    let h = linear(tape, x, m.w1, m.b1)?;
    let h = tape.gelu(h);
    linear(tape, h, m.w2, m.b2)
}

/// Multi-head scaled dot-product attention over precomputed projections.
///
/// `q` is `[nq×d]`, `k` and `v` are `[nk×d]`, `bias` is `[nq×nk]`. Returns the
/// concatenated head outputs (before the output projection) and the per-head
/// attention probabilities.
pub(crate) fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    bias: &Tensor,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_masked(scores, Some(bias))?;
        heads.push(tape.matmul(probs, vh)?);
        weights.push(probs);
    }
    let out = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok((out, weights))
}

/// `[n×n]` bias hiding future positions.
pub fn causal_bias(n: usize) -> Tensor {
    let mut b = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            b.data_mut()[i * n + j] = MASK;
        }
    }
    b
}

/// Standard pre-norm transformer block with causal self-attention.
pub(crate) fn causal_block(tape: &mut Tape, x: Var, b: &BlockVars, n_heads: usize) -> Result<Var> {
    let n = tape.value(x).rows();
    let xn = norm(tape, x, &b.ln1)?;
    let q = linear(tape, xn, b.attn.wq, b.attn.bq)?;
    let k = linear(tape, xn, b.attn.wk, b.attn.bk)?;
    let v = linear(tape, xn, b.attn.wv, b.attn.bv)?;
    let (a, _) = attend(tape, q, k, v, &causal_bias(n), n_heads)?;
    let a = linear(tape, a, b.attn.wo, b.attn.bo)?;
    let x = tape.add(x, a)?;
    let xn = norm(tape, x, &b.ln2)?;
    let f = mlp(tape, xn, &b.mlp)?;
    tape.add(x, f)
}
