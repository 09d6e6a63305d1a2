//! Incremental decoding with per-layer key/value caches.
//!
//! Uses the same row kernels as the tape, in the same order, so each row it
//! produces is bit-identical to the matching row of a full recomputation.
//! Masked key positions contribute exact zeros to a softmax row, so a cached
//! row only needs the visible prefix.

use crate::attention::LN_EPS;
use crate::block::{self, CoConModel, COCON_GROUP};
use crate::error::{Error, Result};
use crate::lm::block_prefix;
use crate::tensor::kernels;
use crate::tensor::{ParameterStore, Tensor};
use crate::tokenizer::TokenId;

struct BlockWeights<'a> {
    ln1: (&'a [f64], &'a [f64]),
    wq: &'a [f64],
    bq: &'a [f64],
    wk: &'a [f64],
    bk: &'a [f64],
    wv: &'a [f64],
    bv: &'a [f64],
    wo: &'a [f64],
    bo: &'a [f64],
    ln2: (&'a [f64], &'a [f64]),
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

impl<'a> BlockWeights<'a> {
    fn load(store: &'a ParameterStore, prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<&'a [f64]> { Ok(store.value(&format!("{prefix}/{name}"))?.data()) };
        Ok(BlockWeights {
            ln1: (get("ln1/g")?, get("ln1/b")?),
            wq: get("attn/wq")?,
            bq: get("attn/bq")?,
            wk: get("attn/wk")?,
            bk: get("attn/bk")?,
            wv: get("attn/wv")?,
            bv: get("attn/bv")?,
            wo: get("attn/wo")?,
            bo: get("attn/bo")?,
            ln2: (get("ln2/g")?, get("ln2/b")?),
            w1: get("mlp/w1")?,
            b1: get("mlp/b1")?,
            w2: get("mlp/w2")?,
            b2: get("mlp/b2")?,
        })
    }
}

fn norm_row(x: &[f64], ln: (&[f64], &[f64])) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm_row(x, ln.0, ln.1, LN_EPS, &mut out);
    out
}

fn linear_row(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = kernels::matmul(x, w, 1, x.len(), n);
    kernels::add_row_bias(&mut y, b);
    y
}

fn add_rows(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One query row against `n` cached keys. `bias[j]` is added after scaling.
fn attend_row(q: &[f64], keys: &[f64], values: &[f64], bias: &[f64], n_heads: usize) -> Vec<f64> {
    let d = q.len();
    let n = bias.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; n];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &keys[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for (qv, kv) in q[cols.clone()].iter().zip(&k[cols.clone()]) {
                acc += qv * kv;
            }
            *s = acc * scale + bias[j];
        }
        kernels::softmax_row(&mut scores);
        let o = &mut out[cols.clone()];
        for (j, &p) in scores.iter().enumerate() {
            let v = &values[j * d + cols.start..j * d + cols.end];
            for (ov, vv) in o.iter_mut().zip(v) {
                *ov += p * vv;
            }
        }
    }
    out
}

#[derive(Default, Clone)]
struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl KvCache {
    fn len(&self, d: usize) -> usize {
        self.keys.len() / d
    }
}

/// Residual attention + FF on one row against the cached rows.
fn block_row(x: &[f64], w: &BlockWeights, cache: &mut KvCache, bias: &[f64], n_heads: usize) -> Vec<f64> {
    let xn = norm_row(x, w.ln1);
    let q = linear_row(&xn, w.wq, w.bq);
    cache.keys.extend(linear_row(&xn, w.wk, w.bk));
    cache.values.extend(linear_row(&xn, w.wv, w.bv));
    let a = attend_row(&q, &cache.keys, &cache.values, bias, n_heads);
    let a = linear_row(&a, w.wo, w.bo);
    let x = add_rows(x, &a);
    let xn = norm_row(&x, w.ln2);
    let mut f = linear_row(&xn, w.w1, w.b1);
    f.iter_mut().for_each(|v| *v = kernels::gelu(*v));
    let f = linear_row(&f, w.w2, w.b2);
    add_rows(&x, &f)
}

/// Content keys/values and per-column bias for the block.
struct ContentMemory {
    kv: KvCache,
    lens: Vec<usize>,
    tau: f64,
    mask_t: Option<usize>,
}

/// Conditioning state handed to [`Decoder::new`].
pub struct Conditioning<'c> {
    /// Content representations from the lower blocks, one tensor per content.
    pub reps: &'c [Tensor],
    pub tau: f64,
    /// Position where the block starts rewriting hidden states.
    pub from: usize,
    pub self_token_mask: Option<usize>,
}

pub struct Decoder<'a> {
    model: &'a CoConModel,
    wte: &'a Tensor,
    wpe: &'a Tensor,
    wte_t: Vec<f64>,
    ln_f: (&'a [f64], &'a [f64]),
    blocks: Vec<BlockWeights<'a>>,
    caches: Vec<KvCache>,
    cocon: Option<(BlockWeights<'a>, KvCache, ContentMemory, usize)>,
    len: usize,
}

impl<'a> Decoder<'a> {
    /// A decoder for the plain base model (`cond = None`) or for the model
    /// with the block applied from `cond.from`.
    pub fn new(model: &'a CoConModel, store: &'a ParameterStore, cond: Option<Conditioning<'_>>) -> Result<Self> {
        let cfg = model.config();
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockWeights::load(store, &block_prefix(l)))
            .collect::<Result<Vec<_>>>()?;
        let wte = store.value("lm/wte")?;
        let cocon = match cond {
            None => None,
            Some(c) => {
                if c.reps.is_empty() {
                    return Err(Error::config("content set is empty; use the null content"));
                }
                let w = BlockWeights::load(store, COCON_GROUP)?;
                let mut kv = KvCache::default();
                for rep in c.reps {
                    if rep.cols() != cfg.d_model {
                        return Err(Error::shape("content", rep.shape(), &[cfg.d_model]));
                    }
                    for r in 0..rep.rows() {
                        let xn = norm_row(rep.row(r), w.ln1);
                        kv.keys.extend(linear_row(&xn, w.wk, w.bk));
                        kv.values.extend(linear_row(&xn, w.wv, w.bv));
                    }
                }
                let memory = ContentMemory {
                    kv,
                    lens: c.reps.iter().map(Tensor::rows).collect(),
                    tau: c.tau,
                    mask_t: c.self_token_mask,
                };
                Some((w, KvCache::default(), memory, c.from))
            }
        };
        Ok(Decoder {
            model,
            wte,
            wpe: store.value("lm/wpe")?,
            wte_t: kernels::transpose(wte.data(), wte.rows(), wte.cols()),
            ln_f: (store.value("lm/ln_f/g")?.data(), store.value("lm/ln_f/b")?.data()),
            blocks,
            caches: vec![KvCache::default(); cfg.n_layers],
            cocon,
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn content_len(&self) -> usize {
        self.cocon.as_ref().map_or(0, |(_, _, m, _)| m.lens.iter().sum())
    }

    /// Feeds the token at the next position and returns that position's logits.
    pub fn push(&mut self, token: TokenId) -> Result<Vec<f64>> {
        let cfg = self.model.config();
        let i = self.len;
        let needed = self.content_len() + i + 1;
        if i >= cfg.max_seq_len || needed > cfg.max_seq_len {
            return Err(Error::ContextOverflow {
                needed: needed.max(i + 1),
                limit: cfg.max_seq_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::TargetOutOfRange {
                id: token as usize,
                vocab: cfg.vocab_size,
            });
        }
        let d = cfg.d_model;
        let causal_row = vec![0.0; i + 1];
        let mut x = add_rows(self.wte.row(token as usize), self.wpe.row(i));
        for l in 0..cfg.n_alpha {
            x = block_row(&x, &self.blocks[l], &mut self.caches[l], &causal_row, cfg.n_heads);
        }
        if let Some((w, cache, memory, from)) = self.cocon.as_mut() {
            let xn = norm_row(&x, w.ln1);
            cache.keys.extend(linear_row(&xn, w.wk, w.bk));
            cache.values.extend(linear_row(&xn, w.wv, w.bv));
            if i >= *from {
                let lc = memory.kv.len(d);
                let l0 = memory.lens[0];
                let barred = block::masked_column(memory.mask_t, i, l0);
                let mut bias = Vec::with_capacity(lc + i + 1);
                bias.extend((0..lc).map(|j| block::content_bias(memory.tau, barred == Some(j))));
                bias.extend_from_slice(&causal_row);
                let keys = [memory.kv.keys.as_slice(), cache.keys.as_slice()].concat();
                let values = [memory.kv.values.as_slice(), cache.values.as_slice()].concat();
                let q = linear_row(&xn, w.wq, w.bq);
                let a = attend_row(&q, &keys, &values, &bias, cfg.n_heads);
                let a = linear_row(&a, w.wo, w.bo);
                let y = add_rows(&x, &a);
                let yn = norm_row(&y, w.ln2);
                let mut f = linear_row(&yn, w.w1, w.b1);
                f.iter_mut().for_each(|v| *v = kernels::gelu(*v));
                let f = linear_row(&f, w.w2, w.b2);
                x = add_rows(&y, &f);
            }
        }
        for l in cfg.n_alpha..cfg.n_layers {
            x = block_row(&x, &self.blocks[l], &mut self.caches[l], &causal_row, cfg.n_heads);
        }
        let xn = norm_row(&x, self.ln_f);
        self.len += 1;
        Ok(kernels::matmul(&xn, &self.wte_t, 1, d, cfg.vocab_size))
    }
}
