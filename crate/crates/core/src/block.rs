//! The content-conditioning block.
//!
//! Queries come from the hidden states at positions `from..T`. Keys and values
//! are the concatenation of every content sequence followed by the causal
//! hidden-state prefix, all projected with the same weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, attend, bind_block, init_block, linear, BlockVars, MASK};
use crate::error::{Error, Result};
use crate::lm::{LMConfig, LanguageModel};
use crate::tensor::{ParameterStore, Tape, Tensor, Var};
use crate::tokenizer::TokenId;

pub const COCON_GROUP: &str = "cocon";
pub const NULL_EMBEDDING: &str = "cocon/null_emb";

/// Fresh block parameters under `cocon/`, including the learned null content.
pub fn init_params(cfg: &LMConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    init_block(&mut store, COCON_GROUP, cfg.d_model, cfg.d_ff, residual_scale, &mut rng)?;
    store.insert_normal(NULL_EMBEDDING, &[1, cfg.d_model], 0.02, &mut rng)?;
    Ok(store)
}

/// Content representations plus conditioning controls.
///
/// `self_token_mask` holds the breakpoint `t` when content 0 is the
/// continuation `x[t..]` of the sequence being modelled; query `i` is then
/// barred from content-0 position `i + 1 - t`.
#[derive(Debug, Clone)]
pub struct ContentSet {
    pub reps: Vec<Var>,
    pub tau: f64,
    pub self_token_mask: Option<usize>,
}

impl ContentSet {
    pub fn new(reps: Vec<Var>, tau: f64) -> Self {
        ContentSet {
            reps,
            tau,
            self_token_mask: None,
        }
    }

    pub fn with_self_token_mask(mut self, t: usize) -> Self {
        self.self_token_mask = Some(t);
        self
    }
}

/// Output of one block application.
#[derive(Debug, Clone)]
pub struct CoConOutput {
    /// Transformed states for positions `from..T`.
    pub h_prime: Var,
    /// Per-head attention probabilities `[T-from × (content_len + T)]`.
    pub weights: Vec<Var>,
    pub content_lens: Vec<usize>,
}

impl CoConOutput {
    pub fn content_len(&self) -> usize {
        self.content_lens.iter().sum()
    }
}

/// Bias added to a content column.
pub(crate) fn content_bias(tau: f64, masked: bool) -> f64 {
    if masked {
        tau + MASK
    } else {
        tau
    }
}

/// Content-0 column barred for query position `i`, if any.
pub(crate) fn masked_column(mask_t: Option<usize>, i: usize, content0_len: usize) -> Option<usize> {
    let t = mask_t?;
    let col = (i + 1).checked_sub(t)?;
    (col < content0_len).then_some(col)
}

/// `[T-from × (Lc+T)]` bias combining τ, the self-token mask and causality
/// over the hidden-state columns.
pub fn attention_bias(content_lens: &[usize], tau: f64, mask_t: Option<usize>, from: usize, t_len: usize) -> Tensor {
    let lc: usize = content_lens.iter().sum();
    let l0 = content_lens.first().copied().unwrap_or(0);
    let width = lc + t_len;
    let mut bias = Tensor::zeros(&[t_len - from, width]);
    let data = bias.data_mut();
    for (r, i) in (from..t_len).enumerate() {
        let row = &mut data[r * width..(r + 1) * width];
        let barred = masked_column(mask_t, i, l0);
        for (j, b) in row[..lc].iter_mut().enumerate() {
            *b = content_bias(tau, barred == Some(j));
        }
        for b in &mut row[lc + i + 1..] {
            *b = MASK;
        }
    }
    bias
}

/// Applies the block to `h[from..]` given contents.
pub fn cocon_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &LMConfig,
    h: Var,
    contents: &ContentSet,
    from: usize,
) -> Result<CoConOutput> {
    let t_len = tape.value(h).rows();
    if from >= t_len {
        return Err(Error::config(format!(
            "block start {from} must index into a sequence of length {t_len}"
        )));
    }
    if contents.reps.is_empty() {
        return Err(Error::config("content set is empty; use the null content"));
    }
    let content_lens: Vec<usize> = contents.reps.iter().map(|&c| tape.value(c).rows()).collect();
    let needed = content_lens.iter().sum::<usize>() + t_len;
    if needed > cfg.max_seq_len {
        return Err(Error::ContextOverflow {
            needed,
            limit: cfg.max_seq_len,
        });
    }
    let w = bind_block(tape, store, COCON_GROUP)?;
    let hn = attention::norm(tape, h, &w.ln1)?;
    let (k, v) = {
        let mut ks = Vec::with_capacity(content_lens.len() + 1);
        let mut vs = Vec::with_capacity(content_lens.len() + 1);
        for &c in &contents.reps {
            let (kc, vc) = project_kv(tape, &w, c)?;
            ks.push(kc);
            vs.push(vc);
        }
        ks.push(linear(tape, hn, w.attn.wk, w.attn.bk)?);
        vs.push(linear(tape, hn, w.attn.wv, w.attn.bv)?);
        (tape.concat_rows(&ks)?, tape.concat_rows(&vs)?)
    };
    let h_tail = tape.slice_rows(h, from, t_len - from)?;
    let qn = tape.slice_rows(hn, from, t_len - from)?;
    let q = linear(tape, qn, w.attn.wq, w.attn.bq)?;
    let bias = attention_bias(&content_lens, contents.tau, contents.self_token_mask, from, t_len);
    let (a, weights) = attend(tape, q, k, v, &bias, cfg.n_heads)?;
    let a = linear(tape, a, w.attn.wo, w.attn.bo)?;
    let x = tape.add(h_tail, a)?;
    let xn = attention::norm(tape, x, &w.ln2)?;
    let f = attention::mlp(tape, xn, &w.mlp)?;
    let h_prime = tape.add(x, f)?;
    Ok(CoConOutput {
        h_prime,
        weights,
        content_lens,
    })
}

fn project_kv(tape: &mut Tape, w: &BlockVars, reps: Var) -> Result<(Var, Var)> {
    let n = attention::norm(tape, reps, &w.ln1)?;
    let k = linear(tape, n, w.attn.wk, w.attn.bk)?;
    let v = linear(tape, n, w.attn.wv, w.attn.bv)?;
    Ok((k, v))
}

/// Content keys and values `[l_c × d_model]` under the block's shared projections.
pub fn content_kv(tape: &mut Tape, store: &ParameterStore, reps: Var) -> Result<(Var, Var)> {
    let w = bind_block(tape, store, COCON_GROUP)?;
    project_kv(tape, &w, reps)
}

/// Rows `..from` of `h_full` followed by `h_prime`, which must cover exactly
/// `from..T`.
pub fn splice(tape: &mut Tape, h_full: Var, h_prime: Var, from: usize) -> Result<Var> {
    let t_len = tape.value(h_full).rows();
    let covered = tape.value(h_prime).rows();
    if from > t_len || from + covered != t_len {
        return Err(Error::Coverage(format!(
            "replacement rows {from}..{} do not cover {from}..{t_len}",
            from + covered
        )));
    }
    if tape.value(h_full).cols() != tape.value(h_prime).cols() {
        return Err(Error::shape("splice", tape.shape(h_full), tape.shape(h_prime)));
    }
    if from == 0 {
        return Ok(h_prime);
    }
    let head = tape.slice_rows(h_full, 0, from)?;
    tape.concat_rows(&[head, h_prime])
}

/// Frozen base model plus the conditioning block.
#[derive(Debug, Clone)]
pub struct CoConModel {
    pub lm: LanguageModel,
}

impl CoConModel {
    pub fn new(config: LMConfig) -> Result<Self> {
        Ok(CoConModel {
            lm: LanguageModel::new(config)?,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.lm.config
    }

    /// `LM_α(c)` with `c` placed at positions from 0.
    pub fn content_reps(&self, tape: &mut Tape, store: &ParameterStore, ids: &[TokenId]) -> Result<Var> {
        self.lm.forward_alpha(tape, store, ids)
    }

    /// The learned null content passed through the lower blocks at position 0.
    pub fn null_reps(&self, tape: &mut Tape, store: &ParameterStore) -> Result<Var> {
        let e = tape.param(store, NULL_EMBEDDING)?;
        let x = self.lm.embed_vectors(tape, store, e)?;
        self.lm.alpha_from_embeddings(tape, store, x)
    }

    /// Encodes each content; an empty list becomes the null content.
    pub fn contents(&self, tape: &mut Tape, store: &ParameterStore, contents: &[Vec<TokenId>], tau: f64) -> Result<ContentSet> {
        let reps = if contents.is_empty() {
            vec![self.null_reps(tape, store)?]
        } else {
            let mut reps = Vec::with_capacity(contents.len());
            for c in contents {
                reps.push(self.content_reps(tape, store, c)?);
            }
            reps
        };
        Ok(ContentSet::new(reps, tau))
    }

    /// Logits for every position of `input`, with positions `from..` rewritten
    /// by the block.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        input: &[TokenId],
        contents: &ContentSet,
        from: usize,
    ) -> Result<(Var, CoConOutput)> {
        let h = self.lm.forward_alpha(tape, store, input)?;
        self.logits_from_hidden(tape, store, h, contents, from)
    }

    pub fn logits_from_hidden(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h: Var,
        contents: &ContentSet,
        from: usize,
    ) -> Result<(Var, CoConOutput)> {
        let out = cocon_forward(tape, store, self.config(), h, contents, from)?;
        let spliced = splice(tape, h, out.h_prime, from)?;
        let logits = self.lm.forward_beta(tape, store, spliced)?;
        Ok((logits, out))
    }

    /// Mean cross-entropy of `x[t..]` given the prompt `x[..t]`, scored through
    /// the block from position `t-1`.
    pub fn continuation_loss(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: &[TokenId],
        t: usize,
        contents: &ContentSet,
    ) -> Result<Var> {
        let (logits, from) = self.continuation_logits(tape, store, x, t, contents)?;
        let targets: Vec<usize> = x[t..].iter().map(|&i| i as usize).collect();
        let tail = tape.slice_rows(logits, from, targets.len())?;
        tape.cross_entropy(tail, &targets, usize::MAX)
    }

    /// Logits over `x[..len-1]` with the block applied from `t-1`. Returns the
    /// logits and `t-1`.
    pub fn continuation_logits(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: &[TokenId],
        t: usize,
        contents: &ContentSet,
    ) -> Result<(Var, usize)> {
        if t < 1 || t >= x.len() {
            return Err(Error::config(format!("breakpoint {t} must lie in [1, {})", x.len())));
        }
        let (logits, _) = self.logits(tape, store, &x[..x.len() - 1], contents, t - 1)?;
        Ok((logits, t - 1))
    }
}

/// Head-averaged attention mass per content and on the hidden-state columns,
/// for one query row.
pub fn attention_mass(tape: &Tape, out: &CoConOutput, row: usize) -> (Vec<f64>, f64) {
    let heads = out.weights.len() as f64;
    let mut per_content = vec![0.0; out.content_lens.len()];
    let mut hidden = 0.0;
    for &w in &out.weights {
        let r = tape.value(w).row(row);
        let mut start = 0;
        for (n, &len) in out.content_lens.iter().enumerate() {
            per_content[n] += r[start..start + len].iter().sum::<f64>() / heads;
            start += len;
        }
        hidden += r[start..].iter().sum::<f64>() / heads;
    }
    (per_content, hidden)
}
