//! Decoder-only base language model, split at `n_alpha` blocks into a lower
//! feature extractor and an upper head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, bind_block, bind_norm, causal_block, init_block, init_norm};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, ParameterStore, Tape, Var};
use crate::tokenizer::{TokenId, EOT, PAD};

pub const LM_GROUP: &str = "lm";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LMConfig {
    pub n_layers: usize,
    pub n_alpha: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig {
            n_layers: 4,
            n_alpha: 2,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 512,
            max_seq_len: 160,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_alpha < 1 || self.n_alpha >= self.n_layers {
            return Err(Error::config(format!(
                "n_alpha = {} must satisfy 1 <= n_alpha < n_layers = {}",
                self.n_alpha, self.n_layers
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model = {} is not divisible by n_heads = {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_ff == 0 {
            return Err(Error::config("vocab_size, max_seq_len and d_ff must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

pub fn block_prefix(layer: usize) -> String {
    format!("lm/h{layer}")
}

/// Fresh base-model parameters under `lm/`.
pub fn init_params(cfg: &LMConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    store.insert_normal("lm/wte", &[cfg.vocab_size, cfg.d_model], 0.02, &mut rng)?;
    store.insert_normal("lm/wpe", &[cfg.max_seq_len, cfg.d_model], 0.01, &mut rng)?;
    let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    for layer in 0..cfg.n_layers {
        init_block(&mut store, &block_prefix(layer), cfg.d_model, cfg.d_ff, residual_scale, &mut rng)?;
    }
    init_norm(&mut store, "lm/ln_f", cfg.d_model)?;
    Ok(store)
}

/// The base model's forward passes. Holds only the configuration; parameters
/// are read from the store handed to each call.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub config: LMConfig,
}

impl LanguageModel {
    pub fn new(config: LMConfig) -> Result<Self> {
        config.validate()?;
        Ok(LanguageModel { config })
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::config("empty token sequence"));
        }
        if n > self.config.max_seq_len {
            return Err(Error::ContextOverflow {
                needed: n,
                limit: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn add_positions(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        let wpe = tape.param(store, "lm/wpe")?;
        let pos: Vec<usize> = (0..n).collect();
        let p = tape.gather_rows(wpe, &pos)?;
        tape.add(x, p)
    }

    /// Token plus position embeddings for positions `0..ids.len()`.
    pub fn embed(&self, tape: &mut Tape, store: &ParameterStore, ids: &[TokenId]) -> Result<Var> {
        self.check_len(ids.len())?;
        let wte = tape.param(store, "lm/wte")?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = tape.gather_rows(wte, &idx)?;
        self.add_positions(tape, store, x)
    }

    /// Expected token embeddings under probability rows `[T×V]`, plus positions.
    pub fn embed_soft(&self, tape: &mut Tape, store: &ParameterStore, probs: Var) -> Result<Var> {
        self.check_len(tape.value(probs).rows())?;
        let wte = tape.param(store, "lm/wte")?;
        let x = tape.soft_embed(probs, wte)?;
        self.add_positions(tape, store, x)
    }

    /// Arbitrary input vectors `[T×d]` plus positions.
    pub fn embed_vectors(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        self.check_len(tape.value(x).rows())?;
        self.add_positions(tape, store, x)
    }

    fn blocks(&self, tape: &mut Tape, store: &ParameterStore, mut x: Var, layers: std::ops::Range<usize>) -> Result<Var> {
        for layer in layers {
            let b = bind_block(tape, store, &block_prefix(layer))?;
            x = causal_block(tape, x, &b, self.config.n_heads)?;
        }
        Ok(x)
    }

    /// Lower blocks over already-embedded inputs.
    pub fn alpha_from_embeddings(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        self.blocks(tape, store, x, 0..self.config.n_alpha)
    }

    /// Intermediate representations `[T×d_model]` after the first `n_alpha` blocks.
    pub fn forward_alpha(&self, tape: &mut Tape, store: &ParameterStore, ids: &[TokenId]) -> Result<Var> {
        let x = self.embed(tape, store, ids)?;
        self.alpha_from_embeddings(tape, store, x)
    }

    /// Remaining blocks, final norm and the tied output projection.
    pub fn forward_beta(&self, tape: &mut Tape, store: &ParameterStore, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model {
            return Err(Error::shape("forward_beta", &shape, &[self.config.d_model]));
        }
        self.check_len(shape[0])?;
        let x = self.blocks(tape, store, h, self.config.n_alpha..self.config.n_layers)?;
        self.head(tape, store, x)
    }

    fn head(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let ln = bind_norm(tape, store, "lm/ln_f")?;
        let x = attention::norm(tape, x, &ln)?;
        let wte = tape.param(store, "lm/wte")?;
        let wte_t = tape.transpose(wte);
        tape.matmul(x, wte_t)
    }

    /// All blocks in one pass, without materializing the split.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, ids: &[TokenId]) -> Result<Var> {
        let x = self.embed(tape, store, ids)?;
        let x = self.blocks(tape, store, x, 0..self.config.n_layers)?;
        self.head(tape, store, x)
    }

    /// Mean next-token cross-entropy over `ids[1..]`.
    pub fn lm_loss(&self, tape: &mut Tape, store: &ParameterStore, ids: &[TokenId]) -> Result<Var> {
        let logits = self.forward(tape, store, ids)?;
        let mut targets: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
        targets.push(PAD as usize);
        tape.cross_entropy(logits, &targets, PAD as usize)
    }

    /// Per-token negative log-likelihood of `ids[1..]` (no gradient).
    pub fn sequence_nll(&self, store: &ParameterStore, ids: &[TokenId]) -> Result<(f64, usize)> {
        let mut tape = Tape::inference();
        let loss = self.lm_loss(&mut tape, store, ids)?;
        let n = ids.len() - 1;
        Ok((tape.scalar(loss) * n as f64, n))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub seed: u64,
    /// Linear warmup length in steps; the rate then decays linearly to 10%.
    pub warmup: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 16,
            seq_len: 48,
            lr: 3e-3,
            seed: 0,
            warmup: 100,
        }
    }
}

pub(crate) fn scheduled_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let frac = (step - warmup) as f64 / span;
    base * (1.0 - 0.9 * frac.min(1.0))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
}

/// Next-token pretraining on contiguous windows of the encoded corpus.
/// Returns the trained parameters with the `lm` group frozen.
pub fn pretrain_base(
    docs: &[Vec<TokenId>],
    config: &LMConfig,
    train: &PretrainConfig,
    mut on_step: impl FnMut(PretrainLog),
) -> Result<ParameterStore> {
    let model = LanguageModel::new(config.clone())?;
    if train.seq_len < 2 || train.seq_len > config.max_seq_len {
        return Err(Error::config(format!(
            "pretraining seq_len {} must be in [2, {}]",
            train.seq_len, config.max_seq_len
        )));
    }
    // Documents are framed by end-of-text so that sampling can start from it.
    let long_docs: Vec<Vec<TokenId>> = docs
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| [&[EOT][..], d, &[EOT]].concat())
        .collect();
    if long_docs.is_empty() {
        return Err(Error::Corpus("pretraining corpus is empty".into()));
    }
    let mut store = init_params(config, train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x9e37_79b9);
    for step in 0..train.steps {
        let mut total = 0.0;
        for _ in 0..train.batch_size {
            let doc = &long_docs[rng.gen_range(0..long_docs.len())];
            let len = train.seq_len.min(doc.len());
            let start = rng.gen_range(0..=doc.len() - len);
            let mut tape = Tape::new();
            let loss = model.lm_loss(&mut tape, &store, &doc[start..start + len])?;
            let scaled = tape.scale(loss, 1.0 / train.batch_size as f64);
            tape.backward(scaled)?;
            store.accumulate_grads(&tape);
            total += tape.scalar(loss);
        }
        let loss = total / train.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                component: "pretraining loss".into(),
            });
        }
        let lr = scheduled_lr(train.lr, step, train.steps, train.warmup);
        store.adam_step(&AdamConfig::with_lr(lr));
        on_step(PretrainLog { step, loss });
    }
    store.freeze_group(LM_GROUP);
    Ok(store)
}

/// Mean per-token loss of the model over whole documents (truncated to the
/// context window).
pub fn corpus_loss(model: &LanguageModel, store: &ParameterStore, docs: &[Vec<TokenId>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0;
    for doc in docs.iter().filter(|d| d.len() >= 2) {
        let end = doc.len().min(model.config.max_seq_len);
        let (n, c) = model.sequence_nll(store, &doc[..end])?;
        nll += n;
        count += c;
    }
    if count == 0 {
        return Err(Error::Corpus("no scorable documents".into()));
    }
    Ok(nll / count as f64)
}
