//! Autoregressive decoding with or without content conditioning.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::CoConModel;
use crate::decode::{Conditioning, Decoder};
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{ParameterStore, Tape, Tensor};
use crate::tokenizer::{TokenId, Vocab, EOT};

/// Keeps the smallest set of most probable tokens whose mass reaches `top_p`
/// (ties broken by ascending id) and renormalizes. `top_p >= 1` is the identity.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0.0;
    let mut cut = order.len();
    for (n, &id) in order.iter().enumerate() {
        kept += probs[id];
        if kept >= top_p {
            cut = n + 1;
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for &id in &order[..cut] {
        out[id] = probs[id] / kept;
    }
    out
}

/// How the next token is chosen.
pub enum Sampling<'r> {
    Greedy,
    Nucleus { top_p: f64, rng: &'r mut ChaCha8Rng },
}

/// Lowest id among the maximal logits.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn pick(logits: &[f64], sampling: &mut Sampling) -> (TokenId, f64) {
    let mut probs = logits.to_vec();
    kernels::softmax_row(&mut probs);
    match sampling {
        Sampling::Greedy => {
            let id = argmax(logits);
            (id as TokenId, probs[id].ln())
        }
        Sampling::Nucleus { top_p, rng } => {
            let filtered = nucleus_filter(&probs, *top_p);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = None;
            for (id, &p) in filtered.iter().enumerate() {
                if p > 0.0 {
                    acc += p;
                    chosen = Some(id);
                    if u < acc {
                        break;
                    }
                }
            }
            let id = chosen.expect("nucleus keeps at least one token");
            (id as TokenId, filtered[id].ln())
        }
    }
}

/// Content conditioning for [`decode`]: `None` decodes with the plain base model.
pub struct DecodeContents<'c> {
    pub reps: &'c [Tensor],
    pub tau: f64,
}

/// Continues `prompt` for up to `max_new` tokens. The block rewrites
/// positions from `prompt.len() - 1`. Returns the new tokens and their
/// log-probabilities under the (filtered) sampling distribution.
pub fn decode(
    model: &CoConModel,
    store: &ParameterStore,
    prompt: &[TokenId],
    contents: Option<DecodeContents>,
    max_new: usize,
    mut sampling: Sampling,
    stop_at_eot: bool,
) -> Result<(Vec<TokenId>, Vec<f64>)> {
    if prompt.is_empty() {
        return Err(Error::config("prompt must contain at least one token"));
    }
    let limit = model.config().max_seq_len;
    let content_len: usize = contents.as_ref().map_or(0, |c| c.reps.iter().map(Tensor::rows).sum());
    let needed = content_len + prompt.len() + max_new.saturating_sub(1);
    if needed > limit {
        return Err(Error::ContextOverflow { needed, limit });
    }
    let cond = contents.as_ref().map(|c| Conditioning {
        reps: c.reps,
        tau: c.tau,
        from: prompt.len() - 1,
        self_token_mask: None,
    });
    let mut dec = Decoder::new(model, store, cond)?;
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = dec.push(tok)?;
    }
    let mut out = Vec::with_capacity(max_new);
    let mut logprobs = Vec::with_capacity(max_new);
    for step in 0..max_new {
        let (tok, lp) = pick(&logits, &mut sampling);
        out.push(tok);
        logprobs.push(lp);
        if (stop_at_eot && tok == EOT) || step + 1 == max_new {
            break;
        }
        logits = dec.push(tok)?;
    }
    Ok((out, logprobs))
}

/// Lower-block representations of each content; the null content when empty.
pub fn content_tensors(model: &CoConModel, store: &ParameterStore, contents: &[Vec<TokenId>]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::inference();
    let set = model.contents(&mut tape, store, contents, 0.0)?;
    Ok(set.reps.iter().map(|&v| tape.value(v).clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Cocon,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    #[serde(default)]
    pub contents: Vec<String>,
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mode: Mode,
}

fn default_top_p() -> f64 {
    0.9
}

fn default_max_new() -> usize {
    20
}

fn default_n_samples() -> usize {
    1
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            contents: Vec::new(),
            tau: 0.0,
            top_p: default_top_p(),
            max_new_tokens: default_max_new(),
            n_samples: default_n_samples(),
            seed: None,
            mode: Mode::Cocon,
        }
    }

    /// Field-level checks that do not need the model.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.prompt.is_empty() {
            return Err(("prompt", "must not be empty".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(("top_p", format!("{} is outside (0, 1]", self.top_p)));
        }
        if !self.tau.is_finite() {
            return Err(("tau", "must be finite".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(("max_new_tokens", "must be at least 1".into()));
        }
        if self.n_samples == 0 {
            return Err(("n_samples", "must be at least 1".into()));
        }
        if self.contents.iter().any(String::is_empty) {
            return Err(("contents", "content strings must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Prompt and continuation.
    pub text: String,
    pub continuation: String,
    /// Prompt ids followed by generated ids.
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    /// One entry per generated token.
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub elapsed_ms: f64,
    pub request: GenerationRequest,
}

/// A seed from the process's hash randomness, for unseeded requests.
pub fn fresh_seed() -> u64 {
    use std::hash::{BuildHasher, RandomState};
    RandomState::new().hash_one(0u8)
}

/// Encodes, conditions and samples per the request. Any number of contents
/// (including none, which uses the null content) goes through the same path.
pub fn generate(req: &GenerationRequest, model: &CoConModel, store: &ParameterStore, vocab: &Vocab) -> Result<GenerationResult> {
    req.validate().map_err(|(field, msg)| Error::config(format!("{field}: {msg}")))?;
    let start = Instant::now();
    let prompt = vocab.encode(&req.prompt);
    let contents: Vec<Vec<TokenId>> = req.contents.iter().map(|c| vocab.encode(c)).collect();
    let reps = match req.mode {
        Mode::Cocon => Some(content_tensors(model, store, &contents)?),
        Mode::Plain => None,
    };
    let seed = req.seed.unwrap_or_else(fresh_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(req.n_samples);
    for _ in 0..req.n_samples {
        let cond = reps.as_deref().map(|reps| DecodeContents { reps, tau: req.tau });
        let (new, logprobs) = decode(
            model,
            store,
            &prompt,
            cond,
            req.max_new_tokens,
            Sampling::Nucleus {
                top_p: req.top_p,
                rng: &mut rng,
            },
            true,
        )?;
        let mut tokens = prompt.clone();
        tokens.extend_from_slice(&new);
        samples.push(Sample {
            text: vocab.decode(&tokens),
            continuation: vocab.decode(&new),
            tokens,
            prompt_len: prompt.len(),
            logprobs,
        });
    }
    Ok(GenerationResult {
        samples,
        seed,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        request: req.clone(),
    })
}

/// Generation with several contents at once; identical to [`generate`], which
/// already concatenates every content's keys and values.
pub fn generate_multi(req: &GenerationRequest, model: &CoConModel, store: &ParameterStore, vocab: &Vocab) -> Result<GenerationResult> {
    if req.contents.len() < 2 {
        return Err(Error::config("multi-content generation needs at least two contents"));
    }
    generate(req, model, store, vocab)
}

/// Samples continuations of the end-of-text context from the plain base
/// model, one independent stream per document.
pub fn self_generate_corpus(
    model: &CoConModel,
    store: &ParameterStore,
    vocab: &Vocab,
    n_samples: usize,
    sample_len: usize,
    top_p: f64,
    seed: u64,
) -> Result<Vec<String>> {
    let mut docs = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(n as u64));
        let (ids, _) = decode(
            model,
            store,
            &[EOT],
            None,
            sample_len,
            Sampling::Nucleus { top_p, rng: &mut rng },
            true,
        )?;
        docs.push(vocab.decode(&ids).trim().to_string());
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_keeps_minimal_prefix() {
        let out = nucleus_filter(&[0.5, 0.3, 0.2], 0.6);
        assert!((out[0] - 0.625).abs() < 1e-12 && (out[1] - 0.375).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
        assert_eq!(nucleus_filter(&[0.5, 0.3, 0.2], 1.0), vec![0.5, 0.3, 0.2]);
        assert_eq!(nucleus_filter(&[0.0, 1.0, 0.0], 0.3), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn nucleus_ties_prefer_low_ids() {
        let out = nucleus_filter(&[0.25, 0.25, 0.25, 0.25], 0.5);
        assert_eq!(out, vec![0.5, 0.5, 0.0, 0.0]);
    }
}
