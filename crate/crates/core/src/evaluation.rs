//! Held-out (prompt, content) pairs, their continuations and scores.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::CoConModel;
use crate::error::{Error, Result};
use crate::generator::{content_tensors, decode, DecodeContents, Mode, Sampling};
use crate::lm::LanguageModel;
use crate::metrics::{evaluator_perplexity, MetricReport};
use crate::tensor::ParameterStore;
use crate::tokenizer::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub prompt: Vec<TokenId>,
    pub content: Vec<TokenId>,
    pub prompt_doc: usize,
    pub content_doc: usize,
}

/// `n` pairs whose prompt opens one document and whose content is a span of
/// a different document.
pub fn sample_pairs(docs: &[Vec<TokenId>], n: usize, prompt_len: usize, content_len: usize, seed: u64) -> Result<Vec<EvalPair>> {
    if prompt_len == 0 || content_len == 0 {
        return Err(Error::config("prompt and content lengths must be positive"));
    }
    let need = prompt_len.max(content_len);
    let eligible: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].len() >= need).collect();
    if eligible.len() < 2 {
        return Err(Error::Corpus(format!("fewer than two documents with {need} or more tokens")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let picked: Vec<usize> = eligible.choose_multiple(&mut rng, 2).copied().collect();
        let (p, c) = (picked[0], picked[1]);
        let start = rng.gen_range(0..=docs[c].len() - content_len);
        pairs.push(EvalPair {
            prompt: docs[p][..prompt_len].to_vec(),
            content: docs[c][start..start + content_len].to_vec(),
            prompt_doc: p,
            content_doc: c,
        });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinueSettings {
    pub mode: Mode,
    pub tau: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Pair `i` samples from its own stream seeded with `seed + i`.
    pub seed: u64,
}

/// One continuation per pair, stopping early at end-of-text.
pub fn continue_pairs(model: &CoConModel, store: &ParameterStore, pairs: &[EvalPair], s: &ContinueSettings) -> Result<Vec<Vec<TokenId>>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(i as u64));
            let reps = match s.mode {
                Mode::Cocon => Some(content_tensors(model, store, std::slice::from_ref(&pair.content))?),
                Mode::Plain => None,
            };
            let cond = reps.as_deref().map(|reps| DecodeContents { reps, tau: s.tau });
            let sampling = Sampling::Nucleus {
                top_p: s.top_p,
                rng: &mut rng,
            };
            Ok(decode(model, store, &pair.prompt, cond, s.max_new_tokens, sampling, true)?.0)
        })
        .collect()
}

/// Scores continuations against their contents, with evaluator perplexity
/// of prompt plus continuation when an evaluator is given.
pub fn score(
    label: &str,
    vocab: &Vocab,
    pairs: &[EvalPair],
    outputs: &[Vec<TokenId>],
    evaluator: Option<(&LanguageModel, &ParameterStore)>,
) -> Result<MetricReport> {
    let gens: Vec<String> = outputs.iter().map(|o| vocab.decode(o)).collect();
    let refs: Vec<String> = pairs.iter().map(|p| vocab.decode(&p.content)).collect();
    let perplexity = match evaluator {
        Some((lm, store)) => {
            let full: Vec<Vec<TokenId>> = pairs.iter().zip(outputs).map(|(p, o)| [p.prompt.as_slice(), o].concat()).collect();
            Some(evaluator_perplexity(lm, store, &full)?)
        }
        None => None,
    };
    MetricReport::from_texts(label, &gens, &refs, perplexity)
}
