//! Automatic text-generation metrics: BLEU-4, NIST-4, METEOR-lite, Dist-n and
//! evaluator-model perplexity.
//!
//! BLEU, NIST and METEOR take one candidate and one reference per pair and
//! work on any token type (words or ids). BLEU uses no smoothing, so a zero
//! 4-gram precision gives a zero score; the corpus form pools counts first.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::tensor::ParameterStore;
use crate::tokenizer::{TokenId, EOT};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_pair<T>(cand: &[T], reference: &[T]) -> Result<()> {
    if cand.is_empty() {
        return Err(Error::EmptyMetricInput("candidate is empty".into()));
    }
    if reference.is_empty() {
        return Err(Error::EmptyMetricInput("reference is empty".into()));
    }
    Ok(())
}

/// Clipped n-gram matches and candidate n-gram totals for n = 1..=4.
fn bleu_stats<T: Eq + Hash>(cand: &[T], reference: &[T]) -> ([usize; 4], [usize; 4]) {
    let mut matches = [0; 4];
    let mut totals = [0; 4];
    for n in 1..=4 {
        let c = ngram_counts(cand, n);
        let r = ngram_counts(reference, n);
        matches[n - 1] = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
        totals[n - 1] = cand.len().saturating_sub(n - 1);
    }
    (matches, totals)
}

fn bleu_from_stats(matches: [usize; 4], totals: [usize; 4], cand_len: usize, ref_len: usize) -> f64 {
    if matches.iter().zip(&totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Sentence BLEU-4 in `[0, 1]`.
pub fn bleu4<T: Eq + Hash>(cand: &[T], reference: &[T]) -> Result<f64> {
    check_pair(cand, reference)?;
    let (m, t) = bleu_stats(cand, reference);
    Ok(bleu_from_stats(m, t, cand.len(), reference.len()))
}

/// Corpus BLEU-4: n-gram counts and lengths are summed over pairs before the
/// precisions are formed.
pub fn corpus_bleu4<T: Eq + Hash, C: AsRef<[T]>>(pairs: &[(C, C)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyMetricInput("no candidate/reference pairs".into()));
    }
    let (mut m, mut t) = ([0; 4], [0; 4]);
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, reference) in pairs {
        let (cand, reference) = (cand.as_ref(), reference.as_ref());
        check_pair(cand, reference)?;
        let (pm, pt) = bleu_stats(cand, reference);
        for n in 0..4 {
            m[n] += pm[n];
            t[n] += pt[n];
        }
        c_len += cand.len();
        r_len += reference.len();
    }
    Ok(bleu_from_stats(m, t, c_len, r_len))
}

/// Corpus NIST-4.
///
/// Each matched n-gram is weighted by `log2(count(prefix) / count(ngram))`
/// over the reference corpus (the unigram prefix count being the number of
/// reference words). The brevity factor is `exp(β·ln²(min(L_sys/L_ref, 1)))`
/// with β set so that a length ratio of 2/3 gives 0.5.
pub fn nist4<T: Eq + Hash, C: AsRef<[T]>>(pairs: &[(C, C)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyMetricInput("no candidate/reference pairs".into()));
    }
    let mut ref_counts: Vec<HashMap<&[T], usize>> = vec![HashMap::new(); 4];
    let mut ref_words = 0usize;
    let mut sys_words = 0usize;
    for (cand, reference) in pairs {
        let (cand, reference) = (cand.as_ref(), reference.as_ref());
        check_pair(cand, reference)?;
        ref_words += reference.len();
        sys_words += cand.len();
        for n in 1..=4 {
            for (g, k) in ngram_counts(reference, n) {
                *ref_counts[n - 1].entry(g).or_insert(0) += k;
            }
        }
    }
    let info = |g: &[T]| -> f64 {
        let n = g.len();
        let count = ref_counts[n - 1][g] as f64;
        let prefix = if n == 1 {
            ref_words as f64
        } else {
            ref_counts[n - 2][&g[..n - 1]] as f64
        };
        (prefix / count).log2()
    };
    let mut score = 0.0;
    for n in 1..=4 {
        let mut weighted = 0.0;
        let mut total = 0usize;
        for (cand, reference) in pairs {
            let (cand, reference) = (cand.as_ref(), reference.as_ref());
            let c = ngram_counts(cand, n);
            let r = ngram_counts(reference, n);
            total += cand.len().saturating_sub(n - 1);
            for (g, &k) in &c {
                let hits = k.min(r.get(g).copied().unwrap_or(0));
                if hits > 0 {
                    weighted += hits as f64 * info(g);
                }
            }
        }
        if total > 0 {
            score += weighted / total as f64;
        }
    }
    let beta = 0.5f64.ln() / (2.0f64 / 3.0).ln().powi(2);
    let ratio = (sys_words as f64 / ref_words as f64).min(1.0);
    Ok(score * (beta * ratio.ln().powi(2)).exp())
}

const SUFFIXES: &[&str] = &["ing", "ed", "es", "ly", "er", "s"];

/// Crude suffix-stripping stem used by [`meteor_lite`].
pub fn stem(word: &str) -> &str {
    for suffix in SUFFIXES {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.len() >= 3 {
                return base;
            }
        }
    }
    word
}

/// METEOR without synonymy: exact matches, then stem matches, each aligned
/// left to right to the earliest free reference word. Score is the 9:1
/// recall-weighted harmonic mean times `1 - 0.5·(chunks/matches)³`.
pub fn meteor_lite<S: AsRef<str>>(cand: &[S], reference: &[S]) -> Result<f64> {
    check_pair(cand, reference)?;
    let mut align: Vec<Option<usize>> = vec![None; cand.len()];
    let mut used = vec![false; reference.len()];
    let stages: [fn(&str) -> &str; 2] = [|w| w, stem];
    for key in stages {
        for (i, w) in cand.iter().enumerate() {
            if align[i].is_some() {
                continue;
            }
            let k = key(w.as_ref());
            if let Some(j) = (0..reference.len()).find(|&j| !used[j] && key(reference[j].as_ref()) == k) {
                used[j] = true;
                align[i] = Some(j);
            }
        }
    }
    let matched: Vec<(usize, usize)> = align.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    let m = matched.len();
    if m == 0 {
        return Ok(0.0);
    }
    let mut chunks = 1;
    for w in matched.windows(2) {
        if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
            chunks += 1;
        }
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Ok(fmean * (1.0 - penalty))
}

/// Mean sentence METEOR-lite over pairs.
pub fn corpus_meteor<S: AsRef<str>, C: AsRef<[S]>>(pairs: &[(C, C)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyMetricInput("no candidate/reference pairs".into()));
    }
    let mut total = 0.0;
    for (c, r) in pairs {
        total += meteor_lite(c.as_ref(), r.as_ref())?;
    }
    Ok(total / pairs.len() as f64)
}

/// Distinct n-grams over all n-grams across the sample set. Samples shorter
/// than `n` are skipped.
pub fn dist_n<T: Eq + Hash, C: AsRef<[T]>>(samples: &[C], n: usize) -> Result<f64> {
    if !(1..=3).contains(&n) {
        return Err(Error::config(format!("dist-n is defined for n in 1..=3, got {n}")));
    }
    let mut unique: HashMap<&[T], ()> = HashMap::new();
    let mut total = 0usize;
    for s in samples {
        let s = s.as_ref();
        if s.len() < n {
            continue;
        }
        for g in s.windows(n) {
            unique.insert(g, ());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyMetricInput(format!("no sample has {n} or more tokens")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// `exp` of the mean per-token negative log-likelihood under `evaluator`,
/// each sample scored after an end-of-text token.
pub fn evaluator_perplexity(evaluator: &LanguageModel, store: &ParameterStore, samples: &[Vec<TokenId>]) -> Result<f64> {
    let limit = evaluator.config.max_seq_len;
    let mut nll = 0.0;
    let mut count = 0usize;
    for s in samples.iter().filter(|s| !s.is_empty()) {
        let mut seq = Vec::with_capacity(s.len() + 1);
        seq.push(EOT);
        seq.extend_from_slice(&s[..s.len().min(limit - 1)]);
        let (n, c) = evaluator.sequence_nll(store, &seq)?;
        nll += n;
        count += c;
    }
    if count == 0 {
        return Err(Error::EmptyMetricInput("no tokens to score".into()));
    }
    Ok((nll / count as f64).exp())
}

fn defined(d: Result<f64>) -> Result<Option<f64>> {
    match d {
        Ok(d) => Ok(Some(d)),
        Err(Error::EmptyMetricInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub bleu4: f64,
    pub nist4: f64,
    pub meteor: f64,
    pub perplexity: Option<f64>,
    /// `None` when no generation is long enough to hold an n-gram.
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    pub dist3: Option<f64>,
    pub n_samples: usize,
}

impl MetricReport {
    /// Scores whitespace-tokenized generations against their content texts.
    pub fn from_texts(label: &str, generations: &[String], references: &[String], perplexity: Option<f64>) -> Result<Self> {
        if generations.len() != references.len() {
            return Err(Error::config("generation and reference counts differ"));
        }
        let split = |s: &String| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let gens: Vec<Vec<String>> = generations.iter().map(split).collect();
        let refs: Vec<Vec<String>> = references.iter().map(split).collect();
        let pairs: Vec<(Vec<String>, Vec<String>)> = gens
            .iter()
            .cloned()
            .zip(refs)
            .filter(|(g, r)| !g.is_empty() && !r.is_empty())
            .collect();
        Ok(MetricReport {
            label: label.to_string(),
            bleu4: corpus_bleu4(&pairs)?,
            nist4: nist4(&pairs)?,
            meteor: corpus_meteor(&pairs)?,
            perplexity,
            dist1: defined(dist_n(&gens, 1))?,
            dist2: defined(dist_n(&gens, 2))?,
            dist3: defined(dist_n(&gens, 3))?,
            n_samples: generations.len(),
        })
    }

    /// Aligned text table; BLEU-4 and METEOR in units of 10⁻².
    pub fn table(reports: &[MetricReport]) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8} {:>10} {:>7} {:>7} {:>7}",
            "Model", "BLEU-4", "NIST-4", "METEOR", "Perplexity", "Dist-1", "Dist-2", "Dist-3"
        );
        for r in reports {
            let ppl = r.perplexity.map_or("-".to_string(), |p| format!("{p:.1}"));
            let dist = |d: Option<f64>| d.map_or("-".to_string(), |d| format!("{d:.3}"));
            let _ = writeln!(
                out,
                "{:<16} {:>8.2} {:>8.3} {:>8.2} {:>10} {:>7} {:>7} {:>7}",
                r.label,
                r.bleu4 * 100.0,
                r.nist4,
                r.meteor * 100.0,
                ppl,
                dist(r.dist1),
                dist(r.dist2),
                dist(r.dist3)
            );
        }
        out
    }
}
