//! Corpus files and training-segment sampling.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocab};

/// One document per line, UTF-8, LF-terminated. Blank lines are skipped.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_documents(path: &Path, docs: &[String]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for doc in docs {
        // Line breaks inside a document would split it on reload.
        let line = doc.replace(['\n', '\r'], " ");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn encode_documents(vocab: &Vocab, docs: &[String]) -> Vec<Vec<TokenId>> {
    docs.iter().map(|d| vocab.encode(d)).collect()
}

/// A training sample `x` of `seg_len` tokens, a partner `x_prime` from a
/// different document, and the breakpoint `t` splitting `x` into
/// `x^a = x[..t]` and `x^b = x[t..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    pub x: Vec<TokenId>,
    pub x_prime: Vec<TokenId>,
    pub t: usize,
    pub doc: usize,
    pub doc_prime: usize,
}

impl TrainingBatch {
    pub fn prompt(&self) -> &[TokenId] {
        &self.x[..self.t]
    }

    pub fn continuation(&self) -> &[TokenId] {
        &self.x[self.t..]
    }

    pub fn prime_prompt(&self) -> &[TokenId] {
        &self.x_prime[..self.t]
    }
}

#[derive(Debug, Clone)]
pub struct SegmentSampler {
    docs: Vec<Vec<TokenId>>,
    eligible: Vec<usize>,
    pub seg_len: usize,
    pub break_lo: usize,
    pub break_hi: usize,
}

impl SegmentSampler {
    /// Segments never straddle documents. A document qualifies when it holds
    /// at least `seg_len` tokens.
    pub fn new(docs: Vec<Vec<TokenId>>, seg_len: usize, break_lo: usize, break_hi: usize) -> Result<Self> {
        if break_lo < 1 || break_hi < break_lo || break_hi >= seg_len {
            return Err(Error::config(format!(
                "breakpoint range [{break_lo}, {break_hi}] must satisfy 1 <= lo <= hi < seg_len = {seg_len}"
            )));
        }
        let eligible: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].len() >= seg_len).collect();
        if eligible.len() < 2 {
            return Err(Error::Corpus(format!(
                "need at least two documents with {seg_len} or more tokens, found {}",
                eligible.len()
            )));
        }
        Ok(SegmentSampler {
            docs,
            eligible,
            seg_len,
            break_lo,
            break_hi,
        })
    }

    pub fn num_eligible(&self) -> usize {
        self.eligible.len()
    }

    pub fn documents(&self) -> &[Vec<TokenId>] {
        &self.docs
    }

    fn segment(&self, doc: usize, rng: &mut impl Rng) -> Vec<TokenId> {
        let tokens = &self.docs[doc];
        let start = rng.gen_range(0..=tokens.len() - self.seg_len);
        tokens[start..start + self.seg_len].to_vec()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TrainingBatch {
        let a = rng.gen_range(0..self.eligible.len());
        let mut b = rng.gen_range(0..self.eligible.len() - 1);
        if b >= a {
            b += 1;
        }
        let (doc, doc_prime) = (self.eligible[a], self.eligible[b]);
        let x = self.segment(doc, rng);
        let x_prime = self.segment(doc_prime, rng);
        let t = rng.gen_range(self.break_lo..=self.break_hi);
        TrainingBatch {
            x,
            x_prime,
            t,
            doc,
            doc_prime,
        }
    }

    pub fn sample_many(&self, n: usize, rng: &mut impl Rng) -> Vec<TrainingBatch> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}
