//! Byte-level BPE vocabulary.
//!
//! Ids `0..256` are raw bytes, followed by the three special tokens and then
//! one id per learned merge in the order merges were learned.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const EOT: TokenId = 256;
pub const PAD: TokenId = 257;
pub const NULL_CONTENT: TokenId = 258;
pub const NUM_SPECIAL: usize = 3;
const FIRST_MERGE_ID: TokenId = 256 + NUM_SPECIAL as TokenId;

const VOCAB_HEADER: &str = "COCONVOCAB 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), TokenId>,
    pieces: Vec<Vec<u8>>,
    piece_ids: HashMap<Vec<u8>, TokenId>,
}

/// Splits text into chunks that each start at a space following a non-space,
/// so merges never span word boundaries.
fn chunks(text: &str) -> impl Iterator<Item = &[u8]> {
    let bytes = text.as_bytes();
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        let mut i = start + 1;
        while i < bytes.len() && !(bytes[i] == b' ' && bytes[i - 1] != b' ') {
            i += 1;
        }
        let chunk = &bytes[start..i];
        start = i;
        Some(chunk)
    })
}

impl Vocab {
    fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend(std::iter::repeat_n(Vec::new(), NUM_SPECIAL));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let new_id = FIRST_MERGE_ID + rank as TokenId;
            let known = |id: TokenId| (id as usize) < pieces.len() && !is_special(id);
            if !known(a) || !known(b) {
                return Err(Error::Format {
                    what: "vocab",
                    detail: format!("merge {rank} references unknown id ({a}, {b})"),
                });
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
            ranks.insert((a, b), new_id);
        }
        let piece_ids = pieces
            .iter()
            .enumerate()
            .filter(|(id, _)| !is_special(*id as TokenId))
            .map(|(id, p)| (p.clone(), id as TokenId))
            .collect();
        Ok(Vocab {
            merges,
            ranks,
            pieces,
            piece_ids,
        })
    }

    /// Byte-level vocabulary with no merges.
    pub fn bytes_only() -> Self {
        Vocab::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn piece(&self, id: TokenId) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, piece: &[u8]) -> Option<TokenId> {
        self.piece_ids.get(piece).copied()
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<TokenId>) {
        let mut symbols: Vec<TokenId> = chunk.iter().map(|&b| b as TokenId).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&id| (id, i)))
                .min();
            let Some((merged, _)) = best else { break };
            let pair = &self.merges[(merged - FIRST_MERGE_ID) as usize];
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == *pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        for chunk in chunks(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    /// Decodes to text; special tokens decode to nothing and invalid UTF-8 is
    /// replaced.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Vec<u8> {
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(p) = self.pieces.get(id as usize) {
                bytes.extend_from_slice(p);
            }
        }
        bytes
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{VOCAB_HEADER}").unwrap();
        for &(a, b) in &self.merges {
            writeln!(s, "{a} {b}").unwrap();
        }
        for (name, id) in [("EOT", EOT), ("PAD", PAD), ("NULL_CONTENT", NULL_CONTENT)] {
            writeln!(s, "special {name} {id}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "vocab", detail };
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(bad(format!("missing `{VOCAB_HEADER}` header")));
        }
        let mut merges = Vec::new();
        let mut specials = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => continue,
                ["special", name, id] => {
                    let id: TokenId = id.parse().map_err(|_| bad(format!("line {}: bad id", n + 2)))?;
                    specials.push((name.to_string(), id));
                }
                [a, b] if specials.is_empty() => {
                    let a = a.parse().map_err(|_| bad(format!("line {}: bad merge", n + 2)))?;
                    let b = b.parse().map_err(|_| bad(format!("line {}: bad merge", n + 2)))?;
                    merges.push((a, b));
                }
                _ => return Err(bad(format!("line {}: unexpected `{line}`", n + 2))),
            }
        }
        let expected = [("EOT", EOT), ("PAD", PAD), ("NULL_CONTENT", NULL_CONTENT)];
        for (name, id) in expected {
            if !specials.iter().any(|(n, i)| n == name && *i == id) {
                return Err(bad(format!("special token {name} must be assigned id {id}")));
            }
        }
        Vocab::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_text(&std::fs::read_to_string(path)?)
    }
}

pub fn is_special(id: TokenId) -> bool {
    (256..FIRST_MERGE_ID).contains(&id)
}

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair
/// (ties go to the smallest pair of ids) until the vocabulary reaches
/// `target_vocab_size`.
pub fn bpe_train<'a>(corpus: impl IntoIterator<Item = &'a str>, target_vocab_size: usize) -> Result<Vocab> {
    let base = 256 + NUM_SPECIAL;
    if target_vocab_size < base {
        return Err(Error::config(format!(
            "target vocabulary size {target_vocab_size} is below the {base} byte and special tokens"
        )));
    }
    let mut word_counts: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut any = false;
    for doc in corpus {
        for chunk in chunks(doc) {
            any = true;
            *word_counts.entry(chunk.to_vec()).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Corpus("cannot train a vocabulary on an empty corpus".into()));
    }
    // Sorted so that the merge list does not depend on hash iteration order.
    let mut words: Vec<(Vec<TokenId>, usize)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.into_iter().map(TokenId::from).collect(), c))
        .collect();
    words.sort();

    let mut merges = Vec::new();
    while base + merges.len() < target_vocab_size {
        let mut pair_counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += count;
            }
        }
        let Some((&pair, _)) = pair_counts
            .iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let new_id = FIRST_MERGE_ID + merges.len() as TokenId;
        merges.push(pair);
        for (symbols, _) in words.iter_mut() {
            if symbols.len() < 2 {
                continue;
            }
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            *symbols = next;
        }
    }
    Vocab::from_merges(merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_on_repeated_byte() {
        let v = bpe_train(["aaaa"], 257 + NUM_SPECIAL).unwrap();
        assert_eq!(v.merges(), &[(b'a' as TokenId, b'a' as TokenId)]);
        assert_eq!(v.encode("aaaa"), vec![FIRST_MERGE_ID, FIRST_MERGE_ID]);
    }

    #[test]
    fn minimum_size_is_byte_level() {
        let v = bpe_train(["hello world"], 256 + NUM_SPECIAL).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.encode("hi"), vec![b'h' as TokenId, b'i' as TokenId]);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the dog sat on the log", "a cat and a dog"];
        let a = bpe_train(corpus, 300).unwrap();
        let b = bpe_train(corpus, 300).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn rejects_empty_corpus_and_small_targets() {
        assert!(bpe_train(std::iter::empty::<&str>(), 300).is_err());
        assert!(bpe_train(["abc"], 200).is_err());
    }

    #[test]
    fn special_ids_never_come_out_of_encode() {
        let v = bpe_train(["some text with words", "more words"], 290).unwrap();
        let ids = v.encode("some \u{1}\u{2}\u{3} text \u{ff} words");
        assert!(ids.iter().all(|&id| !is_special(id)));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = bpe_train(["the cat sat on the mat", "the hat"], 280).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("COCONVOCAB 1\n"));
        assert!(text.contains("special NULL_CONTENT 258"));
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn malformed_vocab_files_are_rejected() {
        assert!(Vocab::from_text("NOTAVOCAB\n").is_err());
        assert!(Vocab::from_text("COCONVOCAB 1\n97 97\n").is_err());
        assert!(Vocab::from_text("COCONVOCAB 1\n999 97\nspecial EOT 256\nspecial PAD 257\nspecial NULL_CONTENT 258\n").is_err());
    }
}
