//! Byte-level BPE with a word-boundary marker symbol.
//!
//! Every token is a sequence of *symbols*: bytes `0..=255` plus the marker
//! [`MARKER`] prepended to each space-separated word. Ids 0, 1, 2 are the
//! pad, stop and unknown specials.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use unicode_normalization::UnicodeNormalization;

use crate::error::{domain, Error, Result};

pub const PAD: u32 = 0;
pub const STOP: u32 = 1;
pub const UNK: u32 = 2;
pub const NUM_SPECIAL: usize = 3;
/// Word-boundary symbol; sorts after every byte.
pub const MARKER: u16 = 256;

/// Default minimum pair count for a merge to be learned.
pub const MIN_FREQUENCY: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

/// Token ids with a flag telling whether the stop id closes the sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub terminated: bool,
}

impl TokenSequence {
    pub fn with_stop(mut ids: Vec<u32>) -> Self {
        ids.push(STOP);
        TokenSequence {
            ids,
            terminated: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    /// Symbol sequence of every non-special token, indexed by `id - NUM_SPECIAL`.
    tokens: Vec<Vec<u16>>,
    merges: Vec<Merge>,
    target_size: usize,
    base: BTreeMap<u16, u32>,
    rank: BTreeMap<(u32, u32), (usize, u32)>,
}

fn words(text: &str) -> impl Iterator<Item = Vec<u16>> + '_ {
    text.split(' ').map(|w| {
        let mut s = Vec::with_capacity(w.len() + 1);
        s.push(MARKER);
        s.extend(w.bytes().map(u16::from));
        s
    })
}

impl BpeVocab {
    /// Greedy training: repeatedly merge the most frequent adjacent pair
    /// until `target_size` tokens exist or the best pair occurs fewer than
    /// `min_frequency` times. Ties go to the lexicographically smallest
    /// pair of symbol sequences.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_size: usize, min_frequency: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("tokenizer corpus is empty".into()));
        }
        let mut word_freq: BTreeMap<Vec<u16>, usize> = BTreeMap::new();
        for line in corpus {
            let line: String = line.as_ref().nfc().collect();
            for w in words(&line) {
                *word_freq.entry(w).or_default() += 1;
            }
        }
        let mut symbols: Vec<u16> = word_freq.keys().flatten().copied().collect();
        symbols.sort_unstable();
        symbols.dedup();
        let base_size = NUM_SPECIAL + symbols.len();
        if target_size < base_size {
            return Err(Error::Config(format!(
                "target vocabulary {target_size} is smaller than the base alphabet {base_size}"
            )));
        }
        let tokens: Vec<Vec<u16>> = symbols.iter().map(|&s| vec![s]).collect();
        let mut vocab = BpeVocab::from_parts(tokens, Vec::new(), target_size)?;

        let mut seqs: Vec<(Vec<u32>, usize)> = word_freq
            .iter()
            .map(|(w, &f)| (w.iter().map(|s| vocab.base[s]).collect(), f))
            .collect();
        let min_frequency = min_frequency.max(1);

        while vocab.len() < target_size {
            let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for (seq, f) in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += f;
                }
            }
            let best = counts.iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // smaller symbol strings win, so reverse
                    let ka = (vocab.symbols(pa.0), vocab.symbols(pa.1));
                    let kb = (vocab.symbols(pb.0), vocab.symbols(pb.1));
                    kb.cmp(&ka)
                })
            });
            let Some((&(l, r), &c)) = best else { break };
            if c < min_frequency {
                break;
            }
            let mut sym = vocab.symbols(l).to_vec();
            sym.extend_from_slice(vocab.symbols(r));
            let id = vocab.len() as u32;
            vocab.tokens.push(sym);
            vocab.rank.insert((l, r), (vocab.merges.len(), id));
            vocab.merges.push(Merge {
                left: l,
                right: r,
                result: id,
            });
            for (seq, _) in seqs.iter_mut() {
                merge_all(seq, l, r, id);
            }
        }
        Ok(vocab)
    }

    /// Rebuilds a vocabulary from its token table and merge list.
    pub fn from_parts(tokens: Vec<Vec<u16>>, merges: Vec<Merge>, target_size: usize) -> Result<Self> {
        let mut base = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.iter().any(|&s| s > MARKER) {
                return Err(domain(format!("token {} has an invalid symbol sequence", i + NUM_SPECIAL)));
            }
            if t.len() == 1 && base.insert(t[0], (i + NUM_SPECIAL) as u32).is_some() {
                return Err(domain(format!("symbol {} appears twice", t[0])));
            }
        }
        let size = tokens.len() + NUM_SPECIAL;
        let mut rank = BTreeMap::new();
        for (i, m) in merges.iter().enumerate() {
            let ok = [m.left, m.right, m.result]
                .iter()
                .all(|&x| (NUM_SPECIAL..size).contains(&(x as usize)));
            if !ok {
                return Err(domain(format!("merge {i} refers to an unknown token")));
            }
            let mut joined = tokens[m.left as usize - NUM_SPECIAL].clone();
            joined.extend_from_slice(&tokens[m.right as usize - NUM_SPECIAL]);
            if joined != tokens[m.result as usize - NUM_SPECIAL] {
                return Err(domain(format!("merge {i} does not spell its result")));
            }
            rank.insert((m.left, m.right), (i, m.result));
        }
        Ok(BpeVocab {
            tokens,
            merges,
            target_size,
            base,
            rank,
        })
    }

    /// Vocabulary size including specials.
    pub fn len(&self) -> usize {
        self.tokens.len() + NUM_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Symbol sequences of the non-special tokens.
    pub fn tokens(&self) -> &[Vec<u16>] {
        &self.tokens
    }

    fn symbols(&self, id: u32) -> &[u16] {
        &self.tokens[id as usize - NUM_SPECIAL]
    }

    /// Token string for display: `▁` for the marker, bytes lossily decoded.
    pub fn token_str(&self, id: u32) -> Result<String> {
        match id {
            PAD => Ok("<pad>".into()),
            STOP => Ok("<stop>".into()),
            UNK => Ok("<unk>".into()),
            _ => {
                let sym = self
                    .tokens
                    .get((id as usize).wrapping_sub(NUM_SPECIAL))
                    .ok_or_else(|| domain(format!("token id {id} out of range")))?;
                let mut bytes = Vec::new();
                for &s in sym {
                    if s == MARKER {
                        bytes.extend_from_slice("\u{2581}".as_bytes());
                    } else {
                        bytes.push(s as u8);
                    }
                }
                Ok(String::from_utf8_lossy(&bytes).into_owned())
            }
        }
    }

    /// Applies merges in training order; bytes outside the alphabet become
    /// [`UNK`]. No stop token is appended.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        if text.is_empty() {
            return Vec::new();
        }
        let text: String = text.nfc().collect();
        let mut out = Vec::new();
        for w in words(&text) {
            let mut seq: Vec<u32> = w
                .iter()
                .map(|s| self.base.get(s).copied().unwrap_or(UNK))
                .collect();
            loop {
                let best = seq
                    .windows(2)
                    .filter_map(|p| self.rank.get(&(p[0], p[1])))
                    .min();
                let Some(&(idx, _)) = best else { break };
                let m = self.merges[idx];
                merge_all(&mut seq, m.left, m.right, m.result);
            }
            out.extend(seq);
        }
        out
    }

    /// Concatenates token strings, dropping pad and stop. The marker becomes
    /// a space and the leading one is removed.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            match id {
                PAD | STOP => {}
                UNK => bytes.extend_from_slice("\u{fffd}".as_bytes()),
                _ => {
                    let sym = self
                        .tokens
                        .get((id as usize).wrapping_sub(NUM_SPECIAL))
                        .ok_or_else(|| domain(format!("token id {id} out of range")))?;
                    bytes.extend(sym.iter().map(|&s| if s == MARKER { b' ' } else { s as u8 }));
                }
            }
        }
        let s = bytes.strip_prefix(b" ").unwrap_or(&bytes);
        Ok(String::from_utf8_lossy(s).into_owned())
    }
}

fn merge_all(seq: &mut Vec<u32>, l: u32, r: u32, id: u32) {
    let mut i = 0;
    let mut w = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
            seq[w] = id;
            i += 2;
        } else {
            seq[w] = seq[i];
            i += 1;
        }
        w += 1;
    }
    seq.truncate(w);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aaaa_learns_two_merges() {
        // base = 3 specials + marker + 'a'
        let v = BpeVocab::train(&["aaaa"], 5 + 2, 1).unwrap();
        let toks: Vec<String> = (5..7).map(|i| v.token_str(i).unwrap()).collect();
        assert_eq!(toks, ["aa", "aaaa"]);
        assert_eq!(v.encode("aaaa"), [4, 6]);
        // at the default threshold the pair counts must come from repetition
        let v = BpeVocab::train(&["aaaa", "aaaa"], 7, MIN_FREQUENCY).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token_str(6).unwrap(), "aaaa");
    }

    #[test]
    fn single_character_corpus_has_no_merges() {
        let v = BpeVocab::train(&["a"], 100, MIN_FREQUENCY).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), NUM_SPECIAL + 2);
    }

    #[test]
    fn undersized_target_is_a_config_error() {
        assert!(matches!(BpeVocab::train(&["abc"], 4, 2), Err(Error::Config(_))));
    }

    #[test]
    fn encode_edge_cases() {
        let v = BpeVocab::train(&["predict tail: a | r"], 60, 2).unwrap();
        assert!(v.encode("").is_empty());
        let ids = v.encode("a\u{e9}");
        assert!(ids.contains(&UNK));
        assert_eq!(v.decode(&v.encode("predict tail: a | r")).unwrap(), "predict tail: a | r");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.decode(&[STOP]).unwrap(), "");
        assert!(v.decode(&[9999]).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        // all four pairs occur twice; bytes sort before the marker
        let v = BpeVocab::train(&["ab cd", "ab cd"], 1000, 2).unwrap();
        let first = v.merges()[0];
        assert_eq!(v.token_str(first.result).unwrap(), "ab");
        let names: Vec<String> = v.merges().iter().map(|m| v.token_str(m.result).unwrap()).collect();
        assert!(names.contains(&"\u{2581}ab".into()));
    }

    #[test]
    fn leading_and_repeated_spaces_round_trip() {
        let corpus = [" a  b ", "a b"];
        let v = BpeVocab::train(&corpus, 40, 2).unwrap();
        for line in corpus {
            assert_eq!(v.decode(&v.encode(line)).unwrap(), line);
        }
    }

    #[test]
    fn from_parts_validates_merges() {
        let tokens = vec![vec![97u16], vec![98], vec![97, 97]];
        let bad = vec![Merge { left: 3, right: 4, result: 5 }];
        assert!(BpeVocab::from_parts(tokens, bad, 10).is_err());
    }
}
