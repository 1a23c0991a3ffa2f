//! Byte-level BPE tokenizer: training, encoding, decoding, and a stable JSON
//! serialization format.
//!
//! The base alphabet is the 256 byte values, so any input is always encodable
//! via byte fallback. Training greedily merges the highest-frequency adjacent
//! pair; ties break on the lexicographically smallest (left bytes, right
//! bytes) pair so retraining on identical text is reproducible.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;
pub const BOS_TOKEN: &str = "<|bos|>";
pub const EOD_TOKEN: &str = "<|eod|>";
pub const BOS_ID: u32 = 256;
pub const EOD_ID: u32 = 257;
pub const SPECIAL_COUNT: usize = 2;
pub const FIRST_MERGE_ID: u32 = (BYTE_VOCAB + SPECIAL_COUNT) as u32;

const NONE: u32 = u32::MAX;
const DEAD: u32 = u32::MAX;

/// A trained tokenizer: the ordered merge list plus the id -> bytes table.
#[derive(Debug, Clone)]
pub struct TokenizerModel {
    merges: Vec<(u32, u32)>,
    vocab: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

fn base_vocab() -> Vec<Vec<u8>> {
    let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    vocab.push(BOS_TOKEN.as_bytes().to_vec());
    vocab.push(EOD_TOKEN.as_bytes().to_vec());
    vocab
}

/// Candidate pair in the trainer's priority queue. Greater means "merge
/// first": higher count, then lexicographically smaller byte pair.
struct Candidate {
    count: u64,
    left_bytes: Vec<u8>,
    right_bytes: Vec<u8>,
    pair: (u32, u32),
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| {
                (&other.left_bytes, &other.right_bytes).cmp(&(&self.left_bytes, &self.right_bytes))
            })
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

struct Trainer {
    toks: Vec<u32>,
    next: Vec<u32>,
    prev: Vec<u32>,
    counts: HashMap<(u32, u32), u64>,
    positions: HashMap<(u32, u32), Vec<u32>>,
    heap: BinaryHeap<Candidate>,
    vocab: Vec<Vec<u8>>,
    seen_bytes: HashSet<Vec<u8>>,
    banned: HashSet<(u32, u32)>,
}

impl Trainer {
    fn new(bytes: &[u8]) -> Self {
        let n = bytes.len();
        let toks: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        let next: Vec<u32> = (0..n).map(|i| if i + 1 < n { (i + 1) as u32 } else { NONE }).collect();
        let prev: Vec<u32> = (0..n).map(|i| if i > 0 { (i - 1) as u32 } else { NONE }).collect();
        let vocab = base_vocab();
        let seen_bytes: HashSet<Vec<u8>> = vocab.iter().cloned().collect();
        let mut trainer = Trainer {
            toks,
            next,
            prev,
            counts: HashMap::new(),
            positions: HashMap::new(),
            heap: BinaryHeap::new(),
            vocab,
            seen_bytes,
            banned: HashSet::new(),
        };
        for i in 0..n.saturating_sub(1) {
            let pair = (trainer.toks[i], trainer.toks[i + 1]);
            trainer.bump(pair, i as u32);
        }
        trainer
    }

    fn bump(&mut self, pair: (u32, u32), pos: u32) {
        let count = self.counts.entry(pair).or_insert(0);
        *count += 1;
        self.positions.entry(pair).or_default().push(pos);
        let count = *count;
        if count >= 2 && !self.banned.contains(&pair) {
            self.push_candidate(pair, count);
        }
    }

    fn drop_one(&mut self, pair: (u32, u32)) {
        if let Some(count) = self.counts.get_mut(&pair) {
            *count -= 1;
            if *count == 0 {
                self.counts.remove(&pair);
                self.positions.remove(&pair);
            }
        }
    }

    fn push_candidate(&mut self, pair: (u32, u32), count: u64) {
        self.heap.push(Candidate {
            count,
            left_bytes: self.vocab[pair.0 as usize].clone(),
            right_bytes: self.vocab[pair.1 as usize].clone(),
            pair,
        });
    }

    /// Pops the next valid best pair, skipping stale heap entries.
    fn best_pair(&mut self) -> Option<((u32, u32), u64)> {
        while let Some(cand) = self.heap.pop() {
            if self.banned.contains(&cand.pair) {
                continue;
            }
            let current = self.counts.get(&cand.pair).copied().unwrap_or(0);
            if current < 2 {
                continue;
            }
            if current != cand.count {
                // Stale entry; reinsert with the true count and retry.
                self.push_candidate(cand.pair, current);
                continue;
            }
            return Some((cand.pair, current));
        }
        None
    }

    /// Merges every live occurrence of `pair` into `new_id`, updating
    /// neighbor pair counts incrementally.
    fn apply_merge(&mut self, pair: (u32, u32), new_id: u32) {
        let (a, b) = pair;
        let spots = self.positions.remove(&pair).unwrap_or_default();
        for p in spots {
            let p = p as usize;
            if self.toks[p] != a {
                continue;
            }
            let j = self.next[p];
            if j == NONE {
                continue;
            }
            let j = j as usize;
            if self.toks[j] != b {
                continue;
            }
            let l = self.prev[p];
            let r = self.next[j];
            if l != NONE {
                self.drop_one((self.toks[l as usize], a));
            }
            if r != NONE {
                self.drop_one((b, self.toks[r as usize]));
            }
            self.drop_one(pair);

            self.toks[p] = new_id;
            self.toks[j] = DEAD;
            self.next[p] = r;
            if r != NONE {
                self.prev[r as usize] = p as u32;
            }

            if l != NONE {
                self.bump((self.toks[l as usize], new_id), l);
            }
            if r != NONE {
                self.bump((new_id, self.toks[r as usize]), p as u32);
            }
        }
        self.counts.remove(&pair);
        self.positions.remove(&pair);
    }
}

impl TokenizerModel {
    /// Trains a byte-level BPE model with greedy highest-frequency merging.
    /// Stops at `target_vocab` tokens or when no pair occurs at least twice.
    pub fn train(text: &str, target_vocab: usize) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Tokenizer("training text is empty".into()));
        }
        let min_vocab = BYTE_VOCAB + SPECIAL_COUNT;
        if target_vocab < min_vocab {
            return Err(Error::Tokenizer(format!(
                "target_vocab {target_vocab} is below the {min_vocab} byte + special tokens"
            )));
        }

        let mut trainer = Trainer::new(text.as_bytes());
        let mut merges = Vec::new();
        while trainer.vocab.len() < target_vocab {
            let Some((pair, _count)) = trainer.best_pair() else {
                break;
            };
            let mut bytes = trainer.vocab[pair.0 as usize].clone();
            bytes.extend_from_slice(&trainer.vocab[pair.1 as usize]);
            if trainer.seen_bytes.contains(&bytes) {
                // A merge must not duplicate an existing token's byte string,
                // or the vocab would stop being a bijection.
                trainer.banned.insert(pair);
                continue;
            }
            let new_id = trainer.vocab.len() as u32;
            trainer.vocab.push(bytes.clone());
            trainer.seen_bytes.insert(bytes);
            trainer.apply_merge(pair, new_id);
            merges.push(pair);
        }

        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i as u32))
            .collect();
        Ok(TokenizerModel {
            merges,
            vocab: trainer.vocab,
            ranks,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    /// Encodes text by byte fallback plus iterative application of the
    /// lowest-ranked merge present, which reproduces the training-order
    /// merge sequence.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        if bytes.is_empty() {
            return Vec::new();
        }
        let n = bytes.len();
        let mut toks: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        let mut next: Vec<u32> = (0..n).map(|i| if i + 1 < n { (i + 1) as u32 } else { NONE }).collect();
        let mut prev: Vec<u32> = (0..n).map(|i| if i > 0 { (i - 1) as u32 } else { NONE }).collect();

        // Min-heap on (rank, position): lowest rank first, then leftmost.
        let mut heap: BinaryHeap<std::cmp::Reverse<(u32, u32)>> = BinaryHeap::new();
        for i in 0..n.saturating_sub(1) {
            if let Some(&rank) = self.ranks.get(&(toks[i], toks[i + 1])) {
                heap.push(std::cmp::Reverse((rank, i as u32)));
            }
        }
        while let Some(std::cmp::Reverse((rank, p))) = heap.pop() {
            let p = p as usize;
            if toks[p] == DEAD {
                continue;
            }
            let j = next[p];
            if j == NONE {
                continue;
            }
            let pair = (toks[p], toks[j as usize]);
            if self.ranks.get(&pair) != Some(&rank) {
                continue;
            }
            let new_id = FIRST_MERGE_ID + rank;
            let j = j as usize;
            let r = next[j];
            toks[p] = new_id;
            toks[j] = DEAD;
            next[p] = r;
            if r != NONE {
                prev[r as usize] = p as u32;
            }
            let l = prev[p];
            if l != NONE {
                if let Some(&nr) = self.ranks.get(&(toks[l as usize], new_id)) {
                    heap.push(std::cmp::Reverse((nr, l)));
                }
            }
            if r != NONE {
                if let Some(&nr) = self.ranks.get(&(new_id, toks[r as usize])) {
                    heap.push(std::cmp::Reverse((nr, p as u32)));
                }
            }
        }

        let mut out = Vec::new();
        let mut cursor = 0u32;
        while cursor != NONE {
            out.push(toks[cursor as usize]);
            cursor = next[cursor as usize];
        }
        out
    }

    /// Decodes ids back to text. Special tokens render as their literal
    /// marker strings; byte sequences that are not valid UTF-8 are replaced
    /// lossily (this cannot happen for sequences produced by `encode`).
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.token_bytes(id) {
                Some(b) => bytes.extend_from_slice(b),
                None => {
                    return Err(Error::UnknownTokenId {
                        id,
                        vocab_size: self.vocab.len(),
                    })
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Stable JSON serialization. Byte strings are hex-encoded so the file
    /// is valid JSON regardless of token content.
    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: 1,
            special_tokens: vec![
                SpecialTokenEntry {
                    token: BOS_TOKEN.to_string(),
                    id: BOS_ID,
                },
                SpecialTokenEntry {
                    token: EOD_TOKEN.to_string(),
                    id: EOD_ID,
                },
            ],
            merges: self.merges.clone(),
            vocab: self.vocab.iter().map(|b| hex(b)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("tokenizer serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(json)?;
        if file.version != 1 {
            return Err(Error::Tokenizer(format!(
                "unsupported tokenizer format version {}",
                file.version
            )));
        }
        let vocab: Vec<Vec<u8>> = file
            .vocab
            .iter()
            .map(|h| unhex(h))
            .collect::<Result<_>>()?;
        let expected = BYTE_VOCAB + SPECIAL_COUNT + file.merges.len();
        if vocab.len() != expected {
            return Err(Error::Tokenizer(format!(
                "vocab length {} does not match 256 bytes + {} specials + {} merges",
                vocab.len(),
                SPECIAL_COUNT,
                file.merges.len()
            )));
        }
        for (i, &(l, r)) in file.merges.iter().enumerate() {
            let id = FIRST_MERGE_ID + i as u32;
            if l >= id || r >= id {
                return Err(Error::Tokenizer(format!(
                    "merge {i} references token ids ({l}, {r}) not yet defined"
                )));
            }
        }
        let ranks = file
            .merges
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i as u32))
            .collect();
        Ok(TokenizerModel {
            merges: file.merges,
            vocab,
            ranks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    /// SHA-256 of the serialized form; checkpoints record this to tie a
    /// model to the tokenizer it was trained with.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        hex(&hasher.finalize())
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    special_tokens: Vec<SpecialTokenEntry>,
    merges: Vec<(u32, u32)>,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SpecialTokenEntry {
    token: String,
    id: u32,
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Tokenizer(format!("odd-length hex string {s:?}")));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Tokenizer(format!("invalid hex string {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_on_repeated_pairs() {
        // "aaab aaab": pair counts are ('a','a') = 4, ('a','b') = 2,
        // ('b',' ') = 1, (' ','a') = 1, so ('a','a') merges first.
        let model = TokenizerModel::train("aaab aaab", 260).unwrap();
        assert!(!model.merges.is_empty());
        let (l, r) = model.merges[0];
        assert_eq!(model.token_bytes(l).unwrap(), b"a");
        assert_eq!(model.token_bytes(r).unwrap(), b"a");
    }

    #[test]
    fn zero_merge_budget_gives_pure_byte_vocab() {
        let model = TokenizerModel::train("hello world", BYTE_VOCAB + SPECIAL_COUNT).unwrap();
        assert!(model.merges.is_empty());
        assert_eq!(model.vocab_size(), BYTE_VOCAB + SPECIAL_COUNT);
    }

    #[test]
    fn too_small_target_rejected() {
        assert!(TokenizerModel::train("abc", 100).is_err());
        assert!(TokenizerModel::train("", 300).is_err());
    }

    #[test]
    fn encode_empty_and_unseen() {
        let model = TokenizerModel::train("abcabc", 300).unwrap();
        assert!(model.encode("").is_empty());
        let ids = model.encode("\u{7f}");
        assert_eq!(ids, vec![0x7f]);
    }

    #[test]
    fn decode_rejects_unknown_id() {
        let model = TokenizerModel::train("abcabc", 260).unwrap();
        let bad = model.vocab_size() as u32;
        assert!(matches!(
            model.decode(&[bad]),
            Err(Error::UnknownTokenId { .. })
        ));
        assert_eq!(model.decode(&[]).unwrap(), "");
    }

    #[test]
    fn roundtrip_on_training_text() {
        let text = "the quick brown fox jumps over the lazy dog. \
                    the quick brown fox naps. ünïcödé works tøø.";
        let model = TokenizerModel::train(text, 300).unwrap();
        let ids = model.encode(text);
        assert_eq!(model.decode(&ids).unwrap(), text);
        assert!(ids.len() < text.len());
    }

    #[test]
    fn retraining_is_deterministic() {
        let text = "abracadabra abracadabra banana bandana";
        let a = TokenizerModel::train(text, 290).unwrap();
        let b = TokenizerModel::train(text, 290).unwrap();
        assert_eq!(a.merges, b.merges);
        assert_eq!(a.vocab, b.vocab);
    }

    #[test]
    fn bigger_vocab_extends_merge_list() {
        let text = "one two three four five six seven eight nine ten \
                    one two three four five six seven eight nine ten";
        let small = TokenizerModel::train(text, 280).unwrap();
        let large = TokenizerModel::train(text, 320).unwrap();
        assert!(large.merges.len() >= small.merges.len());
        assert_eq!(&large.merges[..small.merges.len()], &small.merges[..]);
    }

    #[test]
    fn json_roundtrip_preserves_model() {
        let model = TokenizerModel::train("hello hello world world", 300).unwrap();
        let json = model.to_json();
        let reloaded = TokenizerModel::from_json(&json).unwrap();
        assert_eq!(model.merges, reloaded.merges);
        assert_eq!(model.vocab, reloaded.vocab);
        assert_eq!(model.fingerprint(), reloaded.fingerprint());
        let text = "hello world again";
        assert_eq!(model.encode(text), reloaded.encode(text));
    }

    #[test]
    fn specials_have_reserved_ids() {
        let model = TokenizerModel::train("xyz", 258).unwrap();
        assert_eq!(model.token_bytes(BOS_ID).unwrap(), BOS_TOKEN.as_bytes());
        assert_eq!(model.token_bytes(EOD_ID).unwrap(), EOD_TOKEN.as_bytes());
    }
}
