//! Corpus ingestion: multi-file text input, deterministic document-level
//! train/validation splitting, and packing token streams into fixed-length
//! training sequences.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One input text file with its declared source-kind label (e.g. genre).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSource {
    pub path: PathBuf,
    pub kind: String,
}

/// Declarative description of a corpus and how to split it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub sources: Vec<CorpusSource>,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

/// A document: one blank-line-separated block of an input file.
/// The source-kind label is carried as metadata only.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Document {
    pub text: String,
    pub kind: String,
}

#[derive(Debug, Clone)]
pub struct SplitCorpus {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
}

/// Token stream packed into contiguous non-overlapping fixed-length windows.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedDataset {
    pub token_ids: Vec<u32>,
    pub sequence_length: usize,
    pub count: usize,
}

impl PackedDataset {
    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.token_ids[i * self.sequence_length..(i + 1) * self.sequence_length]
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Corpus("no source files given".into()));
        }
        let (t, v) = (self.train_fraction, self.validation_fraction);
        if !(t > 0.0 && t < 1.0 && v > 0.0 && v < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must lie strictly inside (0,1), got train={t}, validation={v}"
            )));
        }
        if (t + v - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must sum to 1, got {t} + {v}"
            )));
        }
        Ok(())
    }
}

/// Splits raw text into documents on blank lines (lines that are empty after
/// trimming). Inner line breaks are preserved.
pub fn documents_from_text(text: &str, kind: &str) -> Vec<Document> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(Document {
                    text: current.join("\n"),
                    kind: kind.to_string(),
                });
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(Document {
            text: current.join("\n"),
            kind: kind.to_string(),
        });
    }
    docs
}

/// Reads all source files into documents. Every file must be non-empty UTF-8.
pub fn read_sources(spec: &CorpusSpec) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for source in &spec.sources {
        let text = std::fs::read_to_string(&source.path)
            .map_err(|e| Error::io(&source.path, e))?;
        if text.trim().is_empty() {
            return Err(Error::Corpus(format!(
                "source file {} is empty",
                source.path.display()
            )));
        }
        docs.extend(documents_from_text(&text, &source.kind));
    }
    if docs.is_empty() {
        return Err(Error::Corpus("corpus contains no documents".into()));
    }
    Ok(docs)
}

/// Splits documents into train/validation deterministically under `seed`.
/// Documents are atomic: the document order is shuffled and whole documents
/// are assigned to the train side until its character share reaches the
/// requested fraction, so the split lands within one document of the target.
pub fn split_documents(docs: &[Document], train_fraction: f64, seed: u64) -> Result<SplitCorpus> {
    if docs.len() < 2 {
        return Err(Error::Corpus(
            "corpus must contain at least two documents to produce non-empty splits".into(),
        ));
    }
    let total_chars: usize = docs.iter().map(|d| d.text.chars().count()).sum();
    let target = train_fraction * total_chars as f64;

    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng::stream(seed, "corpus-split"));

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut train_chars = 0usize;
    for &i in &order {
        let doc = &docs[i];
        if (train_chars as f64) < target {
            train_chars += doc.text.chars().count();
            train.push(doc.clone());
        } else {
            validation.push(doc.clone());
        }
    }
    // Guarantee both sides are non-empty.
    if validation.is_empty() {
        validation.push(train.pop().expect("train has at least two documents"));
    }
    if train.is_empty() {
        train.push(validation.pop().expect("validation has at least two documents"));
    }
    Ok(SplitCorpus { train, validation })
}

/// Reads the corpus and produces the deterministic train/validation split.
pub fn load_and_split(spec: &CorpusSpec) -> Result<SplitCorpus> {
    spec.validate()?;
    let docs = read_sources(spec)?;
    split_documents(&docs, spec.train_fraction, spec.seed)
}

/// Packs a token stream into `floor(len / sequence_length)` contiguous
/// non-overlapping windows; the trailing remainder is dropped.
pub fn pack_sequences(token_ids: &[u32], sequence_length: usize) -> Result<PackedDataset> {
    if sequence_length < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequence_length must be >= 2, got {sequence_length}"
        )));
    }
    let count = token_ids.len() / sequence_length;
    Ok(PackedDataset {
        token_ids: token_ids[..count * sequence_length].to_vec(),
        sequence_length,
        count,
    })
}

/// Manifest describing a completed split, for reproducibility audits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub train_documents: usize,
    pub validation_documents: usize,
    pub train_chars: usize,
    pub validation_chars: usize,
    pub sources: Vec<CorpusSource>,
}

pub fn split_manifest(spec: &CorpusSpec, split: &SplitCorpus) -> SplitManifest {
    SplitManifest {
        seed: spec.seed,
        train_fraction: spec.train_fraction,
        validation_fraction: spec.validation_fraction,
        train_documents: split.train.len(),
        validation_documents: split.validation.len(),
        train_chars: split.train.iter().map(|d| d.text.chars().count()).sum(),
        validation_chars: split
            .validation
            .iter()
            .map(|d| d.text.chars().count())
            .sum(),
        sources: spec.sources.clone(),
    }
}

pub fn write_split_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn equal_docs(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| Document {
                text: format!("document number {i:04} with fixed width text"),
                kind: "test".into(),
            })
            .collect()
    }

    #[test]
    fn split_95_5_on_200_equal_documents() {
        let docs = equal_docs(200);
        let split = split_documents(&docs, 0.95, 11).unwrap();
        assert_eq!(split.train.len(), 190);
        assert_eq!(split.validation.len(), 10);
    }

    #[test]
    fn degenerate_fractions_rejected() {
        let spec = CorpusSpec {
            sources: vec![CorpusSource {
                path: "unused.txt".into(),
                kind: "test".into(),
            }],
            train_fraction: 1.0,
            validation_fraction: 0.0,
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let docs = equal_docs(37);
        let a = split_documents(&docs, 0.9, 123).unwrap();
        let b = split_documents(&docs, 0.9, 123).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        let c = split_documents(&docs, 0.9, 124).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_preserves_document_multiset() {
        let mut docs = equal_docs(41);
        docs[7].text = "short".into();
        docs[13].text = "a much longer document that skews the character balance a lot".into();
        let split = split_documents(&docs, 0.8, 5).unwrap();
        let mut recombined: Vec<Document> = split
            .train
            .iter()
            .chain(split.validation.iter())
            .cloned()
            .collect();
        recombined.sort();
        let mut original = docs.clone();
        original.sort();
        assert_eq!(recombined, original);
    }

    #[test]
    fn split_hits_char_target_within_one_document() {
        let docs = equal_docs(100);
        let per_doc = docs[0].text.chars().count();
        let total: usize = per_doc * 100;
        let split = split_documents(&docs, 0.75, 9).unwrap();
        let train_chars: usize = split.train.iter().map(|d| d.text.chars().count()).sum();
        let target = 0.75 * total as f64;
        assert!((train_chars as f64 - target).abs() <= per_doc as f64);
    }

    #[test]
    fn documents_split_on_blank_lines() {
        let text = "first doc line one\nline two\n\n\nsecond doc\n   \nthird doc\n";
        let docs = documents_from_text(text, "k");
        assert_eq!(docs.len(), 3);
        assert_eq!(docs[0].text, "first doc line one\nline two");
        assert_eq!(docs[1].text, "second doc");
        assert_eq!(docs[2].text, "third doc");
    }

    #[test]
    fn pack_floor_arithmetic() {
        let ids: Vec<u32> = (0..10).collect();
        let packed = pack_sequences(&ids, 4).unwrap();
        assert_eq!(packed.count, 2);
        assert_eq!(packed.token_ids.len(), 8);
        assert_eq!(packed.sequence(0), &[0, 1, 2, 3]);
        assert_eq!(packed.sequence(1), &[4, 5, 6, 7]);

        let exact = pack_sequences(&(0..8).collect::<Vec<u32>>(), 4).unwrap();
        assert_eq!(exact.count, 2);
        assert_eq!(exact.token_ids.len(), 8);

        let short = pack_sequences(&[1, 2, 3], 4).unwrap();
        assert_eq!(short.count, 0);
        assert!(short.token_ids.is_empty());
    }

    #[test]
    fn pack_rejects_tiny_window() {
        assert!(pack_sequences(&[1, 2, 3], 1).is_err());
    }

    #[test]
    fn missing_file_is_an_error() {
        let spec = CorpusSpec {
            sources: vec![CorpusSource {
                path: "/nonexistent/definitely-missing.txt".into(),
                kind: "x".into(),
            }],
            train_fraction: 0.9,
            validation_fraction: 0.1,
            seed: 0,
        };
        assert!(load_and_split(&spec).is_err());
    }
}
