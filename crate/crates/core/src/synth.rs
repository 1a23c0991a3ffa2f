//! Deterministic toy text generation for desk-scale experiments: a small
//! agreement-bearing grammar that models can actually learn in seconds, plus
//! matched minimal-pair suites probing that grammar.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;
use crate::evaluation::{MinimalPair, MinimalPairSuite};
use crate::rng;

// (singular, plural) noun forms.
const ANIMATES: &[(&str, &str)] = &[
    ("cat", "cats"),
    ("dog", "dogs"),
    ("bird", "birds"),
    ("fox", "foxes"),
    ("child", "children"),
    ("teacher", "teachers"),
    ("farmer", "farmers"),
    ("robot", "robots"),
    ("turtle", "turtles"),
    ("rabbit", "rabbits"),
    ("horse", "horses"),
    ("mouse", "mice"),
    ("crow", "crows"),
    ("whale", "whales"),
    ("spider", "spiders"),
    ("goat", "goats"),
];

const PLACES: &[(&str, &str)] = &[
    ("river", "rivers"),
    ("garden", "gardens"),
    ("house", "houses"),
    ("forest", "forests"),
    ("market", "markets"),
    ("bridge", "bridges"),
    ("meadow", "meadows"),
    ("harbor", "harbors"),
];

// (singular, plural) verb forms.
const INTRANSITIVES: &[(&str, &str)] = &[
    ("runs", "run"),
    ("sleeps", "sleep"),
    ("sings", "sing"),
    ("jumps", "jump"),
    ("waits", "wait"),
    ("swims", "swim"),
    ("laughs", "laugh"),
    ("dances", "dance"),
];

const TRANSITIVES: &[(&str, &str)] = &[
    ("sees", "see"),
    ("finds", "find"),
    ("chases", "chase"),
    ("likes", "like"),
    ("follows", "follow"),
    ("helps", "help"),
    ("watches", "watch"),
    ("carries", "carry"),
];

const ADJECTIVES: &[&str] = &[
    "red", "old", "small", "quiet", "bright", "heavy", "green", "happy", "clever", "tired",
];

const DET_SINGULAR: &[&str] = &["the", "a", "this", "every"];
const DET_PLURAL: &[&str] = &["the", "these", "many", "some"];
const PREPOSITIONS: &[&str] = &["near", "in", "under", "beside", "behind"];

#[derive(Clone, Copy, PartialEq)]
enum Number {
    Singular,
    Plural,
}

fn pick<'a, T: Copy>(rng: &mut ChaCha8Rng, items: &'a [T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn noun(rng: &mut ChaCha8Rng, num: Number) -> &'static str {
    let pool = if rng.random_range(0..4) == 0 {
        PLACES
    } else {
        ANIMATES
    };
    let (sg, pl) = pick(rng, pool);
    match num {
        Number::Singular => sg,
        Number::Plural => pl,
    }
}

fn determiner(rng: &mut ChaCha8Rng, num: Number) -> &'static str {
    match num {
        Number::Singular => pick(rng, DET_SINGULAR),
        Number::Plural => pick(rng, DET_PLURAL),
    }
}

fn noun_phrase(rng: &mut ChaCha8Rng, num: Number, out: &mut Vec<&'static str>) {
    out.push(determiner(rng, num));
    if rng.random_range(0..10) < 4 {
        out.push(pick(rng, ADJECTIVES));
    }
    out.push(noun(rng, num));
}

fn verb(rng: &mut ChaCha8Rng, num: Number, table: &[(&'static str, &'static str)]) -> &'static str {
    let (sg, pl) = pick(rng, table);
    match num {
        Number::Singular => sg,
        Number::Plural => pl,
    }
}

fn sentence_words(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let num = if rng.random_range(0..2) == 0 {
        Number::Singular
    } else {
        Number::Plural
    };
    let mut words = Vec::with_capacity(12);
    noun_phrase(rng, num, &mut words);
    if rng.random_range(0..2) == 0 {
        words.push(verb(rng, num, INTRANSITIVES));
    } else {
        words.push(verb(rng, num, TRANSITIVES));
        let obj_num = if rng.random_range(0..2) == 0 {
            Number::Singular
        } else {
            Number::Plural
        };
        noun_phrase(rng, obj_num, &mut words);
    }
    if rng.random_range(0..10) < 3 {
        words.push(pick(rng, PREPOSITIONS));
        words.push("the");
        let (sg, pl) = pick(rng, PLACES);
        words.push(if rng.random_range(0..4) == 0 { pl } else { sg });
    }
    words.push(".");
    words
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    sentence_words(rng).join(" ")
}

/// Generates documents totalling at least `target_chars` characters.
pub fn toy_documents(seed: u64, target_chars: usize) -> Vec<Document> {
    let mut rng = rng::stream(seed, "toy-corpus");
    let mut docs = Vec::new();
    let mut chars = 0usize;
    while chars < target_chars {
        let n_sentences = rng.random_range(4..12);
        let text = (0..n_sentences)
            .map(|_| sentence(&mut rng))
            .collect::<Vec<_>>()
            .join(" ");
        chars += text.chars().count();
        docs.push(Document {
            text,
            kind: "toy".into(),
        });
    }
    docs
}

/// Writes the toy corpus to `n_files` text files (blank-line separated
/// documents), mirroring a multi-file corpus layout. Returns the paths.
pub fn write_toy_corpus(
    dir: &std::path::Path,
    seed: u64,
    target_chars: usize,
    n_files: usize,
) -> crate::error::Result<Vec<std::path::PathBuf>> {
    let docs = toy_documents(seed, target_chars);
    let per_file = docs.len().div_ceil(n_files.max(1));
    let mut paths = Vec::new();
    for (i, chunk) in docs.chunks(per_file).enumerate() {
        let path = dir.join(format!("toy-{i}.txt"));
        let text = chunk
            .iter()
            .map(|d| d.text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n");
        std::fs::write(&path, text).map_err(|e| crate::error::Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Minimal pairs violating the toy grammar. Three phenomena:
/// subject-verb agreement, determiner-noun agreement, and
/// determiner-adjective order.
pub fn toy_minimal_pairs(seed: u64, n_pairs: usize) -> MinimalPairSuite {
    let mut rng = rng::stream(seed, "toy-pairs");
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        match pairs.len() % 3 {
            0 => {
                // Subject-verb agreement: flip the verb's number.
                let num = if rng.random_range(0..2) == 0 {
                    Number::Singular
                } else {
                    Number::Plural
                };
                let wrong = match num {
                    Number::Singular => Number::Plural,
                    Number::Plural => Number::Singular,
                };
                let mut np = Vec::new();
                noun_phrase(&mut rng, num, &mut np);
                let table = if rng.random_range(0..2) == 0 {
                    INTRANSITIVES
                } else {
                    TRANSITIVES
                };
                let pair_entry = pick(&mut rng, table);
                let good_verb = match num {
                    Number::Singular => pair_entry.0,
                    Number::Plural => pair_entry.1,
                };
                let bad_verb = match wrong {
                    Number::Singular => pair_entry.0,
                    Number::Plural => pair_entry.1,
                };
                let tail = if std::ptr::eq(table, TRANSITIVES) {
                    let mut obj = Vec::new();
                    noun_phrase(&mut rng, Number::Plural, &mut obj);
                    format!(" {}", obj.join(" "))
                } else {
                    String::new()
                };
                let np = np.join(" ");
                pairs.push(MinimalPair {
                    sentence_good: format!("{np} {good_verb}{tail} ."),
                    sentence_bad: format!("{np} {bad_verb}{tail} ."),
                    phenomenon: "subject_verb_agreement".into(),
                });
            }
            1 => {
                // Determiner-noun agreement: "this"/"these" with the wrong
                // noun number.
                let (sg, pl) = pick(&mut rng, ANIMATES);
                let (v_sg, v_pl) = pick(&mut rng, INTRANSITIVES);
                let (good, bad) = if rng.random_range(0..2) == 0 {
                    (
                        format!("this {sg} {v_sg} ."),
                        format!("these {sg} {v_sg} ."),
                    )
                } else {
                    (
                        format!("these {pl} {v_pl} ."),
                        format!("this {pl} {v_pl} ."),
                    )
                };
                pairs.push(MinimalPair {
                    sentence_good: good,
                    sentence_bad: bad,
                    phenomenon: "determiner_noun_agreement".into(),
                });
            }
            _ => {
                // Word order: determiner and adjective swapped.
                let (sg, _) = pick(&mut rng, ANIMATES);
                let adj = pick(&mut rng, ADJECTIVES);
                let (v_sg, _) = pick(&mut rng, INTRANSITIVES);
                pairs.push(MinimalPair {
                    sentence_good: format!("the {adj} {sg} {v_sg} ."),
                    sentence_bad: format!("{adj} the {sg} {v_sg} ."),
                    phenomenon: "determiner_adjective_order".into(),
                });
            }
        }
    }
    MinimalPairSuite {
        name: format!("toy-grammar-{seed}"),
        pairs,
    }
}

/// Two-class toy classification data: label 1 when the subject is plural.
pub fn toy_classification(seed: u64, n: usize) -> Vec<crate::evaluation::LabeledText> {
    let mut rng = rng::stream(seed, "toy-classification");
    (0..n)
        .map(|i| {
            let num = if i % 2 == 0 {
                Number::Singular
            } else {
                Number::Plural
            };
            let mut words = Vec::new();
            noun_phrase(&mut rng, num, &mut words);
            words.push(verb(&mut rng, num, INTRANSITIVES));
            words.push(".");
            crate::evaluation::LabeledText {
                text: words.join(" "),
                label: matches!(num, Number::Plural) as usize,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = toy_documents(5, 50_000);
        let b = toy_documents(5, 50_000);
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.text == y.text));
        let chars: usize = a.iter().map(|d| d.text.chars().count()).sum();
        assert!(chars >= 50_000);
        let c = toy_documents(6, 50_000);
        assert_ne!(a[0].text, c[0].text);
    }

    #[test]
    fn pairs_differ_and_tag_phenomena() {
        let suite = toy_minimal_pairs(1, 30);
        assert_eq!(suite.pairs.len(), 30);
        suite.validate().unwrap();
        for pair in &suite.pairs {
            assert_ne!(pair.sentence_good, pair.sentence_bad);
            assert!(!pair.phenomenon.is_empty());
        }
        let phenomena: std::collections::BTreeSet<&str> = suite
            .pairs
            .iter()
            .map(|p| p.phenomenon.as_str())
            .collect();
        assert_eq!(phenomena.len(), 3);
    }

    #[test]
    fn classification_labels_balanced() {
        let data = toy_classification(2, 40);
        let ones: usize = data.iter().map(|e| e.label).sum();
        assert_eq!(ones, 20);
    }
}
