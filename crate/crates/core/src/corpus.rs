//! Plain-text corpora: one sentence per line, blank line between documents.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Vec<String>>,
}

impl Corpus {
    pub fn parse(text: &str) -> Self {
        let mut documents = Vec::new();
        let mut current = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                if !current.is_empty() {
                    documents.push(std::mem::take(&mut current));
                }
            } else {
                current.push(line.to_string());
            }
        }
        if !current.is_empty() {
            documents.push(current);
        }
        Corpus { documents }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn to_text(&self) -> String {
        self.documents
            .iter()
            .map(|d| d.join("\n"))
            .collect::<Vec<_>>()
            .join("\n\n")
            + "\n"
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.documents.iter().flatten().map(String::as_str)
    }

    pub fn n_sentences(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_sentences() == 0
    }
}

/// Words with an obvious visual referent, used by the synthetic corpus and
/// the bundled caption-frequency table.
pub const VISUAL_WORDS: &[&str] = &[
    "dog", "cat", "horse", "bird", "tree", "river", "mountain", "car", "train", "boat", "red",
    "blue", "green", "yellow", "white", "black", "table", "chair", "window", "door", "street",
    "city", "beach", "snow", "grass", "flower", "kitchen", "plate", "pizza", "bicycle", "bridge",
    "lake", "field", "sky", "child", "woman", "man", "hat", "ball", "bus",
];

/// Words without a visual referent.
pub const ABSTRACT_WORDS: &[&str] = &[
    "idea", "theory", "policy", "reason", "debate", "economy", "justice", "freedom", "memory",
    "history", "argument", "decision", "principle", "agreement", "opinion", "truth", "value",
    "method", "process", "question", "answer", "meaning", "concept", "belief", "strategy",
    "proposal", "analysis", "evidence", "tradition", "influence",
];

pub(crate) const VERBS: &[&str] = &[
    "describes", "follows", "supports", "changes", "explains", "shapes", "reflects", "holds",
    "shows", "resembles", "crosses", "faces", "meets", "leaves", "passes",
];

pub(crate) const MODIFIERS: &[&str] = &[
    "small", "large", "old", "new", "quiet", "bright", "distant", "early", "simple", "strange",
];

const LINKS: &[&str] = &["near", "behind", "beside", "under", "above", "with", "after", "before"];

/// Nouns per topic: visual words split into five topics of eight, abstract
/// words into three of ten.
fn topics() -> Vec<&'static [&'static str]> {
    let mut t: Vec<&'static [&'static str]> = VISUAL_WORDS.chunks(8).collect();
    t.extend(ABSTRACT_WORDS.chunks(10));
    t
}

/// Share of a document's nouns drawn from its own topic.
const TOPIC_PURITY: f64 = 0.85;

/// Deterministic synthetic corpus of `n_sentences` sentences grouped into
/// documents of 4–8 sentences. Each document has a topic that supplies most
/// of its nouns, so visual and abstract words both occur in context and
/// unrelated documents rarely share content words.
pub fn synthetic_corpus(n_sentences: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = topics();
    let all: Vec<&str> = VISUAL_WORDS.iter().chain(ABSTRACT_WORDS).copied().collect();
    let mut documents = Vec::new();
    let mut remaining = n_sentences;
    while remaining > 0 {
        let len = rng.gen_range(4..=8).min(remaining);
        let topic = topics[rng.gen_range(0..topics.len())];
        let doc = (0..len)
            .map(|_| synthetic_sentence(&mut rng, topic, &all))
            .collect();
        documents.push(doc);
        remaining -= len;
    }
    Corpus { documents }
}

fn synthetic_sentence(rng: &mut ChaCha8Rng, topic: &[&'static str], all: &[&'static str]) -> String {
    let noun = |rng: &mut ChaCha8Rng| -> &'static str {
        if rng.gen_bool(TOPIC_PURITY) {
            topic.choose(rng).unwrap()
        } else {
            all.choose(rng).unwrap()
        }
    };
    let mut words = vec!["the", MODIFIERS.choose(rng).unwrap(), noun(rng)];
    words.push(VERBS.choose(rng).unwrap());
    words.push("the");
    words.push(noun(rng));
    if rng.gen_bool(0.6) {
        words.push(LINKS.choose(rng).unwrap());
        words.push("a");
        if rng.gen_bool(0.5) {
            words.push(MODIFIERS.choose(rng).unwrap());
        }
        words.push(noun(rng));
    }
    format!("{} .", words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_lines_split_documents() {
        let c = Corpus::parse("a b\nc d\n\n\ne f\n");
        assert_eq!(c.documents.len(), 2);
        assert_eq!(c.n_sentences(), 3);
        assert_eq!(Corpus::parse(&c.to_text()), c);
    }

    #[test]
    fn synthetic_is_deterministic_and_sized() {
        let a = synthetic_corpus(200, 1);
        assert_eq!(a.n_sentences(), 200);
        assert_eq!(a, synthetic_corpus(200, 1));
        assert_ne!(a, synthetic_corpus(200, 2));
    }
}
