//! Representation similarity (PWCCA) and visually-grounded ratio reports.

mod grounded;
mod pwcca;

use crate::encoder::layers::Dropout;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::params::{BoundParams, ParamStore};
use crate::tokenize::Vocab;

pub use grounded::{
    categorize_examples, classify_text, grounded_ratio, quantile, ratio_from_counts, summarize, summarize_categories,
    summary_csv, Category, ExampleRecord, GroundedCounts, GroundedReport, Summary,
};
pub use pwcca::{cca, pwcca, pwcca_report, CcaResult, PwccaReport, RepresentationSet, EIG_CLIP};

/// Words that are single whole-word tokens in both vocabularies, in the
/// language vocabulary's order. Restricted to `words` when given.
pub fn shared_words(lang: &Vocab, clip: &Vocab, words: Option<&[String]>) -> Vec<String> {
    let candidates: Vec<String> = match words {
        Some(w) => w.to_vec(),
        None => lang.tokens()[lang.n_specials()..]
            .iter()
            .filter(|t| !t.starts_with("##"))
            .cloned()
            .collect(),
    };
    candidates
        .into_iter()
        .filter(|w| lang.whole_word_id(w).is_some() && clip.whole_word_id(w).is_some())
        .collect()
}

/// Input-embedding rows of `words` from one encoder.
pub fn static_embeddings(
    encoder: &Encoder,
    store: &ParamStore,
    vocab: &Vocab,
    words: &[String],
    source: &str,
) -> Result<RepresentationSet> {
    let name = format!("{}.embeddings.token", encoder.prefix);
    let table = store
        .by_name(&name)
        .ok_or_else(|| Error::Contract(format!("parameter {name} not allocated")))?;
    let rows = words
        .iter()
        .map(|w| {
            let id = vocab
                .whole_word_id(w)
                .ok_or_else(|| Error::Contract(format!("{w:?} is not a whole-word token")))?;
            Ok(table.row(id as usize).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    RepresentationSet::new(Tensor::from_rows(&rows)?, source)
}

/// Final-layer state of each word encoded on its own, taken at the word's
/// first piece.
pub fn contextual_embeddings(
    encoder: &Encoder,
    store: &ParamStore,
    vocab: &Vocab,
    words: &[String],
    source: &str,
) -> Result<RepresentationSet> {
    let rows = words
        .iter()
        .map(|w| {
            let seq = vocab.encode(&[w.as_str()])?;
            let tape = Tape::new();
            let p = BoundParams::new(&tape, store);
            let h = encoder.forward(&p, &seq, &Dropout::off())?.value();
            Ok(h.row(1).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    RepresentationSet::new(Tensor::from_rows(&rows)?, source)
}
