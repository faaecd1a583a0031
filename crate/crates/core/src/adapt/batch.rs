use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::crossmodal::{chunk_for_clip, ChunkMode, ChunkedSequence};
use crate::error::{Error, Result};
use crate::tokenize::{TokenId, TokenSequence, Vocab};

/// BERT-style masking recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSpec {
    pub select_ratio: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    pub keep_prob: f64,
}

impl Default for MaskingSpec {
    fn default() -> Self {
        MaskingSpec {
            select_ratio: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            keep_prob: 0.1,
        }
    }
}

impl MaskingSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.select_ratio, self.mask_prob, self.random_prob, self.keep_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("masking probabilities outside [0, 1]: {probs:?}")));
        }
        let total = self.mask_prob + self.random_prob + self.keep_prob;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mask/random/keep probabilities sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// What happened to a selected language position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

/// One adaptation input: both streams, targets for all three objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalBatch {
    pub lang: TokenSequence,
    pub clip: ChunkedSequence,
    /// 1 when the clip stream carries the same text.
    pub match_label: Option<u8>,
    /// Original id at selected language positions.
    pub mlm_labels: Vec<Option<TokenId>>,
    /// How each selected position was altered (parallel to `mlm_labels`).
    pub replacements: Vec<Option<Replacement>>,
    /// Indices into the flattened clip sequence.
    pub cliptc_positions: Vec<usize>,
    pub cliptc_labels: Vec<TokenId>,
}

/// Adaptation examples: runs of consecutive sentences from one document.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptData {
    pub examples: Vec<Vec<String>>,
}

impl AdaptData {
    /// Packs consecutive sentences of each document while the language
    /// encoding stays within `max_lang_tokens`.
    pub fn pack(corpus: &Corpus, lang_vocab: &Vocab, max_lang_tokens: usize) -> Result<Self> {
        if max_lang_tokens < 3 {
            return Err(Error::Config("max_lang_tokens must be at least 3".into()));
        }
        let mut examples = Vec::new();
        for doc in &corpus.documents {
            let mut current: Vec<String> = Vec::new();
            let mut len = 1;
            for s in doc {
                let n = lang_vocab.tokenize(s).len() + 1;
                if !current.is_empty() && len + n > max_lang_tokens {
                    examples.push(std::mem::take(&mut current));
                    len = 1;
                }
                current.push(s.clone());
                len += n;
            }
            if !current.is_empty() {
                examples.push(current);
            }
        }
        if examples.is_empty() {
            return Err(Error::InsufficientData("corpus has no sentences".into()));
        }
        Ok(AdaptData { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Shared inputs to batch construction.
#[derive(Clone, Copy)]
pub struct BatchContext<'a> {
    pub lang_vocab: &'a Vocab,
    pub clip_vocab: &'a Vocab,
    pub masking: &'a MaskingSpec,
    pub max_lang_tokens: usize,
    pub with_match: bool,
}

fn cut_language(mut seq: TokenSequence, max: usize, end: TokenId) -> TokenSequence {
    if seq.len() > max {
        seq.ids.truncate(max - 1);
        seq.ids.push(end);
        seq.attention_mask.truncate(max);
        seq.segment_ids.truncate(max);
    }
    seq
}

/// Builds the input for example `index`. With `with_match`, the clip stream
/// carries a uniformly drawn different example half of the time.
pub fn make_adapt_batch<R: Rng + ?Sized>(
    data: &AdaptData,
    index: usize,
    ctx: BatchContext<'_>,
    rng: &mut R,
) -> Result<CrossModalBatch> {
    ctx.masking.validate()?;
    let n = data.len();
    if index >= n {
        return Err(Error::Index { what: "example", index, size: n });
    }
    if ctx.with_match && n < 2 {
        return Err(Error::InsufficientData(
            "a negative MATCH pair needs at least two examples".into(),
        ));
    }
    let text: Vec<&str> = data.examples[index].iter().map(String::as_str).collect();
    let lsp = ctx.lang_vocab.specials();
    let mut lang = cut_language(ctx.lang_vocab.encode_document(&text), ctx.max_lang_tokens, lsp.end);

    let (match_label, clip_index) = if ctx.with_match {
        if rng.gen_bool(0.5) {
            (Some(1), index)
        } else {
            let other = rng.gen_range(0..n - 1);
            (Some(0), if other >= index { other + 1 } else { other })
        }
    } else {
        (None, index)
    };
    let clip_text: Vec<&str> = data.examples[clip_index].iter().map(String::as_str).collect();
    let clip_seq = ctx.clip_vocab.encode_document(&clip_text);
    let clip = chunk_for_clip(&clip_seq, ChunkMode::Adapt, ctx.clip_vocab.specials().pad)?;

    let mask_id = lsp.mask.expect("language vocab has [MASK]");
    let n_special = ctx.lang_vocab.n_specials() as TokenId;
    let vocab_len = ctx.lang_vocab.len() as TokenId;
    let spec = ctx.masking;
    let mut mlm_labels = vec![None; lang.len()];
    let mut replacements = vec![None; lang.len()];
    for i in 0..lang.len() {
        let id = lang.ids[i];
        if ctx.lang_vocab.is_special(id) || !rng.gen_bool(spec.select_ratio) {
            continue;
        }
        mlm_labels[i] = Some(id);
        let u: f64 = rng.gen();
        let r = if u < spec.mask_prob {
            lang.ids[i] = mask_id;
            Replacement::Mask
        } else if u < spec.mask_prob + spec.random_prob {
            lang.ids[i] = rng.gen_range(n_special..vocab_len);
            Replacement::Random
        } else {
            Replacement::Keep
        };
        replacements[i] = Some(r);
    }

    let flat = clip.flatten();
    let mut cliptc_positions = Vec::new();
    let mut cliptc_labels = Vec::new();
    for (i, (&id, &m)) in flat.ids.iter().zip(&flat.attention_mask).enumerate() {
        if m == 1 && rng.gen_bool(spec.select_ratio) {
            cliptc_positions.push(i);
            cliptc_labels.push(id);
        }
    }
    Ok(CrossModalBatch {
        lang,
        clip,
        match_label,
        mlm_labels,
        replacements,
        cliptc_positions,
        cliptc_labels,
    })
}

/// Example order for one epoch.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::synthetic_corpus;
    use crate::tokenize::{build_vocab, Stream};

    fn fixture() -> (AdaptData, Vocab, Vocab) {
        let corpus = synthetic_corpus(60, 5);
        let lv = build_vocab(&corpus, Stream::Language, 300).unwrap();
        let cv = build_vocab(&corpus, Stream::Clip, 300).unwrap();
        (AdaptData::pack(&corpus, &lv, 32).unwrap(), lv, cv)
    }

    #[test]
    fn zero_ratio_selects_nothing() {
        let (data, lv, cv) = fixture();
        let spec = MaskingSpec { select_ratio: 0.0, ..Default::default() };
        let ctx = BatchContext { lang_vocab: &lv, clip_vocab: &cv, masking: &spec, max_lang_tokens: 32, with_match: true };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_adapt_batch(&data, 0, ctx, &mut rng).unwrap();
        assert!(b.mlm_labels.iter().all(Option::is_none));
        assert!(b.cliptc_positions.is_empty());
    }

    #[test]
    fn packing_respects_budget() {
        let (data, lv, _) = fixture();
        for ex in &data.examples {
            let text: Vec<&str> = ex.iter().map(String::as_str).collect();
            assert!(lv.encode_document(&text).len() <= 32 || ex.len() == 1);
        }
    }

    #[test]
    fn single_example_cannot_match() {
        let (_, lv, cv) = fixture();
        let data = AdaptData { examples: vec![vec!["the dog .".into()]] };
        let spec = MaskingSpec::default();
        let ctx = BatchContext { lang_vocab: &lv, clip_vocab: &cv, masking: &spec, max_lang_tokens: 32, with_match: true };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(make_adapt_batch(&data, 0, ctx, &mut rng), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn clip_side_never_masked() {
        let (data, lv, cv) = fixture();
        let spec = MaskingSpec { select_ratio: 1.0, ..Default::default() };
        let ctx = BatchContext { lang_vocab: &lv, clip_vocab: &cv, masking: &spec, max_lang_tokens: 32, with_match: false };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_adapt_batch(&data, 2, ctx, &mut rng).unwrap();
        let text: Vec<&str> = data.examples[2].iter().map(String::as_str).collect();
        assert_eq!(b.clip.content_ids(), cv.encode_document(&text).ids);
        assert_eq!(b.cliptc_positions.len(), b.clip.content_ids().len());
    }
}
