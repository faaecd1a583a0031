use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::batch::{CrossModalBatch, Replacement};
use super::model::{CrossModalModel, ModelConfig};
use super::Objectives;
use crate::crossmodal::{chunk_for_clip, ChunkMode};
use crate::encoder::layers::Dropout;
use crate::error::{Error, Result};
use crate::numerics::check_params;
use crate::tokenize::{Stream, TokenSequence};

/// Layer kinds reported by [`gradcheck_model`].
pub const LAYER_KINDS: [&str; 9] = [
    "embedding",
    "self-attention",
    "cross-attention",
    "ffn",
    "layer-norm",
    "pooler",
    "mlm-head",
    "match-head",
    "cliptc-head",
];

fn kind_of(name: &str) -> &'static str {
    if name.contains(".embeddings.") && !name.contains(".norm.") {
        "embedding"
    } else if name.contains("norm.") {
        "layer-norm"
    } else if name.contains(".cross_attention.") {
        "cross-attention"
    } else if name.contains("attention.") {
        "self-attention"
    } else if name.contains(".ffn.") {
        "ffn"
    } else if name.contains(".pooler.") {
        "pooler"
    } else if name.starts_with("heads.mlm") {
        "mlm-head"
    } else if name.starts_with("heads.match") {
        "match-head"
    } else {
        "cliptc-head"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindCheck {
    pub kind: String,
    pub tensors: usize,
    pub max_rel_err: f64,
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, vocab: usize, stream: Stream) -> TokenSequence {
    TokenSequence {
        ids: (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect(),
        attention_mask: vec![1; len],
        segment_ids: vec![0; len],
        stream,
    }
}

/// Finite-difference check of every tensor of a freshly initialized (and
/// randomly perturbed) full model under the summed three-objective loss.
/// Dims above 16 are refused; the clip stream uses two blocks.
pub fn gradcheck_model(config: &ModelConfig, seed: u64, coords_per_tensor: usize) -> Result<Vec<KindCheck>> {
    let dims = [config.language.hidden_dim, config.clip.hidden_dim, config.cross.shared()];
    if dims.iter().any(|&d| d > 16) {
        return Err(Error::Config(format!("gradient checks run at toy widths (at most 16), got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CrossModalModel::new(config.clone(), &mut rng)?;
    for (_, t) in model.store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let lang_len = 7.min(config.language.max_len);
    let lang = random_sequence(&mut rng, lang_len, config.language.vocab_size, Stream::Language);
    let clip_seq = random_sequence(&mut rng, 90, config.clip.vocab_size, Stream::Clip);
    let clip = chunk_for_clip(&clip_seq, ChunkMode::FinetuneSingle, 0)?;
    let mut mlm_labels = vec![None; lang_len];
    let mut replacements = vec![None; lang_len];
    for i in [1, 3, 5].into_iter().filter(|&i| i < lang_len) {
        mlm_labels[i] = Some(rng.gen_range(0..config.language.vocab_size as u32));
        replacements[i] = Some(Replacement::Mask);
    }
    let cliptc_positions = vec![0, 10, 40, 85];
    let cliptc_labels = cliptc_positions.iter().map(|&i| clip.flatten().ids[i]).collect();
    let batch = CrossModalBatch {
        lang,
        clip,
        match_label: Some(1),
        mlm_labels,
        replacements,
        cliptc_positions,
        cliptc_labels,
    };
    let ids: Vec<_> = model.store.ids().collect();
    let report = check_params(&model.store, &ids, coords_per_tensor, crate::numerics::DEFAULT_STEP, |p| {
        let out = model.encode(p, &batch, &Dropout::off(), false)?;
        let l = model.losses(p, &batch, &out, &Objectives::ALL)?;
        let parts = [l.mlm, l.match_, l.cliptc];
        let mut total = parts[0].ok_or_else(|| Error::Contract("no mlm loss".into()))?;
        for x in parts[1..].iter().flatten() {
            total = total.add(x)?;
        }
        Ok(total)
    })?;
    let mut by_kind: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for t in &report.tensors {
        let e = by_kind.entry(kind_of(&t.name)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 = e.1.max(t.max_rel_err);
    }
    Ok(LAYER_KINDS
        .iter()
        .filter_map(|k| {
            by_kind.get(k).map(|&(tensors, max_rel_err)| KindCheck { kind: k.to_string(), tensors, max_rel_err })
        })
        .collect())
}
