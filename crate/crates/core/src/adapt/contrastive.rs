//! Toy contrastive pretraining of the clip stream against fixed target
//! vectors, standing in for paired image embeddings.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::VISUAL_WORDS;
use crate::encoder::layers::Dropout;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{concat_rows, OptimizerState, Schedule, Tape, Tensor, Var};
use crate::params::{BoundParams, ParamStore};
use crate::tokenize::{pre_tokenize, TokenSequence, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            steps: 300,
            lr: 1e-3,
            temperature: 0.1,
        }
    }
}

/// Mean in-pair and cross-pair cosine similarity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ContrastiveGap {
    pub in_pair: f64,
    pub cross_pair: f64,
    /// Largest `|‖H_i‖ − 1|`.
    pub max_norm_error: f64,
}

impl ContrastiveGap {
    pub fn gap(&self) -> f64 {
        self.in_pair - self.cross_pair
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContrastiveReport {
    pub losses: Vec<f64>,
    pub before: ContrastiveGap,
    pub after: ContrastiveGap,
}

fn fit_clip(vocab: &Vocab, s: &str, max_len: usize) -> Result<TokenSequence> {
    let mut seq = vocab.encode(&[s])?;
    if seq.len() > max_len {
        let end = vocab.specials().end;
        seq.ids.truncate(max_len - 1);
        seq.ids.push(end);
        seq.attention_mask.truncate(max_len);
        seq.segment_ids.truncate(max_len);
    }
    Ok(seq)
}

/// L2-normalized start-token outputs `[n × d]`.
fn embed<'t>(clip: &Encoder, p: &BoundParams<'t, '_>, seqs: &[TokenSequence]) -> Result<Var<'t>> {
    let rows = seqs
        .iter()
        .map(|s| clip.forward(p, s, &Dropout::off())?.slice_rows(0, 1))
        .collect::<Result<Vec<_>>>()?;
    concat_rows(&rows)?.normalize_rows()
}

fn check_pairs(clip: &Encoder, pairs: &[(String, Vec<f64>)]) -> Result<Tensor> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientData("contrastive training needs at least two pairs".into()));
    }
    let d = clip.config.hidden_dim;
    let mut data = Vec::with_capacity(pairs.len() * d);
    for (s, v) in pairs {
        if v.len() != d {
            return Err(Error::Shape { op: "toy_contrastive_pretrain", lhs: vec![v.len()], rhs: vec![d] });
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("target for {s:?} has norm {norm}, expected 1")));
        }
        data.extend(v);
    }
    Tensor::new(vec![pairs.len(), d], data)
}

pub fn contrastive_gap(
    clip: &Encoder,
    store: &ParamStore,
    vocab: &Vocab,
    pairs: &[(String, Vec<f64>)],
) -> Result<ContrastiveGap> {
    let targets = check_pairs(clip, pairs)?;
    let seqs = pairs
        .iter()
        .map(|(s, _)| fit_clip(vocab, s, clip.config.max_len))
        .collect::<Result<Vec<_>>>()?;
    let tape = Tape::new();
    let p = BoundParams::new(&tape, store);
    let h = embed(clip, &p, &seqs)?.value();
    let n = pairs.len();
    let sims = h.matmul(&targets.transpose()?)?;
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                diag += sims.get2(i, j);
            } else {
                off += sims.get2(i, j);
            }
        }
    }
    let max_norm_error = (0..n)
        .map(|i| (h.row(i).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(ContrastiveGap {
        in_pair: diag / n as f64,
        cross_pair: off / (n * (n - 1)) as f64,
        max_norm_error,
    })
}

/// Full-batch symmetric InfoNCE over cosine similarities between the clip
/// stream's start-token outputs and `pairs`' unit targets.
pub fn toy_contrastive_pretrain(
    clip: &Encoder,
    store: &mut ParamStore,
    vocab: &Vocab,
    pairs: &[(String, Vec<f64>)],
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveReport> {
    let targets = check_pairs(clip, pairs)?;
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let seqs = pairs
        .iter()
        .map(|(s, _)| fit_clip(vocab, s, clip.config.max_len))
        .collect::<Result<Vec<_>>>()?;
    let before = contrastive_gap(clip, store, vocab, pairs)?;
    let diag: Vec<Option<usize>> = (0..pairs.len()).map(Some).collect();
    let mut opt = OptimizerState::new(store, Schedule::new(cfg.lr, 0.0, cfg.steps, 1.0)?);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let p = BoundParams::new(&tape, store);
        let h = embed(clip, &p, &seqs)?;
        let logits = h.matmul(&tape.constant(targets.transpose()?))?.scale(1.0 / cfg.temperature);
        let loss = logits
            .cross_entropy(&diag)?
            .add(&logits.transpose()?.cross_entropy(&diag)?)?
            .scale(0.5);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "contrastive loss", step: step + 1 });
        }
        losses.push(value);
        let grads = p.collect(tape.backward(loss)?);
        drop(p);
        opt.step(store, &grads, 0)?;
    }
    let after = contrastive_gap(clip, store, vocab, pairs)?;
    Ok(ContrastiveReport { losses, before, after })
}

fn word_vectors(dim: usize, seed: u64) -> HashMap<&'static str, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VISUAL_WORDS
        .iter()
        .map(|&w| (w, Tensor::randn(&[dim], 1.0, &mut rng).into_data()))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Target vector per sentence: the normalized sum of random per-word vectors
/// over its visual words; `None` for sentences without one.
pub fn visual_targets(sentences: &[&str], dim: usize, seed: u64) -> Vec<Option<Vec<f64>>> {
    let vecs = word_vectors(dim, seed);
    sentences
        .iter()
        .map(|s| {
            let mut acc = vec![0.0; dim];
            let mut any = false;
            for w in pre_tokenize(s) {
                if let Some(v) = vecs.get(w.as_str()) {
                    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                    any = true;
                }
            }
            if any {
                unit(acc)
            } else {
                None
            }
        })
        .collect()
}

/// `n` short captions over distinct visual words with their targets.
pub fn synthetic_pairs(n: usize, dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words: Vec<&str> = VISUAL_WORDS.to_vec();
    words.shuffle(&mut rng);
    let sentences: Vec<String> = (0..n)
        .map(|i| {
            let a = words[(2 * i) % words.len()];
            let b = words[(2 * i + 1) % words.len()];
            format!("a {a} near the {b} .")
        })
        .collect();
    let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
    let targets = visual_targets(&refs, dim, seed.wrapping_add(1));
    sentences
        .into_iter()
        .zip(targets)
        .map(|(s, t)| (s, t.expect("every caption has visual words")))
        .collect()
}
