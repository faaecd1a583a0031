//! Cross-modal adaptation: joint MLM, MATCH and CLIPTC objectives, the
//! training loop, toy contrastive pretraining of the clip stream, and
//! extraction of the adapted language encoder.

mod batch;
mod contrastive;
mod gradcheck;
mod model;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::layers::Dropout;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, Schedule, Tape, Var};
use crate::params::{BoundParams, GradStore, ParamStore};
use crate::tokenize::Vocab;

pub use batch::{epoch_order, make_adapt_batch, AdaptData, BatchContext, CrossModalBatch, MaskingSpec, Replacement};
pub use contrastive::{
    contrastive_gap, synthetic_pairs, toy_contrastive_pretrain, visual_targets, ContrastiveConfig,
    ContrastiveGap, ContrastiveReport,
};
pub use gradcheck::{gradcheck_model, KindCheck, LAYER_KINDS};
pub use model::{CrossModalModel, LossVars, ModelConfig, CLIP_PREFIX, CROSS_PREFIX, LANG_PREFIX};

/// Which adaptation objectives are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objectives {
    pub mlm: bool,
    #[serde(rename = "match")]
    pub match_: bool,
    pub cliptc: bool,
}

impl Objectives {
    pub const ALL: Objectives = Objectives { mlm: true, match_: true, cliptc: true };

    pub fn any(&self) -> bool {
        self.mlm || self.match_ || self.cliptc
    }
}

impl Default for Objectives {
    fn default() -> Self {
        Self::ALL
    }
}

impl FromStr for Objectives {
    type Err = Error;

    /// Comma-separated subset of `mlm,match,cliptc`.
    fn from_str(s: &str) -> Result<Self> {
        let mut o = Objectives { mlm: false, match_: false, cliptc: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "mlm" => o.mlm = true,
                "match" => o.match_ = true,
                "cliptc" => o.cliptc = true,
                other => return Err(Error::Config(format!("unknown objective {other:?}"))),
            }
        }
        if !o.any() {
            return Err(Error::Config("no objective selected".into()));
        }
        Ok(o)
    }
}

/// Loss values of one step (means over the minibatch).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdaptLoss {
    pub mlm: f64,
    #[serde(rename = "match")]
    pub match_: f64,
    pub cliptc: f64,
    pub total: f64,
    pub weights: [f64; 3],
}

impl AdaptLoss {
    fn from_components(mlm: f64, match_: f64, cliptc: f64, weights: [f64; 3]) -> Self {
        AdaptLoss {
            mlm,
            match_,
            cliptc,
            total: weights[0] * mlm + weights[1] * match_ + weights[2] * cliptc,
            weights,
        }
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_warmup() -> f64 {
    0.05
}
fn default_weights() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn default_decay() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default = "default_decay")]
    pub epoch_decay: f64,
    #[serde(default)]
    pub objectives: Objectives,
    /// (mlm, match, cliptc)
    #[serde(default = "default_weights")]
    pub weights: [f64; 3],
    #[serde(default)]
    pub masking: MaskingSpec,
    pub max_lang_tokens: usize,
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !self.objectives.any() {
            return Err(Error::Config("all adaptation objectives are off".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("bad loss weights {:?}", self.weights)));
        }
        self.masking.validate()
    }
}

/// One optimizer step of the loss history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub epoch: usize,
    pub loss: AdaptLoss,
    pub lr: f64,
}

/// Loss values for one batch under the current weights (no dropout, no
/// update).
pub fn adapt_losses(
    model: &CrossModalModel,
    batch: &CrossModalBatch,
    objectives: &Objectives,
    weights: [f64; 3],
) -> Result<AdaptLoss> {
    let tape = Tape::new();
    let p = BoundParams::new(&tape, &model.store);
    let out = model.encode(&p, batch, &Dropout::off(), false)?;
    let l = model.losses(&p, batch, &out, objectives)?;
    let v = |x: Option<Var>| x.map_or(0.0, |x| x.item());
    Ok(AdaptLoss::from_components(v(l.mlm), v(l.match_), v(l.cliptc), weights))
}

fn weighted_total<'t>(l: &LossVars<'t>, weights: [f64; 3]) -> Result<Option<Var<'t>>> {
    let mut total: Option<Var<'t>> = None;
    for (part, w) in [l.mlm, l.match_, l.cliptc].into_iter().zip(weights) {
        if let Some(x) = part {
            let x = x.scale(w);
            total = Some(match total {
                Some(t) => t.add(&x)?,
                None => x,
            });
        }
    }
    Ok(total)
}

/// Trains `model` in place and returns the per-step loss history.
pub fn run_adaptation(
    model: &mut CrossModalModel,
    data: &AdaptData,
    lang_vocab: &Vocab,
    clip_vocab: &Vocab,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("no adaptation examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::new(cfg.lr, cfg.warmup_ratio, cfg.epochs * per_epoch, cfg.epoch_decay)?;
    let mut opt = OptimizerState::new(&model.store, schedule);
    let ctx = BatchContext {
        lang_vocab,
        clip_vocab,
        masking: &cfg.masking,
        max_lang_tokens: cfg.max_lang_tokens.min(model.config.language.max_len),
        with_match: cfg.objectives.match_,
    };
    let mut history = Vec::with_capacity(cfg.epochs * per_epoch);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step = history.len() + 1;
            let mut grads = GradStore::empty(model.store.len());
            let mut sums = [0.0; 3];
            let mut counts = [0usize; 3];
            for &i in chunk {
                let batch = make_adapt_batch(data, i, ctx, &mut rng)?;
                let dropout = Dropout::train(rng.gen());
                let tape = Tape::new();
                let p = BoundParams::new(&tape, &model.store);
                let out = model.encode(&p, &batch, &dropout, false)?;
                let l = model.losses(&p, &batch, &out, &cfg.objectives)?;
                for (k, part) in [l.mlm, l.match_, l.cliptc].iter().enumerate() {
                    if let Some(x) = part {
                        sums[k] += x.item();
                        counts[k] += 1;
                    }
                }
                if let Some(total) = weighted_total(&l, cfg.weights)? {
                    if !total.item().is_finite() {
                        return Err(Error::NonFinite { what: "adaptation loss", step });
                    }
                    grads.accumulate(&p.collect(tape.backward(total)?));
                }
            }
            grads.scale(1.0 / chunk.len() as f64);
            if !grads.is_finite() {
                return Err(Error::NonFinite { what: "adaptation gradient", step });
            }
            let mean = |k: usize| if counts[k] == 0 { 0.0 } else { sums[k] / counts[k] as f64 };
            let loss = AdaptLoss::from_components(mean(0), mean(1), mean(2), cfg.weights);
            let lr = opt.step(&mut model.store, &grads, epoch)?;
            history.push(StepRecord { step, epoch, loss, lr });
        }
    }
    Ok(history)
}

/// Writes `step,mlm,match,cliptc,total,lr`, preceded by a `# config` line
/// when a hash is given.
pub fn write_loss_csv(history: &[StepRecord], config_hash: Option<&str>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    if let Some(h) = config_hash {
        writeln!(out, "# config {h}").unwrap();
    }
    out.push_str("step,mlm,match,cliptc,total,lr\n");
    for r in history {
        let l = &r.loss;
        writeln!(out, "{},{:.8},{:.8},{:.8},{:.8},{:.8e}", r.step, l.mlm, l.match_, l.cliptc, l.total, r.lr).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The language stream of an adapted model, on its own.
#[derive(Clone, Debug)]
pub struct ExtractedEncoder {
    pub encoder: Encoder,
    pub store: ParamStore,
}

impl ExtractedEncoder {
    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        Ok(ExtractedEncoder {
            encoder: Encoder::bind(config, LANG_PREFIX, &store)?,
            store,
        })
    }
}

/// Copies exactly the language-encoder tensors out of `model`.
pub fn extract_language_encoder(model: &CrossModalModel) -> Result<ExtractedEncoder> {
    let prefix = format!("{LANG_PREFIX}.");
    let mut store = ParamStore::new();
    for (_, name, t) in model.store.iter() {
        if name.starts_with(&prefix) {
            store.insert(name, t.clone())?;
        }
    }
    ExtractedEncoder::from_store(model.config.language.clone(), store)
}
