use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crossmodal::{self, ChunkedSequence, CrossModalConfig, CrossModalEncoder, CrossOutput, StreamInputs, BLOCK_LEN};
use crate::encoder::layers::{allocate, linear_specs, Dropout, Linear, ParamSpec};
use crate::encoder::{self, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{concat_rows, Var};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tokenize::TokenSequence;

use super::batch::CrossModalBatch;

pub const LANG_PREFIX: &str = "lang";
pub const CLIP_PREFIX: &str = "clip";
pub const CROSS_PREFIX: &str = "cross";
const MLM_HEAD: &str = "heads.mlm";
const MATCH_HEAD: &str = "heads.match";
const CLIPTC_HEAD: &str = "heads.cliptc";

/// Both encoders plus the cross-modal stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub language: EncoderConfig,
    pub clip: EncoderConfig,
    pub cross: CrossModalConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.language.validate()?;
        self.clip.validate()?;
        self.cross.validate()?;
        if self.cross.lang_dim != self.language.hidden_dim || self.cross.clip_dim != self.clip.hidden_dim {
            return Err(Error::Config(format!(
                "cross dims ({}, {}) do not match encoder widths ({}, {})",
                self.cross.lang_dim, self.cross.clip_dim, self.language.hidden_dim, self.clip.hidden_dim
            )));
        }
        if self.clip.max_len < BLOCK_LEN {
            return Err(Error::Config(format!(
                "clip max_len {} is shorter than a {BLOCK_LEN}-token block",
                self.clip.max_len
            )));
        }
        if self.clip.type_vocab_size != 0 {
            return Err(Error::Config("clip stream takes no segment embeddings".into()));
        }
        Ok(())
    }

    /// Every tensor of the full model, in allocation order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut out = encoder::layout(&self.language, LANG_PREFIX);
        out.extend(encoder::layout(&self.clip, CLIP_PREFIX));
        out.extend(crossmodal::layout(&self.cross, CROSS_PREFIX));
        linear_specs(&mut out, MLM_HEAD, self.language.hidden_dim, self.language.vocab_size);
        linear_specs(&mut out, MATCH_HEAD, self.language.hidden_dim, 2);
        linear_specs(&mut out, CLIPTC_HEAD, self.clip.hidden_dim, self.clip.vocab_size);
        out
    }
}

/// Full model: parameters plus typed handles into them.
#[derive(Clone, Debug)]
pub struct CrossModalModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub lang: Encoder,
    pub clip: Encoder,
    pub cross: CrossModalEncoder,
    mlm_head: Linear,
    match_head: Linear,
    cliptc_head: Linear,
}

/// Loss components as graph nodes; `None` when the objective is off or has
/// no targets in the batch.
pub struct LossVars<'t> {
    pub mlm: Option<Var<'t>>,
    pub match_: Option<Var<'t>>,
    pub cliptc: Option<Var<'t>>,
}

impl CrossModalModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        allocate(&mut store, &config.layout(), rng)?;
        Self::from_store(config, store)
    }

    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(CrossModalModel {
            lang: Encoder::bind(config.language.clone(), LANG_PREFIX, &store)?,
            clip: Encoder::bind(config.clip.clone(), CLIP_PREFIX, &store)?,
            cross: CrossModalEncoder::bind(config.cross.clone(), CROSS_PREFIX, &store)?,
            mlm_head: Linear::bind(&store, MLM_HEAD)?,
            match_head: Linear::bind(&store, MATCH_HEAD)?,
            cliptc_head: Linear::bind(&store, CLIPTC_HEAD)?,
            config,
            store,
        })
    }

    /// Parameter ids of the three objective heads.
    pub fn head_ids(&self) -> [ParamId; 6] {
        [
            self.mlm_head.weight,
            self.mlm_head.bias,
            self.match_head.weight,
            self.match_head.bias,
            self.cliptc_head.weight,
            self.cliptc_head.bias,
        ]
    }

    pub fn cliptc_head(&self) -> Linear {
        self.cliptc_head
    }

    /// Encodes both streams and runs the cross-modal stack.
    pub fn encode<'t>(
        &self,
        p: &BoundParams<'t, '_>,
        batch: &CrossModalBatch,
        dropout: &Dropout,
        record: bool,
    ) -> Result<CrossOutput<'t>> {
        self.encode_streams(p, &batch.lang, &batch.clip, dropout, record)
    }

    /// As [`encode`](Self::encode) for raw inputs. Clip blocks are encoded
    /// independently and concatenated.
    pub fn encode_streams<'t>(
        &self,
        p: &BoundParams<'t, '_>,
        lang: &TokenSequence,
        clip: &ChunkedSequence,
        dropout: &Dropout,
        record: bool,
    ) -> Result<CrossOutput<'t>> {
        let lang_h = self.lang.forward(p, lang, dropout)?;
        let blocks = clip
            .blocks
            .iter()
            .map(|b| self.clip.forward(p, b, dropout))
            .collect::<Result<Vec<_>>>()?;
        let clip_h = concat_rows(&blocks)?;
        let lang_valid = lang.key_valid();
        let clip_valid = clip.flatten().key_valid();
        self.cross.forward(
            p,
            StreamInputs {
                lang: lang_h,
                lang_valid: &lang_valid,
                clip: clip_h,
                clip_valid: &clip_valid,
            },
            dropout,
            record,
        )
    }

    /// Pooled language summary after the cross-modal stack.
    pub fn pooled<'t>(&self, p: &BoundParams<'t, '_>, out: &CrossOutput<'t>) -> Result<Var<'t>> {
        self.lang.pool(p, out.lang)
    }

    pub fn losses<'t>(
        &self,
        p: &BoundParams<'t, '_>,
        batch: &CrossModalBatch,
        out: &CrossOutput<'t>,
        objectives: &super::Objectives,
    ) -> Result<LossVars<'t>> {
        let mlm = if objectives.mlm && batch.mlm_labels.iter().any(Option::is_some) {
            let targets: Vec<Option<usize>> = batch.mlm_labels.iter().map(|l| l.map(|t| t as usize)).collect();
            Some(self.mlm_head.forward(p, out.lang)?.cross_entropy(&targets)?)
        } else {
            None
        };
        let match_ = match (objectives.match_, batch.match_label) {
            (true, Some(label)) => {
                let logits = self.match_head.forward(p, self.pooled(p, out)?)?;
                Some(logits.cross_entropy(&[Some(label as usize)])?)
            }
            _ => None,
        };
        let cliptc = if objectives.cliptc && !batch.cliptc_positions.is_empty() {
            let rows = out.clip.gather_rows(&batch.cliptc_positions)?;
            let targets: Vec<Option<usize>> = batch.cliptc_labels.iter().map(|&t| Some(t as usize)).collect();
            Some(self.cliptc_head.forward(p, rows)?.cross_entropy(&targets)?)
        } else {
            None
        };
        Ok(LossVars { mlm, match_, cliptc })
    }
}
