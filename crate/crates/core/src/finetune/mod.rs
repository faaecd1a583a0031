//! Task heads, the finetuning loop and the evaluation metrics.
//!
//! Either the extracted language encoder or the full cross-modal model can
//! be finetuned; both take the same [`TaskSpec`] and report the same
//! per-epoch history.

mod metrics;
mod task;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapt::{epoch_order, CrossModalModel, ExtractedEncoder};
use crate::crossmodal::{chunk_for_clip, ChunkMode, ChunkedSequence};
use crate::encoder::layers::{allocate, linear_specs, Dropout, Linear};
use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, Schedule, Tape, Tensor, Var};
use crate::params::{BoundParams, GradStore, ParamStore};
use crate::tokenize::{TokenSequence, Vocab};

pub use metrics::{average_ranks, compute_metric, median, median_of_runs, MetricKind, RunsSummary, Score};
pub use task::{
    load_examples, load_task, synthetic_task, write_task, Arity, LabeledExample, Target, TaskData, TaskSpec,
};

pub const HEAD_PREFIX: &str = "finetune.head";

/// Tokenized model input for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInput {
    pub lang: TokenSequence,
    pub clip: Option<ChunkedSequence>,
}

/// A backbone that yields one `[1 × d]` summary per input.
pub trait Finetunable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn feature_dim(&self) -> usize;
    fn prepare(&self, example: &LabeledExample, vocabs: &TaskVocabs<'_>) -> Result<TaskInput>;
    fn features<'t>(&self, p: &BoundParams<'t, '_>, input: &TaskInput, dropout: &Dropout) -> Result<Var<'t>>;
}

#[derive(Clone, Copy)]
pub struct TaskVocabs<'a> {
    pub lang: &'a Vocab,
    /// Needed only by the full model.
    pub clip: Option<&'a Vocab>,
}

fn fit_language(mut seq: TokenSequence, max_len: usize) -> TokenSequence {
    if seq.len() > max_len {
        let last = *seq.ids.last().expect("non-empty");
        seq.ids.truncate(max_len - 1);
        seq.ids.push(last);
        seq.attention_mask.truncate(max_len);
        seq.segment_ids.truncate(max_len);
    }
    seq
}

impl Finetunable for ExtractedEncoder {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn feature_dim(&self) -> usize {
        self.encoder.config.hidden_dim
    }

    fn prepare(&self, example: &LabeledExample, vocabs: &TaskVocabs<'_>) -> Result<TaskInput> {
        let lang = vocabs.lang.encode(&example.sentences())?;
        Ok(TaskInput { lang: fit_language(lang, self.encoder.config.max_len), clip: None })
    }

    fn features<'t>(&self, p: &BoundParams<'t, '_>, input: &TaskInput, dropout: &Dropout) -> Result<Var<'t>> {
        let h = self.encoder.forward(p, &input.lang, dropout)?;
        self.encoder.pool(p, h)
    }
}

impl Finetunable for CrossModalModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn feature_dim(&self) -> usize {
        self.config.language.hidden_dim
    }

    fn prepare(&self, example: &LabeledExample, vocabs: &TaskVocabs<'_>) -> Result<TaskInput> {
        let clip_vocab = vocabs
            .clip
            .ok_or_else(|| Error::Config("full-model finetuning needs the clip vocabulary".into()))?;
        let sentences = example.sentences();
        let lang = fit_language(vocabs.lang.encode(&sentences)?, self.config.language.max_len);
        let mode = if sentences.len() == 2 { ChunkMode::FinetunePair } else { ChunkMode::FinetuneSingle };
        let clip = chunk_for_clip(&clip_vocab.encode(&sentences)?, mode, clip_vocab.specials().pad)?;
        Ok(TaskInput { lang, clip: Some(clip) })
    }

    fn features<'t>(&self, p: &BoundParams<'t, '_>, input: &TaskInput, dropout: &Dropout) -> Result<Var<'t>> {
        let clip = input
            .clip
            .as_ref()
            .ok_or_else(|| Error::Contract("full-model input without clip blocks".into()))?;
        let out = self.encode_streams(p, &input.lang, clip, dropout, false)?;
        self.pooled(p, &out)
    }
}

/// Dev metric after one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_score: f64,
    pub undefined: bool,
    /// Rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub task: String,
    pub metric: MetricKind,
    pub history: Vec<EpochRecord>,
}

impl FinetuneReport {
    /// Final-epoch dev score.
    pub fn final_score(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.dev_score)
    }

    /// `epoch,train_loss,dev_score,undefined,lr`.
    pub fn to_csv(&self, config_hash: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = config_hash {
            out.push_str(&format!("# config {h}\n"));
        }
        out.push_str("epoch,train_loss,dev_score,undefined,lr\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{:.8},{:.8},{},{:.8e}\n",
                r.epoch, r.train_loss, r.dev_score, r.undefined, r.lr
            ));
        }
        out
    }
}

/// Adds a freshly initialized head, replacing any earlier one.
fn attach_head<M: Finetunable, R: Rng>(model: &mut M, target: Target, rng: &mut R) -> Result<Linear> {
    let mut specs = Vec::new();
    linear_specs(&mut specs, HEAD_PREFIX, model.feature_dim(), target.output_dim());
    let store = model.store_mut();
    if store.id(&specs[0].name).is_some() {
        let mut tmp = ParamStore::new();
        allocate(&mut tmp, &specs, rng)?;
        store.copy_matching(&tmp)?;
    } else {
        allocate(store, &specs, rng)?;
    }
    Linear::bind(store, HEAD_PREFIX)
}

fn head_output<'t, M: Finetunable>(
    model: &M,
    head: Linear,
    p: &BoundParams<'t, '_>,
    input: &TaskInput,
    dropout: &Dropout,
) -> Result<Var<'t>> {
    let f = model.features(p, input, dropout)?;
    head.forward(p, f)
}

fn loss<'t>(out: Var<'t>, target: Target, label: f64) -> Result<Var<'t>> {
    match target {
        Target::Classification { .. } => out.cross_entropy(&[Some(label as usize)]),
        Target::Regression => {
            let diff = out.sub(&out.tape().constant(Tensor::new(vec![1, 1], vec![label])?))?;
            Ok(diff.mul(&diff)?.mean())
        }
    }
}

fn prediction(out: &Tensor, target: Target) -> f64 {
    match target {
        Target::Classification { .. } => {
            let row = out.row(0);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as f64
        }
        Target::Regression => out.data()[0],
    }
}

fn predict_inputs<M: Finetunable>(model: &M, head: Linear, inputs: &[TaskInput], target: Target) -> Result<Vec<f64>> {
    inputs
        .iter()
        .map(|input| {
            let tape = Tape::new();
            let p = BoundParams::new(&tape, model.store());
            let out = head_output(model, head, &p, input, &Dropout::off())?;
            Ok(prediction(&out.value(), target))
        })
        .collect()
}

/// Predicted class (or value) per example with the current head.
pub fn predict<M: Finetunable>(
    model: &M,
    examples: &[LabeledExample],
    vocabs: &TaskVocabs<'_>,
    target: Target,
) -> Result<Vec<f64>> {
    let head = Linear::bind(model.store(), HEAD_PREFIX)?;
    let inputs = examples.iter().map(|e| model.prepare(e, vocabs)).collect::<Result<Vec<_>>>()?;
    predict_inputs(model, head, &inputs, target)
}

/// Trains a new head together with the whole backbone and evaluates the dev
/// split after every epoch.
pub fn finetune<M: Finetunable>(
    model: &mut M,
    data: &TaskData,
    spec: &TaskSpec,
    vocabs: &TaskVocabs<'_>,
    seed: u64,
) -> Result<FinetuneReport> {
    spec.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::InsufficientData(format!(
            "task {} needs train and dev examples (got {} and {})",
            spec.name,
            data.train.len(),
            data.dev.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = attach_head(model, spec.target, &mut rng)?;
    let prep = |xs: &[LabeledExample]| xs.iter().map(|e| model.prepare(e, vocabs)).collect::<Result<Vec<_>>>();
    let train = prep(&data.train)?;
    let dev = prep(&data.dev)?;
    let dev_labels: Vec<f64> = data.dev.iter().map(|e| e.label).collect();

    let per_epoch = train.len().div_ceil(spec.batch_size);
    let schedule = Schedule::new(spec.lr, spec.warmup_ratio, spec.epochs * per_epoch, spec.epoch_decay)?;
    let mut opt = OptimizerState::new(model.store(), schedule);
    let mut history = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let order = epoch_order(train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let step = opt.step_count() + 1;
            let mut grads = GradStore::empty(model.store().len());
            for &i in chunk {
                let dropout = Dropout::train(rng.gen());
                let tape = Tape::new();
                let p = BoundParams::new(&tape, model.store());
                let out = head_output(&*model, head, &p, &train[i], &dropout)?;
                let l = loss(out, spec.target, data.train[i].label)?;
                let value = l.item();
                if !value.is_finite() {
                    return Err(Error::NonFinite { what: "finetuning loss", step });
                }
                loss_sum += value;
                grads.accumulate(&p.collect(tape.backward(l)?));
            }
            grads.scale(1.0 / chunk.len() as f64);
            lr = opt.step(model.store_mut(), &grads, epoch)?;
        }
        let pred = predict_inputs(&*model, head, &dev, spec.target)?;
        let score = compute_metric(&pred, &dev_labels, spec.metric)?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            dev_score: score.value,
            undefined: score.undefined,
            lr,
        });
    }
    Ok(FinetuneReport { task: spec.name.clone(), metric: spec.metric, history })
}
