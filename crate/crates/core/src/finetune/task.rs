use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricKind;
use crate::corpus::{ABSTRACT_WORDS, MODIFIERS, VERBS, VISUAL_WORDS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arity {
    Single,
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Target {
    Classification { n_labels: usize },
    Regression,
}

impl Target {
    /// Width of the head's output.
    pub fn output_dim(self) -> usize {
        match self {
            Target::Classification { n_labels } => n_labels,
            Target::Regression => 1,
        }
    }
}

fn default_epochs() -> usize {
    3
}
fn default_warmup() -> f64 {
    0.1
}
fn default_decay() -> f64 {
    0.9
}
fn default_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub arity: Arity,
    pub target: Target,
    pub metric: MetricKind,
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    /// Per-epoch multiplicative learning-rate factor.
    #[serde(default = "default_decay")]
    pub epoch_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl TaskSpec {
    /// Single-sentence binary classification with the default schedule.
    pub fn binary(name: &str, lr: f64) -> Self {
        TaskSpec {
            name: name.to_string(),
            arity: Arity::Single,
            target: Target::Classification { n_labels: 2 },
            metric: MetricKind::Accuracy,
            lr,
            epochs: default_epochs(),
            warmup_ratio: default_warmup(),
            epoch_decay: default_decay(),
            batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        let ok = match (self.target, self.metric) {
            (Target::Classification { n_labels }, m) if n_labels >= 2 => match m {
                MetricKind::Accuracy => true,
                MetricKind::F1 | MetricKind::Matthews => n_labels == 2,
                _ => false,
            },
            (Target::Classification { .. }, _) => {
                return Err(Error::Config("classification needs at least 2 labels".into()))
            }
            (Target::Regression, m) => matches!(m, MetricKind::PearsonSpearman | MetricKind::Rmse),
        };
        if !ok {
            return Err(Error::Config(format!(
                "metric {:?} does not fit target {:?}",
                self.metric, self.target
            )));
        }
        // remaining fields are checked by the schedule
        crate::numerics::Schedule::new(self.lr, self.warmup_ratio, 1, self.epoch_decay)?;
        Ok(())
    }

    fn check_label(&self, label: f64) -> std::result::Result<(), String> {
        match self.target {
            Target::Classification { n_labels } => {
                if label.fract() != 0.0 || label < 0.0 || label >= n_labels as f64 {
                    return Err(format!("label {label} is not a class in [0, {n_labels})"));
                }
            }
            Target::Regression => {
                if !label.is_finite() {
                    return Err(format!("label {label} is not finite"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub sentence1: String,
    pub sentence2: Option<String>,
    /// Class index for classification, target value for regression.
    pub label: f64,
}

impl LabeledExample {
    pub fn sentences(&self) -> Vec<&str> {
        let mut out = vec![self.sentence1.as_str()];
        out.extend(self.sentence2.as_deref());
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskData {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
}

struct Columns {
    sentence1: usize,
    sentence2: Option<usize>,
    label: usize,
    split: Option<usize>,
}

fn columns(headers: &csv::StringRecord, spec: &TaskSpec, path: &Path) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let missing = |name: &str| Error::Schema {
        path: path.to_path_buf(),
        message: format!("missing column {name:?}"),
    };
    let c = Columns {
        sentence1: find("sentence1").ok_or_else(|| missing("sentence1"))?,
        sentence2: find("sentence2"),
        label: find("label").ok_or_else(|| missing("label"))?,
        split: find("split"),
    };
    if spec.arity == Arity::Pair && c.sentence2.is_none() {
        return Err(missing("sentence2"));
    }
    Ok(c)
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_reader(file))
}

fn read_rows(path: &Path, spec: &TaskSpec) -> Result<Vec<(LabeledExample, Split)>> {
    let mut reader = tsv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = columns(&headers, spec, path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let field = |i: usize| record.get(i).ok_or_else(|| bad(format!("missing field {}", i + 1)));
        let sentence1 = field(cols.sentence1)?.to_string();
        if sentence1.trim().is_empty() {
            return Err(bad("empty sentence1".into()));
        }
        let sentence2 = match (spec.arity, cols.sentence2) {
            (Arity::Pair, Some(i)) => {
                let s = field(i)?;
                if s.trim().is_empty() {
                    return Err(bad("empty sentence2".into()));
                }
                Some(s.to_string())
            }
            _ => None,
        };
        let raw = field(cols.label)?.trim();
        let label: f64 = raw.parse().map_err(|_| bad(format!("label {raw:?} is not a number")))?;
        spec.check_label(label).map_err(bad)?;
        let split = match cols.split.map(field).transpose()? {
            None | Some("train") => Split::Train,
            Some("dev") => Split::Dev,
            Some(other) => return Err(bad(format!("split {other:?} is neither train nor dev"))),
        };
        out.push((LabeledExample { sentence1, sentence2, label }, split));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { path: path.to_path_buf(), line, message: e.to_string() }
}

/// Every row of a task TSV, ignoring any split column.
pub fn load_examples(path: impl AsRef<Path>, spec: &TaskSpec) -> Result<Vec<LabeledExample>> {
    Ok(read_rows(path.as_ref(), spec)?.into_iter().map(|(e, _)| e).collect())
}

/// Rows split by the optional `split` column (`train` or `dev`); rows
/// without one are training rows.
pub fn load_task(path: impl AsRef<Path>, spec: &TaskSpec) -> Result<TaskData> {
    let mut data = TaskData::default();
    for (e, split) in read_rows(path.as_ref(), spec)? {
        match split {
            Split::Train => data.train.push(e),
            Split::Dev => data.dev.push(e),
        }
    }
    Ok(data)
}

/// Writes `data` in the format [`load_task`] reads.
pub fn write_task(path: impl AsRef<Path>, data: &TaskData, arity: Arity) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: &[&str] = match arity {
        Arity::Single => &["sentence1", "label", "split"],
        Arity::Pair => &["sentence1", "sentence2", "label", "split"],
    };
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    let rows = data.train.iter().map(|e| (e, "train")).chain(data.dev.iter().map(|e| (e, "dev")));
    for (e, split) in rows {
        let mut record = vec![e.sentence1.clone()];
        if arity == Arity::Pair {
            let s2 = e
                .sentence2
                .clone()
                .ok_or_else(|| Error::Contract("pair example without sentence2".into()))?;
            record.push(s2);
        }
        if record.iter().any(|s| s.contains(['\t', '\n', '\r'])) {
            return Err(Error::Contract(format!("sentence {:?} holds a tab or newline", e.sentence1)));
        }
        record.push(e.label.to_string());
        record.push(split.to_string());
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn topical_sentence(rng: &mut ChaCha8Rng, nouns: &[&str]) -> String {
    format!(
        "the {} {} {} the {} .",
        MODIFIERS.choose(rng).unwrap(),
        nouns.choose(rng).unwrap(),
        VERBS.choose(rng).unwrap(),
        nouns.choose(rng).unwrap()
    )
}

/// Binary task: label 1 when the sentence's nouns are visual words, 0 when
/// they are abstract. For pairs the second sentence is unrelated noise.
pub fn synthetic_task(n_train: usize, n_dev: usize, arity: Arity, seed: u64) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<&str> = VISUAL_WORDS.iter().chain(ABSTRACT_WORDS).copied().collect();
    let example = |rng: &mut ChaCha8Rng| {
        let visual = rng.gen_bool(0.5);
        let nouns = if visual { VISUAL_WORDS } else { ABSTRACT_WORDS };
        LabeledExample {
            sentence1: topical_sentence(rng, nouns),
            sentence2: (arity == Arity::Pair).then(|| topical_sentence(rng, &all)),
            label: if visual { 1.0 } else { 0.0 },
        }
    };
    TaskData {
        train: (0..n_train).map(|_| example(&mut rng)).collect(),
        dev: (0..n_dev).map(|_| example(&mut rng)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, text: &str) -> std::path::PathBuf {
        let p = dir.path().join("task.tsv");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn two_rows_two_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sentence1\tlabel\nthe dog runs .\t1\nthe idea fades .\t0\n");
        let spec = TaskSpec::binary("t", 1e-4);
        assert_eq!(load_examples(&p, &spec).unwrap().len(), 2);
        let data = load_task(&p, &spec).unwrap();
        assert_eq!((data.train.len(), data.dev.len()), (2, 0));
    }

    #[test]
    fn pair_needs_sentence2() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sentence1\tlabel\na .\t1\n");
        let spec = TaskSpec { arity: Arity::Pair, ..TaskSpec::binary("t", 1e-4) };
        assert!(matches!(load_task(&p, &spec), Err(Error::Schema { .. })));
    }

    #[test]
    fn bad_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "sentence1\tlabel\na .\t1\nb .\t7\n");
        match load_task(&p, &TaskSpec::binary("t", 1e-4)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn metric_must_fit_target() {
        let spec = TaskSpec { metric: MetricKind::Rmse, ..TaskSpec::binary("t", 1e-4) };
        assert!(spec.validate().is_err());
        assert!(TaskSpec::binary("t", 1e-4).validate().is_ok());
    }

    #[test]
    fn synthetic_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        let data = synthetic_task(20, 5, Arity::Pair, 3);
        let spec = TaskSpec { arity: Arity::Pair, ..TaskSpec::binary("t", 1e-4) };
        write_task(&p, &data, Arity::Pair).unwrap();
        let back = load_task(&p, &spec).unwrap();
        assert_eq!(back, data);
        let q = dir.path().join("u.tsv");
        write_task(&q, &back, Arity::Pair).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }
}
