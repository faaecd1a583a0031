//! Run configuration: one JSON file naming the model presets, data files and
//! per-phase settings. Relative paths resolve against the file's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xdistill::adapt::{AdaptConfig, ContrastiveConfig, ModelConfig, Objectives};
use xdistill::crossmodal::CrossModalConfig;
use xdistill::encoder::EncoderConfig;
use xdistill::finetune::TaskSpec;
use xdistill::tokenize::DEFAULT_GROUNDED_THRESHOLD;

/// Invalid or inconsistent configuration; maps to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PretrainToy,
    Adapt,
    Extract,
    Finetune,
    FinetuneFull,
    AnalyzePwcca,
    AnalyzeVgr,
    ExportAttn,
    Gradcheck,
    CountParams,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::PretrainToy => "pretrain-toy",
            Phase::Adapt => "adapt",
            Phase::Extract => "extract",
            Phase::Finetune => "finetune",
            Phase::FinetuneFull => "finetune-full",
            Phase::AnalyzePwcca => "analyze-pwcca",
            Phase::AnalyzeVgr => "analyze-vgr",
            Phase::ExportAttn => "export-attn",
            Phase::Gradcheck => "gradcheck",
            Phase::CountParams => "count-params",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFiles {
    pub language: PathBuf,
    pub clip: PathBuf,
    pub cross: CrossModalConfig,
}

fn default_pairs() -> usize {
    16
}
fn default_steps() -> usize {
    ContrastiveConfig::default().steps
}
fn default_contrastive_lr() -> f64 {
    ContrastiveConfig::default().lr
}
fn default_temperature() -> f64 {
    ContrastiveConfig::default().temperature
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveSection {
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_contrastive_lr")]
    pub lr: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl ContrastiveSection {
    pub fn train(&self) -> ContrastiveConfig {
        ContrastiveConfig { steps: self.steps, lr: self.lr, temperature: self.temperature }
    }
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        ContrastiveSection {
            pairs: default_pairs(),
            steps: default_steps(),
            lr: default_contrastive_lr(),
            temperature: default_temperature(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub path: PathBuf,
    /// Separate dev file; otherwise the task file's `split` column is used.
    #[serde(default)]
    pub dev_path: Option<PathBuf>,
    pub spec: TaskSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_threshold() -> u64 {
    DEFAULT_GROUNDED_THRESHOLD
}

fn default_runs() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Word TAB count, from a caption corpus.
    #[serde(default)]
    pub frequencies: Option<PathBuf>,
    #[serde(default)]
    pub stopwords: Option<PathBuf>,
    #[serde(default = "default_threshold")]
    pub threshold: u64,
    /// `text`, `a_correct`, `b_correct` per example.
    #[serde(default)]
    pub examples: Option<PathBuf>,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    /// One word per line; defaults to every word shared by both vocabularies.
    #[serde(default)]
    pub words: Option<PathBuf>,
    /// Also compare final-layer states of each word encoded alone.
    #[serde(default)]
    pub contextual: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSection {
    /// Defaults to the first corpus example.
    #[serde(default)]
    pub text: Option<String>,
}

/// The file as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelFiles,
    pub corpus: PathBuf,
    #[serde(default)]
    pub contrastive: ContrastiveSection,
    #[serde(default)]
    pub adapt: Option<AdaptConfig>,
    #[serde(default)]
    pub task: Option<TaskSection>,
    #[serde(default)]
    pub analysis: Option<AnalysisSection>,
    #[serde(default)]
    pub attention: AttentionSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub objectives: Option<Objectives>,
    pub epochs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// A validated configuration with every path resolved.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub phase: Phase,
    pub file: RunConfigFile,
    pub base_dir: PathBuf,
    pub model: ModelConfig,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub config_hash: String,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: &Path, phase: Phase, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut file: RunConfigFile = read_json(path)?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        if let Some(seed) = overrides.seed {
            file.seed = seed;
        }
        if let Some(o) = overrides.objectives {
            file.adapt.as_mut().ok_or_else(|| bad("--objectives needs an adapt section"))?.objectives = o;
        }
        if let Some(n) = overrides.epochs {
            match phase {
                Phase::Finetune | Phase::FinetuneFull => {
                    file.task.as_mut().ok_or_else(|| bad("--epochs needs a task section"))?.spec.epochs = n
                }
                _ => file.adapt.as_mut().ok_or_else(|| bad("--epochs needs an adapt section"))?.epochs = n,
            }
        }
        let resolve = |p: &Path| base_dir.join(p);
        let language: EncoderConfig = read_json(&resolve(&file.model.language))?;
        let clip: EncoderConfig = read_json(&resolve(&file.model.clip))?;
        let model = ModelConfig { language, clip, cross: file.model.cross.clone() };
        model.validate().map_err(|e| bad(e.to_string()))?;
        let out_dir = overrides.out_dir.clone().unwrap_or_else(|| resolve(&file.out_dir));
        let config_hash = hash_config(&file, &model);
        let cfg = RunConfig {
            phase,
            base_dir,
            model,
            out_dir,
            checkpoint: overrides.checkpoint.clone(),
            config_hash,
            file,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    fn validate(&self) -> anyhow::Result<()> {
        let must_exist = |p: &Path| -> anyhow::Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(bad(format!("{} does not exist", p.display())))
            }
        };
        must_exist(&self.path(&self.file.corpus))?;
        if let Some(c) = &self.checkpoint {
            must_exist(c)?;
        }
        if let Some(a) = &self.file.adapt {
            a.validate().map_err(|e| bad(e.to_string()))?;
        }
        if let Some(t) = &self.file.task {
            must_exist(&self.path(&t.path))?;
            if let Some(d) = &t.dev_path {
                must_exist(&self.path(d))?;
            }
            t.spec.validate().map_err(|e| bad(e.to_string()))?;
            if t.seeds.is_empty() {
                return Err(bad("task.seeds is empty"));
            }
        }
        if let Some(a) = &self.file.analysis {
            for p in [&a.frequencies, &a.stopwords, &a.examples, &a.words].into_iter().flatten() {
                must_exist(&self.path(p))?;
            }
        }
        let needs = |ok: bool, what: &str| if ok { Ok(()) } else { Err(bad(format!("phase {} needs {what}", self.phase.name()))) };
        match self.phase {
            Phase::Adapt => needs(self.file.adapt.is_some(), "an adapt section"),
            Phase::Finetune | Phase::FinetuneFull => needs(self.file.task.is_some(), "a task section"),
            Phase::AnalyzeVgr => needs(
                self.file.analysis.as_ref().is_some_and(|a| a.frequencies.is_some() && a.examples.is_some()),
                "analysis.frequencies and analysis.examples",
            ),
            _ => Ok(()),
        }
    }

    pub fn adapt(&self) -> &AdaptConfig {
        self.file.adapt.as_ref().expect("validated")
    }

    pub fn task(&self) -> &TaskSection {
        self.file.task.as_ref().expect("validated")
    }
}

/// SHA-256 over the canonical JSON of the configuration as written (minus
/// the output directory) with the model presets inlined.
pub fn hash_config(file: &RunConfigFile, model: &ModelConfig) -> String {
    let mut v = serde_json::to_value(file).expect("serializable");
    let obj = v.as_object_mut().expect("object");
    obj.remove("out_dir");
    obj.insert("model".into(), serde_json::to_value(model).expect("serializable"));
    let canonical = serde_json::to_vec(&v).expect("serializable");
    hex::encode(Sha256::digest(&canonical))[..16].to_string()
}
