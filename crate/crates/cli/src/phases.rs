use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use xdistill::adapt::{
    extract_language_encoder, gradcheck_model, run_adaptation, synthetic_pairs, toy_contrastive_pretrain,
    write_loss_csv, AdaptData, CrossModalModel, ExtractedEncoder, LANG_PREFIX,
};
use xdistill::analysis::{
    categorize_examples, contextual_embeddings, pwcca_report, shared_words, static_embeddings, summarize_categories,
    summary_csv, GroundedReport, RepresentationSet,
};
use xdistill::checkpoint::{load_into, read_checkpoint, save_checkpoint, CheckpointMeta};
use xdistill::corpus::Corpus;
use xdistill::crossmodal::{attention_entropy, chunk_for_clip, write_attention_csv, ChunkMode, Direction};
use xdistill::encoder::{count_parameters, Encoder};
use xdistill::finetune::{finetune, load_examples, load_task, median_of_runs, Finetunable, TaskData, TaskVocabs};
use xdistill::numerics::Tensor;
use xdistill::params::ParamStore;
use xdistill::tokenize::{build_vocab, default_stopwords, load_frequencies, load_stopwords, Stream, TokenSequence, Vocab};

use crate::config::{ConfigError, Phase, RunConfig};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Serialize)]
struct InputRecord {
    path: String,
    phase: String,
    config_hash: String,
}

/// Bookkeeping shared by every phase.
struct Run<'a> {
    cfg: &'a RunConfig,
    corpus: Corpus,
    lang_vocab: Vocab,
    clip_vocab: Vocab,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig) -> anyhow::Result<Self> {
        fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        let corpus = Corpus::load(cfg.path(&cfg.file.corpus))?;
        let lang_vocab = build_vocab(&corpus, Stream::Language, cfg.model.language.vocab_size)?;
        let clip_vocab = build_vocab(&corpus, Stream::Clip, cfg.model.clip.vocab_size)?;
        let mut run = Run { cfg, corpus, lang_vocab, clip_vocab, inputs: Vec::new(), outputs: Vec::new() };
        let (lp, cp) = (run.output("vocab_lang.txt"), run.output("vocab_clip.txt"));
        run.lang_vocab.save(lp)?;
        run.clip_vocab.save(cp)?;
        Ok(run)
    }

    /// Path inside the output directory, recorded in the manifest.
    fn output(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.cfg.out_dir.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        let p = self.output(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    fn comment(&self) -> String {
        format!("# config {}\n", self.cfg.config_hash)
    }

    fn seed(&self) -> u64 {
        self.cfg.file.seed
    }

    fn meta(&self, config: serde_json::Value) -> CheckpointMeta {
        CheckpointMeta {
            config,
            seed: self.seed(),
            phase: self.cfg.phase.name().to_string(),
            config_hash: self.cfg.config_hash.clone(),
        }
    }

    /// `--checkpoint` if given, else `default` in the output directory when
    /// present.
    fn input_checkpoint(&self, default: &str) -> Option<PathBuf> {
        self.cfg.checkpoint.clone().or_else(|| {
            let p = self.cfg.out_dir.join(default);
            p.exists().then_some(p)
        })
    }

    fn read_input(&mut self, path: &Path) -> anyhow::Result<xdistill::checkpoint::Checkpoint> {
        let ck = read_checkpoint(path)?;
        let shown = path.display().to_string();
        if ck.meta.config_hash != self.cfg.config_hash {
            eprintln!(
                "warning: {shown} was written under config {} ({}), this run is {}",
                ck.meta.config_hash, ck.meta.phase, self.cfg.config_hash
            );
        }
        if self.inputs.iter().any(|i| i.path == shown) {
            return Ok(ck);
        }
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            phase: ck.meta.phase.clone(),
            config_hash: ck.meta.config_hash.clone(),
        });
        Ok(ck)
    }

    fn fresh_model(&self) -> anyhow::Result<CrossModalModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        Ok(CrossModalModel::new(self.cfg.model.clone(), &mut rng)?)
    }

    /// Full model from `default` (or `--checkpoint`), else freshly
    /// initialized unless `required`.
    fn full_model(&mut self, default: &str, required: bool) -> anyhow::Result<CrossModalModel> {
        let mut model = self.fresh_model()?;
        match self.input_checkpoint(default) {
            Some(path) => {
                let ck = self.read_input(&path)?;
                if ck.meta.config != serde_json::to_value(&self.cfg.model)? {
                    return Err(ConfigError(format!(
                        "{} was produced with a different model configuration",
                        path.display()
                    ))
                    .into());
                }
                load_into(&mut model.store, &ck.store, "")?;
            }
            None if required => {
                return Err(ConfigError(format!(
                    "phase {} needs {default} in the output directory or --checkpoint",
                    self.cfg.phase.name()
                ))
                .into())
            }
            None => {}
        }
        Ok(model)
    }

    /// Language encoder from an extracted or full checkpoint, else freshly
    /// initialized.
    fn language_encoder(&mut self, default: &str) -> anyhow::Result<ExtractedEncoder> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        let config = self.cfg.model.language.clone();
        Encoder::new(config.clone(), LANG_PREFIX, &mut store, &mut rng)?;
        if let Some(path) = self.input_checkpoint(default) {
            let ck = self.read_input(&path)?;
            let snapshot = ck.meta.config.get("language").unwrap_or(&ck.meta.config);
            if *snapshot != serde_json::to_value(&config)? {
                return Err(ConfigError(format!(
                    "{} holds a language encoder of a different configuration",
                    path.display()
                ))
                .into());
            }
            load_into(&mut store, &ck.store, &format!("{LANG_PREFIX}."))?;
        }
        Ok(ExtractedEncoder::from_store(config, store)?)
    }

    fn task_data(&self) -> anyhow::Result<TaskData> {
        let t = self.cfg.task();
        let mut data = load_task(self.cfg.path(&t.path), &t.spec)?;
        if let Some(dev) = &t.dev_path {
            data.dev = load_examples(self.cfg.path(dev), &t.spec)?;
        }
        Ok(data)
    }

    fn finish(mut self) -> anyhow::Result<()> {
        let manifest = json!({
            "phase": self.cfg.phase.name(),
            "seed": self.seed(),
            "config_hash": self.cfg.config_hash,
            "version": VERSION,
            "config": self.cfg.file,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let name = format!("manifest_{}.json", self.cfg.phase.name());
        self.outputs.push(name.clone());
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.cfg.out_dir.join(name), text)?;
        Ok(())
    }
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.phase == Phase::CountParams {
        print_counts(&cfg.model);
        return Ok(());
    }
    let mut run = Run::new(cfg)?;
    match cfg.phase {
        Phase::PretrainToy => pretrain_toy(&mut run)?,
        Phase::Adapt => adapt(&mut run)?,
        Phase::Extract => extract(&mut run)?,
        Phase::Finetune => {
            let data = run.task_data()?;
            let vocab = run.lang_vocab.clone();
            finetune_runs(&mut run, "finetune", &data, TaskVocabs { lang: &vocab, clip: None }, |r| {
                r.language_encoder("extracted.xdcm")
            })?
        }
        Phase::FinetuneFull => {
            let data = run.task_data()?;
            let (lv, cv) = (run.lang_vocab.clone(), run.clip_vocab.clone());
            finetune_runs(&mut run, "finetune_full", &data, TaskVocabs { lang: &lv, clip: Some(&cv) }, |r| {
                r.full_model("adapt.xdcm", false)
            })?
        }
        Phase::AnalyzePwcca => analyze_pwcca(&mut run)?,
        Phase::AnalyzeVgr => analyze_vgr(&mut run)?,
        Phase::ExportAttn => export_attention(&mut run)?,
        Phase::Gradcheck => gradcheck(&mut run)?,
        Phase::CountParams => unreachable!(),
    }
    run.finish()
}

pub fn print_counts(model: &xdistill::adapt::ModelConfig) {
    let lang = count_parameters(&model.language);
    let clip = count_parameters(&model.clip);
    let total: usize = model.layout().iter().map(|s| s.numel()).sum();
    let cross: usize = xdistill::crossmodal::layout(&model.cross, "cross").iter().map(|s| s.numel()).sum();
    println!("language\t{lang}");
    println!("clip\t{clip}");
    println!("cross\t{cross}");
    println!("heads\t{}", total - lang - clip - cross);
    println!("total\t{total}");
}

fn pretrain_toy(run: &mut Run<'_>) -> anyhow::Result<()> {
    let c = run.cfg.file.contrastive.clone();
    let mut model = run.fresh_model()?;
    let pairs = synthetic_pairs(c.pairs, run.cfg.model.clip.hidden_dim, run.seed());
    let report = toy_contrastive_pretrain(&model.clip, &mut model.store, &run.clip_vocab, &pairs, &c.train())?;
    let mut csv = run.comment();
    csv.push_str("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:.8}\n", i + 1));
    }
    run.write("contrastive_loss.csv", &csv)?;
    run.write_json(
        "contrastive.json",
        &json!({"before": report.before, "after": report.after, "gap_before": report.before.gap(), "gap_after": report.after.gap()}),
    )?;
    let meta = run.meta(serde_json::to_value(&run.cfg.model)?);
    save_checkpoint(run.output("pretrain.xdcm"), &model.store, &meta)?;
    println!("contrastive gap {:.4} -> {:.4}", report.before.gap(), report.after.gap());
    Ok(())
}

fn adapt(run: &mut Run<'_>) -> anyhow::Result<()> {
    let cfg = run.cfg.adapt().clone();
    let mut model = run.full_model("pretrain.xdcm", false)?;
    let data = AdaptData::pack(&run.corpus, &run.lang_vocab, cfg.max_lang_tokens)?;
    let history = run_adaptation(&mut model, &data, &run.lang_vocab, &run.clip_vocab, &cfg, run.seed())?;
    write_loss_csv(&history, Some(&run.cfg.config_hash), run.output("adapt_loss.csv"))?;
    let meta = run.meta(serde_json::to_value(&run.cfg.model)?);
    save_checkpoint(run.output("adapt.xdcm"), &model.store, &meta)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("total loss {:.4} -> {:.4} over {} steps", first.loss.total, last.loss.total, history.len());
    }
    Ok(())
}

fn extract(run: &mut Run<'_>) -> anyhow::Result<()> {
    let model = run.full_model("adapt.xdcm", true)?;
    let ex = extract_language_encoder(&model)?;
    let meta = run.meta(serde_json::to_value(ex.config())?);
    save_checkpoint(run.output("extracted.xdcm"), &ex.store, &meta)?;
    let expected = count_parameters(&run.cfg.model.language);
    let got = ex.store.scalar_count();
    run.write_json(
        "extract.json",
        &json!({"language_parameters": expected, "extracted_parameters": got, "checksum": ex.store.checksum("")}),
    )?;
    if got != expected {
        bail!("extracted {got} parameters, expected {expected}");
    }
    println!("extracted {got} parameters");
    Ok(())
}

fn finetune_runs<M, F>(
    run: &mut Run<'_>,
    stem: &str,
    data: &TaskData,
    vocabs: TaskVocabs<'_>,
    mut backbone: F,
) -> anyhow::Result<()>
where
    M: Finetunable,
    F: FnMut(&mut Run<'_>) -> anyhow::Result<M>,
{
    let task = run.cfg.task().clone();
    let name = task.spec.name.clone();
    let mut histories = Vec::new();
    let mut backbone_error = None;
    let summary = median_of_runs(&name, &task.seeds, |seed| {
        let mut model = match backbone(run) {
            Ok(m) => m,
            Err(e) => {
                backbone_error = Some(e);
                return Err(xdistill::Error::Contract("backbone unavailable".into()));
            }
        };
        let report = finetune(&mut model, data, &task.spec, &vocabs, seed)?;
        let score = report.final_score();
        histories.push((seed, report));
        Ok(score)
    });
    if let Some(e) = backbone_error {
        return Err(e);
    }
    let summary = summary?;
    for (seed, report) in &histories {
        let csv = report.to_csv(Some(&run.cfg.config_hash));
        run.write(&format!("{stem}_{name}_seed{seed}.csv"), &csv)?;
    }
    run.write_json(&format!("{stem}_{name}_results.json"), &summary)?;
    println!("{name}: median {:?} {:.4} over seeds {:?}", task.spec.metric, summary.median, summary.seeds);
    Ok(())
}

fn analyze_pwcca(run: &mut Run<'_>) -> anyhow::Result<()> {
    let model = run.full_model("adapt.xdcm", false)?;
    let analysis = run.cfg.file.analysis.clone();
    let listed: Option<Vec<String>> = match analysis.as_ref().and_then(|a| a.words.as_ref()) {
        Some(p) => Some(
            fs::read_to_string(run.cfg.path(p))?
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        ),
        None => None,
    };
    let words = shared_words(&run.lang_vocab, &run.clip_vocab, listed.as_deref());
    let lang = static_embeddings(&model.lang, &model.store, &run.lang_vocab, &words, "language input embeddings")?;
    let clip = static_embeddings(&model.clip, &model.store, &run.clip_vocab, &words, "clip input embeddings")?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed());
    let random = RepresentationSet::new(
        Tensor::randn(&[words.len(), lang.dim()], 1.0, &mut rng),
        "random normal",
    )?;
    let mut reports = vec![
        pwcca_report(&lang, &clip)?,
        pwcca_report(&lang, &random)?,
        pwcca_report(&clip, &random)?,
    ];
    if analysis.is_some_and(|a| a.contextual) {
        let lc = contextual_embeddings(&model.lang, &model.store, &run.lang_vocab, &words, "language final layer")?;
        let cc = contextual_embeddings(&model.clip, &model.store, &run.clip_vocab, &words, "clip final layer")?;
        reports.push(pwcca_report(&lc, &cc)?);
    }
    for r in &reports {
        println!("{} / {}: {:.4}", r.x_source, r.y_source, r.mean);
    }
    run.write_json("pwcca.json", &json!({"n_words": words.len(), "reports": reports}))
}

fn analyze_vgr(run: &mut Run<'_>) -> anyhow::Result<()> {
    let a = run.cfg.file.analysis.clone().expect("validated");
    let stopwords = match &a.stopwords {
        Some(p) => load_stopwords(run.cfg.path(p))?,
        None => default_stopwords(),
    };
    let freq = load_frequencies(run.cfg.path(a.frequencies.as_ref().expect("validated")))?;
    let path = run.cfg.path(a.examples.as_ref().expect("validated"));
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').quoting(false).from_path(&path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| xdistill::Error::Schema {
            path: path.clone(),
            message: format!("missing column {name:?}"),
        })
    };
    let (ct, ca, cb) = (col("text")?, col("a_correct")?, col("b_correct")?);
    let mut texts = Vec::new();
    let mut a_runs = vec![Vec::new(); a.n_runs];
    let mut b_runs = vec![Vec::new(); a.n_runs];
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let count = |c: usize| -> anyhow::Result<usize> {
            let raw = record.get(c).unwrap_or("");
            let n: usize = raw.trim().parse().map_err(|_| xdistill::Error::Parse {
                path: path.clone(),
                line,
                message: format!("{raw:?} is not a count"),
            })?;
            if n > a.n_runs {
                return Err(xdistill::Error::Parse { path: path.clone(), line, message: format!("{n} correct of {} runs", a.n_runs) }.into());
            }
            Ok(n)
        };
        let (na, nb) = (count(ca)?, count(cb)?);
        for r in 0..a.n_runs {
            a_runs[r].push(r < na);
            b_runs[r].push(r < nb);
        }
        texts.push(record.get(ct).unwrap_or("").to_string());
    }
    let categories = categorize_examples(&a_runs, &b_runs)?;
    let report = GroundedReport::build(&texts, &categories, &stopwords, &freq, a.threshold)?;
    let summaries = summarize_categories(&report);
    run.write("vgr_report.json", &report.to_json()?)?;
    let csv = format!("{}{}", run.comment(), summary_csv(&summaries));
    run.write("vgr_summary.csv", &csv)?;
    print!("{}", summary_csv(&summaries));
    Ok(())
}

fn token_names(vocab: &Vocab, seq: &TokenSequence) -> Vec<String> {
    seq.ids.iter().map(|&id| vocab.token(id).unwrap_or("?").to_string()).collect()
}

fn export_attention(run: &mut Run<'_>) -> anyhow::Result<()> {
    let model = run.full_model("adapt.xdcm", false)?;
    let sentences: Vec<String> = match &run.cfg.file.attention.text {
        Some(t) => vec![t.clone()],
        None => {
            let max = run.cfg.file.adapt.as_ref().map_or(run.cfg.model.language.max_len, |a| a.max_lang_tokens);
            AdaptData::pack(&run.corpus, &run.lang_vocab, max)?.examples.swap_remove(0)
        }
    };
    let refs: Vec<&str> = sentences.iter().map(String::as_str).collect();
    let lang = run.lang_vocab.encode_document(&refs);
    let max = run.cfg.model.language.max_len;
    if lang.len() > max {
        bail!("attention text has {} language tokens, more than max_len {max}", lang.len());
    }
    let clip = chunk_for_clip(&run.clip_vocab.encode_document(&refs), ChunkMode::Adapt, run.clip_vocab.specials().pad)?;
    let tape = xdistill::numerics::Tape::new();
    let p = xdistill::params::BoundParams::new(&tape, &model.store);
    let out = model.encode_streams(&p, &lang, &clip, &xdistill::encoder::layers::Dropout::off(), true)?;
    let lang_tokens = token_names(&run.lang_vocab, &lang);
    let clip_tokens = token_names(&run.clip_vocab, &clip.flatten());
    let dir = run.cfg.out_dir.join("attention");
    fs::create_dir_all(&dir)?;
    let comment = format!("config {}", run.cfg.config_hash);
    for m in &out.maps {
        let (tag, q, k) = match m.direction {
            Direction::LangToClip => ("lang_to_clip", &lang_tokens, &clip_tokens),
            Direction::ClipToLang => ("clip_to_lang", &clip_tokens, &lang_tokens),
        };
        let name = format!("attention/layer{}_head{}_{tag}.csv", m.layer, m.head);
        write_attention_csv(m, q, k, Some(&comment), run.output(&name))?;
    }
    let entropy = attention_entropy(&out.maps);
    run.write_json("attention_entropy.json", &json!({"text": sentences, "heads": entropy}))
}

fn gradcheck(run: &mut Run<'_>) -> anyhow::Result<()> {
    let mut model = run.cfg.model.clone();
    // small tables keep every embedding row in play
    model.language.vocab_size = model.language.vocab_size.min(32);
    model.clip.vocab_size = model.clip.vocab_size.min(32);
    let checks = gradcheck_model(&model, run.seed(), 4)?;
    let mut csv = run.comment();
    csv.push_str("kind,tensors,max_rel_err\n");
    for c in &checks {
        println!("{:<16} {:>4} {:.3e}", c.kind, c.tensors, c.max_rel_err);
        csv.push_str(&format!("{},{},{:.6e}\n", c.kind, c.tensors, c.max_rel_err));
    }
    run.write("gradcheck.csv", &csv)?;
    if let Some(c) = checks.iter().find(|c| !(c.max_rel_err < GRADCHECK_TOL)) {
        bail!("{} gradient error {:.3e} exceeds {GRADCHECK_TOL:e}", c.kind, c.max_rel_err);
    }
    Ok(())
}
