use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xdistill::adapt::{extract_language_encoder, CrossModalModel, ExtractedEncoder, ModelConfig};
use xdistill::checkpoint::{load_into, read_checkpoint, round_f32, save_checkpoint, CheckpointMeta};
use xdistill::corpus::synthetic_corpus;
use xdistill::crossmodal::CrossModalConfig;
use xdistill::encoder::{count_parameters, Encoder, EncoderConfig};
use xdistill::finetune::{finetune, synthetic_task, Arity, TaskSpec, TaskVocabs};
use xdistill::params::ParamStore;
use xdistill::tokenize::{build_vocab, Stream};
use xdistill::Error;

fn encoder(d: usize, layers: usize, vocab: usize, max_len: usize, types: usize, pooler: bool) -> EncoderConfig {
    EncoderConfig {
        hidden_dim: d,
        n_layers: layers,
        n_heads: 2,
        ffn_dim: 2 * d,
        vocab_size: vocab,
        max_len,
        type_vocab_size: types,
        layer_norm_eps: 1e-12,
        has_pooler: pooler,
        dropout: 0.0,
    }
}

fn model_config(clip_dim: usize, clip_layers: usize, cross_layers: usize) -> ModelConfig {
    ModelConfig {
        language: encoder(16, 1, 300, 64, 2, true),
        clip: encoder(clip_dim, clip_layers, 280, 77, 0, false),
        cross: CrossModalConfig {
            n_cross_layers: cross_layers,
            lang_dim: 16,
            clip_dim,
            shared_dim: None,
            n_heads: 2,
            lang_ffn_dim: 32,
            clip_ffn_dim: 2 * clip_dim,
            layer_norm_eps: 1e-12,
            dropout: 0.0,
        },
    }
}

fn model(config: ModelConfig) -> CrossModalModel {
    CrossModalModel::new(config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

#[test]
fn extracted_count_ignores_clip_and_cross_config() {
    let want = count_parameters(&model_config(12, 1, 2).language);
    for (clip_dim, clip_layers, cross_layers) in [(12, 1, 2), (8, 2, 1), (6, 1, 3)] {
        let m = model(model_config(clip_dim, clip_layers, cross_layers));
        let ex = extract_language_encoder(&m).unwrap();
        assert_eq!(ex.store.scalar_count(), want);
        assert!(ex.store.iter().all(|(_, n, _)| n.starts_with("lang.")));
    }
}

#[test]
fn finetuning_the_extracted_encoder_leaves_the_model_alone() {
    let corpus = synthetic_corpus(200, 20);
    let lv = build_vocab(&corpus, Stream::Language, 300).unwrap();
    let m = model(model_config(12, 1, 2));
    let before: Vec<String> = ["lang.", "clip.", "cross.", "heads."].iter().map(|p| m.store.checksum(p)).collect();
    let mut ex = extract_language_encoder(&m).unwrap();
    let lang_before = ex.store.checksum("lang.");
    let data = synthetic_task(40, 20, Arity::Single, 1);
    let spec = TaskSpec { epochs: 1, batch_size: 8, ..TaskSpec::binary("toy", 1e-2) };
    finetune(&mut ex, &data, &spec, &TaskVocabs { lang: &lv, clip: None }, 1).unwrap();
    assert_ne!(ex.store.checksum("lang."), lang_before);
    let after: Vec<String> = ["lang.", "clip.", "cross.", "heads."].iter().map(|p| m.store.checksum(p)).collect();
    assert_eq!(before, after);
}

#[test]
fn adapt_checkpoint_feeds_a_standalone_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapt.xdcm");
    let config = model_config(12, 1, 2);
    let m = model(config.clone());
    let meta = CheckpointMeta {
        config: serde_json::to_value(&config).unwrap(),
        seed: 3,
        phase: "adapt".into(),
        config_hash: "0".into(),
    };
    save_checkpoint(&path, &m.store, &meta).unwrap();
    let ck = read_checkpoint(&path).unwrap();

    let mut store = ParamStore::new();
    Encoder::new(config.language.clone(), "lang", &mut store, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let n = load_into(&mut store, &ck.store, "lang.").unwrap();
    assert_eq!(n, store.len());
    let ex = ExtractedEncoder::from_store(config.language.clone(), store).unwrap();
    for (_, name, t) in ex.store.iter() {
        assert_eq!(t, &round_f32(m.store.by_name(name).unwrap()));
    }

    // a wider language encoder cannot take these tensors
    let mut wide = ParamStore::new();
    Encoder::new(encoder(8, 1, 300, 64, 2, true), "lang", &mut wide, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    match load_into(&mut wide, &ck.store, "lang.") {
        Err(Error::CheckpointMismatch(problems)) => assert!(problems.len() > 5),
        other => panic!("{other:?}"),
    }
}
