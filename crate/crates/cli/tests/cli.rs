mod common;

use std::fs;

use common::*;

#[test]
fn count_params_on_presets() {
    let o = xdistill(&["count-params", "--config", config_dir().join("bert-base.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "109482240");
    let o = xdistill(&["count-params", "--config", config_dir().join("base-run.json").to_str().unwrap()]);
    assert!(stdout(&o).contains("language\t109482240"), "{}", stdout(&o));
}

#[test]
fn config_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = xdistill(&["adapt", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = toy_config(dir.path(), &dir.path().join("out"), |v| v["surprise"] = 1.into());
    assert_eq!(phase("adapt", &cfg, &[]).status.code(), Some(2));

    let cfg = toy_config(dir.path(), &dir.path().join("out"), |v| v["adapt"]["masking"]["mask_prob"] = 0.9.into());
    assert_eq!(phase("adapt", &cfg, &[]).status.code(), Some(2));

    let cfg = toy_config(dir.path(), &dir.path().join("out"), |_| {});
    let o = phase("adapt", &cfg, &["--objectives", "mlm,vision"]);
    assert_eq!(o.status.code(), Some(2));
    // extract has nothing to read yet
    let o = phase("extract", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn toy_pipeline_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = toy_config(dir.path(), &out, |v| {
        v["contrastive"]["steps"] = 20.into();
        v["adapt"]["epochs"] = 1.into();
    });
    for name in ["pretrain-toy", "adapt", "extract"] {
        let o = phase(name, &cfg, &[]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        assert!(out.join(format!("manifest_{name}.json")).exists());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest_extract.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(manifest["inputs"][0]["phase"], "adapt");
    assert_eq!(manifest["inputs"][0]["config_hash"], hash.as_str());
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o == "extracted.xdcm"));
    for (name, bytes) in csv_files(&out) {
        let first = String::from_utf8(bytes).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first, format!("# config {hash}"), "{}", name.display());
    }
}

#[test]
fn mismatched_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = toy_config(dir.path(), &out, |v| v["contrastive"]["steps"] = 5.into());
    assert!(phase("pretrain-toy", &cfg, &[]).status.success());
    let other = tempfile::tempdir().unwrap();
    let cfg2 = toy_config(other.path(), &out, |v| v["model"]["cross"]["n_cross_layers"] = 1.into());
    let ck = out.join("pretrain.xdcm");
    let o = phase("adapt", &cfg2, &["--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("different model configuration"), "{}", stderr(&o));
}

#[test]
fn analysis_phases_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = toy_config(dir.path(), &out, |_| {});
    let o = phase("analyze-vgr", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(out.join("vgr_summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("category,n,q1"));
    assert_eq!(summary.lines().count(), 5);
    let o = phase("analyze-pwcca", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("pwcca.json")).unwrap()).unwrap();
    assert_eq!(report["reports"].as_array().unwrap().len(), 3);
    let o = phase("export-attn", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 2 cross layers x 2 heads x 2 directions
    assert_eq!(fs::read_dir(out.join("attention")).unwrap().count(), 8);
}
