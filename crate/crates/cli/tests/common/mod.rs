#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn config_dir() -> PathBuf {
    root().join("configs")
}

/// The toy run config with absolute paths, output under `out`, after
/// `edit`. Returns the written config path.
pub fn toy_config(dir: &Path, out: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let text = fs::read_to_string(config_dir().join("toy-run.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let abs = |rel: &str| config_dir().join(rel).to_string_lossy().into_owned();
    v["out_dir"] = out.to_string_lossy().into_owned().into();
    v["corpus"] = abs("../data/toy_corpus.txt").into();
    v["model"]["language"] = abs("toy-lang.json").into();
    v["model"]["clip"] = abs("toy-clip.json").into();
    v["task"]["path"] = abs("../data/toy_task.tsv").into();
    for key in ["frequencies", "stopwords", "examples"] {
        let rel = v["analysis"][key].as_str().unwrap().to_string();
        v["analysis"][key] = abs(&rel).into();
    }
    edit(&mut v);
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

pub fn xdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdistill")).args(args).output().unwrap()
}

pub fn phase(name: &str, config: &Path, extra: &[&str]) -> Output {
    let config = config.to_string_lossy().into_owned();
    let mut args = vec![name, "--config", config.as_str()];
    args.extend_from_slice(extra);
    xdistill(&args)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every `.csv` under `dir` (recursively), sorted, with contents.
pub fn csv_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
