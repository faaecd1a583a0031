//! Regenerates the bundled toy data under `data/`.

use std::fmt::Write as _;
use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdistill::corpus::{synthetic_corpus, ABSTRACT_WORDS, VISUAL_WORDS};
use xdistill::finetune::{synthetic_task, write_task, Arity};
use xdistill::tokenize::{build_vocab, Stream};

const CORPUS_SEED: u64 = 20;
const TASK_SEED: u64 = 11;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data");
    let corpus = synthetic_corpus(200, CORPUS_SEED);
    fs::write(format!("{root}/toy_corpus.txt"), corpus.to_text())?;
    let lv = build_vocab(&corpus, Stream::Language, 300)?;
    let cv = build_vocab(&corpus, Stream::Clip, 280)?;
    println!("vocab sizes {} {}", lv.len(), cv.len());

    write_task(format!("{root}/toy_task.tsv"), &synthetic_task(200, 100, Arity::Single, TASK_SEED), Arity::Single)?;
    write_task(
        format!("{root}/toy_pair_task.tsv"),
        &synthetic_task(200, 100, Arity::Pair, TASK_SEED + 1),
        Arity::Pair,
    )?;

    // stand-in for caption-corpus word counts
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut freq = String::new();
    for w in VISUAL_WORDS {
        writeln!(freq, "{w}\t{}", rng.gen_range(150..2000))?;
    }
    for w in ABSTRACT_WORDS {
        writeln!(freq, "{w}\t{}", rng.gen_range(0..60))?;
    }
    fs::write(format!("{root}/caption_counts.tsv"), freq)?;

    // per-example correct-run counts of two models over five runs
    let mut vgr = String::from("text\ta_correct\tb_correct\n");
    for _ in 0..60 {
        let n_visual = rng.gen_range(0..5);
        let mut words: Vec<&str> = (0..n_visual).map(|_| VISUAL_WORDS[rng.gen_range(0..VISUAL_WORDS.len())]).collect();
        words.extend((0..5 - n_visual).map(|_| ABSTRACT_WORDS[rng.gen_range(0..ABSTRACT_WORDS.len())]));
        let text = format!("the {} and the {} .", words[..2].join(" "), words[2..].join(" "));
        let b: u32 = rng.gen_range(0..=5);
        let lean = n_visual - 2;
        let a = (b as i32 + lean + rng.gen_range(-1..=1)).clamp(0, 5);
        writeln!(vgr, "{text}\t{a}\t{b}")?;
    }
    fs::write(format!("{root}/vgr_examples.tsv"), vgr)?;
    Ok(())
}
