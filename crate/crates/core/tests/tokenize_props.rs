use std::path::PathBuf;

use proptest::prelude::*;
use xdistill::corpus::{synthetic_corpus, Corpus};
use xdistill::tokenize::{build_vocab, pre_tokenize, Stream, Vocab};

fn bundled() -> Corpus {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_corpus.txt");
    Corpus::load(p).unwrap()
}

fn vocabs() -> (Vocab, Vocab) {
    let c = bundled();
    (build_vocab(&c, Stream::Language, 300).unwrap(), build_vocab(&c, Stream::Clip, 280).unwrap())
}

#[test]
fn bundled_corpus_is_the_generator_output() {
    let c = bundled();
    assert_eq!(c, synthetic_corpus(200, 20));
    assert_eq!(c.n_sentences(), 200);
    let (l, k) = vocabs();
    assert_eq!((l.len(), k.len()), (300, 280));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn encoding_is_total(text in "\\PC{0,60}") {
        let (lang, clip) = vocabs();
        for v in [&lang, &clip] {
            let seq = v.encode(&[text.as_str()]).unwrap();
            prop_assert!(seq.ids.iter().all(|&id| (id as usize) < v.len()));
            prop_assert_eq!(seq.ids[0], v.specials().start);
            prop_assert_eq!(*seq.ids.last().unwrap(), v.specials().end);
            prop_assert_eq!(seq.attention_mask.len(), seq.ids.len());
            prop_assert_eq!(seq.segment_ids.len(), seq.ids.len());
        }
    }

    #[test]
    fn pre_tokenize_is_stable(text in "[a-zA-Z ,.!?']{0,80}") {
        let words = pre_tokenize(&text);
        prop_assert_eq!(pre_tokenize(&words.join(" ")), words.clone());
        prop_assert!(words.iter().all(|w| !w.is_empty() && !w.contains(' ')));
    }

    #[test]
    fn known_words_round_trip(idx in prop::collection::vec(0usize..1000, 1..12)) {
        let (lang, clip) = vocabs();
        let c = bundled();
        let words: Vec<String> = c.sentences().flat_map(pre_tokenize).collect();
        let text: Vec<&str> = idx.iter().map(|&i| words[i % words.len()].as_str()).collect();
        let text = text.join(" ");
        for v in [&lang, &clip] {
            prop_assert_eq!(v.decode(&v.tokenize(&text)), text.clone());
        }
    }
}
