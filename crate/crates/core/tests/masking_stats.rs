use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xdistill::adapt::{make_adapt_batch, AdaptData, BatchContext, MaskingSpec, Replacement};
use xdistill::corpus::synthetic_corpus;
use xdistill::tokenize::{build_vocab, Stream};

const DRAWS: usize = 10_000;

#[test]
fn masking_and_negative_rates() {
    let corpus = synthetic_corpus(200, 20);
    let lv = build_vocab(&corpus, Stream::Language, 300).unwrap();
    let cv = build_vocab(&corpus, Stream::Clip, 280).unwrap();
    let data = AdaptData::pack(&corpus, &lv, 64).unwrap();
    let masking = MaskingSpec::default();
    let ctx = BatchContext { lang_vocab: &lv, clip_vocab: &cv, masking: &masking, max_lang_tokens: 64, with_match: true };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut eligible, mut selected, mut clip_real, mut clip_selected, mut negatives) = (0, 0, 0, 0, 0);
    let mut kinds = [0usize; 3];
    for k in 0..DRAWS {
        let b = make_adapt_batch(&data, k % data.len(), ctx, &mut rng).unwrap();
        // original ids: labels where selected, else what is in the input
        eligible += b.lang.ids.iter().zip(&b.mlm_labels).filter(|(&id, l)| !lv.is_special(l.unwrap_or(id))).count();
        for r in b.replacements.iter().flatten() {
            selected += 1;
            kinds[match r {
                Replacement::Mask => 0,
                Replacement::Random => 1,
                Replacement::Keep => 2,
            }] += 1;
        }
        clip_real += b.clip.flatten().n_real();
        clip_selected += b.cliptc_positions.len();
        negatives += usize::from(b.match_label == Some(0));
    }
    let frac = |a: usize, b: usize| a as f64 / b as f64;
    assert!((frac(selected, eligible) - 0.15).abs() < 0.01);
    assert!((frac(clip_selected, clip_real) - 0.15).abs() < 0.01);
    assert!((frac(kinds[0], selected) - 0.8).abs() < 0.02);
    assert!((frac(kinds[1], selected) - 0.1).abs() < 0.02);
    assert!((frac(kinds[2], selected) - 0.1).abs() < 0.02);
    assert!((frac(negatives, DRAWS) - 0.5).abs() < 0.015);
}
