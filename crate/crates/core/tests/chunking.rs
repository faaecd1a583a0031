use proptest::prelude::*;
use xdistill::crossmodal::{chunk_for_clip, ChunkMode, BLOCK_LEN};
use xdistill::tokenize::{Stream, TokenSequence};

const PAD: u32 = 0;

fn sequence(lens: &[usize], seed: u32) -> TokenSequence {
    let mut ids = Vec::new();
    let mut segment_ids = Vec::new();
    for (s, &n) in lens.iter().enumerate() {
        for k in 0..n {
            ids.push(1 + (seed.wrapping_mul(31).wrapping_add(k as u32 * 7 + s as u32)) % 500);
            segment_ids.push(s as u8);
        }
    }
    TokenSequence { attention_mask: vec![1; ids.len()], ids, segment_ids, stream: Stream::Clip }
}

#[test]
fn appendix_length_fills_nine_blocks() {
    let seq = sequence(&[693], 3);
    let c = chunk_for_clip(&seq, ChunkMode::Adapt, PAD).unwrap();
    assert_eq!(c.blocks.len(), 9);
    assert!(c.blocks.iter().all(|b| b.len() == BLOCK_LEN && b.n_real() == BLOCK_LEN));
    assert!(!c.truncated);
    assert_eq!(c.content_ids(), seq.ids);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn adapt_round_trip(n in 1usize..900, seed in any::<u32>()) {
        let seq = sequence(&[n], seed);
        let c = chunk_for_clip(&seq, ChunkMode::Adapt, PAD).unwrap();
        prop_assert_eq!(c.blocks.len(), 9);
        prop_assert_eq!(c.flatten().len(), 9 * BLOCK_LEN);
        if n <= 9 * BLOCK_LEN {
            prop_assert!(!c.truncated);
            prop_assert_eq!(c.content_ids(), seq.ids);
        } else {
            prop_assert!(c.truncated);
            prop_assert_eq!(c.content_ids().len(), 9 * BLOCK_LEN);
            let content = c.content_ids();
            prop_assert_eq!(content.last(), seq.ids.last());
        }
    }

    #[test]
    fn single_uses_two_blocks(n in 1usize..200, seed in any::<u32>()) {
        let seq = sequence(&[n], seed);
        let c = chunk_for_clip(&seq, ChunkMode::FinetuneSingle, PAD).unwrap();
        prop_assert_eq!(c.blocks.len(), 2);
        if n <= 2 * BLOCK_LEN {
            prop_assert_eq!(c.content_ids(), seq.ids);
        }
    }

    #[test]
    fn pair_keeps_sentences_apart(a in 1usize..180, b in 1usize..180, seed in any::<u32>()) {
        let seq = sequence(&[a, b], seed);
        let c = chunk_for_clip(&seq, ChunkMode::FinetunePair, PAD).unwrap();
        prop_assert_eq!(c.blocks.len(), 4);
        prop_assert!(c.blocks_disjoint());
        let first: Vec<u32> = c.blocks[..2].iter().flat_map(|b| b.ids.iter().zip(&b.attention_mask).filter(|p| *p.1 == 1).map(|p| *p.0)).collect();
        prop_assert_eq!(first.len(), a.min(2 * BLOCK_LEN));
        if a <= 2 * BLOCK_LEN && b <= 2 * BLOCK_LEN {
            prop_assert_eq!(c.content_ids(), seq.ids);
        }
    }
}
