//! Packing clip-stream sequences into fixed 77-token blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{Stream, TokenId, TokenSequence};

pub const BLOCK_LEN: usize = 77;
pub const ADAPT_BLOCKS: usize = 9;
pub const SINGLE_BLOCKS: usize = 2;
pub const PAIR_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkMode {
    /// Whole sequence padded to 9×77.
    Adapt,
    /// One sentence in 2 blocks.
    FinetuneSingle,
    /// Sentence 1 in blocks 0–1, sentence 2 in blocks 2–3.
    FinetunePair,
}

impl ChunkMode {
    pub fn n_blocks(self) -> usize {
        match self {
            ChunkMode::Adapt => ADAPT_BLOCKS,
            ChunkMode::FinetuneSingle => SINGLE_BLOCKS,
            ChunkMode::FinetunePair => PAIR_BLOCKS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkedSequence {
    pub blocks: Vec<TokenSequence>,
    pub n_blocks: usize,
    pub flat_len: usize,
    /// Set when content had to be cut to fit.
    pub truncated: bool,
}

struct Span {
    ids: Vec<TokenId>,
    segment: u8,
}

/// Cuts `ids` to `cap` tokens, keeping the final token (the end marker) in
/// the last slot.
fn fit(mut ids: Vec<TokenId>, cap: usize, truncated: &mut bool) -> Vec<TokenId> {
    if ids.len() > cap {
        let last = *ids.last().expect("non-empty");
        ids.truncate(cap - 1);
        ids.push(last);
        *truncated = true;
    }
    ids
}

fn fill_blocks(spans: &[(usize, Span)], n_blocks: usize, pad: TokenId) -> Vec<TokenSequence> {
    let mut blocks: Vec<TokenSequence> = (0..n_blocks)
        .map(|_| TokenSequence {
            ids: vec![pad; BLOCK_LEN],
            attention_mask: vec![0; BLOCK_LEN],
            segment_ids: vec![0; BLOCK_LEN],
            stream: Stream::Clip,
        })
        .collect();
    for (first_block, span) in spans {
        for (k, &id) in span.ids.iter().enumerate() {
            let flat = first_block * BLOCK_LEN + k;
            let b = &mut blocks[flat / BLOCK_LEN];
            let i = flat % BLOCK_LEN;
            b.ids[i] = id;
            b.attention_mask[i] = 1;
            b.segment_ids[i] = span.segment;
        }
    }
    blocks
}

pub fn chunk_for_clip(seq: &TokenSequence, mode: ChunkMode, pad: TokenId) -> Result<ChunkedSequence> {
    if seq.stream != Stream::Clip {
        return Err(Error::Contract("chunk_for_clip takes a clip-stream sequence".into()));
    }
    let real: Vec<(TokenId, u8)> = seq
        .ids
        .iter()
        .zip(&seq.attention_mask)
        .zip(&seq.segment_ids)
        .filter(|((_, &m), _)| m == 1)
        .map(|((&id, _), &s)| (id, s))
        .collect();
    if real.is_empty() {
        return Err(Error::Contract("nothing to chunk".into()));
    }
    let n_blocks = mode.n_blocks();
    let mut truncated = false;
    let spans = match mode {
        ChunkMode::Adapt | ChunkMode::FinetuneSingle => {
            let ids = real.iter().map(|&(id, _)| id).collect();
            vec![(0, Span {
                ids: fit(ids, n_blocks * BLOCK_LEN, &mut truncated),
                segment: 0,
            })]
        }
        ChunkMode::FinetunePair => {
            let cap = 2 * BLOCK_LEN;
            let mut spans = Vec::new();
            for segment in 0..2u8 {
                let ids: Vec<TokenId> = real.iter().filter(|&&(_, s)| s == segment).map(|&(id, _)| id).collect();
                if ids.is_empty() {
                    return Err(Error::Contract(format!("pair input has no sentence {}", segment + 1)));
                }
                spans.push((2 * segment as usize, Span {
                    ids: fit(ids, cap, &mut truncated),
                    segment,
                }));
            }
            if real.iter().any(|&(_, s)| s > 1) {
                return Err(Error::Contract("pair input has more than two sentences".into()));
            }
            spans
        }
    };
    Ok(ChunkedSequence {
        blocks: fill_blocks(&spans, n_blocks, pad),
        n_blocks,
        flat_len: n_blocks * BLOCK_LEN,
        truncated,
    })
}

impl ChunkedSequence {
    /// All blocks laid end to end (`flat_len` positions).
    pub fn flatten(&self) -> TokenSequence {
        let mut out = TokenSequence {
            ids: Vec::with_capacity(self.flat_len),
            attention_mask: Vec::with_capacity(self.flat_len),
            segment_ids: Vec::with_capacity(self.flat_len),
            stream: Stream::Clip,
        };
        for b in &self.blocks {
            out.ids.extend(&b.ids);
            out.attention_mask.extend(&b.attention_mask);
            out.segment_ids.extend(&b.segment_ids);
        }
        out
    }

    /// Non-padding ids in order.
    pub fn content_ids(&self) -> Vec<TokenId> {
        self.blocks
            .iter()
            .flat_map(|b| b.ids.iter().zip(&b.attention_mask).filter(|(_, &m)| m == 1).map(|(&id, _)| id))
            .collect()
    }

    /// True when no block mixes tokens of different sentences.
    pub fn blocks_disjoint(&self) -> bool {
        self.blocks.iter().all(|b| {
            let mut segs = b.segment_ids.iter().zip(&b.attention_mask).filter(|(_, &m)| m == 1).map(|(&s, _)| s);
            match segs.next() {
                Some(first) => segs.all(|s| s == first),
                None => true,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_seq(sentences: &[usize]) -> TokenSequence {
        let mut s = TokenSequence {
            ids: vec![],
            attention_mask: vec![],
            segment_ids: vec![],
            stream: Stream::Clip,
        };
        for (seg, &n) in sentences.iter().enumerate() {
            s.ids.push(2);
            s.ids.extend((0..n).map(|i| 4 + (i % 50) as TokenId));
            s.ids.push(3);
            s.attention_mask.extend(std::iter::repeat_n(1, n + 2));
            s.segment_ids.extend(std::iter::repeat_n(seg as u8, n + 2));
        }
        s
    }

    #[test]
    fn adapt_full_capacity() {
        let s = clip_seq(&[691]);
        assert_eq!(s.len(), 693);
        let c = chunk_for_clip(&s, ChunkMode::Adapt, 0).unwrap();
        assert_eq!(c.blocks.len(), 9);
        assert!(c.blocks.iter().all(|b| b.len() == 77 && b.n_real() == 77));
        assert!(!c.truncated);
        assert_eq!(c.content_ids(), s.ids);
    }

    #[test]
    fn single_short_sentence() {
        let c = chunk_for_clip(&clip_seq(&[3]), ChunkMode::FinetuneSingle, 0).unwrap();
        assert_eq!(c.n_blocks, 2);
        assert_eq!(c.blocks[0].n_real(), 5);
        assert_eq!(c.blocks[1].n_real(), 0);
    }

    #[test]
    fn pair_layout() {
        let s = clip_seq(&[78, 1]);
        let c = chunk_for_clip(&s, ChunkMode::FinetunePair, 0).unwrap();
        assert_eq!(c.blocks[0].n_real(), 77);
        assert_eq!(c.blocks[1].n_real(), 3);
        assert_eq!(c.blocks[2].n_real(), 3);
        assert_eq!(c.blocks[3].n_real(), 0);
        assert!(c.blocks_disjoint());
        assert_eq!(c.content_ids(), s.ids);
    }

    #[test]
    fn overflow_truncates_keeping_end() {
        let s = clip_seq(&[800]);
        let c = chunk_for_clip(&s, ChunkMode::Adapt, 0).unwrap();
        assert!(c.truncated);
        let ids = c.content_ids();
        assert_eq!(ids.len(), 693);
        assert_eq!(*ids.last().unwrap(), 3);
    }
}
