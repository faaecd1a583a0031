//! Cross-modal layers joining the language and clip streams.
//!
//! Each layer runs, per stream, self-attention, then cross-attention whose
//! queries come from the stream itself (bridged into a shared width) and
//! whose keys/values come from the other stream, then a feed-forward block.
//! Every sublayer is followed by a residual connection and layer norm.

pub mod chunk;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::layers::{
    allocate, attention_specs, ffn_specs, norm_specs, Attention, Dropout, FeedForward, LayerNorm,
    ParamSpec,
};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var, LAYER_NORM_EPS};
use crate::params::{BoundParams, ParamStore};

pub use chunk::{chunk_for_clip, ChunkMode, ChunkedSequence, BLOCK_LEN};

fn default_layers() -> usize {
    2
}

fn default_eps() -> f64 {
    LAYER_NORM_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossModalConfig {
    #[serde(default = "default_layers")]
    pub n_cross_layers: usize,
    pub lang_dim: usize,
    pub clip_dim: usize,
    /// Width of the bridged cross-attention; defaults to `lang_dim`.
    #[serde(default)]
    pub shared_dim: Option<usize>,
    pub n_heads: usize,
    pub lang_ffn_dim: usize,
    pub clip_ffn_dim: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub dropout: f64,
}

impl CrossModalConfig {
    pub fn shared(&self) -> usize {
        self.shared_dim.unwrap_or(self.lang_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_cross_layers == 0 {
            return bad("n_cross_layers must be at least 1".into());
        }
        for (what, d) in [("lang_dim", self.lang_dim), ("clip_dim", self.clip_dim), ("shared_dim", self.shared())] {
            if d == 0 || self.n_heads == 0 || d % self.n_heads != 0 {
                return bad(format!("{what} {d} not divisible by n_heads {}", self.n_heads));
            }
        }
        if self.lang_ffn_dim == 0 || self.clip_ffn_dim == 0 {
            return bad("ffn dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Parameter layout of the cross-modal stack under `prefix`.
pub fn layout(c: &CrossModalConfig, prefix: &str) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let shared = c.shared();
    for l in 0..c.n_cross_layers {
        for (side, d, other, ffn) in [
            ("lang", c.lang_dim, c.clip_dim, c.lang_ffn_dim),
            ("clip", c.clip_dim, c.lang_dim, c.clip_ffn_dim),
        ] {
            let name = format!("{prefix}.layers.{l}.{side}");
            attention_specs(&mut out, &format!("{name}.self_attention"), d, d, d, d);
            norm_specs(&mut out, &format!("{name}.self_norm"), d);
            attention_specs(&mut out, &format!("{name}.cross_attention"), d, other, shared, d);
            norm_specs(&mut out, &format!("{name}.cross_norm"), d);
            ffn_specs(&mut out, &format!("{name}.ffn"), d, ffn);
            norm_specs(&mut out, &format!("{name}.ffn_norm"), d);
        }
    }
    out
}

#[derive(Clone, Debug)]
struct StreamBlock {
    self_attention: Attention,
    self_norm: LayerNorm,
    cross_attention: Attention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

impl StreamBlock {
    fn bind(store: &ParamStore, name: &str, heads: usize, eps: f64) -> Result<Self> {
        Ok(StreamBlock {
            self_attention: Attention::bind(store, &format!("{name}.self_attention"), heads)?,
            self_norm: LayerNorm::bind(store, &format!("{name}.self_norm"), eps)?,
            cross_attention: Attention::bind(store, &format!("{name}.cross_attention"), heads)?,
            cross_norm: LayerNorm::bind(store, &format!("{name}.cross_norm"), eps)?,
            ffn: FeedForward::bind(store, &format!("{name}.ffn"))?,
            ffn_norm: LayerNorm::bind(store, &format!("{name}.ffn_norm"), eps)?,
        })
    }
}

#[derive(Clone, Debug)]
struct CrossLayer {
    lang: StreamBlock,
    clip: StreamBlock,
}

/// Which stream supplies the queries of a cross-attention map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Language queries over clip keys.
    LangToClip,
    /// Clip queries over language keys.
    ClipToLang,
}

/// One head's cross-attention probabilities `[queries × keys]`.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub direction: Direction,
    pub probs: Tensor,
    pub query_valid: Vec<bool>,
    pub key_valid: Vec<bool>,
}

pub struct CrossOutput<'t> {
    pub lang: Var<'t>,
    pub clip: Var<'t>,
    pub maps: Vec<AttentionMap>,
}

/// Inputs to the cross-modal stack: both streams' single-modality outputs
/// plus key validity.
#[derive(Clone, Copy)]
pub struct StreamInputs<'t, 'a> {
    pub lang: Var<'t>,
    pub lang_valid: &'a [bool],
    pub clip: Var<'t>,
    pub clip_valid: &'a [bool],
}

#[derive(Clone, Debug)]
pub struct CrossModalEncoder {
    pub config: CrossModalConfig,
    pub prefix: String,
    layers: Vec<CrossLayer>,
}

impl CrossModalEncoder {
    pub fn new<R: Rng + ?Sized>(
        config: CrossModalConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        allocate(store, &layout(&config, prefix), rng)?;
        Self::bind(config, prefix, store)
    }

    pub fn bind(config: CrossModalConfig, prefix: &str, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let (h, eps) = (config.n_heads, config.layer_norm_eps);
        let layers = (0..config.n_cross_layers)
            .map(|l| {
                Ok(CrossLayer {
                    lang: StreamBlock::bind(store, &format!("{prefix}.layers.{l}.lang"), h, eps)?,
                    clip: StreamBlock::bind(store, &format!("{prefix}.layers.{l}.clip"), h, eps)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CrossModalEncoder {
            config,
            prefix: prefix.to_string(),
            layers,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t, '_>,
        inputs: StreamInputs<'t, '_>,
        dropout: &Dropout,
        record: bool,
    ) -> Result<CrossOutput<'t>> {
        self.run(p, inputs, dropout, record, true)
    }

    /// The same stack with both cross-attention sublayers replaced by zero.
    pub fn forward_without_cross<'t>(
        &self,
        p: &BoundParams<'t, '_>,
        inputs: StreamInputs<'t, '_>,
    ) -> Result<CrossOutput<'t>> {
        self.run(p, inputs, &Dropout::off(), false, false)
    }

    fn run<'t>(
        &self,
        p: &BoundParams<'t, '_>,
        inputs: StreamInputs<'t, '_>,
        dropout: &Dropout,
        record: bool,
        cross: bool,
    ) -> Result<CrossOutput<'t>> {
        let StreamInputs { lang_valid, clip_valid, .. } = inputs;
        let (mut lang, mut clip) = (inputs.lang, inputs.clip);
        if lang.value().rows() != lang_valid.len() || clip.value().rows() != clip_valid.len() {
            return Err(Error::Contract("validity masks do not match stream lengths".into()));
        }
        let rate = self.config.dropout;
        let mut maps = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let sublayer = |blk: &LayerNorm, x: Var<'t>, y: Var<'t>| -> Result<Var<'t>> {
                blk.forward(p, x.add(&dropout.apply(y, rate)?)?)
            };
            let a = layer.lang.self_attention.forward(p, lang, lang, lang_valid, false)?.output;
            lang = sublayer(&layer.lang.self_norm, lang, a)?;
            let a = layer.clip.self_attention.forward(p, clip, clip, clip_valid, false)?.output;
            clip = sublayer(&layer.clip.self_norm, clip, a)?;

            let (lang_in, clip_in) = (lang, clip);
            if cross {
                let lc = layer.lang.cross_attention.forward(p, lang_in, clip_in, clip_valid, record)?;
                let cl = layer.clip.cross_attention.forward(p, clip_in, lang_in, lang_valid, record)?;
                for (direction, probs, qv, kv) in [
                    (Direction::LangToClip, lc.probs, lang_valid, clip_valid),
                    (Direction::ClipToLang, cl.probs, clip_valid, lang_valid),
                ] {
                    for (head, probs) in probs.into_iter().enumerate() {
                        maps.push(AttentionMap {
                            layer: l,
                            head,
                            direction,
                            probs,
                            query_valid: qv.to_vec(),
                            key_valid: kv.to_vec(),
                        });
                    }
                }
                lang = sublayer(&layer.lang.cross_norm, lang_in, lc.output)?;
                clip = sublayer(&layer.clip.cross_norm, clip_in, cl.output)?;
            } else {
                lang = layer.lang.cross_norm.forward(p, lang_in)?;
                clip = layer.clip.cross_norm.forward(p, clip_in)?;
            }

            let f = layer.lang.ffn.forward(p, lang)?;
            lang = sublayer(&layer.lang.ffn_norm, lang, f)?;
            let f = layer.clip.ffn.forward(p, clip)?;
            clip = sublayer(&layer.clip.ffn_norm, clip, f)?;
        }
        Ok(CrossOutput { lang, clip, maps })
    }
}

/// Mean row entropy of one attention map over its valid query rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadEntropy {
    pub layer: usize,
    pub head: usize,
    pub direction: Direction,
    pub mean_entropy: f64,
}

/// Shannon entropy (nats) of a probability row; zero entries contribute 0.
pub fn row_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

pub fn attention_entropy(maps: &[AttentionMap]) -> Vec<HeadEntropy> {
    maps.iter()
        .map(|m| {
            let rows: Vec<f64> = (0..m.probs.rows())
                .filter(|&r| m.query_valid[r])
                .map(|r| row_entropy(m.probs.row(r)))
                .collect();
            let mean_entropy = if rows.is_empty() { 0.0 } else { rows.iter().sum::<f64>() / rows.len() as f64 };
            HeadEntropy {
                layer: m.layer,
                head: m.head,
                direction: m.direction,
                mean_entropy,
            }
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes the valid rows and columns of one map as CSV: header row of key
/// tokens, one row per query token.
pub fn write_attention_csv(
    map: &AttentionMap,
    query_tokens: &[String],
    key_tokens: &[String],
    comment: Option<&str>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if query_tokens.len() != map.query_valid.len() || key_tokens.len() != map.key_valid.len() {
        return Err(Error::Contract("token labels do not match attention map".into()));
    }
    let cols: Vec<usize> = (0..key_tokens.len()).filter(|&c| map.key_valid[c]).collect();
    let mut out = String::new();
    if let Some(c) = comment {
        writeln!(out, "# {c}").unwrap();
    }
    out.push_str("query");
    for &c in &cols {
        write!(out, ",{}", csv_field(&key_tokens[c])).unwrap();
    }
    out.push('\n');
    for r in (0..query_tokens.len()).filter(|&r| map.query_valid[r]) {
        out.push_str(&csv_field(&query_tokens[r]));
        for &c in &cols {
            write!(out, ",{:.6}", map.probs.get2(r, c)).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{check_params, Tape, DEFAULT_STEP};

    pub(crate) fn toy() -> CrossModalConfig {
        CrossModalConfig {
            n_cross_layers: 2,
            lang_dim: 8,
            clip_dim: 6,
            shared_dim: None,
            n_heads: 2,
            lang_ffn_dim: 16,
            clip_ffn_dim: 12,
            layer_norm_eps: LAYER_NORM_EPS,
            dropout: 0.0,
        }
    }

    fn setup(seed: u64) -> (ParamStore, CrossModalEncoder, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = CrossModalEncoder::new(toy(), "cross", &mut store, &mut rng).unwrap();
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let lang = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let clip = Tensor::randn(&[7, 6], 1.0, &mut rng);
        (store, enc, lang, clip)
    }

    #[test]
    fn shapes_and_row_sums() {
        let (store, enc, lang, clip) = setup(0);
        let tape = Tape::new();
        let p = BoundParams::new(&tape, &store);
        let lv = [true, true, true, true, false];
        let cv = [true, true, true, false, false, true, false];
        let out = enc
            .forward(
                &p,
                StreamInputs {
                    lang: tape.constant(lang),
                    lang_valid: &lv,
                    clip: tape.constant(clip),
                    clip_valid: &cv,
                },
                &Dropout::off(),
                true,
            )
            .unwrap();
        assert_eq!(out.lang.shape(), vec![5, 8]);
        assert_eq!(out.clip.shape(), vec![7, 6]);
        assert_eq!(out.maps.len(), 2 * 2 * 2);
        for m in &out.maps {
            for r in 0..m.probs.rows() {
                let row = m.probs.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (c, &v) in row.iter().enumerate() {
                    if !m.key_valid[c] {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, enc, lang, clip) = setup(1);
        let ids: Vec<_> = store.ids().collect();
        let lv = [true, true, true, true, false];
        let cv = [true, true, false, true, true, true, false];
        let report = check_params(&store, &ids, 6, DEFAULT_STEP, |p| {
            let t = p.tape();
            let out = enc.forward(
                p,
                StreamInputs {
                    lang: t.constant(lang.clone()),
                    lang_valid: &lv,
                    clip: t.constant(clip.clone()),
                    clip_valid: &cv,
                },
                &Dropout::off(),
                false,
            )?;
            out.lang.tanh().sum().add(&out.clip.tanh().sum())
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }

    #[test]
    fn entropy_extremes() {
        assert!((row_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(row_entropy(&[0.0, 1.0, 0.0]), 0.0);
    }
}
