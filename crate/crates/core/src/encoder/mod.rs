//! Single-modality transformer encoder (post-LN, GELU feed-forward).

pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Var, LAYER_NORM_EPS};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::tokenize::TokenSequence;

use layers::{
    allocate, attention_specs, ffn_specs, linear_specs, lookup, norm_specs, spec, Attention,
    Dropout, FeedForward, Init, LayerNorm, Linear, ParamSpec, INIT_STD,
};

fn default_eps() -> f64 {
    LAYER_NORM_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// 0 disables segment embeddings.
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    pub has_pooler: bool,
    #[serde(default)]
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn bert_base() -> Self {
        EncoderConfig {
            hidden_dim: 768,
            n_layers: 12,
            n_heads: 12,
            ffn_dim: 3072,
            vocab_size: 30522,
            max_len: 512,
            type_vocab_size: 2,
            layer_norm_eps: LAYER_NORM_EPS,
            has_pooler: true,
            dropout: 0.1,
        }
    }

    pub fn bert_large() -> Self {
        EncoderConfig {
            hidden_dim: 1024,
            n_layers: 24,
            n_heads: 16,
            ffn_dim: 4096,
            ..Self::bert_base()
        }
    }

    /// The CLIP text encoder's shape: 77 positions, no segments, no pooler.
    pub fn clip_text() -> Self {
        EncoderConfig {
            hidden_dim: 512,
            n_layers: 12,
            n_heads: 8,
            ffn_dim: 2048,
            vocab_size: 49408,
            max_len: 77,
            type_vocab_size: 0,
            layer_norm_eps: LAYER_NORM_EPS,
            has_pooler: false,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.n_heads == 0 || self.ffn_dim == 0 || self.vocab_size == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Scalars in one transformer layer.
    pub fn per_layer_parameters(&self) -> usize {
        let (d, f) = (self.hidden_dim, self.ffn_dim);
        4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    }
}

/// Closed-form scalar count of an encoder.
pub fn count_parameters(c: &EncoderConfig) -> usize {
    let d = c.hidden_dim;
    let embeddings = (c.vocab_size + c.max_len + c.type_vocab_size) * d + 2 * d;
    let pooler = if c.has_pooler { d * d + d } else { 0 };
    embeddings + c.n_layers * c.per_layer_parameters() + pooler
}

/// Every parameter tensor of an encoder under `prefix`, in allocation order.
pub fn layout(c: &EncoderConfig, prefix: &str) -> Vec<ParamSpec> {
    let d = c.hidden_dim;
    let mut out = Vec::new();
    let normal = Init::Normal(INIT_STD);
    out.push(spec(format!("{prefix}.embeddings.token"), &[c.vocab_size, d], normal));
    out.push(spec(format!("{prefix}.embeddings.position"), &[c.max_len, d], normal));
    if c.type_vocab_size > 0 {
        out.push(spec(format!("{prefix}.embeddings.segment"), &[c.type_vocab_size, d], normal));
    }
    norm_specs(&mut out, &format!("{prefix}.embeddings.norm"), d);
    for l in 0..c.n_layers {
        let name = format!("{prefix}.layers.{l}");
        attention_specs(&mut out, &format!("{name}.attention"), d, d, d, d);
        norm_specs(&mut out, &format!("{name}.attention_norm"), d);
        ffn_specs(&mut out, &format!("{name}.ffn"), d, c.ffn_dim);
        norm_specs(&mut out, &format!("{name}.ffn_norm"), d);
    }
    if c.has_pooler {
        linear_specs(&mut out, &format!("{prefix}.pooler"), d, d);
    }
    out
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attention: Attention,
    attention_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
    token: ParamId,
    position: ParamId,
    segment: Option<ParamId>,
    embed_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    pooler: Option<Linear>,
}

impl Encoder {
    /// Allocates fresh weights under `prefix` and binds to them.
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        allocate(store, &layout(&config, prefix), rng)?;
        Self::bind(config, prefix, store)
    }

    /// Binds to weights already present in `store`.
    pub fn bind(config: EncoderConfig, prefix: &str, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let eps = config.layer_norm_eps;
        let layers = (0..config.n_layers)
            .map(|l| {
                let name = format!("{prefix}.layers.{l}");
                Ok(EncoderLayer {
                    attention: Attention::bind(store, &format!("{name}.attention"), config.n_heads)?,
                    attention_norm: LayerNorm::bind(store, &format!("{name}.attention_norm"), eps)?,
                    ffn: FeedForward::bind(store, &format!("{name}.ffn"))?,
                    ffn_norm: LayerNorm::bind(store, &format!("{name}.ffn_norm"), eps)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            token: lookup(store, &format!("{prefix}.embeddings.token"))?,
            position: lookup(store, &format!("{prefix}.embeddings.position"))?,
            segment: if config.type_vocab_size > 0 {
                Some(lookup(store, &format!("{prefix}.embeddings.segment"))?)
            } else {
                None
            },
            embed_norm: LayerNorm::bind(store, &format!("{prefix}.embeddings.norm"), eps)?,
            layers,
            pooler: if config.has_pooler {
                Some(Linear::bind(store, &format!("{prefix}.pooler"))?)
            } else {
                None
            },
            prefix: prefix.to_string(),
            config,
        })
    }

    /// Hidden states `[len × hidden_dim]` for one sequence.
    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t, '_>,
        seq: &TokenSequence,
        dropout: &Dropout,
    ) -> Result<Var<'t>> {
        let c = &self.config;
        let n = seq.len();
        if n == 0 {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if n > c.max_len {
            return Err(Error::Length { len: n, max_len: c.max_len });
        }
        if seq.attention_mask.len() != n || seq.segment_ids.len() != n {
            return Err(Error::Contract("token sequence fields differ in length".into()));
        }
        let ids = seq.ids_usize();
        if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::Index { what: "token id", index: bad, size: c.vocab_size });
        }
        let positions: Vec<usize> = (0..n).collect();
        let mut x = p.get(self.token).gather_rows(&ids)?;
        x = x.add(&p.get(self.position).gather_rows(&positions)?)?;
        if let Some(seg) = self.segment {
            let segs: Vec<usize> = seq.segment_ids.iter().map(|&s| s as usize).collect();
            if let Some(&bad) = segs.iter().find(|&&s| s >= c.type_vocab_size) {
                return Err(Error::Index { what: "segment id", index: bad, size: c.type_vocab_size });
            }
            x = x.add(&p.get(seg).gather_rows(&segs)?)?;
        }
        x = self.embed_norm.forward(p, x)?;
        x = dropout.apply(x, c.dropout)?;
        let valid = seq.key_valid();
        for layer in &self.layers {
            let a = layer.attention.forward(p, x, x, &valid, false)?.output;
            let a = dropout.apply(a, c.dropout)?;
            x = layer.attention_norm.forward(p, x.add(&a)?)?;
            let f = dropout.apply(layer.ffn.forward(p, x)?, c.dropout)?;
            x = layer.ffn_norm.forward(p, x.add(&f)?)?;
        }
        Ok(x)
    }

    /// `tanh(W·h + b)` of the first row, or the raw first row without a pooler.
    pub fn pool<'t>(&self, p: &BoundParams<'t, '_>, hidden: Var<'t>) -> Result<Var<'t>> {
        let first = hidden.slice_rows(0, 1)?;
        match &self.pooler {
            Some(lin) => Ok(lin.forward(p, first)?.tanh()),
            None => Ok(first),
        }
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let prefix = format!("{}.", self.prefix);
        store
            .iter()
            .filter(|(_, n, _)| n.starts_with(&prefix))
            .map(|(id, _, _)| id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{check_params, Tape, DEFAULT_STEP};
    use crate::tokenize::Stream;

    pub(crate) fn toy(d: usize) -> EncoderConfig {
        EncoderConfig {
            hidden_dim: d,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 2 * d,
            vocab_size: 10,
            max_len: 8,
            type_vocab_size: 2,
            layer_norm_eps: LAYER_NORM_EPS,
            has_pooler: true,
            dropout: 0.0,
        }
    }

    fn seq(ids: &[u32], real: usize) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            attention_mask: (0..ids.len()).map(|i| u8::from(i < real)).collect(),
            segment_ids: vec![0; ids.len()],
            stream: Stream::Language,
        }
    }

    #[test]
    fn bert_base_count() {
        assert_eq!(count_parameters(&EncoderConfig::bert_base()), 109_482_240);
    }

    #[test]
    fn layout_matches_closed_form() {
        for c in [EncoderConfig::bert_base(), EncoderConfig::bert_large(), EncoderConfig::clip_text(), toy(4)] {
            let n: usize = layout(&c, "x").iter().map(ParamSpec::numel).sum();
            assert_eq!(n, count_parameters(&c));
        }
    }

    #[test]
    fn single_token_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(toy(8), "lang", &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let p = BoundParams::new(&tape, &store);
        let h = enc.forward(&p, &seq(&[2], 1), &Dropout::off()).unwrap();
        assert_eq!(h.shape(), vec![1, 8]);
        assert!(h.value().is_finite());
    }

    #[test]
    fn too_long_is_a_length_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(toy(4), "lang", &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let p = BoundParams::new(&tape, &store);
        let err = enc.forward(&p, &seq(&[1; 9], 9), &Dropout::off()).unwrap_err();
        assert!(matches!(err, Error::Length { len: 9, max_len: 8 }));
    }

    #[test]
    fn padding_values_do_not_leak() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(toy(8), "lang", &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let p = BoundParams::new(&tape, &store);
        let a = enc.forward(&p, &seq(&[2, 5, 3, 0, 0, 0], 3), &Dropout::off()).unwrap().value();
        let b = enc.forward(&p, &seq(&[2, 5, 3, 7, 9, 1], 3), &Dropout::off()).unwrap().value();
        for r in 0..3 {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // larger init so the check is not dominated by near-zero gradients
        let enc = Encoder::new(toy(4), "lang", &mut store, &mut rng).unwrap();
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let ids = enc.param_ids(&store);
        let s = seq(&[2, 4, 6, 3, 0], 4);
        let report = check_params(&store, &ids, 12, DEFAULT_STEP, |p| {
            let h = enc.forward(p, &s, &Dropout::off())?;
            let pooled = enc.pool(p, h)?;
            h.tanh().sum().add(&pooled.sum())
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
    }

    #[test]
    fn dropout_only_in_training() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = toy(8);
        c.dropout = 0.5;
        let enc = Encoder::new(c, "lang", &mut store, &mut rng).unwrap();
        let tape = Tape::new();
        let p = BoundParams::new(&tape, &store);
        let s = seq(&[2, 5, 3], 3);
        let e1 = enc.forward(&p, &s, &Dropout::off()).unwrap().value();
        let e2 = enc.forward(&p, &s, &Dropout::off()).unwrap().value();
        assert_eq!(e1, e2);
        let t = enc.forward(&p, &s, &Dropout::train(9)).unwrap().value();
        assert_ne!(*e1, *t);
    }
}
