//! Building blocks shared by the single-modality and cross-modal encoders.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{concat_cols, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamStore};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

pub const INIT_STD: f64 = 0.02;

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    }
}

pub(crate) fn linear_specs(out: &mut Vec<ParamSpec>, name: &str, d_in: usize, d_out: usize) {
    out.push(spec(format!("{name}.weight"), &[d_in, d_out], Init::Normal(INIT_STD)));
    out.push(spec(format!("{name}.bias"), &[d_out], Init::Zeros));
}

pub(crate) fn norm_specs(out: &mut Vec<ParamSpec>, name: &str, d: usize) {
    out.push(spec(format!("{name}.gain"), &[d], Init::Ones));
    out.push(spec(format!("{name}.bias"), &[d], Init::Zeros));
}

pub(crate) fn attention_specs(
    out: &mut Vec<ParamSpec>,
    name: &str,
    d_query: usize,
    d_kv: usize,
    d_attn: usize,
    d_out: usize,
) {
    linear_specs(out, &format!("{name}.query"), d_query, d_attn);
    linear_specs(out, &format!("{name}.key"), d_kv, d_attn);
    linear_specs(out, &format!("{name}.value"), d_kv, d_attn);
    linear_specs(out, &format!("{name}.output"), d_attn, d_out);
}

pub(crate) fn ffn_specs(out: &mut Vec<ParamSpec>, name: &str, d: usize, ffn: usize) {
    linear_specs(out, &format!("{name}.inner"), d, ffn);
    linear_specs(out, &format!("{name}.outer"), ffn, d);
}

/// Allocates every spec into `store`.
pub fn allocate<R: Rng + ?Sized>(store: &mut ParamStore, specs: &[ParamSpec], rng: &mut R) -> Result<()> {
    for s in specs {
        match s.init {
            Init::Normal(std) => store.normal(s.name.clone(), &s.shape, std, rng)?,
            Init::Zeros => store.zeros(s.name.clone(), &s.shape)?,
            Init::Ones => store.ones(s.name.clone(), &s.shape)?,
        };
    }
    Ok(())
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Contract(format!("parameter {name} not allocated")))
}

/// Dropout source. Off for evaluation and gradient checks.
pub struct Dropout {
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Dropout {
            rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout: kept units are scaled by 1/(1−p).
    pub fn apply<'t>(&self, x: Var<'t>, p: f64) -> Result<Var<'t>> {
        let Some(rng) = &self.rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        let mut rng = rng.borrow_mut();
        let keep = 1.0 / (1.0 - p);
        let mask: Rc<[f64]> = (0..x.value().numel())
            .map(|_| if rng.gen_bool(p) { 0.0 } else { keep })
            .collect();
        x.mul_const(mask)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Linear {
            weight: lookup(store, &format!("{name}.weight"))?,
            bias: lookup(store, &format!("{name}.bias"))?,
        })
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&p.get(self.weight))?.add_row(&p.get(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub(crate) fn bind(store: &ParamStore, name: &str, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            gain: lookup(store, &format!("{name}.gain"))?,
            bias: lookup(store, &format!("{name}.bias"))?,
            eps,
        })
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&p.get(self.gain), &p.get(self.bias), self.eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub(crate) fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::bind(store, &format!("{name}.inner"))?,
            outer: Linear::bind(store, &format!("{name}.outer"))?,
        })
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.inner.forward(p, x)?.gelu();
        self.outer.forward(p, h)
    }
}

/// Multi-head attention. Queries and keys/values may come from different
/// inputs of different widths; both are projected into `n_heads` heads of
/// the attention width, and the output is projected to the query side's
/// own width.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

/// Output of an attention block plus the per-head probability maps when
/// recording was requested.
pub struct AttentionOutput<'t> {
    pub output: Var<'t>,
    pub probs: Vec<Tensor>,
}

impl Attention {
    pub(crate) fn bind(store: &ParamStore, name: &str, n_heads: usize) -> Result<Self> {
        Ok(Attention {
            query: Linear::bind(store, &format!("{name}.query"))?,
            key: Linear::bind(store, &format!("{name}.key"))?,
            value: Linear::bind(store, &format!("{name}.value"))?,
            output: Linear::bind(store, &format!("{name}.output"))?,
            n_heads,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t, '_>,
        queries: Var<'t>,
        keys: Var<'t>,
        key_valid: &[bool],
        record: bool,
    ) -> Result<AttentionOutput<'t>> {
        let q = self.query.forward(p, queries)?;
        let k = self.key.forward(p, keys)?;
        let v = self.value.forward(p, keys)?;
        let width = q.value().cols();
        if width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {} heads",
                self.n_heads
            )));
        }
        let dh = width / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut probs = Vec::new();
        for h in 0..self.n_heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            let a = scores.masked_softmax_rows(Some(key_valid))?;
            if record {
                probs.push((*a.value()).clone());
            }
            heads.push(a.matmul(&vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { concat_cols(&heads)? };
        Ok(AttentionOutput {
            output: self.output.forward(p, joined)?,
            probs,
        })
    }
}
