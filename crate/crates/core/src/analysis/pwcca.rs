use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{sym_eig, Tensor};

/// Whitening eigenvalues below this fraction of the largest count as zero.
pub const EIG_CLIP: f64 = 1e-10;

/// Embeddings `[n_samples × dim]` plus a free-form description of where
/// they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSet {
    pub matrix: Tensor,
    pub source: String,
}

impl RepresentationSet {
    pub fn new(matrix: Tensor, source: impl Into<String>) -> Result<Self> {
        let (n, d) = dims(&matrix)?;
        if n <= d {
            return Err(Error::InsufficientData(format!("{n} samples for {d} dimensions; need more samples than dimensions")));
        }
        Ok(RepresentationSet { matrix, source: source.into() })
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::shape("pwcca", s, &[0, 0])),
    }
}

fn centered(t: &Tensor) -> Tensor {
    let (n, d) = (t.rows(), t.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v / n as f64;
        }
    }
    let data = (0..n)
        .flat_map(|i| t.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    Tensor::new(vec![n, d], data).expect("same shape")
}

/// `Σ^{-1/2}` of a covariance matrix.
fn inv_sqrt(cov: &Tensor) -> Result<Tensor> {
    let eig = sym_eig(cov)?;
    let d = eig.values.len();
    let top = eig.values[0].max(0.0);
    let effective_rank = eig.values.iter().filter(|&&l| l > EIG_CLIP * top).count();
    if top == 0.0 || effective_rank < d {
        return Err(Error::Conditioning { effective_rank, dim: d });
    }
    let q = &eig.vectors;
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| q.get2(i, k) * q.get2(j, k) / eig.values[k].sqrt()).sum();
        }
    }
    // symmetrize away rounding so downstream eigen-solves accept it
    symmetrize(Tensor::new(vec![d, d], out)?)
}

fn symmetrize(t: Tensor) -> Result<Tensor> {
    let tt = t.transpose()?;
    Tensor::new(t.shape().to_vec(), t.data().iter().zip(tt.data()).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Canonical correlations of `x` against `y` with the projection weight of
/// each canonical direction on the `x` side.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CcaResult {
    /// Descending.
    pub correlations: Vec<f64>,
    /// Sum to 1.
    pub weights: Vec<f64>,
}

impl CcaResult {
    pub fn weighted_mean(&self) -> f64 {
        self.correlations.iter().zip(&self.weights).map(|(r, w)| r * w).sum()
    }
}

pub fn cca(x: &RepresentationSet, y: &RepresentationSet) -> Result<CcaResult> {
    if x.n_samples() != y.n_samples() {
        return Err(Error::shape("pwcca", x.matrix.shape(), y.matrix.shape()));
    }
    let n = x.n_samples();
    if n <= x.dim().max(y.dim()) {
        return Err(Error::InsufficientData(format!(
            "{n} samples for dimensions {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    let xc = centered(&x.matrix);
    let yc = centered(&y.matrix);
    let xt = xc.transpose()?;
    let sxx = symmetrize(xt.matmul(&xc)?)?;
    let syy = symmetrize(yc.transpose()?.matmul(&yc)?)?;
    let sxy = xt.matmul(&yc)?;
    let wx = inv_sqrt(&sxx)?;
    let wy = inv_sqrt(&syy)?;
    let m = wx.matmul(&sxy)?.matmul(&wy)?;
    let eig = sym_eig(&symmetrize(m.matmul(&m.transpose()?)?)?)?;
    let k = x.dim().min(y.dim());
    let correlations: Vec<f64> = eig.values[..k].iter().map(|&l| l.max(0.0).sqrt().min(1.0)).collect();

    // canonical variates of x: columns of Xc · Σxx^{-1/2} · U, unit length
    let h = xc.matmul(&wx)?.matmul(&eig.vectors)?;
    let mut weights = Vec::with_capacity(k);
    for i in 0..k {
        let col: Vec<f64> = (0..n).map(|r| h.get2(r, i)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        // squared projection of every x neuron onto the direction
        let w: f64 = (0..x.dim())
            .map(|j| {
                let dot: f64 = (0..n).map(|r| col[r] * xc.get2(r, j)).sum::<f64>() / norm;
                dot * dot
            })
            .sum();
        weights.push(w);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Conditioning { effective_rank: 0, dim: x.dim() });
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(CcaResult { correlations, weights })
}

/// Projection-weighted mean canonical correlation, weighted from `x`'s side.
pub fn pwcca(x: &RepresentationSet, y: &RepresentationSet) -> Result<f64> {
    Ok(cca(x, y)?.weighted_mean())
}

/// Both directions and their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PwccaReport {
    pub x_source: String,
    pub y_source: String,
    pub x_to_y: f64,
    pub y_to_x: f64,
    pub mean: f64,
}

pub fn pwcca_report(x: &RepresentationSet, y: &RepresentationSet) -> Result<PwccaReport> {
    let x_to_y = pwcca(x, y)?;
    let y_to_x = pwcca(y, x)?;
    Ok(PwccaReport {
        x_source: x.source.clone(),
        y_source: y.source.clone(),
        x_to_y,
        y_to_x,
        mean: 0.5 * (x_to_y + y_to_x),
    })
}
