//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

fn check_step(h: f64) -> Result<()> {
    if (1e-7..=1e-3).contains(&h) {
        Ok(())
    } else {
        Err(Error::Contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")))
    }
}

fn rel_err(auto: f64, numeric: f64) -> f64 {
    (auto - numeric).abs() / numeric.abs().max(1.0)
}

/// Max over coordinates of `|autodiff − numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    check_step(h)?;
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(xv)?;
    let grads = tape.backward(out)?;
    let auto = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |x: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(x);
        Ok(f(v)?.item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(auto.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-tensor result of [`check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

fn sample_coords(numel: usize, max: usize) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        // evenly strided, always including both ends
        (0..max).map(|k| k * (numel - 1) / (max - 1)).collect()
    }
}

/// Checks gradients of a scalar loss with respect to the listed parameters,
/// perturbing at most `max_coords` coordinates per tensor.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    max_coords: usize,
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t, 's> Fn(&BoundParams<'t, 's>) -> Result<Var<'t>>,
{
    check_step(h)?;
    let max_coords = max_coords.max(2);
    let tape = Tape::new();
    let bound = BoundParams::new(&tape, store);
    let loss = f(&bound)?;
    let grads = bound.collect(tape.backward(loss)?);

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, s);
        Ok(f(&bound)?.item())
    };

    let mut scratch = store.clone();
    let mut tensors = Vec::with_capacity(ids.len());
    for &id in ids {
        let numel = store.get(id).numel();
        let auto = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let coords = sample_coords(numel, max_coords);
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = store.get(id).data()[i];
            scratch.get_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&scratch)?;
            scratch.get_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&scratch)?;
            scratch.get_mut(id).data_mut()[i] = orig;
            worst = worst.max(rel_err(auto.data()[i], (fp - fm) / (2.0 * h)));
        }
        tensors.push(ParamCheck {
            name: store.name(id).to_string(),
            coords_checked: coords.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { tensors })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn linear_sum_has_unit_gradient() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let err = finite_difference_check(|v| Ok(v.sum()), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-9);
        let tape = Tape::new();
        let v = tape.leaf(x);
        let g = tape.backward(v.sum()).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn quadratic() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let g = tape.backward(v.mul(&v).unwrap().sum()).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
        let err = finite_difference_check(|v| Ok(v.mul(&v)?.sum()), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn step_outside_range_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_difference_check(|v| Ok(v.sum()), &x, 1e-2).is_err());
    }

    #[test]
    fn coordinate_sampling_covers_ends() {
        assert_eq!(sample_coords(3, 5), vec![0, 1, 2]);
        let c = sample_coords(100, 4);
        assert_eq!(c.first(), Some(&0));
        assert_eq!(c.last(), Some(&99));
    }

    #[test]
    fn param_check_on_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.normal("w", &[4, 3], 0.5, &mut rng).unwrap();
        let b = store.normal("b", &[3], 0.5, &mut rng).unwrap();
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let report = check_params(&store, &[w, b], 64, DEFAULT_STEP, |p| {
            let xv = p.tape().constant(x.clone());
            let y = xv.matmul(&p.get(w))?.add_row(&p.get(b))?.tanh();
            Ok(y.mul(&y)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");
    }
}
