use crate::error::{Error, Result};
use crate::numerics::tensor::{as_matrix, Tensor};

const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Descending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Tensor,
}

/// Cyclic Jacobi eigen-decomposition.
///
/// Rotations are applied until every off-diagonal entry is negligible against
/// the Frobenius norm of the input.
pub fn sym_eig(a: &Tensor) -> Result<SymEig> {
    let (n, n2) = as_matrix("sym_eig", a)?;
    if n != n2 {
        return Err(Error::shape("sym_eig", a.shape(), &[n, n]));
    }
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.get2(i, j) - a.get2(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Contract(format!(
                    "sym_eig input not symmetric at ({i},{j}): {} vs {}",
                    a.get2(i, j),
                    a.get2(j, i)
                )));
            }
        }
    }
    if !a.is_finite() {
        return Err(Error::Contract("sym_eig input has non-finite entries".into()));
    }

    // Work on the symmetrized copy.
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.get2(i, j) + a.get2(j, i));
        }
    }
    let mut q = Tensor::eye(n).into_data();
    let fro: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let threshold = f64::EPSILON * fro.max(f64::MIN_POSITIVE);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = m[p * n + r];
                if apr.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * n + p];
                let arr = m[r * n + r];
                let theta = (arr - app) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkr = m[k * n + r];
                    m[k * n + p] = c * mkp - s * mkr;
                    m[k * n + r] = s * mkp + c * mkr;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mrk = m[r * n + k];
                    m[p * n + k] = c * mpk - s * mrk;
                    m[r * n + k] = s * mpk + c * mrk;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkr = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkr;
                    q[k * n + r] = s * qkp + c * qkr;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + new_col] = q[k * n + old_col];
        }
    }
    Ok(SymEig {
        values,
        vectors: Tensor::new(vec![n, n], vectors)?,
    })
}

impl SymEig {
    /// `Q·diag(λ)·Qᵀ`
    pub fn reconstruct(&self) -> Tensor {
        let n = self.values.len();
        let q = self.vectors.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|k| q[i * n + k] * self.values[k] * q[j * n + k]).sum();
            }
        }
        Tensor::new(vec![n, n], out).expect("square")
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn diagonal_input() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let e = sym_eig(&a).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        assert!((e.vectors.get2(1, 0).abs() - 1.0).abs() < 1e-15);
        assert!((e.vectors.get2(0, 1).abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_symmetric() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = Tensor::randn(&[10, 10], 1.0, &mut rng);
        let a = b.transpose().unwrap().matmul(&b).unwrap();
        let e = sym_eig(&a).unwrap();
        let rel = e.reconstruct().max_abs_diff(&a).unwrap();
        let diff = {
            let r = e.reconstruct();
            let d: Vec<f64> = r.data().iter().zip(a.data()).map(|(x, y)| x - y).collect();
            Tensor::new(vec![10, 10], d).unwrap().frobenius() / a.frobenius()
        };
        assert!(diff < 1e-8, "relative Frobenius error {diff} (max abs {rel})");
        let qtq = e.vectors.transpose().unwrap().matmul(&e.vectors).unwrap();
        assert!(qtq.max_abs_diff(&Tensor::eye(10)).unwrap() < 1e-8);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }
}
