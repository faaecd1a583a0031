use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xdistill::analysis::{cca, pwcca, RepresentationSet};
use xdistill::numerics::Tensor;

fn set(t: Tensor) -> RepresentationSet {
    RepresentationSet::new(t, "test").unwrap()
}

fn randn(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::randn(&[n, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn add(a: &Tensor, b: &Tensor, scale: f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + scale * y).collect()).unwrap()
}

/// Gram-Schmidt basis of the columns, optionally centered first.
fn gram_schmidt(t: &Tensor, center: bool) -> Vec<Vec<f64>> {
    let n = t.rows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..t.cols() {
        let mut c: Vec<f64> = (0..n).map(|i| t.get2(i, j)).collect();
        let mean = if center { c.iter().sum::<f64>() / n as f64 } else { 0.0 };
        c.iter_mut().for_each(|v| *v -= mean);
        for q in &basis {
            let dot: f64 = c.iter().zip(q).map(|(a, b)| a * b).sum();
            c.iter_mut().zip(q).for_each(|(v, qv)| *v -= dot * qv);
        }
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        basis.push(c.into_iter().map(|v| v / norm).collect());
    }
    basis
}

/// Canonical correlations of two 2-column sets as singular values of
/// QxᵀQy, with the 2×2 eigenproblem solved in closed form.
fn oracle_correlations(x: &Tensor, y: &Tensor) -> [f64; 2] {
    let (qx, qy) = (gram_schmidt(x, true), gram_schmidt(y, true));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let m = [[dot(&qx[0], &qy[0]), dot(&qx[0], &qy[1])], [dot(&qx[1], &qy[0]), dot(&qx[1], &qy[1])]];
    let a = m[0][0] * m[0][0] + m[1][0] * m[1][0];
    let d = m[0][1] * m[0][1] + m[1][1] * m[1][1];
    let b = m[0][0] * m[0][1] + m[1][0] * m[1][1];
    let half = (a + d) / 2.0;
    let disc = (((a - d) / 2.0).powi(2) + b * b).sqrt();
    [(half + disc).sqrt(), (half - disc).max(0.0).sqrt()]
}

#[test]
fn correlations_match_gram_schmidt_oracle() {
    for seed in 0..5 {
        let x = randn(40, 2, seed);
        let y = add(&randn(40, 2, seed + 100), &x, 0.7);
        let got = cca(&set(x.clone()), &set(y.clone())).unwrap().correlations;
        let want = oracle_correlations(&x, &y);
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn independent_sets_score_low() {
    for seed in 0..5 {
        let s = pwcca(&set(randn(500, 16, seed)), &set(randn(500, 16, seed + 1000))).unwrap();
        assert!(s < 0.35, "seed {seed}: {s}");
    }
}

#[test]
fn more_noise_less_similarity() {
    let x = randn(300, 8, 1);
    let scores: Vec<f64> = [0.0, 0.5, 1.0, 2.0]
        .iter()
        .map(|&s| pwcca(&set(x.clone()), &set(add(&x, &randn(300, 8, 2), s))).unwrap())
        .collect();
    assert!((scores[0] - 1.0).abs() < 1e-6);
    assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn invariant_under_affine_maps(seed in any::<u64>(), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let x = randn(120, 5, seed);
        let y = add(&randn(120, 5, seed ^ 0xabc), &x, 0.8);
        let base = pwcca(&set(x.clone()), &set(y.clone())).unwrap();
        // any invertible affine map on the compared side
        let a = add(&Tensor::eye(5), &randn(5, 5, seed.wrapping_add(7)), 0.3);
        let y_moved = y.matmul(&a).unwrap().map(|v| v + shift);
        let after = pwcca(&set(x.clone()), &set(y_moved)).unwrap();
        prop_assert!((base - after).abs() < 1e-6, "{} vs {}", base, after);
        // rotation, scale and shift on the weighted side
        let q = gram_schmidt(&randn(5, 5, seed.wrapping_add(9)), false);
        let q = Tensor::from_rows(&q).unwrap().transpose().unwrap();
        let x_moved = x.matmul(&q).unwrap().map(|v| scale * v + shift);
        let after = pwcca(&set(x_moved), &set(y)).unwrap();
        prop_assert!((base - after).abs() < 1e-6, "{} vs {}", base, after);
    }

    #[test]
    fn self_similarity_is_one(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let x = randn(60, 4, seed);
        let s = pwcca(&set(x.clone()), &set(x.map(|v| v * scale))).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }
}
