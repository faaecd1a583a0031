use proptest::prelude::*;
use xdistill::numerics::{softmax_rows_kernel, Tape, Tensor};

fn matrix() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| (Just(c), prop::collection::vec(-50.0f64..50.0, r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((cols, data) in matrix()) {
        let out = softmax_rows_kernel(&data, cols, None);
        for row in out.chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shifts((cols, data) in matrix(), shift in -1e3f64..1e3) {
        let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
        let a = softmax_rows_kernel(&data, cols, None);
        let b = softmax_rows_kernel(&shifted, cols, None);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_keys_get_nothing((cols, data) in matrix(), seed in any::<u64>()) {
        let valid: Vec<bool> = (0..cols).map(|c| c == 0 || (seed >> (c % 64)) & 1 == 1).collect();
        let out = softmax_rows_kernel(&data, cols, Some(&valid));
        for row in out.chunks(cols) {
            for (p, &v) in row.iter().zip(&valid) {
                if !v {
                    prop_assert_eq!(*p, 0.0);
                }
            }
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows((cols, data) in matrix()) {
        prop_assume!(cols > 1);
        let rows = data.len() / cols;
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data.clone()).unwrap());
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let y = x.layer_norm(&g, &b, 1e-12).unwrap().value();
        for (i, row) in data.chunks(cols).enumerate() {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assume!(var > 1e-6);
            let out = y.row(i);
            prop_assert!(out.iter().sum::<f64>().abs() < 1e-9);
            let v2 = out.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            prop_assert!((v2 - 1.0).abs() < 1e-6);
        }
    }
}
