// SPDX-License-Identifier: Apache-2.0

use kinaema_tensor::{Graph, ParamSet, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn reshape_roundtrip_is_identity(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
        let data: Vec<f32> = (0..rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) % 1000) as f32).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let back = t.clone().reshape(vec![rows * cols]).unwrap().reshape(vec![rows, cols]).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-20.0f64..20.0, 12)) {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::new(vec![3, 4], values).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_permutation_equivariance_over_keys(
        q in proptest::collection::vec(-2.0f64..2.0, 8),
        kv in proptest::collection::vec(-2.0f64..2.0, 20),
        rot in 0usize..5,
    ) {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let qv = g.input(Tensor::new(vec![2, 4], q).unwrap());
        let kvv = g.input(Tensor::new(vec![5, 4], kv).unwrap());
        let perm: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
        let kp = g.gather_rows(kvv, &perm).unwrap();
        let a = g.attention(qv, kvv, kvv, 2, 1).unwrap();
        let b = g.attention(qv, kp, kp, 2, 1).unwrap();
        prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-5);
    }
}
