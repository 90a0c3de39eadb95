use proptest::prelude::*;
use qbert_core::quaternion::{
    quat_to_real, quaternion_linear, real_to_quat, Quaternion, QuaternionMatrix, I, J, K, ONE,
};
use qbert_core::rng;

fn quat() -> impl Strategy<Value = Quaternion> {
    prop::array::uniform4(-10.0f64..10.0).prop_map(Quaternion::from_components)
}

#[test]
fn unit_multiplication_table() {
    let m = ONE.neg();
    let table = [
        (I, I, m),
        (J, J, m),
        (K, K, m),
        (I, J, K),
        (J, K, I),
        (K, I, J),
        (J, I, K.neg()),
        (K, J, I.neg()),
        (I, K, J.neg()),
        (ONE, I, I),
        (J, ONE, J),
        (I * J, K, m),
    ];
    for (p, q, r) in table {
        assert_eq!(p * q, r, "{p:?} * {q:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn norm_is_multiplicative(p in quat(), q in quat()) {
        let lhs = (p * q).norm();
        let rhs = p.norm() * q.norm();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
    }

    #[test]
    fn product_is_associative(p in quat(), q in quat(), r in quat()) {
        let a = ((p * q) * r).components();
        let b = (p * (q * r)).components();
        let scale = p.norm() * q.norm() * r.norm();
        for k in 0..4 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-10 * scale.max(1.0));
        }
    }

    #[test]
    fn conversion_round_trips(v in prop::collection::vec(-5.0f64..5.0, 1..6).prop_map(|v| {
        // pad to a multiple of 4
        let mut v = v; while v.len() % 4 != 0 { v.push(0.5); } v
    })) {
        prop_assert_eq!(quat_to_real(&real_to_quat(&v).unwrap()), v);
    }
}

/// Dense `(n × m)` real matrix equivalent to `w`: the 4×4 real block of
/// left multiplication by each weight quaternion, placed at its
/// (input, output) quaternion slots in component-blocked order.
fn block_matrix(w: &QuaternionMatrix) -> Vec<Vec<f64>> {
    let (nq, mq) = (w.in_quats(), w.out_quats());
    let mut dense = vec![vec![0.0; 4 * mq]; 4 * nq];
    for i in 0..nq {
        for j in 0..mq {
            let [r, a, b, c] = w.get(i, j).components();
            // rows: output component, cols: input component, of w ⊗ x
            let left = [
                [r, -a, -b, -c],
                [a, r, -c, b],
                [b, c, r, -a],
                [c, -b, a, r],
            ];
            for (out_c, row) in left.iter().enumerate() {
                for (in_c, &v) in row.iter().enumerate() {
                    dense[in_c * nq + i][out_c * mq + j] = v;
                }
            }
        }
    }
    dense
}

fn hamilton_loop(x: &[f64], w: &QuaternionMatrix) -> Vec<f64> {
    let xs = real_to_quat(x).unwrap();
    let out: Vec<Quaternion> = (0..w.out_quats())
        .map(|j| {
            let mut acc = Quaternion::default();
            for (i, &xq) in xs.iter().enumerate() {
                let p = w.get(i, j) * xq;
                acc = Quaternion::new(acc.r + p.r, acc.a + p.a, acc.b + p.b, acc.c + p.c);
            }
            acc
        })
        .collect();
    quat_to_real(&out)
}

#[test]
fn linear_map_matches_block_matrix_and_hamilton_loop() {
    let mut r = rng::seeded(42);
    for &(n, m) in &[(4, 4), (4, 8), (8, 4), (12, 16), (16, 12), (32, 8), (64, 64)] {
        for trial in 0..5 {
            let w = QuaternionMatrix::random(n, m, 1.0, &mut r).unwrap();
            let x = rng::normal_vec(&mut r, n, 1.0);
            let got = quaternion_linear(&x, &w).unwrap();
            let dense = block_matrix(&w);
            let via_dense: Vec<f64> = (0..m).map(|o| (0..n).map(|k| x[k] * dense[k][o]).sum()).collect();
            let via_loop = hamilton_loop(&x, &w);
            for o in 0..m {
                assert!((got[o] - via_dense[o]).abs() < 1e-12, "{n}x{m} trial {trial}");
                assert!((got[o] - via_loop[o]).abs() < 1e-12, "{n}x{m} trial {trial}");
            }
        }
    }
}

#[test]
fn quarter_parameter_saving() {
    let mut r = rng::seeded(0);
    for &(n, m) in &[(4, 4), (128, 384), (384, 192)] {
        let w = QuaternionMatrix::random(n, m, 0.02, &mut r).unwrap();
        assert_eq!(w.param_count() * 4, n * m);
    }
}
