use proptest::prelude::*;

use ipgo::linalg::{matmul_tn, orthonormality_defect, Mat, Rng};
use ipgo::optimizer::{enforce_constraints, mix_inserts, wrap_angle, InsertPair};
use ipgo::parameterization::{apply_r1, apply_r2, build_insert, forward_insert, init_params};
use ipgo::protocol::file::{decode_records, encode_record, Role};
use ipgo::protocol::wire::{decode_matrix, encode_matrix};

fn finite_matrix() -> impl Strategy<Value = Mat> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(
            prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
            r * c,
        )
        .prop_map(move |v| Mat::from_vec(r, c, v).unwrap())
    })
}

fn bits(m: &Mat) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn file_record_round_trip(m in finite_matrix(), tag in 0u8..3) {
        let role = Role::from_tag(tag).unwrap();
        let mut buf = Vec::new();
        encode_record(&mut buf, &m, role).unwrap();
        let recs = decode_records(&buf).unwrap();
        prop_assert_eq!(recs.len(), 1);
        prop_assert_eq!(recs[0].1, role);
        prop_assert_eq!(bits(&recs[0].0), bits(&m));
    }

    #[test]
    fn wire_round_trip(m in finite_matrix()) {
        prop_assert_eq!(bits(&decode_matrix(&encode_matrix(&m)).unwrap()), bits(&m));
    }

    #[test]
    fn truncated_files_never_decode(m in finite_matrix(), cut in 1usize..64) {
        let mut buf = Vec::new();
        encode_record(&mut buf, &m, Role::Prompt).unwrap();
        let keep = buf.len().saturating_sub(cut);
        prop_assert!(decode_records(&buf[..keep]).is_err() || keep == 0);
    }

    #[test]
    fn rotations_are_orthogonal(half in 1usize..9, theta in -10.0f64..10.0, seed in any::<u64>()) {
        let x = Rng::new(seed).gaussian_mat(2 * half, 3);
        for y in [apply_r1(theta, &x).unwrap(), apply_r2(theta, &x).unwrap()] {
            let gram_x = matmul_tn(&x, &x).unwrap();
            let gram_y = matmul_tn(&y, &y).unwrap();
            prop_assert!(gram_x.max_abs_diff(&gram_y).unwrap() < 1e-12);
        }
    }

    #[test]
    fn wrapped_angle_in_range_and_equivalent(theta in -1e3f64..1e3) {
        let (w, n) = wrap_angle(theta);
        prop_assert!(w > -std::f64::consts::FRAC_PI_2 && w <= std::f64::consts::FRAC_PI_2);
        prop_assert!((w + n as f64 * std::f64::consts::PI - theta).abs() < 1e-9);
    }

    #[test]
    fn enforcement_restores_feasibility_without_moving_v(seed in any::<u64>(), t1 in -6.0f64..6.0, t2 in -6.0f64..6.0) {
        let mut p = init_params(8, 3, 2, 2, 3, seed).unwrap();
        p.theta1_pre = t1;
        p.theta2_pre = t2;
        let before = forward_insert(&p.e_pre, &p.z_pre, t1, t2).unwrap();
        enforce_constraints(&mut p).unwrap();
        let after = build_insert(&p.e_pre, &p.z_pre, p.theta1_pre, p.theta2_pre).unwrap();
        prop_assert!(orthonormality_defect(&p.e_pre) < 1e-10);
        // coefficients already in the box, so wrapping by π must not change V
        prop_assert!(before.max_abs_diff(&after).unwrap() < 1e-12);
    }

    #[test]
    fn mix_stays_between_endpoints(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
        let mut rng = Rng::new(seed);
        let a = InsertPair { pre: rng.gaussian_mat(4, 2), suff: rng.gaussian_mat(4, 1) };
        let b = InsertPair { pre: rng.gaussian_mat(4, 2), suff: rng.gaussian_mat(4, 1) };
        let m = mix_inserts(&a, &b, lambda).unwrap();
        for ((x, y), z) in a.pre.as_slice().iter().zip(b.pre.as_slice()).zip(m.pre.as_slice()) {
            prop_assert!(*z >= x.min(*y) - 1e-12 && *z <= x.max(*y) + 1e-12);
        }
    }
}
