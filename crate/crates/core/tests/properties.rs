use nalgebra::{Vector3, Vector4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use so3flow_core::distributions::{make_target, octahedral_group, TargetKind};
use so3flow_core::layers::{AffineKind, MobiusCouplingLayer, QuaternionAffineLayer};
use so3flow_core::model::{FlowModel, ModelConfig};
use so3flow_core::so3::{geodesic_distance, matrix_to_quat, quat_to_matrix, Rotation, UnitQuaternion};

/// Uniform rotations from three unit-interval draws (Shoemake).
fn rotation() -> impl Strategy<Value = Rotation> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(u1, u2, u3)| {
        let tau = std::f64::consts::TAU;
        let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
        let v = Vector4::new(a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos());
        UnitQuaternion::normalize(v).unwrap().to_rotation()
    })
}

fn coupling(seed: u64, column: usize) -> MobiusCouplingLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = MobiusCouplingLayer::new(4, &[16, 16], 0, &mut rng).unwrap().with_column(column);
    layer.randomize(&mut rng);
    layer
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quaternion_round_trip(r in rotation()) {
        let back = quat_to_matrix(&matrix_to_quat(&r));
        prop_assert!((back.matrix() - r.matrix()).abs().max() < 1e-8);
        let q = matrix_to_quat(&r).to_array();
        let first = q.iter().find(|x| **x != 0.0).unwrap();
        prop_assert!(*first > 0.0);
    }

    #[test]
    fn geodesic_distance_is_a_metric(a in rotation(), b in rotation(), c in rotation()) {
        let ab = geodesic_distance(&a, &b);
        prop_assert!((ab - geodesic_distance(&b, &a)).abs() < 1e-9);
        prop_assert!((0.0..=std::f64::consts::PI + 1e-12).contains(&ab));
        prop_assert!(ab <= geodesic_distance(&a, &c) + geodesic_distance(&c, &b) + 1e-9);
        prop_assert!(geodesic_distance(&a, &a) < 1e-7);
    }

    #[test]
    fn coupling_inverts_and_keeps_conditioner(r in rotation(), seed in 0u64..8, column in 0usize..3) {
        let layer = coupling(seed, column);
        let (y, ld) = layer.forward(&r, None).unwrap();
        prop_assert!(ld.is_finite());
        prop_assert!((y.column(column) - r.column(column)).norm() < 1e-12);
        let back = layer.inverse(&y, None, 1e-9).unwrap().rotation;
        prop_assert!(geodesic_distance(&back, &r) < 1e-6);
    }

    #[test]
    fn affine_is_antipodal_and_invertible(r in rotation(), seed in 0u64..8) {
        let mut layer = QuaternionAffineLayer::identity(AffineKind::Unconstrained);
        layer.randomize(0.5, &mut ChaCha8Rng::seed_from_u64(seed));
        let v = *matrix_to_quat(&r).as_vector();
        let q = UnitQuaternion::from_vector(v).unwrap();
        let neg = UnitQuaternion::from_vector(-v).unwrap();
        let (a, la) = layer.forward(&q, None).unwrap();
        let (b, lb) = layer.forward(&neg, None).unwrap();
        prop_assert_eq!(a.as_vector(), &-b.as_vector());
        prop_assert_eq!(la, lb);
        let back = layer.inverse(&a, None).unwrap();
        prop_assert!(back.dot(&q).abs() > 1.0 - 1e-12);
    }

    #[test]
    fn cube_target_is_group_invariant(r in rotation(), i in 0usize..24) {
        let t = make_target(TargetKind::Cube24, 40.0, Rotation::identity()).unwrap();
        let g = &octahedral_group()[i];
        let d = t.log_prob(&r).unwrap() - t.log_prob(&r.compose(g)).unwrap();
        prop_assert!(d.abs() < 1e-6);
    }

    #[test]
    fn identity_flow_has_zero_density(r in rotation()) {
        let model = FlowModel::seeded(ModelConfig { blocks: 2, k: 3, hidden: vec![8, 8], ..ModelConfig::desk() }, 1).unwrap();
        prop_assert_eq!(model.log_prob(&r, None).unwrap(), 0.0);
    }

    #[test]
    fn flow_sample_log_prob_matches_density(seed in 0u64..20) {
        let mut model = FlowModel::seeded(ModelConfig { blocks: 2, k: 3, hidden: vec![8, 8], ..ModelConfig::desk() }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.randomize(0.3, &mut rng);
        for (x, lp) in model.sample(3, None, &mut rng).unwrap() {
            prop_assert!((model.log_prob(&x, None).unwrap() - lp).abs() < 1e-5);
        }
    }

    #[test]
    fn axis_angle_has_the_requested_angle(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64, t in 0.0..3.1f64) {
        let axis = Vector3::new(x, y, z);
        prop_assume!(axis.norm() > 1e-3);
        let r = Rotation::from_axis_angle(&axis, t);
        prop_assert!((r.angle() - t).abs() < 1e-7);
        prop_assert!((geodesic_distance(&Rotation::identity(), &r) - t).abs() < 1e-7);
    }
}
