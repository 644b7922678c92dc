use proptest::prelude::*;
use ubimap_core::geom::{orthogonality_drift, rotation_distance, Point3, RigidTransform, Vec3};

fn transform() -> impl Strategy<Value = RigidTransform> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-10.0..10.0f64)).prop_map(|(w, t)| {
        let mut r = RigidTransform::from_axis_angle(&Vec3::new(w[0], w[1], w[2]));
        r.translation = Vec3::new(t[0], t[1], t[2]);
        r
    })
}

fn close(a: &RigidTransform, b: &RigidTransform, tol: f64) -> bool {
    (a.rotation - b.rotation).norm() < tol && (a.translation - b.translation).norm() < tol
}

proptest! {
    #[test]
    fn composition_is_associative(a in transform(), b in transform(), c in transform()) {
        prop_assert!(close(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c)), 1e-9));
    }

    #[test]
    fn inverse_cancels(a in transform(), p in prop::array::uniform3(-5.0..5.0f64)) {
        let p = Point3::new(p[0], p[1], p[2]);
        prop_assert!(close(&a.compose(&a.inverse()), &RigidTransform::identity(), 1e-12));
        prop_assert!((a.inverse().apply(&a.apply(&p)) - p).norm() < 1e-9);
    }

    #[test]
    fn rotation_distance_is_a_metric(a in transform(), b in transform(), c in transform()) {
        let ab = rotation_distance(&a, &b);
        prop_assert!((ab - rotation_distance(&b, &a)).abs() < 1e-9);
        prop_assert!((0.0..=std::f64::consts::PI + 1e-12).contains(&ab));
        prop_assert!(rotation_distance(&a, &c) <= ab + rotation_distance(&b, &c) + 1e-9);
    }
}

#[test]
fn long_chains_stay_orthonormal() {
    let step = RigidTransform::from_axis_angle(&Vec3::new(0.31, -0.17, 0.23));
    let mut acc = RigidTransform::identity();
    for _ in 0..1000 {
        acc = acc.compose(&step);
        assert!(orthogonality_drift(&acc.rotation) < 1e-12);
        assert!((acc.rotation.determinant() - 1.0).abs() < 1e-12);
    }
}
