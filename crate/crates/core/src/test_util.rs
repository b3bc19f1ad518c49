//! Helpers shared by unit tests across modules.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::geometry::RigidTransform;

/// Random SE(3) element with full-range yaw, bounded roll, and a translation
/// of a few meters.
pub fn random_transform(rng: &mut impl Rng) -> RigidTransform {
    let (a, b, c): (f64, f64, f64) = (
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(-1.5..1.5),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    let rz = RigidTransform::from_yaw(a, Vector3::zeros());
    let rx = {
        let (s, co) = b.sin_cos();
        Matrix3::new(1.0, 0.0, 0.0, 0.0, co, -s, 0.0, s, co)
    };
    let rz2 = RigidTransform::from_yaw(c, Vector3::zeros());
    let rot = rz.rotation() * rx * rz2.rotation();
    let t = Vector3::new(
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-2.0..2.0),
    );
    RigidTransform::new(rot, t).unwrap()
}

/// Random point in a box, for quick cloud fixtures.
pub fn random_point(rng: &mut impl Rng, extent: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(-extent / 4.0..extent / 4.0),
    )
}
