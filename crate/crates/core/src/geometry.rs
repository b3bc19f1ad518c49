//! Point-cloud container and SE(3) algebra shared by every stage.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR − I` and `det R − 1` for a rotation to be accepted.
pub const ROTATION_TOL: f64 = 1e-9;

/// An ordered set of 3D points in meters with optional per-point attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    intensity: Option<Vec<f32>>,
    ground_prob: Option<Vec<f64>>,
}

impl PointCloud {
    /// Builds a cloud from bare points. Fails on non-finite coordinates.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        Self::with_attributes(points, None, None)
    }

    /// Builds a cloud with optional intensity and ground-probability columns.
    pub fn with_attributes(
        points: Vec<Vector3<f64>>,
        intensity: Option<Vec<f32>>,
        ground_prob: Option<Vec<f64>>,
    ) -> Result<Self> {
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("point cloud", "non-finite coordinate"));
        }
        if let Some(ref i) = intensity {
            if i.len() != points.len() {
                return Err(Error::DimensionMismatch {
                    context: "intensity attribute",
                    left: i.len(),
                    right: points.len(),
                });
            }
        }
        if let Some(ref g) = ground_prob {
            if g.len() != points.len() {
                return Err(Error::DimensionMismatch {
                    context: "ground_prob attribute",
                    left: g.len(),
                    right: points.len(),
                });
            }
            if g.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid("point cloud", "ground_prob outside [0,1]"));
            }
        }
        Ok(Self {
            points,
            intensity,
            ground_prob,
        })
    }

    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            intensity: None,
            ground_prob: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f32]> {
        self.intensity.as_deref()
    }

    pub fn ground_prob(&self) -> Option<&[f64]> {
        self.ground_prob.as_deref()
    }

    /// Attaches a ground-probability column (one value per point, each in [0,1]).
    pub fn set_ground_prob(&mut self, probs: Vec<f64>) -> Result<()> {
        if probs.len() != self.points.len() {
            return Err(Error::DimensionMismatch {
                context: "ground_prob attribute",
                left: probs.len(),
                right: self.points.len(),
            });
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("ground_prob", "value outside [0,1]"));
        }
        self.ground_prob = Some(probs);
        Ok(())
    }

    /// Applies a rigid transform to every point; attributes carry through unchanged.
    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            intensity: self.intensity.clone(),
            ground_prob: self.ground_prob.clone(),
        }
    }

    /// Sub-cloud at the given indices, attributes included. Panics on out-of-range indices.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
            ground_prob: self
                .ground_prob
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }
}

/// An SE(3) element: proper rotation plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality (`‖RᵀR − I‖max` and `|det R − 1|` below
    /// [`ROTATION_TOL`]) and finiteness before accepting the parts.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().all(|c| c.is_finite())
            || !translation.iter().all(|c| c.is_finite())
        {
            return Err(Error::invalid("rigid transform", "non-finite entry"));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let max_dev = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let det_dev = (rotation.determinant() - 1.0).abs();
        if max_dev > ROTATION_TOL || det_dev > ROTATION_TOL {
            return Err(Error::invalid(
                "rigid transform",
                format!("rotation not orthonormal (dev {max_dev:.2e}, det dev {det_dev:.2e})"),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Projects an approximate rotation onto SO(3) (nearest proper rotation via
    /// SVD) before validating. Used when reading limited-precision pose files.
    pub fn orthonormalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("rigid transform", "non-finite rotation"));
        }
        let svd = rotation.svd(true, true);
        let (u, v_t) = (
            svd.u.ok_or_else(|| Error::invalid("rigid transform", "SVD failed"))?,
            svd.v_t
                .ok_or_else(|| Error::invalid("rigid transform", "SVD failed"))?,
        );
        let sign = (u * v_t).determinant().signum();
        let fixup = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
        Self::new(u * fixup * v_t, translation)
    }

    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(
            (rotation.transpose() * rotation - Matrix3::identity())
                .iter()
                .all(|v| v.abs() < 1e-6),
            "internal transform drifted off SO(3)"
        );
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::from_parts(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::from_parts(rt, -(rt * self.translation))
    }

    /// Re-projects the rotation onto SO(3); call after long composition chains.
    pub fn renormalized(&self) -> RigidTransform {
        Self::orthonormalized(self.rotation, self.translation)
            .expect("renormalization of a finite rotation cannot fail")
    }
}

/// Scan-file identifiers and the matching world-frame poses for a sequence.
#[derive(Debug, Clone)]
pub struct SequenceMeta {
    scan_paths: Vec<std::path::PathBuf>,
    poses: Vec<RigidTransform>,
}

impl SequenceMeta {
    pub fn new(scan_paths: Vec<std::path::PathBuf>, poses: Vec<RigidTransform>) -> Result<Self> {
        if scan_paths.len() != poses.len() {
            return Err(Error::DimensionMismatch {
                context: "sequence scans vs poses",
                left: scan_paths.len(),
                right: poses.len(),
            });
        }
        Ok(Self { scan_paths, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn scan_paths(&self) -> &[std::path::PathBuf] {
        &self.scan_paths
    }

    pub fn poses(&self) -> &[RigidTransform] {
        &self.poses
    }
}
