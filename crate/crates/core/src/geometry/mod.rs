//! Rigid transforms, pinhole cameras and the dense per-pixel grids that flow
//! through the reconstruction loop.
//!
//! Pixel convention: grid cell `(u, v)` (column, row) sits at continuous pixel
//! coordinate `(u, v)`. Grids are stored row-major, index `v * width + u`.
//!
//! Poses map world coordinates into a camera (`x_cam = R x_world + t`). The
//! world frame is the camera frame of the first processed frame.

mod epipolar;
mod focal;
mod pnp;

pub use epipolar::{fundamental_from_poses, sampson_distance, skew};
pub use focal::{estimate_focal, FOCAL_MAX_ITERATIONS, FOCAL_TOLERANCE};
pub use pnp::{select_correspondences, solve_pnp, PnpOptions, PnpSolution};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Smallest camera-frame depth treated as in front of the camera (meters).
pub const Z_MIN: f64 = 1e-6;
/// Smallest relative translation for which epipolar geometry is defined (meters).
pub const BASELINE_MIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point behind camera (camera-frame z = {z})")]
    PointBehindCamera { z: f64 },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("refinement did not converge after {iterations} iterations (last step {last_step:e})")]
    NoConvergence { iterations: usize, last_step: f64 },
    #[error("need at least {required} confident pixels, found {found}")]
    InsufficientConfidentPixels { found: usize, required: usize },
    #[error("all confident points lie at the camera plane")]
    AllPointsAtInfinity,
    #[error("baseline {baseline:e} m is below the minimum")]
    DegenerateBaseline { baseline: f64 },
    #[error("sampson distance undefined: zero gradient with non-zero epipolar residual")]
    IndeterminateDistance,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation given as an axis-angle vector (radians), then translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the z axis.
    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::new(0.0, 0.0, angle), Vector3::zeros())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &SE3Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Left perturbation `exp(δ) ∘ self` with `δ = (ρ, φ)`: the point map
    /// becomes `Rot(φ) (R x + t) + ρ`. This is the update used by the
    /// Gauss–Newton solvers and the pose gradients of the losses.
    pub fn perturb_left(&self, delta: &Vector6<f64>) -> Self {
        let rho = Vector3::new(delta[0], delta[1], delta[2]);
        let phi = Vector3::new(delta[3], delta[4], delta[5]);
        let r = Rotation3::new(phi).into_inner();
        Self {
            rotation: r * self.rotation,
            translation: r * self.translation + rho,
        }
    }

    /// Position of the camera centre in the source frame (`-Rᵀ t`).
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Geodesic angle of `self⁻¹ ∘ other` (radians).
    pub fn rotation_angle_to(&self, other: &SE3Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    /// Projects the rotation onto SO(3).
    pub fn orthonormalized(&self) -> Self {
        Self {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        ortho <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }
}

/// Angle of a rotation matrix in radians, stable near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * skew.norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Closest rotation in Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// Shared focal with the principal point at the image centre `(W/2, H/2)`.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self::new(focal, focal, width as f64 / 2.0, height as f64 / 2.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < width as f64
            && self.cy >= 0.0
            && self.cy < height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidValue(format!(
                "intrinsics {self:?} invalid for a {width}x{height} image"
            )))
        }
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(p.z > Z_MIN) {
            return Err(GeometryError::PointBehindCamera { z: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Camera-frame point at depth `z` seen through pixel `pixel`.
    pub fn backproject(&self, pixel: &Vector2<f64>, z: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * z,
            (pixel.y - self.cy) / self.fy * z,
            z,
        )
    }
}

/// Pixel of world point `x` seen by a camera with pose `pose` and intrinsics `k`.
pub fn project(
    k: &Intrinsics,
    pose: &SE3Pose,
    x: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    k.project_camera(&pose.apply(x))
}

fn check_grid_len(name: &str, len: usize, width: usize, height: usize) -> Result<(), GeometryError> {
    if len != width * height {
        return Err(GeometryError::DimensionMismatch(format!(
            "{name} has {len} entries, expected {width}x{height}"
        )));
    }
    Ok(())
}

/// Per-pixel world points with a paired confidence map.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
}

impl Pointmap {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
        confidence: Vec<f64>,
    ) -> Result<Self, GeometryError> {
        check_grid_len("points", points.len(), width, height)?;
        check_grid_len("confidence", confidence.len(), width, height)?;
        if let Some(c) = confidence.iter().find(|c| !(**c >= 1.0)) {
            return Err(GeometryError::InvalidValue(format!(
                "confidence {c} below 1"
            )));
        }
        Ok(Self {
            width,
            height,
            points,
            confidence,
        })
    }

    /// Pointmap with every confidence set to 1.
    pub fn from_points(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
    ) -> Result<Self, GeometryError> {
        Self::new(width, height, points, vec![1.0; width * height])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    pub fn point(&self, u: usize, v: usize) -> Vector3<f64> {
        self.points[v * self.width + u]
    }

    /// Same pointmap with every point mapped through `pose`.
    pub fn transformed(&self, pose: &SE3Pose) -> Self {
        Self {
            width: self.width,
            height: self.height,
            points: self.points.iter().map(|p| pose.apply(p)).collect(),
            confidence: self.confidence.clone(),
        }
    }
}

/// Dense depth with a validity mask; valid entries are finite and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    /// Validity derived from the values: finite and > 0.
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self, GeometryError> {
        check_grid_len("depth", depth.len(), width, height)?;
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    /// Explicit mask; entries flagged valid must still be finite and positive.
    pub fn with_mask(
        width: usize,
        height: usize,
        depth: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, GeometryError> {
        check_grid_len("depth", depth.len(), width, height)?;
        check_grid_len("validity", valid.len(), width, height)?;
        let valid = depth
            .iter()
            .zip(valid)
            .map(|(d, m)| m && d.is_finite() && *d > 0.0)
            .collect();
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            depth: self.depth.iter().map(|d| f(*d)).collect(),
            valid: self.valid.clone(),
        }
    }
}

/// Per-pixel displacement `(du, dv)` from a frame to another.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<Vector2<f64>>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, flow: Vec<Vector2<f64>>) -> Result<Self, GeometryError> {
        check_grid_len("flow", flow.len(), width, height)?;
        if flow.iter().any(|f| !(f.x.is_finite() && f.y.is_finite())) {
            return Err(GeometryError::InvalidValue("non-finite flow".into()));
        }
        Ok(Self {
            width,
            height,
            flow,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            flow: vec![Vector2::zeros(); width * height],
        }
    }

    /// Flow endpoint of pixel `(u, v)`.
    pub fn target(&self, u: usize, v: usize) -> Vector2<f64> {
        Vector2::new(u as f64, v as f64) + self.flow[v * self.width + u]
    }
}

/// Whether a continuous pixel position lies in the sampleable image area
/// `[0, W-1] x [0, H-1]`.
pub fn in_image(p: &Vector2<f64>, width: usize, height: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f64 && p.y <= (height - 1) as f64
}

/// Camera-frame depth of every pixel; pixels with `z <= Z_MIN` are masked.
pub fn depth_from_pointmap(pointmap: &Pointmap, pose: &SE3Pose) -> DepthMap {
    let mut depth = Vec::with_capacity(pointmap.len());
    let mut valid = Vec::with_capacity(pointmap.len());
    for p in &pointmap.points {
        let z = pose.apply(p).z;
        depth.push(z);
        valid.push(z.is_finite() && z > Z_MIN);
    }
    DepthMap {
        width: pointmap.width,
        height: pointmap.height,
        depth,
        valid,
    }
}
