use nalgebra::{Matrix3, Vector2, Vector3};

use super::{GeometryError, Intrinsics, SE3Pose, BASELINE_MIN};

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Fundamental matrix mapping pixels of camera `i` to epipolar lines of
/// camera `j`: `x_jᵀ F x_i = 0` for static points.
///
/// Both poses map world to camera. The relative motion is
/// `T_j ∘ T_i⁻¹ = (R, t)` and `F = K_j⁻ᵀ [t]ₓ R K_i⁻¹`.
pub fn fundamental_from_poses(
    pose_i: &SE3Pose,
    pose_j: &SE3Pose,
    k_i: &Intrinsics,
    k_j: &Intrinsics,
) -> Result<Matrix3<f64>, GeometryError> {
    let rel = pose_j.compose(&pose_i.inverse());
    let baseline = rel.translation.norm();
    if !(baseline > BASELINE_MIN) {
        return Err(GeometryError::DegenerateBaseline { baseline });
    }
    let essential = skew(&rel.translation) * rel.rotation;
    Ok(k_j.inverse_matrix().transpose() * essential * k_i.inverse_matrix())
}

/// First-order geometric error of a correspondence `u_i ↔ u_j` under `F`
/// (pixels²).
pub fn sampson_distance(
    f: &Matrix3<f64>,
    u_i: &Vector2<f64>,
    u_j: &Vector2<f64>,
) -> Result<f64, GeometryError> {
    let xi = Vector3::new(u_i.x, u_i.y, 1.0);
    let xj = Vector3::new(u_j.x, u_j.y, 1.0);
    let fxi = f * xi;
    let ftxj = f.transpose() * xj;
    let num = xj.dot(&fxi);
    let den = fxi.x * fxi.x + fxi.y * fxi.y + ftxj.x * ftxj.x + ftxj.y * ftxj.y;
    if den == 0.0 {
        return if num == 0.0 {
            Ok(0.0)
        } else {
            Err(GeometryError::IndeterminateDistance)
        };
    }
    Ok(num * num / den)
}
