//! Pose from 3D–2D correspondences: normalized DLT followed by Gauss–Newton
//! on the pixel reprojection error.

use nalgebra::{DMatrix, Matrix3, Matrix4, Matrix6, Vector2, Vector3, Vector6, SMatrix};

use super::{nearest_rotation, GeometryError, Intrinsics, Pointmap, SE3Pose, Z_MIN};

const MIN_CORRESPONDENCES: usize = 6;
/// Ratio between the second-smallest and largest singular value of the DLT
/// system below which the configuration is treated as rank deficient.
const DLT_RANK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions {
    pub max_iterations: usize,
    /// Stop once the update's ∞-norm drops below this.
    pub step_tolerance: f64,
    /// Fraction of pixels (highest confidence first) eligible as correspondences.
    pub confidence_keep: f64,
    /// Cap on correspondences; enforced by a regular grid stride.
    pub max_correspondences: usize,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-10,
            confidence_keep: 0.3,
            max_correspondences: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpSolution {
    pub pose: SE3Pose,
    /// Root-mean-square reprojection error in pixels.
    pub rms_error: f64,
    pub iterations: usize,
}

/// Picks PnP correspondences from a world-frame pointmap: pixels whose
/// confidence is within the top `confidence_keep` fraction, thinned on a
/// regular grid stride until at most `max_correspondences` remain.
pub fn select_correspondences(
    pointmap: &Pointmap,
    opts: &PnpOptions,
) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
    let n = pointmap.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut sorted = pointmap.confidence.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let keep = ((opts.confidence_keep.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
    let threshold = sorted[keep - 1];

    let eligible = |u: usize, v: usize| pointmap.confidence[pointmap.index(u, v)] >= threshold;
    let count = |stride: usize| {
        (0..pointmap.height)
            .step_by(stride)
            .flat_map(|v| (0..pointmap.width).step_by(stride).map(move |u| (u, v)))
            .filter(|&(u, v)| eligible(u, v))
            .count()
    };
    let mut stride = 1;
    while count(stride) > opts.max_correspondences.max(1) {
        stride += 1;
    }

    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in (0..pointmap.height).step_by(stride) {
        for u in (0..pointmap.width).step_by(stride) {
            if eligible(u, v) {
                points.push(pointmap.point(u, v));
                pixels.push(Vector2::new(u as f64, v as f64));
            }
        }
    }
    (points, pixels)
}

/// Recovers the world-to-camera pose from correspondences.
pub fn solve_pnp(
    points3d: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &Intrinsics,
    opts: &PnpOptions,
) -> Result<PnpSolution, GeometryError> {
    if points3d.len() != pixels.len() {
        return Err(GeometryError::DimensionMismatch(format!(
            "{} points vs {} pixels",
            points3d.len(),
            pixels.len()
        )));
    }
    if points3d.len() < MIN_CORRESPONDENCES {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "need at least {MIN_CORRESPONDENCES} correspondences, got {}",
            points3d.len()
        )));
    }
    let initial = dlt(points3d, pixels, k)?;
    refine(initial, points3d, pixels, k, opts)
}

fn dlt(
    points3d: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &Intrinsics,
) -> Result<SE3Pose, GeometryError> {
    let n = points3d.len();
    let centroid = points3d.iter().sum::<Vector3<f64>>() / n as f64;
    let mean_dist = points3d.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n as f64;
    if !(mean_dist > 0.0) {
        return Err(GeometryError::DegenerateConfiguration(
            "all 3d points coincide".into(),
        ));
    }
    let scale = 3f64.sqrt() / mean_dist;

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (p, px)) in points3d.iter().zip(pixels).enumerate() {
        let q = (p - centroid) * scale;
        let x = (px.x - k.cx) / k.fx;
        let y = (px.y - k.cy) / k.fy;
        let h = [q.x, q.y, q.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = h[j];
            a[(2 * i, 8 + j)] = -x * h[j];
            a[(2 * i + 1, 4 + j)] = h[j];
            a[(2 * i + 1, 8 + j)] = -y * h[j];
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| {
        GeometryError::DegenerateConfiguration("svd of the DLT system failed".into())
    })?;
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[10]];
    if !(second_smallest > DLT_RANK_TOLERANCE * largest) {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "rank-deficient DLT system (σ11/σ1 = {:.3e})",
            second_smallest / largest
        )));
    }
    let null = v_t.row(order[11]);

    let p_norm = SMatrix::<f64, 3, 4>::from_row_iterator(null.iter().copied());
    // P_norm acts on normalized points q = s (x - c); fold that back into P.
    let mut denorm = Matrix4::<f64>::identity() * scale;
    denorm[(3, 3)] = 1.0;
    denorm.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-scale * centroid));
    let mut p = p_norm * denorm;

    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    if m.determinant() < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let sv = m.singular_values();
    let lambda = sv.mean();
    if !(lambda > 0.0) {
        return Err(GeometryError::DegenerateConfiguration(
            "DLT produced a null rotation block".into(),
        ));
    }
    let rotation = nearest_rotation(&(m / lambda));
    let translation: Vector3<f64> = p.fixed_view::<3, 1>(0, 3).into_owned() / lambda;
    Ok(SE3Pose::new(rotation, translation))
}

/// Residuals and normal equations of the reprojection error at `pose`.
fn normal_equations(
    pose: &SE3Pose,
    points3d: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &Intrinsics,
) -> Result<(Matrix6<f64>, Vector6<f64>, f64), GeometryError> {
    let mut h = Matrix6::<f64>::zeros();
    let mut g = Vector6::<f64>::zeros();
    let mut sq = 0.0;
    for (x, px) in points3d.iter().zip(pixels) {
        let p = pose.apply(x);
        if !(p.z > Z_MIN) {
            return Err(GeometryError::PointBehindCamera { z: p.z });
        }
        let iz = 1.0 / p.z;
        let r = Vector2::new(
            k.fx * p.x * iz + k.cx - px.x,
            k.fy * p.y * iz + k.cy - px.y,
        );
        sq += r.norm_squared();
        // d(pixel)/d(camera point)
        let du = Vector3::new(k.fx * iz, 0.0, -k.fx * p.x * iz * iz);
        let dv = Vector3::new(0.0, k.fy * iz, -k.fy * p.y * iz * iz);
        // d(camera point)/dδ = [I | -[p]x]; row · [p]x-part is p × row.
        let ju = Vector6::new(du.x, du.y, du.z, p.y * du.z - p.z * du.y, p.z * du.x - p.x * du.z, p.x * du.y - p.y * du.x);
        let jv = Vector6::new(dv.x, dv.y, dv.z, p.y * dv.z - p.z * dv.y, p.z * dv.x - p.x * dv.z, p.x * dv.y - p.y * dv.x);
        h += ju * ju.transpose() + jv * jv.transpose();
        g += ju * r.x + jv * r.y;
    }
    Ok((h, g, sq))
}

fn refine(
    mut pose: SE3Pose,
    points3d: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    k: &Intrinsics,
    opts: &PnpOptions,
) -> Result<PnpSolution, GeometryError> {
    let n = points3d.len() as f64;
    let mut last_step = f64::INFINITY;
    for it in 0..opts.max_iterations {
        let (h, g, _) = normal_equations(&pose, points3d, pixels, k)?;
        let delta = h.cholesky().map(|c| -c.solve(&g)).ok_or_else(|| {
            GeometryError::DegenerateConfiguration("singular Gauss-Newton system".into())
        })?;
        pose = pose.perturb_left(&delta);
        last_step = delta.amax();
        if last_step < opts.step_tolerance {
            let pose = pose.orthonormalized();
            let (_, _, sq) = normal_equations(&pose, points3d, pixels, k)?;
            return Ok(PnpSolution {
                pose,
                rms_error: (sq / n).sqrt(),
                iterations: it + 1,
            });
        }
    }
    Err(GeometryError::NoConvergence {
        iterations: opts.max_iterations,
        last_step,
    })
}
