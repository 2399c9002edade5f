use nalgebra::{Matrix2x3, Vector2, Vector3, Vector6};

use super::{l1_sign, LossError, LossValue};
use crate::geometry::{in_image, FlowField, Intrinsics, Pointmap, SE3Pose};

/// Bilinear interpolation stencil at a continuous pixel position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearSample {
    pub indices: [usize; 4],
    pub weights: [f64; 4],
}

impl BilinearSample {
    /// Stencil for `p`, which must lie in `[0, W-1] × [0, H-1]`.
    pub fn at(p: &Vector2<f64>, width: usize, height: usize) -> Self {
        let (x0, fx) = split(p.x, width);
        let (y0, fy) = split(p.y, height);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        Self {
            indices: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        }
    }

    pub fn sample(&self, points: &[Vector3<f64>]) -> Vector3<f64> {
        self.indices
            .iter()
            .zip(&self.weights)
            .map(|(&i, &w)| points[i] * w)
            .sum()
    }
}

/// Integer cell and fractional offset; the last column/row uses the cell to
/// its left so that the far edge is sampled exactly.
fn split(x: f64, n: usize) -> (usize, f64) {
    if n < 2 {
        return (0, 0.0);
    }
    let cell = (x.floor().max(0.0) as usize).min(n - 2);
    (cell, x - cell as f64)
}

/// Per-pixel world-frame displacement between two frames, with the mask of
/// pixels whose flow endpoint stays inside the image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlow {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<Vector3<f64>>,
    pub mask: Vec<bool>,
}

impl SceneFlow {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn check_dims(x_i: &Pointmap, x_j: &Pointmap, flow: &FlowField) -> Result<(), LossError> {
    let dims = [
        (x_i.width, x_i.height),
        (x_j.width, x_j.height),
        (flow.width, flow.height),
    ];
    if dims.iter().any(|&d| d != dims[0]) {
        return Err(LossError::DimensionMismatch(format!(
            "pointmaps {}x{} and {}x{}, flow {}x{}",
            dims[0].0, dims[0].1, dims[1].0, dims[1].1, dims[2].0, dims[2].1
        )));
    }
    Ok(())
}

fn stencils(flow: &FlowField) -> Vec<Option<BilinearSample>> {
    let (w, h) = (flow.width, flow.height);
    (0..w * h)
        .map(|i| {
            let target = flow.target(i % w, i / w);
            in_image(&target, w, h).then(|| BilinearSample::at(&target, w, h))
        })
        .collect()
}

/// `S(u) = X_j(u + O(u)) - X_i(u)` with bilinear sampling of `X_j`.
pub fn scene_flow(x_i: &Pointmap, x_j: &Pointmap, flow: &FlowField) -> Result<SceneFlow, LossError> {
    check_dims(x_i, x_j, flow)?;
    let stencils = stencils(flow);
    let mut out = Vec::with_capacity(x_i.len());
    let mut mask = Vec::with_capacity(x_i.len());
    for (i, s) in stencils.iter().enumerate() {
        match s {
            Some(s) => {
                out.push(s.sample(&x_j.points) - x_i.points[i]);
                mask.push(true);
            }
            None => {
                out.push(Vector3::zeros());
                mask.push(false);
            }
        }
    }
    Ok(SceneFlow {
        width: x_i.width,
        height: x_i.height,
        flow: out,
        mask,
    })
}

/// Flow predicted by moving each point by its scene flow and projecting it
/// into camera `j`. Returns the flow and the mask with behind-camera pixels
/// removed; unmasked entries are zero.
pub fn induced_flow(
    x_i: &Pointmap,
    scene: &SceneFlow,
    pose_j: &SE3Pose,
    k: &Intrinsics,
) -> Result<(FlowField, Vec<bool>), LossError> {
    if (x_i.width, x_i.height) != (scene.width, scene.height) {
        return Err(LossError::DimensionMismatch("pointmap and scene flow differ in size".into()));
    }
    let w = x_i.width;
    let mut flow = vec![Vector2::zeros(); x_i.len()];
    let mut mask = scene.mask.clone();
    for i in 0..x_i.len() {
        if !mask[i] {
            continue;
        }
        let p = pose_j.apply(&(x_i.points[i] + scene.flow[i]));
        match k.project_camera(&p) {
            Ok(px) => flow[i] = px - Vector2::new((i % w) as f64, (i / w) as f64),
            Err(_) => mask[i] = false,
        }
    }
    let flow = FlowField::new(x_i.width, x_i.height, flow)
        .map_err(|e| LossError::InvalidInput(e.to_string()))?;
    Ok((flow, mask))
}

/// Dynamics-aware flow loss with its analytic gradients.
#[derive(Debug, Clone)]
pub struct DflowOutput {
    pub loss: LossValue,
    pub grad_x_i: Vec<Vector3<f64>>,
    pub grad_x_j: Vec<Vector3<f64>>,
    /// Gradient w.r.t. a left perturbation `(ρ, φ)` of `T_j`.
    pub grad_pose: Vector6<f64>,
    pub mask: Vec<bool>,
    /// Signed residual components `f̂ - O` of masked pixels, in pixel order.
    pub residuals: Vec<f64>,
}

/// Mean over the valid region of `‖f̂(u) - O(u)‖₁`.
///
/// Fails with `EmptyValidRegion` when fewer than 1% of pixels survive the
/// masks.
pub fn dflow_loss(
    x_i: &Pointmap,
    x_j: &Pointmap,
    flow: &FlowField,
    pose_j: &SE3Pose,
    k: &Intrinsics,
) -> Result<DflowOutput, LossError> {
    check_dims(x_i, x_j, flow)?;
    let (w, n) = (x_i.width, x_i.len());
    let stencils = stencils(flow);

    struct Pixel {
        index: usize,
        stencil: BilinearSample,
        cam: Vector3<f64>,
        residual: Vector2<f64>,
    }
    let mut pixels = Vec::new();
    for (i, s) in stencils.into_iter().enumerate() {
        let Some(stencil) = s else { continue };
        // X_i(u) + S(u) is the sampled X_j point; using it directly avoids
        // a rounding dependence on X_i.
        let moved = stencil.sample(&x_j.points);
        let cam = pose_j.apply(&moved);
        let Ok(px) = k.project_camera(&cam) else { continue };
        let induced = px - Vector2::new((i % w) as f64, (i / w) as f64);
        pixels.push(Pixel {
            index: i,
            stencil,
            cam,
            residual: induced - flow.flow[i],
        });
    }

    let count = pixels.len();
    if count == 0 || count * 100 < n {
        return Err(LossError::EmptyValidRegion { valid: count, total: n });
    }

    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    // The moved point X_i + S equals the sampled X_j, so the direct path
    // and the scene-flow path through X_i cancel exactly.
    let grad_x_i = vec![Vector3::zeros(); n];
    let mut grad_x_j = vec![Vector3::zeros(); n];
    let mut grad_pose = Vector6::zeros();
    let mut mask = vec![false; n];
    let mut residuals = Vec::with_capacity(2 * count);
    let rt = pose_j.rotation.transpose();
    for px in &pixels {
        let r = px.residual;
        total += r.x.abs() + r.y.abs();
        residuals.extend([r.x, r.y]);
        mask[px.index] = true;

        let d_r = Vector2::new(l1_sign(r.x), l1_sign(r.y)) * inv;
        let p = px.cam;
        let iz = 1.0 / p.z;
        let j_proj = Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * p.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * p.y * iz * iz,
        );
        let d_p = j_proj.transpose() * d_r;
        let d_moved = rt * d_p;
        for (&idx, &wt) in px.stencil.indices.iter().zip(&px.stencil.weights) {
            grad_x_j[idx] += d_moved * wt;
        }
        let d_phi = p.cross(&d_p);
        grad_pose += Vector6::new(d_p.x, d_p.y, d_p.z, d_phi.x, d_phi.y, d_phi.z);
    }

    Ok(DflowOutput {
        loss: LossValue::single("dflow", total * inv, count),
        grad_x_i,
        grad_x_j,
        grad_pose,
        mask,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    fn plane(w: usize, h: usize, k: &Intrinsics, z: f64) -> Pointmap {
        let pts = (0..w * h)
            .map(|i| k.backproject(&Vector2::new((i % w) as f64, (i / w) as f64), z))
            .collect();
        Pointmap::from_points(w, h, pts).unwrap()
    }

    /// Pointmap seen by camera `pose` of a static world surface `z = f(x, y)`.
    fn view(w: usize, h: usize, k: &Intrinsics, pose: &SE3Pose, surf: impl Fn(f64, f64) -> f64) -> Pointmap {
        let inv = pose.inverse();
        let mut pts = Vec::new();
        for v in 0..h {
            for u in 0..w {
                let ray = inv.rotation * k.backproject(&Vector2::new(u as f64, v as f64), 1.0);
                let c = inv.translation;
                // Fixed-point iteration on the ray parameter for a gentle surface.
                let mut lam = 2.0;
                for _ in 0..60 {
                    let q = c + ray * lam;
                    lam = (surf(q.x, q.y) - c.z) / ray.z;
                }
                pts.push(c + ray * lam);
            }
        }
        Pointmap::from_points(w, h, pts).unwrap()
    }

    fn exact_flow(x_i: &Pointmap, pose_j: &SE3Pose, k: &Intrinsics) -> FlowField {
        let w = x_i.width;
        let flow = (0..x_i.len())
            .map(|i| project(k, pose_j, &x_i.points[i]).unwrap() - Vector2::new((i % w) as f64, (i / w) as f64))
            .collect();
        FlowField::new(x_i.width, x_i.height, flow).unwrap()
    }

    #[test]
    fn bilinear_reproduces_affine_fields_and_edges() {
        let pts: Vec<_> = (0..12)
            .map(|i| Vector3::new((i % 4) as f64, (i / 4) as f64 * 2.0, 1.0))
            .collect();
        for p in [Vector2::new(0.3, 0.7), Vector2::new(3.0, 2.0), Vector2::new(2.5, 1.25)] {
            let s = BilinearSample::at(&p, 4, 3).sample(&pts);
            assert!((s - Vector3::new(p.x, 2.0 * p.y, 1.0)).norm() < 1e-15);
            let ws: f64 = BilinearSample::at(&p, 4, 3).weights.iter().sum();
            assert!((ws - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn static_scene_zero_flow_has_zero_scene_flow() {
        let k = Intrinsics::centered(20.0, 10, 8);
        let x = plane(10, 8, &k, 2.0);
        let s = scene_flow(&x, &x, &FlowField::zeros(10, 8)).unwrap();
        assert!(s.flow.iter().all(|f| f.norm() == 0.0));
        assert_eq!(s.valid_count(), 80);
    }

    #[test]
    fn camera_motion_over_static_plane_has_zero_scene_flow() {
        let k = Intrinsics::centered(30.0, 16, 12);
        let pose_j = SE3Pose::from_translation(Vector3::new(0.05, -0.02, 0.1));
        let surf = |_: f64, _: f64| 2.0;
        let x_i = view(16, 12, &k, &SE3Pose::identity(), surf);
        let x_j = view(16, 12, &k, &pose_j, surf);
        let flow = exact_flow(&x_i, &pose_j, &k);
        let s = scene_flow(&x_i, &x_j, &flow).unwrap();
        assert!(s.valid_count() > 0);
        for i in 0..s.flow.len() {
            if s.mask[i] {
                assert!(s.flow[i].norm() < 1e-12, "{}", s.flow[i].norm());
            }
        }
    }

    #[test]
    fn translated_point_shows_its_displacement() {
        let k = Intrinsics::centered(25.0, 12, 10);
        let x_i = plane(12, 10, &k, 2.0);
        let mut x_j = x_i.clone();
        let idx = x_i.index(5, 4);
        x_j.points[idx] += Vector3::new(0.0, 0.0, 0.01);
        let s = scene_flow(&x_i, &x_j, &FlowField::zeros(12, 10)).unwrap();
        assert!((s.flow[idx] - Vector3::new(0.0, 0.0, 0.01)).norm() < 1e-6);
    }

    #[test]
    fn induced_flow_reproduces_observed_flow() {
        let k = Intrinsics::centered(30.0, 16, 12);
        // Translation over a fronto-parallel plane keeps X_j affine in the
        // pixel coordinates, so bilinear sampling is exact.
        let pose_j = SE3Pose::from_translation(Vector3::new(0.03, -0.01, 0.05));
        let surf = |_: f64, _: f64| 1.5;
        let x_i = view(16, 12, &k, &SE3Pose::identity(), surf);
        let x_j = view(16, 12, &k, &pose_j, surf);
        let flow = exact_flow(&x_i, &pose_j, &k);
        let s = scene_flow(&x_i, &x_j, &flow).unwrap();
        let (f, mask) = induced_flow(&x_i, &s, &pose_j, &k).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                assert!((f.flow[i] - flow.flow[i]).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn interpolation_error_is_small_when_pointmap_is_not_affine() {
        // A rotated view of a plane is projective in the pixel coordinates;
        // bilinear sampling then leaves a small residual.
        let k = Intrinsics::centered(30.0, 16, 12);
        let pose_j = SE3Pose::from_axis_angle(Vector3::new(0.0, 0.01, 0.0), Vector3::new(0.03, 0.0, 0.05));
        let surf = |_: f64, _: f64| 1.5;
        let x_i = view(16, 12, &k, &SE3Pose::identity(), surf);
        let x_j = view(16, 12, &k, &pose_j, surf);
        let flow = exact_flow(&x_i, &pose_j, &k);
        let s = scene_flow(&x_i, &x_j, &flow).unwrap();
        let (f, mask) = induced_flow(&x_i, &s, &pose_j, &k).unwrap();
        let worst = (0..mask.len())
            .filter(|&i| mask[i])
            .map(|i| (f.flow[i] - flow.flow[i]).norm())
            .fold(0.0, f64::max);
        eprintln!("worst interpolation error {worst:e} px");
        assert!(worst < 1e-2);
    }

    #[test]
    fn no_motion_gives_zero_induced_flow() {
        let k = Intrinsics::centered(20.0, 8, 8);
        let x = plane(8, 8, &k, 3.0);
        let s = scene_flow(&x, &x, &FlowField::zeros(8, 8)).unwrap();
        let (f, _) = induced_flow(&x, &s, &SE3Pose::identity(), &k).unwrap();
        assert!(f.flow.iter().all(|d| d.norm() < 1e-12));
    }

    #[test]
    fn point_pushed_behind_camera_leaves_mask() {
        let k = Intrinsics::centered(20.0, 8, 8);
        let x = plane(8, 8, &k, 3.0);
        let mut s = scene_flow(&x, &x, &FlowField::zeros(8, 8)).unwrap();
        s.flow[10] = Vector3::new(0.0, 0.0, -5.0);
        let (_, mask) = induced_flow(&x, &s, &SE3Pose::identity(), &k).unwrap();
        assert!(!mask[10]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 63);
    }

    #[test]
    fn ground_truth_loss_vanishes_and_rotation_error_is_seen() {
        let k = Intrinsics::centered(30.0, 16, 12);
        let pose_j = SE3Pose::from_translation(Vector3::new(0.04, 0.01, 0.08));
        let surf = |_: f64, _: f64| 2.0;
        let x_i = view(16, 12, &k, &SE3Pose::identity(), surf);
        let x_j = view(16, 12, &k, &pose_j, surf);
        let flow = exact_flow(&x_i, &pose_j, &k);
        let out = dflow_loss(&x_i, &x_j, &flow, &pose_j, &k).unwrap();
        assert!(out.loss.value <= 1e-6, "{}", out.loss.value);

        let bent = SE3Pose::from_axis_angle(Vector3::new(0.0, 1f64.to_radians(), 0.0), Vector3::zeros()).compose(&pose_j);
        let out = dflow_loss(&x_i, &x_j, &flow, &bent, &k).unwrap();
        assert!(out.loss.value > 0.1);
        assert!(out.grad_pose.amax() > 0.0);
    }

    #[test]
    fn flow_outside_image_is_empty_region() {
        let k = Intrinsics::centered(20.0, 8, 8);
        let x = plane(8, 8, &k, 3.0);
        let flow = FlowField::new(8, 8, vec![Vector2::new(100.0, 0.0); 64]).unwrap();
        assert!(matches!(
            dflow_loss(&x, &x, &flow, &SE3Pose::identity(), &k),
            Err(LossError::EmptyValidRegion { valid: 0, total: 64 })
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let k = Intrinsics::centered(20.0, 8, 8);
        let a = plane(8, 8, &k, 3.0);
        let b = plane(8, 6, &k, 3.0);
        assert!(matches!(
            scene_flow(&a, &b, &FlowField::zeros(8, 8)),
            Err(LossError::DimensionMismatch(_))
        ));
    }
}
