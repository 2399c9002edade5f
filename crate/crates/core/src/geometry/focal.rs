use nalgebra::Vector2;

use super::{GeometryError, Intrinsics, Pointmap, Z_MIN};

pub const FOCAL_MAX_ITERATIONS: usize = 10;
pub const FOCAL_TOLERANCE: f64 = 1e-6;
const MIN_CONFIDENT_PIXELS: usize = 100;

/// Shared focal length of a pointmap expressed in its own camera frame.
///
/// The principal point is fixed at the image centre. The focal minimizes the
/// sum over confident pixels of `‖(u - cx, v - cy) - f (x/z, y/z)‖` with
/// Weiszfeld reweighting, seeded by the least-squares solution.
pub fn estimate_focal(pointmap: &Pointmap, conf_threshold: f64) -> Result<Intrinsics, GeometryError> {
    let cx = pointmap.width as f64 / 2.0;
    let cy = pointmap.height as f64 / 2.0;

    let confident: Vec<usize> = (0..pointmap.len())
        .filter(|&i| pointmap.confidence[i] > conf_threshold)
        .collect();
    if confident.len() < MIN_CONFIDENT_PIXELS {
        return Err(GeometryError::InsufficientConfidentPixels {
            found: confident.len(),
            required: MIN_CONFIDENT_PIXELS,
        });
    }

    let mut offsets = Vec::with_capacity(confident.len());
    let mut rays = Vec::with_capacity(confident.len());
    for &i in &confident {
        let p = pointmap.points[i];
        if !(p.z.abs() >= Z_MIN) || !p.iter().all(|c| c.is_finite()) {
            continue;
        }
        let u = (i % pointmap.width) as f64;
        let v = (i / pointmap.width) as f64;
        offsets.push(Vector2::new(u - cx, v - cy));
        rays.push(Vector2::new(p.x / p.z, p.y / p.z));
    }
    if offsets.is_empty() {
        return Err(GeometryError::AllPointsAtInfinity);
    }

    let weighted = |w: &dyn Fn(usize) -> f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for (k, (o, r)) in offsets.iter().zip(&rays).enumerate() {
            let wk = w(k);
            num += wk * o.dot(r);
            den += wk * r.dot(r);
        }
        (num, den)
    };

    let (num, den) = weighted(&|_| 1.0);
    if !(den > 0.0) {
        return Err(GeometryError::DegenerateConfiguration(
            "every confident ray lies on the optical axis".into(),
        ));
    }
    let mut focal = num / den;
    for _ in 0..FOCAL_MAX_ITERATIONS {
        let f = focal;
        let (num, den) = weighted(&|k| {
            let r = (offsets[k] - f * rays[k]).norm();
            1.0 / r.max(1e-9)
        });
        let next = num / den;
        let converged = ((next - focal) / focal).abs() < FOCAL_TOLERANCE;
        focal = next;
        if converged {
            break;
        }
    }
    if !(focal > 0.0) {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "non-positive focal estimate {focal}"
        )));
    }
    Ok(Intrinsics::new(focal, focal, cx, cy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    /// Back-projects every pixel of a pinhole camera onto a wavy surface.
    fn synth(width: usize, height: usize, f: f64, scale: f64) -> Pointmap {
        let k = Intrinsics::centered(f, width, height);
        let mut pts = Vec::new();
        for v in 0..height {
            for u in 0..width {
                let z = 2.0 + 0.3 * (u as f64 * 0.1).sin() * (v as f64 * 0.07).cos();
                pts.push(k.backproject(&Vector2::new(u as f64, v as f64), z) * scale);
            }
        }
        Pointmap::from_points(width, height, pts).unwrap()
    }

    #[test]
    fn recovers_focal_from_clean_pointmap() {
        let pm = synth(64, 48, 150.0, 1.0);
        let k = estimate_focal(&pm, 0.0).unwrap();
        assert!((k.fx - 150.0).abs() < 0.1);
        assert_eq!(k.fx, k.fy);
        assert_eq!((k.cx, k.cy), (32.0, 24.0));
    }

    #[test]
    fn low_confidence_outliers_are_ignored() {
        let mut pm = synth(64, 48, 150.0, 1.0);
        for i in (0..pm.len()).step_by(10) {
            pm.points[i] = Vector3::new(5.0, -3.0, 0.5);
            pm.confidence[i] = 1.0;
        }
        for (i, c) in pm.confidence.iter_mut().enumerate() {
            if i % 10 != 0 {
                *c = 3.0;
            }
        }
        let k = estimate_focal(&pm, 2.0).unwrap();
        assert!((k.fx - 150.0).abs() < 0.1);
    }

    #[test]
    fn scale_invariant_in_scene_depth() {
        let base = estimate_focal(&synth(48, 40, 120.0, 1.0), 0.0).unwrap().fx;
        for s in [0.1, 1.0, 10.0] {
            let f = estimate_focal(&synth(48, 40, 120.0, s), 0.0).unwrap().fx;
            assert!(((f - base) / base).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_depth_everywhere_is_at_infinity() {
        let pm = Pointmap::from_points(20, 10, vec![Vector3::new(0.1, 0.1, 0.0); 200]).unwrap();
        assert_eq!(estimate_focal(&pm, 0.0), Err(GeometryError::AllPointsAtInfinity));
    }

    #[test]
    fn too_few_confident_pixels() {
        let pm = synth(16, 6, 100.0, 1.0);
        assert!(matches!(
            estimate_focal(&pm, 0.0),
            Err(GeometryError::InsufficientConfidentPixels { found: 96, .. })
        ));
    }
}
