use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{term, LossError, LossValue};
use crate::geometry::{Pointmap, Z_MIN};

/// How pointmaps are normalized before the regression residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfMode {
    /// Divide each pointmap by the mean depth of its valid pixels.
    #[default]
    Normalized,
    /// Compare points directly.
    Raw,
}

#[derive(Debug, Clone)]
pub struct ConfLossOutput {
    pub loss: LossValue,
    pub grad_points: Vec<Vector3<f64>>,
    pub grad_confidence: Vec<f64>,
    /// Per-pixel residual norms on valid pixels, in pixel order.
    pub residuals: Vec<f64>,
}

fn mean_depth(pm: &Pointmap, valid: &[bool], count: usize) -> Result<f64, LossError> {
    let z = (0..pm.len()).filter(|&i| valid[i]).map(|i| pm.points[i].z).sum::<f64>() / count as f64;
    if !(z > Z_MIN) {
        return Err(LossError::InvalidInput(format!("mean depth {z} is not positive")));
    }
    Ok(z)
}

/// Mean over valid pixels of `C·‖X_pred/z_p − X_gt/z_g‖ − α·log C`.
///
/// `z_p`, `z_g` are the mean valid depths of each pointmap in
/// [`ConfMode::Normalized`] and 1 in [`ConfMode::Raw`]. The point gradient
/// includes the dependence of `z_p` on every valid pixel.
pub fn conf_loss(
    pred: &Pointmap,
    gt: &Pointmap,
    valid: &[bool],
    alpha: f64,
    mode: ConfMode,
) -> Result<ConfLossOutput, LossError> {
    if (pred.width, pred.height) != (gt.width, gt.height) || valid.len() != pred.len() {
        return Err(LossError::DimensionMismatch(format!(
            "prediction {}x{}, ground truth {}x{}, mask of {}",
            pred.width,
            pred.height,
            gt.width,
            gt.height,
            valid.len()
        )));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(LossError::EmptyValidRegion { valid: 0, total: pred.len() });
    }
    let (zp, zg) = match mode {
        ConfMode::Normalized => (mean_depth(pred, valid, count)?, mean_depth(gt, valid, count)?),
        ConfMode::Raw => (1.0, 1.0),
    };

    let n = count as f64;
    let mut regression = 0.0;
    let mut log_term = 0.0;
    let mut grad_points = vec![Vector3::zeros(); pred.len()];
    let mut grad_confidence = vec![0.0; pred.len()];
    let mut residuals = Vec::with_capacity(count);
    // Σ C·(∂‖d‖/∂d)·X_pred, needed for the ∂z_p path.
    let mut through_zp = 0.0;
    for i in (0..pred.len()).filter(|&i| valid[i]) {
        let c = pred.confidence[i];
        let d = pred.points[i] / zp - gt.points[i] / zg;
        let r = d.norm();
        regression += c * r;
        log_term += c.ln();
        residuals.push(r);
        grad_confidence[i] = (r - alpha / c) / n;
        if r > 0.0 {
            let unit = d / r;
            grad_points[i] = unit * (c / (n * zp));
            through_zp += c * unit.dot(&pred.points[i]);
        }
    }
    if mode == ConfMode::Normalized {
        // ∂/∂z_p of (1/N) Σ C‖X/z_p − Y‖ is −Σ C u·X / (N z_p²); z_p moves by
        // 1/N per unit change of any valid z.
        let dz = -through_zp / (n * zp * zp) / n;
        for i in (0..pred.len()).filter(|&i| valid[i]) {
            grad_points[i].z += dz;
        }
    }

    Ok(ConfLossOutput {
        loss: LossValue::from_terms(
            vec![term("regression", regression / n, 1.0), term("confidence", -alpha * log_term / n, 1.0)],
            count,
        ),
        grad_points,
        grad_confidence,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pm(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Pointmap {
        let pts = (0..w * h)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0)))
            .collect();
        let conf = (0..w * h).map(|_| rng.random_range(1.0..4.0)).collect();
        Pointmap::new(w, h, pts, conf).unwrap()
    }

    #[test]
    fn unit_confidence_gives_mean_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_pm(&mut rng, 4, 4);
        let mut pred = random_pm(&mut rng, 4, 4);
        pred.confidence = vec![1.0; 16];
        let valid = vec![true; 16];
        let out = conf_loss(&pred, &gt, &valid, 0.2, ConfMode::Raw).unwrap();
        let direct = (0..16).map(|i| (pred.points[i] - gt.points[i]).norm()).sum::<f64>() / 16.0;
        assert!((out.loss.value - direct).abs() < 1e-14);
        assert_eq!(out.loss.term("confidence"), Some(-0.0));
    }

    #[test]
    fn optimum_confidence_is_alpha_over_residual() {
        // One pixel with residual r = alpha: C* = 1 and the loss is alpha.
        let alpha = 0.3;
        let gt = Pointmap::from_points(1, 1, vec![Vector3::new(0.0, 0.0, 1.0)]).unwrap();
        let pred = Pointmap::new(1, 1, vec![Vector3::new(alpha, 0.0, 1.0)], vec![1.0]).unwrap();
        let out = conf_loss(&pred, &gt, &[true], alpha, ConfMode::Raw).unwrap();
        assert!((out.loss.value - alpha).abs() < 1e-15);
        assert!(out.grad_confidence[0].abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let r: f64 = rng.random_range(0.01..0.5);
            let a: f64 = rng.random_range(0.01..0.5);
            let c_star = a / r;
            if c_star < 1.0 {
                continue;
            }
            let pred = Pointmap::new(1, 1, vec![Vector3::new(r, 0.0, 1.0)], vec![c_star]).unwrap();
            let out = conf_loss(&pred, &gt, &[true], a, ConfMode::Raw).unwrap();
            assert!(out.grad_confidence[0].abs() < 1e-12);
            for dc in [-1e-3, 1e-3] {
                let mut p = pred.clone();
                p.confidence[0] = (c_star + dc).max(1.0);
                let other = conf_loss(&p, &gt, &[true], a, ConfMode::Raw).unwrap();
                assert!(other.loss.value >= out.loss.value - 1e-15);
            }
        }
    }

    #[test]
    fn normalized_mode_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_pm(&mut rng, 4, 4);
        let mut pred = gt.clone();
        for p in &mut pred.points {
            *p *= 3.5;
        }
        let out = conf_loss(&pred, &gt, &[true; 16], 0.2, ConfMode::Normalized).unwrap();
        assert!(out.loss.term("regression").unwrap() < 1e-14);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in [ConfMode::Normalized, ConfMode::Raw] {
            let gt = random_pm(&mut rng, 4, 4);
            let pred = random_pm(&mut rng, 4, 4);
            let mut valid = vec![true; 16];
            valid[5] = false;
            let out = conf_loss(&pred, &gt, &valid, 0.2, mode).unwrap();
            let eps = 1e-5;
            let eval = |p: &Pointmap| conf_loss(p, &gt, &valid, 0.2, mode).unwrap().loss.value;
            for i in 0..16 {
                for c in 0..4 {
                    let (mut a, mut b) = (pred.clone(), pred.clone());
                    let analytic = if c < 3 {
                        a.points[i][c] += eps;
                        b.points[i][c] -= eps;
                        out.grad_points[i][c]
                    } else {
                        a.confidence[i] += eps;
                        b.confidence[i] -= eps;
                        out.grad_confidence[i]
                    };
                    let num = (eval(&a) - eval(&b)) / (2.0 * eps);
                    let rel = (num - analytic).abs() / num.abs().max(analytic.abs()).max(1e-8);
                    assert!(rel < 1e-4, "{mode:?} pixel {i} channel {c}: {analytic} vs {num}");
                }
            }
        }
    }
}
