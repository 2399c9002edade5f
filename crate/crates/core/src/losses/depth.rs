use super::{l1_sign, term, LossError, LossValue};
use crate::geometry::DepthMap;

/// Largest accepted condition number of the 2×2 alignment normal matrix.
pub const ALIGNMENT_MAX_CONDITION: f64 = 1e12;

/// Least-squares affine fit `s·D_pred + t ≈ D_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub shift: f64,
    /// `s·D_pred + t` on jointly-valid pixels; other pixels are invalid.
    pub aligned: DepthMap,
}

/// Normal equations `A [s t]ᵀ = b` accumulated over jointly-valid pixels.
struct Normal {
    spp: f64,
    sp: f64,
    n: f64,
    spr: f64,
    sr: f64,
}

impl Normal {
    fn solve(&self) -> Result<(f64, f64), LossError> {
        let det = self.spp * self.n - self.sp * self.sp;
        let tr = self.spp + self.n;
        let disc = ((self.spp - self.n).powi(2) + 4.0 * self.sp * self.sp).sqrt();
        let lmax = (tr + disc) / 2.0;
        // det / lmax avoids the cancellation in (tr - disc) / 2.
        let lmin = if lmax > 0.0 { det / lmax } else { 0.0 };
        let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        if !(condition <= ALIGNMENT_MAX_CONDITION) {
            return Err(LossError::DegenerateAlignment { condition });
        }
        let s = (self.n * self.spr - self.sp * self.sr) / det;
        let t = (self.spp * self.sr - self.sp * self.spr) / det;
        Ok((s, t))
    }

    /// `A⁻¹ v`.
    fn apply_inverse(&self, v: (f64, f64)) -> (f64, f64) {
        let det = self.spp * self.n - self.sp * self.sp;
        (
            (self.n * v.0 - self.sp * v.1) / det,
            (self.spp * v.1 - self.sp * v.0) / det,
        )
    }
}

fn check_dims(a: &DepthMap, b: &DepthMap) -> Result<(), LossError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(LossError::DimensionMismatch(format!(
            "depth maps {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn joint_mask(a: &DepthMap, b: &DepthMap) -> Vec<bool> {
    a.valid.iter().zip(&b.valid).map(|(&x, &y)| x && y).collect()
}

fn normal(pred: &DepthMap, reference: &DepthMap, mask: &[bool]) -> Normal {
    let mut acc = Normal {
        spp: 0.0,
        sp: 0.0,
        n: 0.0,
        spr: 0.0,
        sr: 0.0,
    };
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let (p, r) = (pred.depth[i], reference.depth[i]);
        acc.spp += p * p;
        acc.sp += p;
        acc.n += 1.0;
        acc.spr += p * r;
        acc.sr += r;
    }
    acc
}

/// Closed-form `(s, t) = argmin Σ (s·D_pred + t − D_ref)²` over jointly-valid
/// pixels.
pub fn align_least_squares(pred: &DepthMap, reference: &DepthMap) -> Result<Alignment, LossError> {
    check_dims(pred, reference)?;
    let mask = joint_mask(pred, reference);
    let (scale, shift) = normal(pred, reference, &mask).solve()?;
    let depth: Vec<f64> = pred.depth.iter().map(|&p| scale * p + shift).collect();
    let valid: Vec<bool> = mask
        .iter()
        .zip(&depth)
        .map(|(&m, &d)| m && d.is_finite() && d > 0.0)
        .collect();
    let aligned = DepthMap {
        width: pred.width,
        height: pred.height,
        depth,
        valid,
    };
    Ok(Alignment { scale, shift, aligned })
}

/// Affine-invariant depth loss with its gradient w.r.t. the predicted depth.
#[derive(Debug, Clone)]
pub struct DepthLossOutput {
    pub loss: LossValue,
    pub scale: f64,
    pub shift: f64,
    /// `∂L/∂D_pred`, zero on pixels outside the joint mask.
    pub grad: Vec<f64>,
    /// Every finite difference entering the gradient-matching term.
    pub residual_gradients: Vec<f64>,
}

/// One pyramid level of the residual `R = D_aligned − D_ref`.
struct Level {
    width: usize,
    height: usize,
    r: Vec<f64>,
    mask: Vec<bool>,
}

impl Level {
    fn pooled(&self) -> Option<Level> {
        let (w, h) = (self.width / 2, self.height / 2);
        if w == 0 || h == 0 {
            return None;
        }
        let mut r = vec![0.0; w * h];
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let kids = children(x, y, self.width);
                if kids.iter().all(|&c| self.mask[c]) {
                    mask[y * w + x] = true;
                    r[y * w + x] = kids.iter().map(|&c| self.r[c]).sum::<f64>() / 4.0;
                }
            }
        }
        Some(Level {
            width: w,
            height: h,
            r,
            mask,
        })
    }

    fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn children(x: usize, y: usize, fine_width: usize) -> [usize; 4] {
    let (fx, fy) = (2 * x, 2 * y);
    [
        fy * fine_width + fx,
        fy * fine_width + fx + 1,
        (fy + 1) * fine_width + fx,
        (fy + 1) * fine_width + fx + 1,
    ]
}

/// `L₂ + L_smooth` after least-squares alignment of `pred` onto `reference`.
///
/// `L₂ = (1/M) Σ R²` and `L_smooth = Σ_k (1/M_k) Σ (|∇x R^k| + |∇y R^k|)`,
/// where `R^k` is the residual average-pooled `k−1` times and `M_k` counts
/// the valid pixels of that level. Only neighbour pairs with both pixels
/// valid contribute.
pub fn depth_loss(pred: &DepthMap, reference: &DepthMap, grad_scales: usize) -> Result<DepthLossOutput, LossError> {
    check_dims(pred, reference)?;
    if grad_scales < 1 {
        return Err(LossError::InvalidInput("grad_scales must be >= 1".into()));
    }
    let mask = joint_mask(pred, reference);
    let eq = normal(pred, reference, &mask);
    let (s, t) = eq.solve()?;
    let n = pred.depth.len();
    let m = eq.n;

    let r: Vec<f64> = (0..n)
        .map(|i| if mask[i] { s * pred.depth[i] + t - reference.depth[i] } else { 0.0 })
        .collect();
    let l2 = r.iter().map(|x| x * x).sum::<f64>() / m;
    // ∂L/∂(aligned depth), accumulated level by level.
    let mut g: Vec<f64> = r.iter().map(|x| 2.0 * x / m).collect();

    let mut levels = vec![Level {
        width: pred.width,
        height: pred.height,
        r,
        mask: mask.clone(),
    }];
    while levels.len() < grad_scales {
        match levels.last().unwrap().pooled() {
            Some(next) => levels.push(next),
            None => break,
        }
    }

    let mut smooth = 0.0;
    let mut residual_gradients = Vec::new();
    let mut level_grads: Vec<Vec<f64>> = Vec::with_capacity(levels.len());
    for level in &levels {
        let mut lg = vec![0.0; level.r.len()];
        let mk = level.valid_count();
        if mk > 0 {
            let inv = 1.0 / mk as f64;
            let (w, h) = (level.width, level.height);
            let mut pair = |a: usize, b: usize| {
                if level.mask[a] && level.mask[b] {
                    let d = level.r[b] - level.r[a];
                    smooth += d.abs() * inv;
                    residual_gradients.push(d);
                    let sg = l1_sign(d) * inv;
                    lg[b] += sg;
                    lg[a] -= sg;
                }
            };
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if x + 1 < w {
                        pair(i, i + 1);
                    }
                    if y + 1 < h {
                        pair(i, i + w);
                    }
                }
            }
        }
        level_grads.push(lg);
    }

    // Push coarse-level gradients down to full resolution: each child of a
    // pooled cell receives a quarter of its gradient.
    for k in (1..levels.len()).rev() {
        let fine_width = levels[k - 1].width;
        let coarse = std::mem::take(&mut level_grads[k]);
        for (ci, &gc) in coarse.iter().enumerate() {
            if gc == 0.0 || !levels[k].mask[ci] {
                continue;
            }
            let (x, y) = (ci % levels[k].width, ci / levels[k].width);
            for c in children(x, y, fine_width) {
                level_grads[k - 1][c] += gc / 4.0;
            }
        }
    }
    for (gi, li) in g.iter_mut().zip(&level_grads[0]) {
        *gi += li;
    }

    // Chain through the aligned depth s·p + t, including the dependence of
    // (s, t) on every prediction via the normal equations.
    let (mut gp, mut g1) = (0.0, 0.0);
    for i in (0..n).filter(|&i| mask[i]) {
        gp += g[i] * pred.depth[i];
        g1 += g[i];
    }
    let (w0, w1) = eq.apply_inverse((gp, g1));
    let grad = (0..n)
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            let p = pred.depth[i];
            g[i] * s + w0 * (reference.depth[i] - 2.0 * p * s - t) - w1 * s
        })
        .collect();

    Ok(DepthLossOutput {
        loss: LossValue::from_terms(vec![term("l2", l2, 1.0), term("smooth", smooth, 1.0)], m as usize),
        scale: s,
        shift: t,
        grad,
        residual_gradients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> DepthMap {
        let d = (0..w * h)
            .map(|i| 1.0 + 0.1 * (i % w) as f64 + 0.05 * (i / w) as f64 + 0.03 * ((i * 7) % 5) as f64)
            .collect();
        DepthMap::new(w, h, d).unwrap()
    }

    #[test]
    fn exact_affine_relation_is_recovered() {
        let p = ramp(8, 6);
        let r = p.map(|d| 2.0 * d + 3.0);
        let a = align_least_squares(&p, &r).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12 && (a.shift - 3.0).abs() < 1e-12);
        for i in 0..r.depth.len() {
            assert!((a.aligned.depth[i] - r.depth[i]).abs() < 1e-12);
        }
        let id = align_least_squares(&p, &p).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12 && id.shift.abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_is_degenerate() {
        let p = DepthMap::new(4, 4, vec![2.0; 16]).unwrap();
        assert!(matches!(
            align_least_squares(&p, &ramp(4, 4)),
            Err(LossError::DegenerateAlignment { .. })
        ));
        assert!(matches!(depth_loss(&p, &ramp(4, 4), 4), Err(LossError::DegenerateAlignment { .. })));
    }

    #[test]
    fn affine_prediction_has_zero_loss() {
        let r = ramp(16, 12);
        for a in [0.5, 2.0, 10.0] {
            for b in [-1.0, 0.0, 5.0] {
                let p = DepthMap::with_mask(16, 12, r.depth.iter().map(|d| a * d + b).collect(), r.valid.clone()).unwrap();
                let out = depth_loss(&p, &r, 4).unwrap();
                assert!(out.loss.value <= 1e-9, "a={a} b={b}: {}", out.loss.value);
            }
        }
    }

    /// A single spike of height h in an otherwise affine reference. The
    /// least-squares fit absorbs part of the spike; the residual at the spike
    /// is h(1 − 1/M − δ) and elsewhere small, where δ reflects the slope
    /// correction. The direct evaluation below recomputes L₂ by solving the
    /// 2×2 system independently.
    #[test]
    fn spike_l2_matches_direct_evaluation() {
        let p = ramp(8, 8);
        let h = 0.7;
        let mut r = p.clone();
        let k = 27;
        r.depth[k] += h;
        let out = depth_loss(&p, &r, 1).unwrap();

        let m = 64.0;
        let (mut sp, mut spp, mut sr, mut spr) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..64 {
            sp += p.depth[i];
            spp += p.depth[i] * p.depth[i];
            sr += r.depth[i];
            spr += p.depth[i] * r.depth[i];
        }
        let det = spp * m - sp * sp;
        let s = (m * spr - sp * sr) / det;
        let t = (spp * sr - sp * spr) / det;
        let direct: f64 = (0..64).map(|i| (s * p.depth[i] + t - r.depth[i]).powi(2)).sum::<f64>() / m;
        assert!((out.loss.term("l2").unwrap() - direct).abs() < 1e-14);

        // With the slope correction ignored the loss is (1 − 1/M)² h²/M plus
        // the spread of h/M over the other pixels; the fit can only do better.
        let no_slope = ((1.0 - 1.0 / m).powi(2) * h * h + (m - 1.0) * (h / m).powi(2)) / m;
        assert!(direct <= no_slope + 1e-15);
        assert!(direct > 0.9 * (1.0 - 1.0 / m).powi(2) * h * h / m);
    }

    #[test]
    fn invalid_pixels_are_excluded() {
        let r = ramp(8, 8);
        let mut p = r.map(|d| 3.0 * d - 0.5);
        p.valid[10] = false;
        p.depth[10] = 1e6;
        let out = depth_loss(&p, &r, 4).unwrap();
        assert!(out.loss.value < 1e-9);
        assert_eq!(out.loss.pixel_count, 63);
        assert_eq!(out.grad[10], 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (8, 8);
        let pred = DepthMap::new(w, h, (0..64).map(|_| rng.random_range(1.0..3.0)).collect()).unwrap();
        let refd = DepthMap::new(w, h, (0..64).map(|_| rng.random_range(1.0..3.0)).collect()).unwrap();
        let out = depth_loss(&pred, &refd, 4).unwrap();
        let eps = 1e-4;
        let mut checked = 0;
        for i in 0..64 {
            let mut a = pred.clone();
            let mut b = pred.clone();
            a.depth[i] += eps;
            b.depth[i] -= eps;
            let (la, lb) = (depth_loss(&a, &refd, 4).unwrap(), depth_loss(&b, &refd, 4).unwrap());
            let kink = la
                .residual_gradients
                .iter()
                .zip(&lb.residual_gradients)
                .any(|(x, y)| x.signum() != y.signum());
            if kink {
                continue;
            }
            let num = (la.loss.value - lb.loss.value) / (2.0 * eps);
            let rel = (num - out.grad[i]).abs() / num.abs().max(out.grad[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "pixel {i}: analytic {} numeric {num}", out.grad[i]);
            checked += 1;
        }
        assert!(checked > 40);
    }
}
