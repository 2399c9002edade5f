//! Depth and trajectory evaluation.
//!
//! Depth metrics follow the usual monocular protocol (Abs Rel, Sq Rel, RMSE,
//! RMSE log, δ < 1.25) with optional median or affine scaling. Pose metrics
//! use overlapping 5-frame snippets, each aligned to ground truth before ATE
//! and RPE are computed. Trajectories here are camera-to-world poses, the
//! convention of TUM trajectory files.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_angle, DepthMap, SE3Pose};
use crate::losses::align_least_squares;

pub const SNIPPET_LEN: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no jointly valid pixels")]
    NoValidPixels,
    #[error("trajectory of {len} poses is shorter than the {SNIPPET_LEN}-frame snippet")]
    TrajectoryTooShort { len: usize },
    #[error("trajectory lengths differ: {pred} predicted vs {gt} ground truth")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    /// Multiply the prediction by `median(gt) / median(pred)`.
    #[default]
    Median,
    /// Least-squares `s·pred + t` fit to ground truth.
    Affine,
    None,
}

impl std::str::FromStr for Scaling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "median" => Ok(Scaling::Median),
            "affine" => Ok(Scaling::Affine),
            "none" => Ok(Scaling::None),
            other => Err(format!("unknown scaling mode '{other}' (median, affine, none)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta_125: f64,
    pub n_pixels: usize,
    /// Valid pixels whose scaled prediction is ≤ 0 (left out of `rmse_log`).
    pub n_nonpositive: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, scaling: Scaling) -> Result<DepthMetrics, MetricsError> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(MetricsError::DimensionMismatch(format!(
            "prediction {}x{}, ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let idx: Vec<usize> = (0..gt.depth.len()).filter(|&i| pred.valid[i] && gt.valid[i]).collect();
    if idx.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    let scaled: Vec<f64> = match scaling {
        Scaling::None => idx.iter().map(|&i| pred.depth[i]).collect(),
        Scaling::Median => {
            let ratio = median(idx.iter().map(|&i| gt.depth[i]).collect())
                / median(idx.iter().map(|&i| pred.depth[i]).collect());
            idx.iter().map(|&i| pred.depth[i] * ratio).collect()
        }
        Scaling::Affine => {
            let a = align_least_squares(pred, gt).map_err(|e| MetricsError::Degenerate(e.to_string()))?;
            idx.iter().map(|&i| a.aligned.depth[i]).collect()
        }
    };

    let n = idx.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut within) = (0.0, 0.0, 0.0, 0.0, 0usize);
    let mut n_log = 0usize;
    for (&i, &d) in idx.iter().zip(&scaled) {
        let g = gt.depth[i];
        let e = d - g;
        abs_rel += e.abs() / g;
        sq_rel += e * e / g;
        sq += e * e;
        if d > 0.0 {
            sq_log += (d.ln() - g.ln()).powi(2);
            n_log += 1;
            if (d / g).max(g / d) < 1.25 {
                within += 1;
            }
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: if n_log > 0 { (sq_log / n_log as f64).sqrt() } else { 0.0 },
        delta_125: within as f64 / n,
        n_pixels: idx.len(),
        n_nonpositive: idx.len() - n_log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseAlignment {
    /// Rotation, translation and one scale factor.
    #[default]
    Sim3,
    /// Rotation and translation only.
    Se3,
}

impl std::str::FromStr for PoseAlignment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim3" => Ok(PoseAlignment::Sim3),
            "se3" => Ok(PoseAlignment::Se3),
            other => Err(format!("unknown alignment '{other}' (sim3, se3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseMetrics {
    /// Millimetres.
    pub ate: f64,
    /// Degrees.
    pub rpe_r: f64,
    /// Millimetres.
    pub rpe_t: f64,
    pub n_snippets: usize,
}

/// Similarity `x ↦ s R x + t` minimizing `Σ ‖s R a_k + t − b_k‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    /// Maps a camera-to-world pose into the aligned frame.
    pub fn apply_pose(&self, pose: &SE3Pose) -> SE3Pose {
        SE3Pose::new(self.rotation * pose.rotation, self.apply(&pose.translation))
    }
}

/// Closed-form least-squares alignment of point sets (Umeyama).
///
/// When the source points coincide the scale is left at 1.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Similarity {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (a, b) in src.iter().zip(dst) {
        let (da, db) = (a - mu_s, b - mu_d);
        cov += db * da.transpose();
        var_s += da.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = if with_scale && var_s > 1e-300 {
        (svd.singular_values.component_mul(&d.diagonal())).sum() / var_s
    } else {
        1.0
    };
    Similarity {
        scale,
        rotation,
        translation: mu_d - rotation * mu_s * scale,
    }
}

fn align(pred: &[SE3Pose], gt: &[SE3Pose], alignment: PoseAlignment) -> Vec<SE3Pose> {
    let src: Vec<_> = pred.iter().map(|p| p.translation).collect();
    let dst: Vec<_> = gt.iter().map(|p| p.translation).collect();
    let sim = umeyama(&src, &dst, alignment == PoseAlignment::Sim3);
    pred.iter().map(|p| sim.apply_pose(p)).collect()
}

fn rms_position_error(aligned: &[SE3Pose], gt: &[SE3Pose]) -> f64 {
    let sum: f64 = aligned
        .iter()
        .zip(gt)
        .map(|(a, g)| (a.translation - g.translation).norm_squared())
        .sum();
    (sum / gt.len() as f64).sqrt()
}

fn snippet_metrics(pred: &[SE3Pose], gt: &[SE3Pose], alignment: PoseAlignment) -> (f64, f64, f64) {
    let aligned = align(pred, gt, alignment);
    let ate = rms_position_error(&aligned, gt);

    let steps = gt.len() - 1;
    let (mut rot, mut trans) = (0.0, 0.0);
    for k in 0..steps {
        let rel_p = aligned[k].inverse().compose(&aligned[k + 1]);
        let rel_g = gt[k].inverse().compose(&gt[k + 1]);
        let err = rel_g.inverse().compose(&rel_p);
        rot += rotation_angle(&err.rotation);
        trans += err.translation.norm();
    }
    (ate, rot / steps as f64, trans / steps as f64)
}

/// ATE and RPE averaged over overlapping 5-frame snippets.
///
/// Both trajectories hold camera-to-world poses. Each snippet is aligned on
/// its camera centres before measuring.
pub fn pose_metrics_5frame(
    pred: &[SE3Pose],
    gt: &[SE3Pose],
    alignment: PoseAlignment,
) -> Result<PoseMetrics, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.len() < SNIPPET_LEN {
        return Err(MetricsError::TrajectoryTooShort { len: gt.len() });
    }
    let n_snippets = gt.len() - SNIPPET_LEN + 1;
    let (mut ate, mut rpe_r, mut rpe_t) = (0.0, 0.0, 0.0);
    for s in 0..n_snippets {
        let w = s..s + SNIPPET_LEN;
        let (a, r, t) = snippet_metrics(&pred[w.clone()], &gt[w], alignment);
        ate += a;
        rpe_r += r;
        rpe_t += t;
    }
    let n = n_snippets as f64;
    Ok(PoseMetrics {
        ate: ate / n * 1000.0,
        rpe_r: (rpe_r / n).to_degrees(),
        rpe_t: rpe_t / n * 1000.0,
        n_snippets,
    })
}

/// RMS camera-centre error (metres) after one alignment of the whole
/// trajectory.
pub fn absolute_trajectory_error(
    pred: &[SE3Pose],
    gt: &[SE3Pose],
    alignment: PoseAlignment,
) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(MetricsError::TrajectoryTooShort { len: 0 });
    }
    Ok(rms_position_error(&align(pred, gt, alignment), gt))
}
