//! Central-difference verification of the analytic loss gradients.

use nalgebra::{Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{conf_loss, depth_loss, dflow_loss, ConfMode, LossError};
use crate::geometry::{DepthMap, FlowField, Intrinsics, Pointmap, SE3Pose};

/// Loss value, flat analytic gradient and the arguments of every absolute
/// value inside the loss (used to detect kinks).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub kinks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: String,
    pub n_params: usize,
    pub n_compared: usize,
    /// Parameters skipped because a perturbation crossed an L1 kink.
    pub n_excluded: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

impl GradcheckReport {
    /// Pools two reports of the same loss.
    pub fn merge(&mut self, other: &GradcheckReport) {
        let total = self.n_compared + other.n_compared;
        if total > 0 {
            self.mean_rel_err = (self.mean_rel_err * self.n_compared as f64
                + other.mean_rel_err * other.n_compared as f64)
                / total as f64;
        }
        self.n_params += other.n_params;
        self.n_compared = total;
        self.n_excluded += other.n_excluded;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

fn crosses_kink(base: &[f64], plus: &[f64], minus: &[f64], epsilon: f64) -> bool {
    if base.len() != plus.len() || base.len() != minus.len() {
        return true;
    }
    base.iter().zip(plus).zip(minus).any(|((&b, &p), &m)| {
        let flipped = (p > 0.0) != (m > 0.0) || (p < 0.0) != (m < 0.0);
        flipped || (b.abs() < 10.0 * epsilon && p != m)
    })
}

/// Compares the analytic gradient of `f` at `params` with central
/// differences of step `epsilon`.
///
/// Relative errors use the denominator `max(|a|, |n|, 1e-8)`. A parameter
/// is excluded when its perturbation flips the sign of any kink argument or
/// moves one that lies within `10·epsilon` of zero.
pub fn gradcheck_fn<F>(name: &str, params: &[f64], epsilon: f64, f: F) -> Result<GradcheckReport, LossError>
where
    F: Fn(&[f64]) -> Result<Evaluation, LossError>,
{
    let base = f(params)?;
    if base.gradient.len() != params.len() {
        return Err(LossError::DimensionMismatch(format!(
            "gradient has {} entries for {} parameters",
            base.gradient.len(),
            params.len()
        )));
    }
    let mut report = GradcheckReport {
        loss: name.to_string(),
        n_params: params.len(),
        n_compared: 0,
        n_excluded: 0,
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
    };
    let mut sum = 0.0;
    let mut x = params.to_vec();
    for i in 0..params.len() {
        x[i] = params[i] + epsilon;
        let plus = f(&x)?;
        x[i] = params[i] - epsilon;
        let minus = f(&x)?;
        x[i] = params[i];
        if crosses_kink(&base.kinks, &plus.kinks, &minus.kinks, epsilon) {
            report.n_excluded += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * epsilon);
        let analytic = base.gradient[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_err = report.max_rel_err.max(rel);
        sum += rel;
        report.n_compared += 1;
    }
    if report.n_compared > 0 {
        report.mean_rel_err = sum / report.n_compared as f64;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dflow,
    Depth,
    Conf,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Dflow, LossKind::Depth, LossKind::Conf];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dflow => "dflow",
            LossKind::Depth => "depth",
            LossKind::Conf => "conf",
        }
    }
}

/// Concrete inputs of one loss, flattened to a parameter vector for
/// gradient checking.
#[derive(Debug, Clone)]
pub enum LossInputs {
    /// Parameters: `X_i`, `X_j` (xyz per pixel) and a left twist of `T_j`.
    Dflow {
        x_i: Pointmap,
        x_j: Pointmap,
        flow: FlowField,
        pose_j: SE3Pose,
        k: Intrinsics,
    },
    /// Parameters: the predicted depth per pixel.
    Depth {
        pred: DepthMap,
        reference: DepthMap,
        grad_scales: usize,
    },
    /// Parameters: predicted xyz per pixel, then confidence per pixel.
    Conf {
        pred: Pointmap,
        gt: Pointmap,
        valid: Vec<bool>,
        alpha: f64,
        mode: ConfMode,
    },
}

fn flatten(points: &[Vector3<f64>], out: &mut Vec<f64>) {
    for p in points {
        out.extend(p.iter());
    }
}

fn unflatten(values: &[f64]) -> Vec<Vector3<f64>> {
    values.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

impl LossInputs {
    pub fn kind(&self) -> LossKind {
        match self {
            LossInputs::Dflow { .. } => LossKind::Dflow,
            LossInputs::Depth { .. } => LossKind::Depth,
            LossInputs::Conf { .. } => LossKind::Conf,
        }
    }

    /// Random well-conditioned inputs of the given size.
    pub fn random(kind: LossKind, seed: u64, width: usize, height: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = width * height;
        match kind {
            LossKind::Dflow => {
                let k = Intrinsics::centered(width.max(height) as f64, width, height);
                let pose_j = SE3Pose::from_axis_angle(
                    Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
                    Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
                );
                let to_world = pose_j.inverse();
                let x_j = (0..n)
                    .map(|i| {
                        let px = Vector2::new(
                            (i % width) as f64 + rng.random_range(-0.3..0.3),
                            (i / width) as f64 + rng.random_range(-0.3..0.3),
                        );
                        to_world.apply(&k.backproject(&px, rng.random_range(2.0..3.0)))
                    })
                    .collect();
                let x_i = (0..n)
                    .map(|i| {
                        let px = Vector2::new((i % width) as f64, (i / width) as f64);
                        k.backproject(&px, rng.random_range(2.0..3.0))
                    })
                    .collect();
                let flow = (0..n)
                    .map(|_| Vector2::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
                    .collect();
                LossInputs::Dflow {
                    x_i: Pointmap::from_points(width, height, x_i).unwrap(),
                    x_j: Pointmap::from_points(width, height, x_j).unwrap(),
                    flow: FlowField::new(width, height, flow).unwrap(),
                    pose_j,
                    k,
                }
            }
            LossKind::Depth => {
                let mut map = || DepthMap::new(width, height, (0..n).map(|_| rng.random_range(1.0..3.0)).collect()).unwrap();
                let pred = map();
                let reference = map();
                LossInputs::Depth {
                    pred,
                    reference,
                    grad_scales: 4,
                }
            }
            LossKind::Conf => {
                let mut points = || -> Vec<Vector3<f64>> {
                    (0..n)
                        .map(|_| {
                            Vector3::new(
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                                rng.random_range(1.0..3.0),
                            )
                        })
                        .collect()
                };
                let pred_points = points();
                let gt_points = points();
                let confidence = (0..n).map(|_| rng.random_range(1.0..5.0)).collect();
                let valid = (0..n).map(|_| rng.random_bool(0.9)).collect();
                LossInputs::Conf {
                    pred: Pointmap::new(width, height, pred_points, confidence).unwrap(),
                    gt: Pointmap::from_points(width, height, gt_points).unwrap(),
                    valid,
                    alpha: 0.2,
                    mode: ConfMode::Normalized,
                }
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            LossInputs::Dflow { x_i, x_j, .. } => {
                flatten(&x_i.points, &mut out);
                flatten(&x_j.points, &mut out);
                out.extend([0.0; 6]);
            }
            LossInputs::Depth { pred, .. } => out.extend(&pred.depth),
            LossInputs::Conf { pred, .. } => {
                flatten(&pred.points, &mut out);
                out.extend(&pred.confidence);
            }
        }
        out
    }

    /// Loss, gradient and kink arguments at `params`.
    pub fn evaluate(&self, params: &[f64]) -> Result<Evaluation, LossError> {
        match self {
            LossInputs::Dflow {
                x_i,
                x_j,
                flow,
                pose_j,
                k,
            } => {
                let n3 = 3 * x_i.len();
                let mut a = x_i.clone();
                a.points = unflatten(&params[..n3]);
                let mut b = x_j.clone();
                b.points = unflatten(&params[n3..2 * n3]);
                let twist = Vector6::from_column_slice(&params[2 * n3..]);
                let out = dflow_loss(&a, &b, flow, &pose_j.perturb_left(&twist), k)?;
                let mut gradient = Vec::with_capacity(params.len());
                flatten(&out.grad_x_i, &mut gradient);
                flatten(&out.grad_x_j, &mut gradient);
                gradient.extend(out.grad_pose.iter());
                Ok(Evaluation {
                    value: out.loss.value,
                    gradient,
                    kinks: out.residuals,
                })
            }
            LossInputs::Depth {
                pred,
                reference,
                grad_scales,
            } => {
                let mut p = pred.clone();
                p.depth = params.to_vec();
                let out = depth_loss(&p, reference, *grad_scales)?;
                Ok(Evaluation {
                    value: out.loss.value,
                    gradient: out.grad,
                    kinks: out.residual_gradients,
                })
            }
            LossInputs::Conf {
                pred,
                gt,
                valid,
                alpha,
                mode,
            } => {
                let n3 = 3 * pred.len();
                let mut p = pred.clone();
                p.points = unflatten(&params[..n3]);
                p.confidence = params[n3..].to_vec();
                let out = conf_loss(&p, gt, valid, *alpha, *mode)?;
                let mut gradient = Vec::with_capacity(params.len());
                flatten(&out.grad_points, &mut gradient);
                gradient.extend(&out.grad_confidence);
                Ok(Evaluation {
                    value: out.loss.value,
                    gradient,
                    kinks: out.residuals,
                })
            }
        }
    }
}

/// Gradient check of one loss on concrete inputs.
pub fn gradcheck(inputs: &LossInputs, epsilon: f64) -> Result<GradcheckReport, LossError> {
    gradcheck_fn(inputs.kind().name(), &inputs.params(), epsilon, |p| inputs.evaluate(p))
}

/// Pooled gradient check of `kind` over `seeds` random inputs.
pub fn gradcheck_suite(
    kind: LossKind,
    seeds: std::ops::Range<u64>,
    width: usize,
    height: usize,
    epsilon: f64,
) -> Result<GradcheckReport, LossError> {
    let mut pooled: Option<GradcheckReport> = None;
    for seed in seeds {
        let r = gradcheck(&LossInputs::random(kind, seed, width, height), epsilon)?;
        match pooled.as_mut() {
            Some(p) => p.merge(&r),
            None => pooled = Some(r),
        }
    }
    pooled.ok_or_else(|| LossError::InvalidInput("empty seed range".into()))
}
