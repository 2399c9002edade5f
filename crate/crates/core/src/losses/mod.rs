//! Self-supervised training losses with analytic gradients.
//!
//! - [`dflow_loss`]: optical flow decomposed into pointmap scene flow and
//!   pose-induced motion, compared to the observed flow under L1.
//! - [`depth_loss`]: least-squares affine alignment, then L2 plus a
//!   multi-scale gradient-matching term.
//! - [`conf_loss`]: confidence-weighted pointmap regression.
//! - [`total_loss`]: weighted sum of the three.
//!
//! [`gradcheck`] compares every analytic gradient against central
//! differences.

mod conf;
mod depth;
mod flow;
pub mod gradcheck;

pub use conf::{conf_loss, ConfLossOutput, ConfMode};
pub use depth::{align_least_squares, depth_loss, Alignment, DepthLossOutput, ALIGNMENT_MAX_CONDITION};
pub use flow::{dflow_loss, induced_flow, scene_flow, BilinearSample, DflowOutput, SceneFlow};
pub use gradcheck::{gradcheck, gradcheck_fn, gradcheck_suite, Evaluation, GradcheckReport, LossInputs, LossKind};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("valid region too small: {valid} of {total} pixels")]
    EmptyValidRegion { valid: usize, total: usize },
    #[error("degenerate depth alignment (normal-matrix condition {condition:e})")]
    DegenerateAlignment { condition: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Loss weights and hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossConfig {
    pub lambda_dflow: f64,
    pub lambda_dep: f64,
    pub lambda_conf: f64,
    /// Weight of the `-log C` regularizer inside the confidence loss.
    pub alpha_conf: f64,
    /// Pyramid levels of the gradient-matching term.
    pub grad_scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dflow: 1.0,
            lambda_dep: 1.0,
            lambda_conf: 1.0,
            alpha_conf: 0.2,
            grad_scales: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, l) in [
            ("lambda_dflow", self.lambda_dflow),
            ("lambda_dep", self.lambda_dep),
            ("lambda_conf", self.lambda_conf),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(LossError::InvalidInput(format!("{name} must be finite and >= 0, got {l}")));
            }
        }
        if !(self.alpha_conf > 0.0 && self.alpha_conf.is_finite()) {
            return Err(LossError::InvalidInput(format!("alpha_conf must be > 0, got {}", self.alpha_conf)));
        }
        if self.grad_scales < 1 {
            return Err(LossError::InvalidInput("grad_scales must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// A scalar loss together with its weighted components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossValue {
    pub value: f64,
    pub terms: Vec<LossTerm>,
    /// Pixels contributing to the loss.
    pub pixel_count: usize,
}

impl LossValue {
    pub fn from_terms(terms: Vec<LossTerm>, pixel_count: usize) -> Self {
        let value = terms.iter().map(|t| t.weight * t.value).sum();
        Self {
            value,
            terms,
            pixel_count,
        }
    }

    pub(crate) fn single(name: &str, value: f64, pixel_count: usize) -> Self {
        Self::from_terms(vec![term(name, value, 1.0)], pixel_count)
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

pub(crate) fn term(name: &str, value: f64, weight: f64) -> LossTerm {
    LossTerm {
        name: name.to_string(),
        value,
        weight,
    }
}

/// `λ₁ L_Dflow + λ₂ L_dep + λ₃ L_conf`, keeping each part as a term.
pub fn total_loss(dflow: &LossValue, dep: &LossValue, conf: &LossValue, cfg: &LossConfig) -> LossValue {
    LossValue::from_terms(
        vec![
            term("dflow", dflow.value, cfg.lambda_dflow),
            term("dep", dep.value, cfg.lambda_dep),
            term("conf", conf.value, cfg.lambda_conf),
        ],
        dflow.pixel_count.max(dep.pixel_count).max(conf.pixel_count),
    )
}

/// Derivative of `|x|` with the subgradient at 0 taken as 0.
pub(crate) fn l1_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
