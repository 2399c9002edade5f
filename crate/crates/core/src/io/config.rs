//! Flat `key = value` configuration with `#` comments. Unknown keys are
//! errors.

use std::str::FromStr;

use super::IoError;
use crate::losses::{ConfMode, LossConfig};
use crate::metrics::Scaling;
use crate::pipeline::{FilterTiming, PipelineConfig};
use crate::synth::CorruptionSpec;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub losses: LossConfig,
    pub conf_mode: ConfMode,
    /// Depth evaluation alignment when none is given on the command line.
    pub scaling: Scaling,
    /// Noise applied to replayed predictions. `seed` lives here.
    pub corruption: CorruptionSpec,
}

pub const KEYS: &[&str] = &[
    "patch_size",
    "short_term_frames",
    "long_term_capacity",
    "beta",
    "focal_conf_threshold",
    "reestimate_focal",
    "filter_timing",
    "pnp_max_iterations",
    "pnp_step_tolerance",
    "pnp_confidence_keep",
    "pnp_max_correspondences",
    "lambda_dflow",
    "lambda_dep",
    "lambda_conf",
    "alpha_conf",
    "grad_scales",
    "conf_mode",
    "scaling",
    "corruption_sigma",
    "corruption_fraction",
    "seed",
];

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, IoError> {
    raw.parse().map_err(|_| IoError::Parse {
        line,
        message: format!("invalid value {raw:?} for {key}"),
    })
}

impl RunConfig {
    /// Parses and validates. Keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, val) = content.split_once('=').ok_or_else(|| IoError::Parse {
                line,
                message: format!("expected `key = value`, found {content:?}"),
            })?;
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                return Err(IoError::Parse {
                    line,
                    message: format!("duplicate key {key}"),
                });
            }
            let p = &mut cfg.pipeline;
            let l = &mut cfg.losses;
            match key {
                "patch_size" => p.patch_size = value(line, key, val)?,
                "short_term_frames" => p.short_term_frames = value(line, key, val)?,
                "long_term_capacity" => p.long_term_capacity = value(line, key, val)?,
                "beta" => p.beta = value(line, key, val)?,
                "focal_conf_threshold" => p.focal_conf_threshold = value(line, key, val)?,
                "reestimate_focal" => p.reestimate_focal = value(line, key, val)?,
                "filter_timing" => {
                    p.filter_timing = match val {
                        "migration" => FilterTiming::Migration,
                        "insert" => FilterTiming::Insert,
                        _ => {
                            return Err(IoError::Parse {
                                line,
                                message: format!("filter_timing must be migration or insert, found {val:?}"),
                            })
                        }
                    }
                }
                "pnp_max_iterations" => p.pnp.max_iterations = value(line, key, val)?,
                "pnp_step_tolerance" => p.pnp.step_tolerance = value(line, key, val)?,
                "pnp_confidence_keep" => p.pnp.confidence_keep = value(line, key, val)?,
                "pnp_max_correspondences" => p.pnp.max_correspondences = value(line, key, val)?,
                "lambda_dflow" => l.lambda_dflow = value(line, key, val)?,
                "lambda_dep" => l.lambda_dep = value(line, key, val)?,
                "lambda_conf" => l.lambda_conf = value(line, key, val)?,
                "alpha_conf" => l.alpha_conf = value(line, key, val)?,
                "grad_scales" => l.grad_scales = value(line, key, val)?,
                "conf_mode" => {
                    cfg.conf_mode = match val {
                        "normalized" => ConfMode::Normalized,
                        "raw" => ConfMode::Raw,
                        _ => {
                            return Err(IoError::Parse {
                                line,
                                message: format!("conf_mode must be normalized or raw, found {val:?}"),
                            })
                        }
                    }
                }
                "scaling" => {
                    cfg.scaling = val.parse().map_err(|message| IoError::Parse { line, message })?;
                }
                "corruption_sigma" => cfg.corruption.sigma = value(line, key, val)?,
                "corruption_fraction" => cfg.corruption.fraction = value(line, key, val)?,
                "seed" => cfg.corruption.seed = value(line, key, val)?,
                _ => {
                    return Err(IoError::Parse {
                        line,
                        message: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        cfg.pipeline.validate().map_err(|e| IoError::Config(e.to_string()))?;
        cfg.losses.validate().map_err(|e| IoError::Config(e.to_string()))?;
        let c = &cfg.corruption;
        if !(c.sigma.is_finite() && c.sigma >= 0.0) {
            return Err(IoError::Config(format!("corruption_sigma must be finite and >= 0, got {}", c.sigma)));
        }
        if !(0.0..=1.0).contains(&c.fraction) {
            return Err(IoError::Config(format!("corruption_fraction must be in [0, 1], got {}", c.fraction)));
        }
        Ok(cfg)
    }

    /// Text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let l = &self.losses;
        let timing = match p.filter_timing {
            FilterTiming::Migration => "migration",
            FilterTiming::Insert => "insert",
        };
        let mode = match self.conf_mode {
            ConfMode::Normalized => "normalized",
            ConfMode::Raw => "raw",
        };
        let scaling = match self.scaling {
            Scaling::Median => "median",
            Scaling::Affine => "affine",
            Scaling::None => "none",
        };
        let c = &self.corruption;
        format!(
            "patch_size = {}\nshort_term_frames = {}\nlong_term_capacity = {}\nbeta = {:?}\n\
             focal_conf_threshold = {:?}\nreestimate_focal = {}\nfilter_timing = {timing}\n\
             pnp_max_iterations = {}\npnp_step_tolerance = {:?}\npnp_confidence_keep = {:?}\n\
             pnp_max_correspondences = {}\nlambda_dflow = {:?}\nlambda_dep = {:?}\nlambda_conf = {:?}\n\
             alpha_conf = {:?}\ngrad_scales = {}\nconf_mode = {mode}\nscaling = {scaling}\n\
             corruption_sigma = {:?}\ncorruption_fraction = {:?}\nseed = {}\n",
            p.patch_size,
            p.short_term_frames,
            p.long_term_capacity,
            p.beta,
            p.focal_conf_threshold,
            p.reestimate_focal,
            p.pnp.max_iterations,
            p.pnp.step_tolerance,
            p.pnp.confidence_keep,
            p.pnp.max_correspondences,
            l.lambda_dflow,
            l.lambda_dep,
            l.lambda_conf,
            l.alpha_conf,
            l.grad_scales,
            c.sigma,
            c.fraction,
            c.seed,
        )
    }
}
