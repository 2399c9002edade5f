//! On-disk formats: dense grids, TUM trajectories, dataset directories,
//! run configuration and run outputs.

pub mod config;
pub mod dataset;
pub mod grid;
pub mod tum;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

pub use config::RunConfig;
pub use dataset::{read_dataset, read_manifest, write_dataset, Dataset, DatasetFrame, Manifest};
pub use tum::{format_trajectory, parse_trajectory, TumPose};

use crate::geometry::GeometryError;
use crate::memory::InsertReport;
use crate::pipeline::{FilterTiming, FrameDiagnostics, FrameFailure, ReconstructionState};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("frame {frame} has no flow to the next frame")]
    FlowMissing { frame: u64 },
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
}

impl IoError {
    pub fn at(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub const REPORT_SCHEMA: &str = "recon.run/1";

#[derive(Debug, Clone, Serialize)]
pub struct ReportConfig {
    pub patch_size: usize,
    pub short_term_frames: usize,
    pub long_term_capacity: usize,
    pub beta: f64,
    pub focal_conf_threshold: f64,
    pub reestimate_focal: bool,
    pub filter_timing: FilterTiming,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunTotals {
    pub frames: usize,
    pub untracked: usize,
    pub failed: usize,
    pub tokens_removed: usize,
    pub tokens_migrated: usize,
    pub tokens_pruned: usize,
    pub peak_tokens: usize,
    pub final_tokens: usize,
}

/// `report.json` of a run. Contains no timings so that repeated runs are
/// byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub config: ReportConfig,
    pub focal: Option<f64>,
    pub totals: RunTotals,
    pub frames: Vec<FrameDiagnostics>,
    pub failures: Vec<FrameFailure>,
}

impl RunReport {
    pub fn new(state: &ReconstructionState) -> Self {
        let c = &state.config;
        let sum = |f: fn(&InsertReport) -> usize| state.diagnostics.iter().map(|d| f(&d.insert)).sum();
        Self {
            schema: REPORT_SCHEMA,
            config: ReportConfig {
                patch_size: c.patch_size,
                short_term_frames: c.short_term_frames,
                long_term_capacity: c.long_term_capacity,
                beta: c.beta,
                focal_conf_threshold: c.focal_conf_threshold,
                reestimate_focal: c.reestimate_focal,
                filter_timing: c.filter_timing,
            },
            focal: state.intrinsics.map(|k| k.fx),
            totals: RunTotals {
                frames: state.trajectory.len(),
                untracked: state.untracked_frames(),
                failed: state.failures.len(),
                tokens_removed: state
                    .diagnostics
                    .iter()
                    .filter_map(|d| d.filter.as_ref())
                    .map(|f| f.removed)
                    .sum(),
                tokens_migrated: sum(|r| r.migrated),
                tokens_pruned: sum(|r| r.pruned),
                peak_tokens: state.peak_tokens,
                final_tokens: state.bank.as_ref().map_or(0, |b| b.len()),
            },
            frames: state.diagnostics.clone(),
            failures: state.failures.clone(),
        }
    }
}

/// Camera-to-world trajectory of a run.
pub fn run_trajectory(state: &ReconstructionState) -> Vec<TumPose> {
    state
        .trajectory
        .iter()
        .map(|(id, pose)| TumPose::from_world_to_camera(*id, pose))
        .collect()
}

/// Writes `traj.txt`, `depth_%06d.bin` per frame and `report.json`.
pub fn write_run_outputs(dir: &Path, state: &ReconstructionState) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e))?;
    let traj = dir.join("traj.txt");
    fs::write(&traj, format_trajectory(&run_trajectory(state))).map_err(|e| IoError::at(&traj, e))?;
    for rec in &state.frames {
        let path = dir.join(format!("depth_{:06}.bin", rec.frame_id));
        let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(|e| IoError::at(&path, e))?);
        grid::write_depth(&mut f, &rec.depth)?;
        f.flush().map_err(|e| IoError::at(&path, e))?;
    }
    let report = serde_json::to_string_pretty(&RunReport::new(state)).map_err(|e| IoError::Format(e.to_string()))?;
    let path = dir.join("report.json");
    fs::write(&path, report + "\n").map_err(|e| IoError::at(&path, e))?;
    Ok(())
}

/// ASCII PLY of every frame's world points with confidence above
/// `min_confidence`.
pub fn write_ply<W: Write>(w: &mut W, state: &ReconstructionState, min_confidence: f64) -> Result<(), IoError> {
    let points: Vec<_> = state
        .frames
        .iter()
        .flat_map(|r| r.pointmap.points.iter().zip(&r.pointmap.confidence))
        .filter(|(p, c)| **c > min_confidence && p.iter().all(|x| x.is_finite()))
        .collect();
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z\nproperty float confidence\nend_header")?;
    for (p, c) in points {
        writeln!(w, "{} {} {} {}", p.x as f32, p.y as f32, p.z as f32, *c as f32)?;
    }
    Ok(())
}
