//! Command implementations behind the `recon` binary. Each returns data
//! rather than printing, and every error maps to a process exit code.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::{depth_from_pointmap, DepthMap, Pointmap, SE3Pose};
use crate::io::{self, grid, Dataset, IoError, RunConfig, TumPose};
use crate::losses::{conf_loss, depth_loss, dflow_loss, gradcheck_suite, total_loss, GradcheckReport, LossKind};
use crate::metrics::{
    absolute_trajectory_error, depth_metrics, pose_metrics_5frame, DepthMetrics, PoseAlignment, Scaling,
};
use crate::pipeline::{run_sequence, ReconstructionState};
use crate::synth::{generate, CorruptionSpec, OraclePredictor, SceneSpec};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CommandError {
    /// 1 usage/config, 2 data, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 1,
            CommandError::Data(_) => 2,
            CommandError::Runtime(_) => 3,
        }
    }
}

impl From<IoError> for CommandError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Config(_) => CommandError::Config(e.to_string()),
            _ => CommandError::Data(e.to_string()),
        }
    }
}

pub type CommandResult<T> = Result<T, CommandError>;

fn read_text(path: &Path) -> CommandResult<String> {
    fs::read_to_string(path).map_err(|e| CommandError::Data(format!("{}: {e}", path.display())))
}

/// Scene spec from a JSON file.
pub fn load_scene_spec(path: &Path) -> CommandResult<SceneSpec> {
    let spec: SceneSpec = serde_json::from_str(&read_text(path)?)
        .map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| CommandError::Config(e.to_string()))?;
    Ok(spec)
}

/// Run configuration from a `key = value` file; defaults when `None`.
pub fn load_run_config(path: Option<&Path>) -> CommandResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CommandError::Config(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| CommandError::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Generates a scene and writes it as a dataset. Returns what was written.
pub fn cmd_synth(spec: &SceneSpec, out: &Path) -> CommandResult<Dataset> {
    let truth = generate(spec).map_err(|e| CommandError::Config(e.to_string()))?;
    let data = Dataset::from_truth(spec, &truth)?;
    io::write_dataset(out, &data)?;
    Ok(data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub frames: usize,
    pub untracked: usize,
    pub failed: usize,
    pub peak_tokens: usize,
    pub focal: Option<f64>,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.untracked == 0 && self.failed == 0
    }
}

/// Reconstructs a dataset by replaying its stored pointmaps and
/// confidences through the online pipeline.
pub fn run_dataset(data: &Dataset, config: &RunConfig, corruption: CorruptionSpec) -> CommandResult<ReconstructionState> {
    let mut predictor = OraclePredictor::new(data.pointmaps(), config.pipeline.patch_size, corruption);
    run_sequence(&mut predictor, &data.sequence(), &config.pipeline).map_err(|e| CommandError::Runtime(e.to_string()))
}

/// `run`: reads the dataset, reconstructs it and writes `traj.txt`,
/// `depth_%06d.bin` and `report.json` to `out`, plus an optional PLY.
pub fn cmd_run(dataset: &Path, config: &RunConfig, out: &Path, export_ply: Option<&Path>) -> CommandResult<RunSummary> {
    let data = io::read_dataset(dataset)?;
    let state = run_dataset(&data, config, config.corruption)?;
    io::write_run_outputs(out, &state)?;
    if let Some(path) = export_ply {
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| IoError::at(path, e))?);
        io::write_ply(&mut f, &state, 0.0)?;
    }
    Ok(RunSummary {
        frames: state.trajectory.len(),
        untracked: state.untracked_frames(),
        failed: state.failures.len(),
        peak_tokens: state.peak_tokens,
        focal: state.intrinsics.map(|k| k.fx),
    })
}

fn read_depth_file(path: &Path) -> CommandResult<DepthMap> {
    let mut f = std::io::BufReader::new(fs::File::open(path).map_err(|e| IoError::at(path, e))?);
    grid::read_depth(&mut f).map_err(|e| CommandError::Data(format!("{}: {e}", path.display())))
}

/// Depth pairs to evaluate: two files, or a run directory against a dataset.
fn depth_pairs(pred: &Path, gt: &Path) -> CommandResult<Vec<(u64, PathBuf, PathBuf)>> {
    if pred.is_file() && gt.is_file() {
        return Ok(vec![(0, pred.to_path_buf(), gt.to_path_buf())]);
    }
    if pred.is_dir() && gt.is_dir() {
        let manifest = io::read_manifest(gt)?;
        let mut pairs = Vec::new();
        for i in 0..manifest.n_frames as u64 {
            let p = pred.join(format!("depth_{i:06}.bin"));
            if p.exists() {
                pairs.push((i, p, io::dataset::frame_dir(gt, i).join("depth.bin")));
            }
        }
        if pairs.is_empty() {
            return Err(CommandError::Data(format!("{}: no depth_%06d.bin files", pred.display())));
        }
        return Ok(pairs);
    }
    Err(CommandError::Config(
        "eval-depth takes two depth files or a run directory and a dataset directory".into(),
    ))
}

#[derive(Serialize)]
struct FrameDepth {
    frame_id: u64,
    #[serde(flatten)]
    metrics: DepthMetrics,
}

pub fn cmd_eval_depth(pred: &Path, gt: &Path, scaling: Scaling) -> CommandResult<Value> {
    let mut frames = Vec::new();
    for (id, p, g) in depth_pairs(pred, gt)? {
        let m = depth_metrics(&read_depth_file(&p)?, &read_depth_file(&g)?, scaling)
            .map_err(|e| CommandError::Data(format!("frame {id}: {e}")))?;
        frames.push(FrameDepth { frame_id: id, metrics: m });
    }
    let n = frames.len() as f64;
    let mean = |f: fn(&DepthMetrics) -> f64| frames.iter().map(|x| f(&x.metrics)).sum::<f64>() / n;
    Ok(json!({
        "schema": "recon.eval-depth/1",
        "scaling": scaling,
        "mean": {
            "abs_rel": mean(|m| m.abs_rel),
            "sq_rel": mean(|m| m.sq_rel),
            "rmse": mean(|m| m.rmse),
            "rmse_log": mean(|m| m.rmse_log),
            "delta_125": mean(|m| m.delta_125),
        },
        "frames": frames,
    }))
}

/// Trajectory from a TUM file, a run directory's `traj.txt` or a dataset
/// directory's poses.
pub fn load_trajectory(path: &Path) -> CommandResult<Vec<TumPose>> {
    if path.join("traj.txt").is_file() {
        return load_trajectory(&path.join("traj.txt"));
    }
    if path.is_dir() {
        let data = io::read_dataset(path)?;
        return Ok(data.frames.iter().map(|f| f.pose).collect());
    }
    io::parse_trajectory(&read_text(path)?).map_err(|e| CommandError::Data(format!("{}: {e}", path.display())))
}

/// Camera-to-world poses of `pred` and `gt` paired by frame id.
fn paired(pred: &[TumPose], gt: &[TumPose]) -> CommandResult<(Vec<SE3Pose>, Vec<SE3Pose>)> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for g in gt {
        if let Some(p) = pred.iter().find(|p| p.frame_id == g.frame_id) {
            a.push(p.camera_to_world());
            b.push(g.camera_to_world());
        }
    }
    if a.len() != gt.len() || a.len() != pred.len() {
        return Err(CommandError::Data(format!(
            "trajectories share {} of {} / {} frame ids",
            a.len(),
            pred.len(),
            gt.len()
        )));
    }
    Ok((a, b))
}

pub fn cmd_eval_pose(pred: &Path, gt: &Path, alignment: PoseAlignment) -> CommandResult<Value> {
    let (p, g) = paired(&load_trajectory(pred)?, &load_trajectory(gt)?)?;
    let m = pose_metrics_5frame(&p, &g, alignment).map_err(|e| CommandError::Data(e.to_string()))?;
    let global = absolute_trajectory_error(&p, &g, alignment).map_err(|e| CommandError::Data(e.to_string()))?;
    Ok(json!({
        "schema": "recon.eval-pose/1",
        "alignment": alignment,
        "frames": g.len(),
        "ate_mm": m.ate,
        "rpe_r_deg": m.rpe_r,
        "rpe_t_mm": m.rpe_t,
        "n_snippets": m.n_snippets,
        "ate_global_m": global,
    }))
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Serialize)]
struct GradcheckEntry {
    #[serde(flatten)]
    report: GradcheckReport,
    pass: bool,
}

/// Gradient check of every loss over `seeds` random inputs.
pub fn cmd_gradcheck(seeds: u64, width: usize, height: usize, epsilon: f64) -> CommandResult<Value> {
    if seeds == 0 || width < 2 || height < 2 || !(epsilon > 0.0) {
        return Err(CommandError::Config("gradcheck needs seeds >= 1, a 2x2 or larger grid and epsilon > 0".into()));
    }
    let mut losses = Vec::new();
    for kind in LossKind::ALL {
        let report =
            gradcheck_suite(kind, 0..seeds, width, height, epsilon).map_err(|e| CommandError::Runtime(e.to_string()))?;
        let pass = report.max_rel_err < GRADCHECK_TOLERANCE;
        losses.push(GradcheckEntry { report, pass });
    }
    Ok(json!({
        "schema": "recon.gradcheck/1",
        "seeds": seeds,
        "width": width,
        "height": height,
        "epsilon": epsilon,
        "tolerance": GRADCHECK_TOLERANCE,
        "pass": losses.iter().all(|l| l.pass),
        "losses": losses,
    }))
}

/// Ground-truth points of frame `j` in its camera, back-projected from the
/// stored depth.
fn camera_points_from_depth(data: &Dataset, index: usize) -> CommandResult<Pointmap> {
    let k = data.manifest.intrinsics();
    let d = &data.frames[index].depth;
    let points = (0..d.depth.len())
        .map(|i| k.backproject(&Vector2::new((i % d.width) as f64, (i / d.width) as f64), d.depth[i]))
        .collect();
    Pointmap::from_points(d.width, d.height, points).map_err(|e| CommandError::Data(e.to_string()))
}

/// Loss breakdown for each consecutive frame pair of a dataset, evaluated at
/// the stored pointmaps, poses and intrinsics.
pub fn cmd_losses(dataset: &Path, config: &RunConfig) -> CommandResult<Vec<Value>> {
    let data = io::read_dataset(dataset)?;
    let k = data.manifest.intrinsics();
    let cfg = &config.losses;
    let mut out = Vec::new();
    for j in 1..data.frames.len() {
        let (fi, fj) = (&data.frames[j - 1], &data.frames[j]);
        let flow = fi.flow_to_next.as_ref().ok_or(IoError::FlowMissing { frame: fi.frame_id })?;
        let pose_j = fj.world_to_camera();
        let err = |what: &str, e: crate::losses::LossError| {
            CommandError::Data(format!("frames {}->{} {what}: {e}", fi.frame_id, fj.frame_id))
        };
        let dflow = dflow_loss(&fi.pointmap, &fj.pointmap, flow, &pose_j, &k).map_err(|e| err("flow loss", e))?;
        let pred_depth = depth_from_pointmap(&fj.pointmap, &pose_j);
        let dep = depth_loss(&pred_depth, &fj.depth, cfg.grad_scales).map_err(|e| err("depth loss", e))?;
        let pred_cam = fj.pointmap.transformed(&pose_j);
        let gt_cam = camera_points_from_depth(&data, j)?;
        let conf = conf_loss(&pred_cam, &gt_cam, &fj.depth.valid, cfg.alpha_conf, config.conf_mode)
            .map_err(|e| err("confidence loss", e))?;
        let total = total_loss(&dflow.loss, &dep.loss, &conf.loss, cfg);
        out.push(json!({
            "schema": "recon.losses/1",
            "frame_i": fi.frame_id,
            "frame_j": fj.frame_id,
            "total": total,
            "dflow": dflow.loss,
            "depth": dep.loss,
            "conf": conf.loss,
        }));
    }
    Ok(out)
}
