//! Online reconstruction loop.
//!
//! Each frame runs, in order: feature encoding, memory retrieval, pointmap
//! decoding, intrinsics estimation, PnP pose recovery, depth extraction,
//! the Sampson uncertainty check and memory insertion. A frame that fails
//! before the state is touched leaves the state unchanged apart from the
//! recorded failure.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{
    depth_from_pointmap, estimate_focal, select_correspondences, solve_pnp, DepthMap, FlowField, GeometryError,
    Intrinsics, PnpOptions, Pointmap, SE3Pose,
};
use crate::losses::dflow_loss;
use crate::synth::FrameTruth;
use crate::memory::{
    DualMemoryBank, FilterReport, InsertReport, MemoryConfig, MemoryError, MemoryToken, PatchGrid,
};

/// Per-patch features of one frame, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub queries: DMatrix<f64>,
    pub keys: DMatrix<f64>,
    pub values: DMatrix<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("no input for frame {0}")]
    MissingFrame(usize),
    #[error("predictor failed: {0}")]
    Failed(String),
}

/// The learned part of the system: features for memory interaction and a
/// world-frame pointmap with confidence.
pub trait Predictor {
    fn encode(&mut self, index: usize) -> Result<PatchFeatures, PredictorError>;
    /// `fused` is the memory readout for this frame's queries, absent while
    /// the memory is empty.
    fn decode(&mut self, index: usize, fused: Option<&DMatrix<f64>>) -> Result<Pointmap, PredictorError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("intrinsics: {0}")]
    Intrinsics(GeometryError),
    #[error("memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// When the Sampson check runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterTiming {
    /// On the oldest short-term frame just before it migrates to long-term
    /// storage, using the flow and poses of that frame and its successor.
    #[default]
    Migration,
    /// On the previous frame as soon as the current frame arrives.
    Insert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub patch_size: usize,
    pub short_term_frames: usize,
    pub long_term_capacity: usize,
    pub beta: f64,
    pub pnp: PnpOptions,
    /// Pixels with confidence above this take part in focal estimation.
    pub focal_conf_threshold: f64,
    /// Re-estimate the focal on every frame instead of only the first.
    pub reestimate_focal: bool,
    pub filter_timing: FilterTiming,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            short_term_frames: MemoryConfig::DEFAULT_SHORT_TERM_FRAMES,
            long_term_capacity: MemoryConfig::DEFAULT_LONG_TERM_CAPACITY,
            beta: MemoryConfig::DEFAULT_BETA,
            pnp: PnpOptions::default(),
            focal_conf_threshold: 1.0,
            reestimate_focal: false,
            filter_timing: FilterTiming::Migration,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.patch_size == 0 {
            return bad("patch_size must be >= 1");
        }
        if self.short_term_frames == 0 {
            return bad("short_term_frames must be >= 1");
        }
        if self.long_term_capacity == 0 {
            return bad("long_term_capacity must be >= 1");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and >= 0");
        }
        if self.pnp.max_iterations == 0 || !(self.pnp.step_tolerance > 0.0) {
            return bad("pnp needs max_iterations >= 1 and step_tolerance > 0");
        }
        if !(self.pnp.confidence_keep > 0.0 && self.pnp.confidence_keep <= 1.0) {
            return bad("pnp confidence_keep must be in (0, 1]");
        }
        if self.pnp.max_correspondences < 6 {
            return bad("pnp max_correspondences must be >= 6");
        }
        if !self.focal_conf_threshold.is_finite() {
            return bad("focal_conf_threshold must be finite");
        }
        Ok(())
    }

    fn memory(&self, dim: usize) -> MemoryConfig {
        MemoryConfig {
            short_term_frames: self.short_term_frames,
            long_term_capacity: self.long_term_capacity,
            beta: self.beta,
            ..MemoryConfig::new(dim, dim)
        }
    }
}

/// Per-frame record written to the run report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameDiagnostics {
    pub frame_id: u64,
    /// False when PnP failed and the pose was extrapolated.
    pub tracked: bool,
    pub pnp_rms_px: Option<f64>,
    pub pnp_iterations: Option<usize>,
    pub pnp_error: Option<String>,
    pub focal: f64,
    /// Rows of fused memory features delivered to the predictor.
    pub fused_rows: usize,
    pub filter: Option<FilterReport>,
    pub insert: InsertReport,
    /// Flow loss against the previous frame, when both are available.
    pub dflow_loss: Option<f64>,
    pub retained_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameFailure {
    pub frame_id: u64,
    pub error: String,
}

/// Outputs kept for each processed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub pointmap: Pointmap,
    pub depth: DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionState {
    pub config: PipelineConfig,
    pub bank: Option<DualMemoryBank>,
    /// World-to-camera pose of every processed frame.
    pub trajectory: Vec<(u64, SE3Pose)>,
    pub intrinsics: Option<Intrinsics>,
    pub focal_history: Vec<f64>,
    pub frames: Vec<FrameRecord>,
    pub diagnostics: Vec<FrameDiagnostics>,
    pub failures: Vec<FrameFailure>,
    /// Flow from each short-term frame to the frame processed after it.
    flows: VecDeque<(u64, FlowField)>,
    pub peak_tokens: usize,
}

/// One frame handed to [`process_frame`].
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    /// Index understood by the predictor.
    pub index: usize,
    pub frame_id: u64,
    /// Flow from the previously delivered frame to this one.
    pub flow_from_prev: Option<&'a FlowField>,
}

impl ReconstructionState {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            config,
            bank: None,
            trajectory: Vec::new(),
            intrinsics: None,
            focal_history: Vec::new(),
            frames: Vec::new(),
            diagnostics: Vec::new(),
            failures: Vec::new(),
            flows: VecDeque::new(),
            peak_tokens: 0,
        })
    }

    pub fn pose_of(&self, frame_id: u64) -> Option<SE3Pose> {
        self.trajectory.iter().find(|(id, _)| *id == frame_id).map(|(_, p)| *p)
    }

    pub fn untracked_frames(&self) -> usize {
        self.diagnostics.iter().filter(|d| !d.tracked).count()
    }

    /// Largest retained-token count allowed by the memory configuration.
    pub fn token_bound(&self, tokens_per_frame: usize) -> usize {
        self.config.short_term_frames * tokens_per_frame + self.config.long_term_capacity
    }

    fn extrapolated_pose(&self) -> SE3Pose {
        match self.trajectory.as_slice() {
            [] => SE3Pose::identity(),
            [(_, only)] => *only,
            [.., (_, a), (_, b)] => b.compose(&a.inverse()).compose(b).orthonormalized(),
        }
    }
}

fn tokens_for_frame(
    frame_id: u64,
    features: &PatchFeatures,
    pointmap: &Pointmap,
    grid: &PatchGrid,
) -> Result<Vec<MemoryToken>, PipelineError> {
    if features.keys.nrows() != grid.len() || features.values.nrows() != grid.len() {
        return Err(PipelineError::InvalidFrame(format!(
            "{} key rows and {} value rows for {} patches",
            features.keys.nrows(),
            features.values.nrows(),
            grid.len()
        )));
    }
    let confidence = grid.patch_means(&pointmap.confidence);
    Ok((0..grid.len())
        .map(|p| MemoryToken {
            key: features.keys.row(p).iter().copied().collect(),
            value: features.values.row(p).iter().copied().collect(),
            frame_id,
            patch_index: p as u32,
            confidence: confidence[p],
            uncertainty: None,
        })
        .collect())
}

/// Processes one frame and appends its outputs to `state`.
///
/// PnP failure is not an error: the pose is extrapolated at constant
/// velocity and the frame is flagged untracked. Predictor, intrinsics and
/// memory errors leave the state unchanged except for an entry in
/// `state.failures`.
pub fn process_frame<P: Predictor + ?Sized>(
    state: &mut ReconstructionState,
    predictor: &mut P,
    input: FrameInput<'_>,
) -> Result<FrameDiagnostics, PipelineError> {
    match prepare(state, predictor, input) {
        Ok(prepared) => Ok(commit(state, input, prepared)),
        Err(e) => {
            state.failures.push(FrameFailure {
                frame_id: input.frame_id,
                error: e.to_string(),
            });
            Err(e)
        }
    }
}

struct Prepared {
    pointmap: Pointmap,
    intrinsics: Intrinsics,
    pose: SE3Pose,
    pnp: Result<(f64, usize), String>,
    depth: DepthMap,
    tokens: Vec<MemoryToken>,
    fused_rows: usize,
    new_bank: Option<DualMemoryBank>,
    dflow: Option<f64>,
}

/// Every fallible step, without touching `state`.
fn prepare<P: Predictor + ?Sized>(
    state: &ReconstructionState,
    predictor: &mut P,
    input: FrameInput<'_>,
) -> Result<Prepared, PipelineError> {
    if state.trajectory.iter().any(|(id, _)| *id == input.frame_id) {
        return Err(PipelineError::InvalidFrame(format!("frame {} already processed", input.frame_id)));
    }
    let features = predictor.encode(input.index)?;
    let dim = features.keys.ncols();
    if features.queries.ncols() != dim || features.values.ncols() != dim {
        return Err(PipelineError::InvalidFrame("query, key and value widths differ".into()));
    }
    let new_bank = match &state.bank {
        Some(_) => None,
        None => Some(DualMemoryBank::new(state.config.memory(dim))?),
    };
    let bank = state.bank.as_ref().or(new_bank.as_ref()).expect("bank exists");
    let fused = if bank.is_empty() {
        None
    } else {
        Some(bank.retrieve(&features.queries)?)
    };
    let fused_rows = fused.as_ref().map_or(0, |f| f.nrows());
    let pointmap = predictor.decode(input.index, fused.as_ref())?;
    let grid = PatchGrid::new(pointmap.width, pointmap.height, state.config.patch_size);
    if let Some(prev) = state.frames.last() {
        if (prev.pointmap.width, prev.pointmap.height) != (pointmap.width, pointmap.height) {
            return Err(PipelineError::InvalidFrame("image size changed mid-sequence".into()));
        }
    }
    let tokens = tokens_for_frame(input.frame_id, &features, &pointmap, &grid)?;

    let first = state.trajectory.is_empty();
    let mut intrinsics = match state.intrinsics {
        Some(k) => k,
        None => estimate_focal(&pointmap.transformed(&SE3Pose::identity()), state.config.focal_conf_threshold)
            .map_err(PipelineError::Intrinsics)?,
    };

    let (pose, pnp) = if first {
        (SE3Pose::identity(), Ok((0.0, 0)))
    } else {
        let (pts, pix) = select_correspondences(&pointmap, &state.config.pnp);
        match solve_pnp(&pts, &pix, &intrinsics, &state.config.pnp) {
            Ok(sol) => (sol.pose, Ok((sol.rms_error, sol.iterations))),
            Err(e) => (state.extrapolated_pose(), Err(e.to_string())),
        }
    };
    if state.config.reestimate_focal && !first {
        intrinsics = estimate_focal(&pointmap.transformed(&pose), state.config.focal_conf_threshold)
            .map_err(PipelineError::Intrinsics)?;
    }
    let depth = depth_from_pointmap(&pointmap, &pose);

    let dflow = match (state.frames.last(), input.flow_from_prev) {
        (Some(prev), Some(flow)) if prev.frame_id + 1 == input.frame_id => {
            dflow_loss(&prev.pointmap, &pointmap, flow, &pose, &intrinsics).ok().map(|o| o.loss.value)
        }
        _ => None,
    };

    Ok(Prepared {
        pointmap,
        intrinsics,
        pose,
        pnp,
        depth,
        tokens,
        fused_rows,
        new_bank,
        dflow,
    })
}

/// Applies a prepared frame. Nothing here can fail.
fn commit(state: &mut ReconstructionState, input: FrameInput<'_>, p: Prepared) -> FrameDiagnostics {
    if let Some(bank) = p.new_bank {
        state.bank = Some(bank);
    }
    // Keep the flow that links the previous frame to this one.
    if let (Some(flow), Some(prev)) = (input.flow_from_prev, state.trajectory.last()) {
        if prev.0 + 1 == input.frame_id {
            state.flows.push_back((prev.0, flow.clone()));
        }
    }
    state.trajectory.push((input.frame_id, p.pose));
    state.intrinsics = Some(p.intrinsics);
    state.focal_history.push(p.intrinsics.fx);

    let patch_size = state.config.patch_size;
    let bank = state.bank.as_mut().expect("bank created in prepare");
    let filter = match state.config.filter_timing {
        FilterTiming::Migration if bank.will_migrate() => bank.pending_frame().and_then(|m| {
            let flow = state.flows.iter().find(|(id, _)| *id == m).map(|(_, f)| f)?;
            let pose_m = state.trajectory.iter().find(|(id, _)| *id == m)?.1;
            let pose_n = state.trajectory.iter().find(|(id, _)| *id == m + 1)?.1;
            Some(bank.uncertainty_filter_frame(m, flow, &pose_m, &pose_n, &p.intrinsics, patch_size))
        }),
        FilterTiming::Insert => {
            let n = state.trajectory.len();
            match (input.flow_from_prev, n >= 2) {
                (Some(flow), true) if state.trajectory[n - 2].0 + 1 == input.frame_id => {
                    let (prev_id, prev_pose) = state.trajectory[n - 2];
                    Some(bank.uncertainty_filter_frame(prev_id, flow, &prev_pose, &p.pose, &p.intrinsics, patch_size))
                }
                _ => None,
            }
        }
        FilterTiming::Migration => None,
    };
    let insert = bank
        .insert_frame(input.frame_id, p.tokens)
        .expect("tokens validated and frame id checked in prepare");
    let retained = bank.len();
    state.peak_tokens = state.peak_tokens.max(retained);
    // Flows are only needed while their source frame is in the short-term
    // buffer.
    let oldest = bank.short_term().front().map(|f| f.frame_id);
    state.flows.retain(|(id, _)| oldest.is_some_and(|o| *id >= o));

    let (pnp_rms_px, pnp_iterations, pnp_error, tracked) = match p.pnp {
        Ok((rms, it)) => (Some(rms), Some(it), None, true),
        Err(e) => (None, None, Some(e), false),
    };
    let diag = FrameDiagnostics {
        frame_id: input.frame_id,
        tracked,
        pnp_rms_px,
        pnp_iterations,
        pnp_error,
        focal: p.intrinsics.fx,
        fused_rows: p.fused_rows,
        filter,
        insert,
        dflow_loss: p.dflow,
        retained_tokens: retained,
    };
    state.frames.push(FrameRecord {
        frame_id: input.frame_id,
        pointmap: p.pointmap,
        depth: p.depth,
    });
    state.diagnostics.push(diag.clone());
    diag
}

/// Ordered frames of a sequence: ids and the flow from each frame's
/// predecessor.
#[derive(Debug, Clone, Default)]
pub struct Sequence {
    pub frame_ids: Vec<u64>,
    /// `flows[k]` maps frame `k-1` to frame `k`; `flows[0]` is `None`.
    pub flows: Vec<Option<FlowField>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    /// Ids and flows of generated ground truth.
    pub fn from_truth(frames: &[FrameTruth]) -> Self {
        Sequence {
            frame_ids: frames.iter().map(|f| f.frame_id).collect(),
            flows: (0..frames.len())
                .map(|k| if k == 0 { None } else { frames[k - 1].flow_to_next.clone() })
                .collect(),
        }
    }

    /// First `n` frames.
    pub fn prefix(&self, n: usize) -> Sequence {
        Sequence {
            frame_ids: self.frame_ids[..n.min(self.len())].to_vec(),
            flows: self.flows[..n.min(self.len())].to_vec(),
        }
    }
}

/// Runs every frame in order. Per-frame errors are recorded and the run
/// continues with the next frame.
pub fn run_sequence<P: Predictor + ?Sized>(
    predictor: &mut P,
    sequence: &Sequence,
    config: &PipelineConfig,
) -> Result<ReconstructionState, PipelineError> {
    if sequence.is_empty() {
        return Err(PipelineError::EmptySequence);
    }
    let mut state = ReconstructionState::new(config.clone())?;
    for (index, &frame_id) in sequence.frame_ids.iter().enumerate() {
        let input = FrameInput {
            index,
            frame_id,
            flow_from_prev: sequence.flows.get(index).and_then(|f| f.as_ref()),
        };
        let _ = process_frame(&mut state, predictor, input);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{absolute_trajectory_error, depth_metrics, PoseAlignment, Scaling};
    use crate::synth::{generate, CameraPath, CorruptionSpec, DeformRegion, OraclePredictor, SceneSpec};

    fn sequence_of(frames: &[FrameTruth]) -> Sequence {
        Sequence::from_truth(frames)
    }

    fn oracle(frames: &[FrameTruth], patch: usize) -> OraclePredictor {
        OraclePredictor::new(frames.iter().map(|f| f.pointmap.clone()).collect(), patch, CorruptionSpec::default())
    }

    fn config() -> PipelineConfig {
        PipelineConfig {
            patch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn rigid_scene_is_recovered() {
        let spec = SceneSpec::rigid(2, 64, 48, 8);
        let frames = generate(&spec).unwrap();
        let state = run_sequence(&mut oracle(&frames, 16), &sequence_of(&frames), &config()).unwrap();
        assert_eq!(state.trajectory.len(), 8);
        assert_eq!(state.trajectory[0].1, SE3Pose::identity());
        assert!(state.failures.is_empty());
        assert_eq!(state.untracked_frames(), 0);
        let pred: Vec<_> = state.trajectory.iter().map(|(_, p)| p.inverse()).collect();
        let gt: Vec<_> = frames.iter().map(|f| f.pose.inverse()).collect();
        assert!(absolute_trajectory_error(&pred, &gt, PoseAlignment::Se3).unwrap() <= 1e-5);
        for (rec, fr) in state.frames.iter().zip(&frames) {
            assert!(depth_metrics(&rec.depth, &fr.depth, Scaling::None).unwrap().abs_rel <= 1e-6);
        }
        let f = state.intrinsics.unwrap().fx;
        assert!((f - spec.focal).abs() / spec.focal < 0.005);
        // First frame seeds the bank without filtering or fusion.
        assert_eq!(state.diagnostics[0].fused_rows, 0);
        assert!(state.diagnostics[0].filter.is_none());
        assert!(state.diagnostics[1].fused_rows > 0);
    }

    #[test]
    fn single_frame_and_empty_sequences() {
        let frames = generate(&SceneSpec::rigid(2, 64, 48, 1)).unwrap();
        let state = run_sequence(&mut oracle(&frames, 16), &sequence_of(&frames), &config()).unwrap();
        assert_eq!(state.trajectory, vec![(0, SE3Pose::identity())]);
        assert_eq!(state.diagnostics[0].dflow_loss, None);
        assert!(matches!(
            run_sequence(&mut oracle(&frames, 16), &Sequence::default(), &config()),
            Err(PipelineError::EmptySequence)
        ));
    }

    #[test]
    fn dynamic_tokens_are_kept_out_of_long_term() {
        let mut spec = SceneSpec::rigid(4, 320, 256, 8);
        spec.focal = 200.0;
        spec.camera = CameraPath::translation([0.05, 0.0, 0.0]);
        spec.deform_flat_top = 0.85;
        spec.deform_frequency = std::f64::consts::PI;
        spec.deform_regions = vec![DeformRegion {
            center: [150.0, 128.0],
            radius: 72.0,
            amplitude: [0.0, 0.019, 0.0],
            phase: std::f64::consts::FRAC_PI_2,
        }];
        let frames = generate(&spec).unwrap();
        let state = run_sequence(&mut oracle(&frames, 16), &sequence_of(&frames), &config()).unwrap();
        let bank = state.bank.as_ref().unwrap();
        let migrated: Vec<u64> = state.diagnostics.iter().filter_map(|d| d.insert.migrated_frame).collect();
        assert_eq!(migrated, vec![0, 1, 2, 3]);
        let dynamic: usize = migrated.iter().map(|&m| frames[m as usize].token_labels.iter().filter(|&&l| l).count()).sum();
        let leaked = bank
            .long_term()
            .iter()
            .filter(|t| frames[t.frame_id as usize].token_labels[t.patch_index as usize])
            .count();
        // Only patches straddling the disk rim can be misjudged.
        assert!(dynamic > 0);
        assert!(leaked * 20 <= dynamic, "{leaked} of {dynamic}");
        for t in bank.long_term() {
            assert!(t.uncertainty.unwrap() <= MemoryConfig::DEFAULT_BETA);
        }
    }

    #[test]
    fn prefix_runs_agree() {
        let frames = generate(&SceneSpec::rigid(5, 64, 48, 9)).unwrap();
        let seq = sequence_of(&frames);
        let full = run_sequence(&mut oracle(&frames, 16), &seq, &config()).unwrap();
        let part = run_sequence(&mut oracle(&frames[..5], 16), &seq.prefix(5), &config()).unwrap();
        assert_eq!(&full.trajectory[..5], &part.trajectory[..]);
        assert_eq!(&full.frames[..5], &part.frames[..]);
        assert_eq!(&full.diagnostics[..5], &part.diagnostics[..]);
    }

    #[test]
    fn predictor_failure_leaves_state_as_truncated_run() {
        let frames = generate(&SceneSpec::rigid(6, 64, 48, 7)).unwrap();
        let seq = sequence_of(&frames);
        let k = 4;
        let mut failing = oracle(&frames, 16).fail_at(k);
        let mut state = ReconstructionState::new(config()).unwrap();
        for i in 0..=k {
            let input = FrameInput {
                index: i,
                frame_id: seq.frame_ids[i],
                flow_from_prev: seq.flows[i].as_ref(),
            };
            let r = process_frame(&mut state, &mut failing, input);
            assert_eq!(r.is_err(), i == k);
        }
        let truncated = run_sequence(&mut oracle(&frames, 16), &seq.prefix(k), &config()).unwrap();
        assert_eq!(state.trajectory, truncated.trajectory);
        assert_eq!(state.bank, truncated.bank);
        assert_eq!(state.failures.len(), 1);
        assert_eq!(state.failures[0].frame_id, k as u64);
    }

    #[test]
    fn pnp_failure_extrapolates_and_flags() {
        let frames = generate(&SceneSpec::rigid(7, 64, 48, 4)).unwrap();
        let cfg = PipelineConfig {
            pnp: PnpOptions {
                max_iterations: 1,
                step_tolerance: 1e-300,
                ..Default::default()
            },
            ..config()
        };
        let state = run_sequence(&mut oracle(&frames, 16), &sequence_of(&frames), &cfg).unwrap();
        assert_eq!(state.trajectory.len(), 4);
        assert!(state.untracked_frames() >= 1);
        let d = state.diagnostics.iter().find(|d| !d.tracked).unwrap();
        assert!(d.pnp_error.is_some());
    }

    #[test]
    fn memory_stays_bounded() {
        let frames = generate(&SceneSpec::rigid(8, 48, 32, 30)).unwrap();
        let cfg = PipelineConfig {
            long_term_capacity: 10,
            short_term_frames: 2,
            ..config()
        };
        let state = run_sequence(&mut oracle(&frames, 16), &sequence_of(&frames), &cfg).unwrap();
        let per_frame = PatchGrid::new(48, 32, 16).len();
        assert!(state.peak_tokens <= state.token_bound(per_frame));
        assert!(state.diagnostics.iter().any(|d| d.insert.pruned > 0));
        state.bank.as_ref().unwrap().check_invariants().unwrap();
    }

    #[test]
    fn insert_timing_filters_the_previous_frame() {
        let frames = generate(&SceneSpec::rigid(9, 64, 48, 4)).unwrap();
        let cfg = PipelineConfig {
            filter_timing: FilterTiming::Insert,
            ..config()
        };
        let state = run_sequence(&mut oracle(&frames, 16), &sequence_of(&frames), &cfg).unwrap();
        assert!(state.diagnostics[0].filter.is_none());
        for d in &state.diagnostics[1..] {
            let f = d.filter.as_ref().unwrap();
            assert_eq!(f.frame_id, Some(d.frame_id - 1));
            assert_eq!(f.removed, 0);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = PipelineConfig { beta: -1.0, ..config() };
        assert!(matches!(ReconstructionState::new(cfg), Err(PipelineError::InvalidConfig(_))));
    }
}
