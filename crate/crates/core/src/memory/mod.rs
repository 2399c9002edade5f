//! Uncertainty-aware dual memory.
//!
//! Tokens of the most recent frames live in a short-term buffer (FIFO of
//! per-frame groups). When a frame falls out of that window its tokens are
//! checked against the epipolar geometry of the frame and its successor,
//! unreliable ones are dropped, and the rest move to a capacity-limited
//! long-term buffer that keeps the most confident tokens.

mod snapshot;

pub use snapshot::{SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use std::collections::VecDeque;

use nalgebra::{DMatrix, Vector2};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{
    fundamental_from_poses, in_image, sampson_distance, FlowField, Intrinsics, SE3Pose,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("memory bank holds no tokens")]
    EmptyMemory,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("frame {0} is already stored")]
    DuplicateFrame(u64),
    #[error("tokens of one insertion must share a frame id")]
    MixedFrames,
    #[error("invalid token: {0}")]
    InvalidToken(String),
    #[error("invalid memory config: {0}")]
    InvalidConfig(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryConfig {
    pub key_dim: usize,
    pub value_dim: usize,
    /// L_s: frames held in the short-term buffer.
    pub short_term_frames: usize,
    /// K_max: tokens held in the long-term buffer.
    pub long_term_capacity: usize,
    /// β: Sampson distance (px²) above which a token is unreliable.
    pub beta: f64,
}

impl MemoryConfig {
    pub const DEFAULT_SHORT_TERM_FRAMES: usize = 4;
    pub const DEFAULT_LONG_TERM_CAPACITY: usize = 4096;
    pub const DEFAULT_BETA: f64 = 4.0;

    pub fn new(key_dim: usize, value_dim: usize) -> Self {
        Self {
            key_dim,
            value_dim,
            short_term_frames: Self::DEFAULT_SHORT_TERM_FRAMES,
            long_term_capacity: Self::DEFAULT_LONG_TERM_CAPACITY,
            beta: Self::DEFAULT_BETA,
        }
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.key_dim == 0 || self.value_dim == 0 {
            return Err(MemoryError::InvalidConfig("feature dimensions must be positive".into()));
        }
        if self.short_term_frames == 0 {
            return Err(MemoryError::InvalidConfig("short_term_frames must be >= 1".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(MemoryError::InvalidConfig(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryToken {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub frame_id: u64,
    /// Row-major position in the patch grid.
    pub patch_index: u32,
    /// Mean pointmap confidence over the token's patch (≥ 1).
    pub confidence: f64,
    /// Mean Sampson distance over the patch; `None` until checked.
    pub uncertainty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens {
    pub frame_id: u64,
    pub tokens: Vec<MemoryToken>,
}

/// Outcome of an uncertainty check on one frame's tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub frame_id: Option<u64>,
    pub kept: usize,
    pub removed: usize,
    pub skipped: usize,
    pub removed_patches: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct InsertReport {
    pub migrated_frame: Option<u64>,
    pub migrated: usize,
    /// Migrating tokens that had never been checked; stored with uncertainty 0.
    pub unchecked: usize,
    /// Migrating tokens whose recorded uncertainty exceeded β.
    pub dropped: usize,
    pub pruned: usize,
}

/// Row-major tiling of an image into square patches, one token per patch.
#[derive(Debug, Clone, Copy)]
pub struct PatchGrid {
    pub width: usize,
    pub height: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_size: usize) -> Self {
        Self {
            width,
            height,
            patch_size,
        }
    }

    pub fn cols(&self) -> usize {
        self.width.div_ceil(self.patch_size)
    }

    pub fn rows(&self) -> usize {
        self.height.div_ceil(self.patch_size)
    }

    pub fn len(&self) -> usize {
        self.cols() * self.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels `(u, v)` covered by a patch; edge patches may be smaller.
    pub fn pixels(&self, patch_index: usize) -> impl Iterator<Item = (usize, usize)> {
        let cols = self.cols();
        let (r, c) = (patch_index / cols, patch_index % cols);
        let ps = self.patch_size;
        let u0 = c * ps;
        let v0 = r * ps;
        let u1 = ((c + 1) * ps).min(self.width);
        let v1 = ((r + 1) * ps).min(self.height);
        (v0..v1).flat_map(move |v| (u0..u1).map(move |u| (u, v)))
    }

    /// Patch containing pixel `(u, v)`.
    pub fn patch_of(&self, u: usize, v: usize) -> usize {
        (v / self.patch_size) * self.cols() + u / self.patch_size
    }

    /// Mean of a per-pixel quantity over each patch.
    pub fn patch_means(&self, values: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|p| {
                let (s, n) = self
                    .pixels(p)
                    .fold((0.0, 0usize), |(s, n), (u, v)| (s + values[v * self.width + u], n + 1));
                s / n as f64
            })
            .collect()
    }
}

/// Short-term FIFO of per-frame token groups plus a confidence-pruned
/// long-term store.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMemoryBank {
    config: MemoryConfig,
    short_term: VecDeque<FrameTokens>,
    long_term: Vec<MemoryToken>,
}

impl DualMemoryBank {
    pub fn new(config: MemoryConfig) -> Result<Self, MemoryError> {
        config.validate()?;
        Ok(Self {
            config,
            short_term: VecDeque::new(),
            long_term: Vec::new(),
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn short_term(&self) -> &VecDeque<FrameTokens> {
        &self.short_term
    }

    pub fn long_term(&self) -> &[MemoryToken] {
        &self.long_term
    }

    pub fn short_term_tokens(&self) -> usize {
        self.short_term.iter().map(|f| f.tokens.len()).sum()
    }

    /// Tokens across both buffers.
    pub fn len(&self) -> usize {
        self.short_term_tokens() + self.long_term.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_frame(&self, frame_id: u64) -> bool {
        self.short_term.iter().any(|f| f.frame_id == frame_id)
            || self.long_term.iter().any(|t| t.frame_id == frame_id)
    }

    /// Frame whose tokens migrate on the next insertion when the short-term
    /// buffer is full; otherwise the oldest short-term frame.
    pub fn pending_frame(&self) -> Option<u64> {
        self.short_term.front().map(|f| f.frame_id)
    }

    /// Whether the next insertion will migrate the oldest short-term frame.
    pub fn will_migrate(&self) -> bool {
        self.short_term.len() >= self.config.short_term_frames
    }

    fn tokens(&self) -> impl Iterator<Item = &MemoryToken> {
        self.short_term
            .iter()
            .flat_map(|f| f.tokens.iter())
            .chain(self.long_term.iter())
    }

    /// Row-stochastic attention of `queries` (n_q × C_k) over every stored
    /// key, short-term first.
    pub fn attention(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>, MemoryError> {
        if queries.ncols() != self.config.key_dim {
            return Err(MemoryError::DimensionMismatch(format!(
                "query dimension {} != key dimension {}",
                queries.ncols(),
                self.config.key_dim
            )));
        }
        let n = self.len();
        if n == 0 {
            return Err(MemoryError::EmptyMemory);
        }
        let keys = DMatrix::from_row_iterator(
            n,
            self.config.key_dim,
            self.tokens().flat_map(|t| t.key.iter().copied()),
        );
        let mut logits = queries * keys.transpose();
        logits /= (self.config.key_dim as f64).sqrt();
        for mut row in logits.row_iter_mut() {
            let max = row.max();
            row.apply(|x| *x = (*x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        Ok(logits)
    }

    /// `Softmax(Q Kᵀ / √C_k) V + Q`.
    pub fn retrieve(&self, queries: &DMatrix<f64>) -> Result<DMatrix<f64>, MemoryError> {
        if self.config.value_dim != self.config.key_dim {
            return Err(MemoryError::DimensionMismatch(format!(
                "residual retrieval needs value dimension {} == key dimension {}",
                self.config.value_dim, self.config.key_dim
            )));
        }
        let weights = self.attention(queries)?;
        let values = DMatrix::from_row_iterator(
            self.len(),
            self.config.value_dim,
            self.tokens().flat_map(|t| t.value.iter().copied()),
        );
        Ok(weights * values + queries)
    }

    fn validate_tokens(&self, tokens: &[MemoryToken]) -> Result<Option<u64>, MemoryError> {
        let Some(first) = tokens.first() else {
            return Ok(None);
        };
        let frame_id = first.frame_id;
        for t in tokens {
            if t.frame_id != frame_id {
                return Err(MemoryError::MixedFrames);
            }
            if t.key.len() != self.config.key_dim || t.value.len() != self.config.value_dim {
                return Err(MemoryError::DimensionMismatch(format!(
                    "token ({}, {}) vs configured ({}, {})",
                    t.key.len(),
                    t.value.len(),
                    self.config.key_dim,
                    self.config.value_dim
                )));
            }
            if !(t.confidence >= 1.0) {
                return Err(MemoryError::InvalidToken(format!("confidence {} < 1", t.confidence)));
            }
            if let Some(u) = t.uncertainty {
                if !(u >= 0.0) {
                    return Err(MemoryError::InvalidToken(format!("uncertainty {u} < 0")));
                }
            }
        }
        Ok(Some(frame_id))
    }

    /// Appends a frame to the short-term buffer, migrating the oldest frame
    /// to long-term storage when the window overflows.
    ///
    /// An empty token list is accepted as long as `frame_id` is given.
    pub fn insert_frame(
        &mut self,
        frame_id: u64,
        tokens: Vec<MemoryToken>,
    ) -> Result<InsertReport, MemoryError> {
        if let Some(id) = self.validate_tokens(&tokens)? {
            if id != frame_id {
                return Err(MemoryError::MixedFrames);
            }
        }
        if self.contains_frame(frame_id) {
            return Err(MemoryError::DuplicateFrame(frame_id));
        }
        self.short_term.push_back(FrameTokens { frame_id, tokens });

        let mut report = InsertReport::default();
        while self.short_term.len() > self.config.short_term_frames {
            let Some(old) = self.short_term.pop_front() else { break };
            report.migrated_frame = Some(old.frame_id);
            for mut t in old.tokens {
                match t.uncertainty {
                    None => {
                        t.uncertainty = Some(0.0);
                        report.unchecked += 1;
                    }
                    Some(u) if u > self.config.beta => {
                        report.dropped += 1;
                        continue;
                    }
                    Some(_) => {}
                }
                report.migrated += 1;
                self.long_term.push(t);
            }
        }
        report.pruned = self.prune_topk();
        Ok(report)
    }

    /// Keeps the `K_max` most confident long-term tokens. Ties go to the newer
    /// frame, then the lower patch index.
    pub fn prune_topk(&mut self) -> usize {
        let cap = self.config.long_term_capacity;
        if self.long_term.len() <= cap {
            return 0;
        }
        self.long_term.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(b.frame_id.cmp(&a.frame_id))
                .then(a.patch_index.cmp(&b.patch_index))
        });
        let pruned = self.long_term.len() - cap;
        self.long_term.truncate(cap);
        pruned
    }

    /// Uncertainty check on the tokens pending migration (the oldest
    /// short-term frame). `flow` maps that frame's pixels into its successor;
    /// `pose_i`/`pose_j` are the two frames' world-to-camera poses.
    pub fn uncertainty_filter(
        &mut self,
        flow: &FlowField,
        pose_i: &SE3Pose,
        pose_j: &SE3Pose,
        k: &Intrinsics,
        patch_size: usize,
    ) -> FilterReport {
        match self.pending_frame() {
            Some(id) => self.uncertainty_filter_frame(id, flow, pose_i, pose_j, k, patch_size),
            None => FilterReport::default(),
        }
    }

    /// Uncertainty check on the short-term tokens of `frame_id`.
    ///
    /// Each token's uncertainty becomes the mean Sampson distance over its
    /// patch pixels whose flow endpoint stays inside the image. Tokens above
    /// β are removed. A degenerate baseline keeps every token, marked skipped
    /// with uncertainty 0; so does a token with no usable pixel.
    pub fn uncertainty_filter_frame(
        &mut self,
        frame_id: u64,
        flow: &FlowField,
        pose_i: &SE3Pose,
        pose_j: &SE3Pose,
        k: &Intrinsics,
        patch_size: usize,
    ) -> FilterReport {
        let beta = self.config.beta;
        let mut report = FilterReport {
            frame_id: Some(frame_id),
            ..Default::default()
        };
        let Some(group) = self.short_term.iter_mut().find(|f| f.frame_id == frame_id) else {
            return report;
        };
        let grid = PatchGrid::new(flow.width, flow.height, patch_size.max(1));

        let fundamental = match fundamental_from_poses(pose_i, pose_j, k, k) {
            Ok(f) => f,
            // Degenerate baseline: no epipolar geometry to check against.
            Err(_) => {
                for t in &mut group.tokens {
                    t.uncertainty = Some(0.0);
                }
                report.skipped = group.tokens.len();
                report.kept = group.tokens.len();
                return report;
            }
        };

        let mut kept = Vec::with_capacity(group.tokens.len());
        for mut t in group.tokens.drain(..) {
            let patch = t.patch_index as usize;
            let (mut sum, mut n) = (0.0, 0usize);
            if patch < grid.len() {
                for (u, v) in grid.pixels(patch) {
                    let src = Vector2::new(u as f64, v as f64);
                    let dst = flow.target(u, v);
                    if !in_image(&dst, flow.width, flow.height) {
                        continue;
                    }
                    if let Ok(d) = sampson_distance(&fundamental, &src, &dst) {
                        sum += d;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                t.uncertainty = Some(0.0);
                report.skipped += 1;
                report.kept += 1;
                kept.push(t);
                continue;
            }
            let u = sum / n as f64;
            t.uncertainty = Some(u);
            if u > beta {
                report.removed += 1;
                report.removed_patches.push(t.patch_index);
            } else {
                report.kept += 1;
                kept.push(t);
            }
        }
        group.tokens = kept;
        report
    }

    /// Checks every structural invariant; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.short_term.len() > self.config.short_term_frames {
            return Err(format!(
                "short-term holds {} frames, limit {}",
                self.short_term.len(),
                self.config.short_term_frames
            ));
        }
        if self.long_term.len() > self.config.long_term_capacity {
            return Err(format!(
                "long-term holds {} tokens, capacity {}",
                self.long_term.len(),
                self.config.long_term_capacity
            ));
        }
        for f in &self.short_term {
            if self.long_term.iter().any(|t| t.frame_id == f.frame_id) {
                return Err(format!("frame {} present in both buffers", f.frame_id));
            }
            if f.tokens.iter().any(|t| t.frame_id != f.frame_id) {
                return Err(format!("frame group {} holds foreign tokens", f.frame_id));
            }
        }
        for t in self.tokens() {
            if t.key.len() != self.config.key_dim || t.value.len() != self.config.value_dim {
                return Err("token dimension mismatch".into());
            }
            if !(t.confidence >= 1.0) {
                return Err(format!("token confidence {} < 1", t.confidence));
            }
        }
        for t in &self.long_term {
            match t.uncertainty {
                Some(u) if u >= 0.0 && u <= self.config.beta => {}
                other => return Err(format!("long-term token with uncertainty {other:?}")),
            }
        }
        Ok(())
    }
}
