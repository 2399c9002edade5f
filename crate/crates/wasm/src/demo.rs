//! Demo state and operations, free of any browser types so they can be
//! tested natively.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use recon_core::geometry::{
    fundamental_from_poses, in_image, sampson_distance, DepthMap, FlowField, Intrinsics, SE3Pose,
};
use recon_core::losses::{align_least_squares, depth_loss, dflow_loss};
use recon_core::memory::{DualMemoryBank, MemoryConfig, MemoryToken, PatchGrid};
use recon_core::metrics::{depth_metrics, DepthMetrics, Scaling};
use recon_core::synth::{generate, FrameTruth, SceneSpec};

/// RGBA image, row-major, 4 bytes per pixel.
#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgba: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgba: vec![0; width * height * 4],
        }
    }

    fn set(&mut self, u: usize, v: usize, c: [u8; 3]) {
        let i = 4 * (v * self.width + u);
        self.rgba[i..i + 3].copy_from_slice(&c);
        self.rgba[i + 3] = 255;
    }
}

/// Dark blue to yellow through red, `t` in [0, 1].
fn heat(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 * t).min(1.0)) as u8;
    let g = (255.0 * (2.0 * t - 1.0).max(0.0)) as u8;
    let b = (160.0 * (1.0 - 2.0 * t).max(0.0)) as u8 + 30;
    [r, g, b]
}

#[derive(Debug, Clone, Serialize)]
pub struct SampsonStats {
    pub beta: f64,
    pub patches: usize,
    pub removed: usize,
    pub labelled_dynamic: usize,
    pub removed_dynamic: usize,
    pub median_static_px2: f64,
    pub median_dynamic_px2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DepthReport {
    pub scale: f64,
    pub shift: f64,
    pub noise: f64,
    pub loss: f64,
    pub fitted_scale: f64,
    pub fitted_shift: f64,
    pub unaligned: DepthMetrics,
    pub median: DepthMetrics,
    pub affine: DepthMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowReport {
    pub offset: [f64; 3],
    pub loss: f64,
    pub valid_pixels: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub struct Demo {
    spec: SceneSpec,
    frames: Vec<FrameTruth>,
    k: Intrinsics,
}

impl Demo {
    /// Two frames of the two-disk scene.
    pub fn new(seed: u64) -> Result<Self, String> {
        let spec = SceneSpec::two_disks(seed, 2, true);
        let frames = generate(&spec).map_err(|e| e.to_string())?;
        let k = spec.intrinsics();
        Ok(Self { spec, frames, k })
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    fn flow(&self) -> &FlowField {
        self.frames[0].flow_to_next.as_ref().expect("first frame has a successor")
    }

    /// Per-pixel Sampson distance of the flow correspondences against the
    /// true epipolar geometry, with patches the memory filter drops at `beta`
    /// outlined in white.
    pub fn sampson_view(&self, beta: f64) -> Result<(Image, SampsonStats), String> {
        let (f0, f1) = (&self.frames[0], &self.frames[1]);
        let flow = self.flow();
        let (w, h) = (self.width(), self.height());
        let fundamental = fundamental_from_poses(&f0.pose, &f1.pose, &self.k, &self.k).map_err(|e| e.to_string())?;

        let mut distances = vec![f64::NAN; w * h];
        for v in 0..h {
            for u in 0..w {
                let dst = flow.target(u, v);
                if in_image(&dst, w, h) {
                    if let Ok(d) = sampson_distance(&fundamental, &Vector2::new(u as f64, v as f64), &dst) {
                        distances[v * w + u] = d;
                    }
                }
            }
        }

        let grid = PatchGrid::new(w, h, self.spec.patch_size);
        let config = MemoryConfig {
            beta,
            ..MemoryConfig::new(1, 1)
        };
        let mut bank = DualMemoryBank::new(config).map_err(|e| e.to_string())?;
        let tokens = (0..grid.len())
            .map(|p| MemoryToken {
                key: vec![0.0],
                value: vec![0.0],
                frame_id: 0,
                patch_index: p as u32,
                confidence: 1.0,
                uncertainty: None,
            })
            .collect();
        bank.insert_frame(0, tokens).map_err(|e| e.to_string())?;
        let report = bank.uncertainty_filter_frame(0, flow, &f0.pose, &f1.pose, &self.k, self.spec.patch_size);

        // Log scale up to 100 β so the threshold sits mid-range.
        let top = (100.0 * beta.max(1e-6)).ln_1p();
        let mut img = Image::new(w, h);
        for v in 0..h {
            for u in 0..w {
                let d = distances[v * w + u];
                let c = if d.is_finite() { heat(d.ln_1p() / top) } else { [60, 60, 60] };
                img.set(u, v, c);
            }
        }
        let p = self.spec.patch_size;
        for &patch in &report.removed_patches {
            let (px, py) = (patch as usize % grid.cols() * p, patch as usize / grid.cols() * p);
            for (u, v) in grid.pixels(patch as usize) {
                if u == px || v == py || u == px + p - 1 || v == py + p - 1 {
                    img.set(u, v, [255, 255, 255]);
                }
            }
        }

        let labels = &f0.token_labels;
        let (mut stat, mut dynamic) = (Vec::new(), Vec::new());
        for (i, d) in distances.iter().enumerate().filter(|(_, d)| d.is_finite()) {
            if f0.dynamic_mask[i] {
                dynamic.push(*d)
            } else {
                stat.push(*d)
            }
        }
        let stats = SampsonStats {
            beta,
            patches: grid.len(),
            removed: report.removed,
            labelled_dynamic: labels.iter().filter(|&&l| l).count(),
            removed_dynamic: report.removed_patches.iter().filter(|&&p| labels[p as usize]).count(),
            median_static_px2: median(stat),
            median_dynamic_px2: median(dynamic),
        };
        Ok((img, stats))
    }

    /// Scores `scale·D + shift` (plus seeded Gaussian noise of relative size
    /// `noise`) against the true depth of frame 0.
    pub fn depth_alignment(&self, scale: f64, shift: f64, noise: f64, seed: u64) -> Result<DepthReport, String> {
        let gt = &self.frames[0].depth;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = DepthMap::with_mask(
            gt.width,
            gt.height,
            gt.depth
                .iter()
                .map(|d| {
                    let g: f64 = rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0);
                    scale * d * (1.0 + noise * g) + shift
                })
                .collect(),
            gt.valid.clone(),
        )
        .map_err(|e| e.to_string())?;
        let loss = depth_loss(&pred, gt, 4).map_err(|e| e.to_string())?;
        let fit = align_least_squares(&pred, gt).map_err(|e| e.to_string())?;
        let metrics = |s| depth_metrics(&pred, gt, s).map_err(|e| e.to_string());
        Ok(DepthReport {
            scale,
            shift,
            noise,
            loss: loss.loss.value,
            fitted_scale: fit.scale,
            fitted_shift: fit.shift,
            unaligned: metrics(Scaling::None)?,
            median: metrics(Scaling::Median)?,
            affine: metrics(Scaling::Affine)?,
        })
    }

    /// Flow loss between the two frames with frame 1's pose translated by
    /// `offset` (metres, camera frame), and its per-pixel L1 residual.
    pub fn flow_loss(&self, offset: [f64; 3]) -> Result<(Image, FlowReport), String> {
        let (f0, f1) = (&self.frames[0], &self.frames[1]);
        let pose = SE3Pose::from_translation(Vector3::from(offset)).compose(&f1.pose);
        let out = dflow_loss(&f0.pointmap, &f1.pointmap, self.flow(), &pose, &self.k).map_err(|e| e.to_string())?;
        let (w, h) = (self.width(), self.height());
        let mut per_pixel = vec![f64::NAN; w * h];
        let mut residuals = out.residuals.chunks(2);
        for (i, &m) in out.mask.iter().enumerate() {
            if m {
                let r = residuals.next().ok_or("residuals shorter than mask")?;
                per_pixel[i] = r[0].abs() + r[1].abs();
            }
        }
        let mut img = Image::new(w, h);
        for (i, r) in per_pixel.iter().enumerate() {
            let c = if r.is_finite() { heat(r.ln_1p() / 10f64.ln_1p()) } else { [60, 60, 60] };
            img.set(i % w, i / w, c);
        }
        let report = FlowReport {
            offset,
            loss: out.loss.value,
            valid_pixels: out.loss.pixel_count,
        };
        Ok((img, report))
    }
}
