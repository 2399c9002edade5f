//! Deterministic synthetic scenes with exact ground truth.
//!
//! The world is a smooth height field `z = base + Σ bumps(x, y)` seen by a
//! pinhole camera moving along a parametric path. Disks of the surface
//! deform over time: a material point `(x, y)` sits at
//! `(x, y, z(x, y)) + A·sin(ω t + φ)·w(ρ)` where `w` is flat in the disk's
//! core and falls smoothly to zero at its rim. Pointmaps are found by ray
//! casting every pixel onto the deformed surface; flow follows the material
//! point into the next camera.

mod oracle;

pub use oracle::{clean_confidence, CorruptionSpec, OraclePredictor};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{depth_from_pointmap, project, DepthMap, FlowField, Intrinsics, Pointmap, SE3Pose};
use crate::memory::PatchGrid;

/// Default radius fraction of a deform region that moves with full amplitude.
pub const FLAT_TOP: f64 = 0.6;

fn default_flat_top() -> f64 {
    FLAT_TOP
}
const RAYCAST_ITERATIONS: usize = 60;
const RAYCAST_TOLERANCE: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("ray cast failed at frame {frame}, pixel ({u}, {v})")]
    RayCast { frame: usize, u: usize, v: usize },
}

/// Camera-to-world motion: centre `v·t + a·sin(ω t)` and rotation vector
/// `ω_r·t + b·sin(ω t)`, with `t` the frame index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    /// Metres per frame.
    pub velocity: [f64; 3],
    /// Radians per frame.
    pub angular_velocity: [f64; 3],
    pub wobble_translation: [f64; 3],
    pub wobble_rotation: [f64; 3],
    /// Radians per frame.
    pub wobble_frequency: f64,
}

impl CameraPath {
    pub fn translation(velocity: [f64; 3]) -> Self {
        Self {
            velocity,
            angular_velocity: [0.0; 3],
            wobble_translation: [0.0; 3],
            wobble_rotation: [0.0; 3],
            wobble_frequency: 0.0,
        }
    }

    /// World-to-camera pose of frame `t`.
    pub fn pose(&self, t: usize) -> SE3Pose {
        let t = t as f64;
        let s = (self.wobble_frequency * t).sin();
        let c = Vector3::from(self.velocity) * t + Vector3::from(self.wobble_translation) * s;
        let r = Vector3::from(self.angular_velocity) * t + Vector3::from(self.wobble_rotation) * s;
        if t == 0.0 {
            return SE3Pose::identity();
        }
        SE3Pose::from_axis_angle(r, c).inverse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    /// Metres in front of the first camera.
    pub base_depth: f64,
    pub n_bumps: usize,
    /// Largest bump height (metres, either sign).
    pub bump_height: f64,
    /// Gaussian bump width (metres).
    pub bump_sigma: f64,
}

/// A deforming disk, given in frame-0 pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformRegion {
    pub center: [f64; 2],
    pub radius: f64,
    /// Peak displacement (metres).
    pub amplitude: [f64; 3],
    /// Temporal phase (radians).
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Noise {
    /// Metres, added to every pointmap coordinate.
    pub pointmap_sigma: f64,
    /// Pixels, added to every flow component.
    pub flow_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    /// Shared focal length (pixels); the principal point is the image centre.
    pub focal: f64,
    pub patch_size: usize,
    pub camera: CameraPath,
    pub surface: Surface,
    pub deform_regions: Vec<DeformRegion>,
    /// Radians per frame.
    pub deform_frequency: f64,
    /// Radius fraction of every deform region that moves rigidly; the rest
    /// of the disk blends smoothly to the static surface.
    #[serde(default = "default_flat_top")]
    pub deform_flat_top: f64,
    #[serde(default)]
    pub noise: Noise,
}

impl SceneSpec {
    /// A gently curved rigid scene with a camera drifting sideways and
    /// slightly rotating.
    pub fn rigid(seed: u64, width: usize, height: usize, n_frames: usize) -> Self {
        Self {
            seed,
            width,
            height,
            n_frames,
            focal: 0.9 * width as f64,
            patch_size: 16,
            camera: CameraPath {
                velocity: [0.01, 0.004, 0.005],
                angular_velocity: [0.002, -0.003, 0.001],
                wobble_translation: [0.0, 0.005, 0.0],
                wobble_rotation: [0.002, 0.0, 0.0],
                wobble_frequency: 0.3,
            },
            surface: Surface {
                base_depth: 1.0,
                n_bumps: 6,
                bump_height: 0.08,
                bump_sigma: 0.15,
            },
            deform_regions: Vec::new(),
            deform_frequency: 0.5,
            deform_flat_top: FLAT_TOP,
            noise: Noise::default(),
        }
    }

    /// 320x256 scene with two disks oscillating vertically in opposite
    /// extremes on consecutive frames, roughly a fifth of the patches. The
    /// camera only translates. Without `deforming` the disks stay still.
    pub fn two_disks(seed: u64, n_frames: usize, deforming: bool) -> Self {
        let mut spec = Self::rigid(seed, 320, 256, n_frames);
        spec.focal = 200.0;
        spec.camera = CameraPath::translation([0.05, 0.0, 0.0]);
        spec.deform_flat_top = 0.85;
        spec.deform_frequency = std::f64::consts::PI;
        if deforming {
            spec.deform_regions = [[90.0, 100.0], [235.0, 160.0]]
                .into_iter()
                .map(|center| DeformRegion {
                    center,
                    radius: 51.0,
                    amplitude: [0.0, 0.019, 0.0],
                    phase: std::f64::consts::FRAC_PI_2,
                })
                .collect();
        }
        spec
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.focal, self.width, self.height)
    }

    pub fn patch_grid(&self) -> PatchGrid {
        PatchGrid::new(self.width, self.height, self.patch_size)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.width < 2 || self.height < 2 {
            return bad(format!("image {}x{} is too small", self.width, self.height));
        }
        if self.n_frames == 0 {
            return bad("n_frames must be >= 1".into());
        }
        if self.patch_size == 0 {
            return bad("patch_size must be >= 1".into());
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return bad(format!("focal must be > 0, got {}", self.focal));
        }
        let s = &self.surface;
        if !(s.base_depth > 0.0 && s.base_depth.is_finite()) {
            return bad(format!("base_depth must be > 0, got {}", s.base_depth));
        }
        if s.n_bumps > 0 && !(s.bump_sigma > 0.0 && s.bump_height.is_finite()) {
            return bad("bumps need a positive bump_sigma and finite bump_height".into());
        }
        if !(self.noise.pointmap_sigma >= 0.0 && self.noise.flow_sigma >= 0.0) {
            return bad("noise sigmas must be >= 0".into());
        }
        let c = &self.camera;
        let all = c
            .velocity
            .iter()
            .chain(&c.angular_velocity)
            .chain(&c.wobble_translation)
            .chain(&c.wobble_rotation)
            .chain([&c.wobble_frequency, &self.deform_frequency]);
        if !(self.deform_flat_top >= 0.0 && self.deform_flat_top < 1.0) {
            return bad(format!("deform_flat_top must be in [0, 1), got {}", self.deform_flat_top));
        }
        if all.into_iter().any(|x| !x.is_finite()) {
            return bad("camera path and deform frequency must be finite".into());
        }
        let mut area = 0.0;
        for (i, r) in self.deform_regions.iter().enumerate() {
            if !(r.radius > 0.0) || r.amplitude.iter().chain(&r.center).any(|x| !x.is_finite()) || !r.phase.is_finite() {
                return bad(format!("deform region {i} has a non-positive radius or non-finite values"));
            }
            for (j, q) in self.deform_regions.iter().enumerate().skip(i + 1) {
                let d = Vector2::from(r.center) - Vector2::from(q.center);
                if d.norm() < r.radius + q.radius {
                    return bad(format!("deform regions {i} and {j} overlap"));
                }
            }
            area += std::f64::consts::PI * r.radius * r.radius;
        }
        if area > 0.5 * (self.width * self.height) as f64 {
            return bad("deform regions cover more than half the image".into());
        }
        Ok(())
    }
}

/// Ground truth of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub frame_id: u64,
    /// World-frame points; confidence is [`clean_confidence`] everywhere.
    pub pointmap: Pointmap,
    pub depth: DepthMap,
    /// World-to-camera.
    pub pose: SE3Pose,
    /// Flow to the next frame; absent on the last frame.
    pub flow_to_next: Option<FlowField>,
    /// Pixels whose world point moves before the next frame.
    pub dynamic_mask: Vec<bool>,
    /// Per patch: at least half of its pixels are dynamic.
    pub token_labels: Vec<bool>,
}

/// A scene spec with its random bumps and world-space regions resolved.
struct Scene {
    k: Intrinsics,
    base: f64,
    bumps: Vec<(f64, f64, f64)>,
    sigma: f64,
    regions: Vec<WorldRegion>,
    omega: f64,
    flat_top: f64,
    camera: CameraPath,
}

struct WorldRegion {
    center: Vector2<f64>,
    radius: f64,
    amplitude: Vector3<f64>,
    phase: f64,
}

/// 1 inside `flat_top`, smoothstep to 0 at the rim.
fn profile(rho: f64, flat_top: f64) -> f64 {
    if rho <= flat_top {
        1.0
    } else if rho >= 1.0 {
        0.0
    } else {
        let s = (rho - flat_top) / (1.0 - flat_top);
        1.0 - s * s * (3.0 - 2.0 * s)
    }
}

impl Scene {
    fn new(spec: &SceneSpec) -> Result<Self, SynthError> {
        let k = spec.intrinsics();
        let base = spec.surface.base_depth;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (hw, hh) = (spec.width as f64 / 2.0 / k.fx * base, spec.height as f64 / 2.0 / k.fy * base);
        let ux = Uniform::new_inclusive(-hw, hw).expect("finite footprint");
        let uy = Uniform::new_inclusive(-hh, hh).expect("finite footprint");
        let uh = Uniform::new_inclusive(-1.0, 1.0).expect("unit range");
        let bumps = (0..spec.surface.n_bumps)
            .map(|_| (ux.sample(&mut rng), uy.sample(&mut rng), spec.surface.bump_height * uh.sample(&mut rng)))
            .collect();
        let mut scene = Scene {
            k,
            base,
            bumps,
            sigma: spec.surface.bump_sigma,
            regions: Vec::new(),
            omega: spec.deform_frequency,
            flat_top: spec.deform_flat_top,
            camera: spec.camera,
        };
        let mut regions = Vec::new();
        for (i, r) in spec.deform_regions.iter().enumerate() {
            let px = Vector2::from(r.center);
            let (m, lam) = scene
                .raycast(&SE3Pose::identity(), &px, None)
                .ok_or_else(|| SynthError::InvalidSpec(format!("deform region {i} centre misses the surface")))?;
            regions.push(WorldRegion {
                center: m,
                // Radius measured at the depth of the centre.
                radius: r.radius * lam / k.fx,
                amplitude: Vector3::from(r.amplitude),
                phase: r.phase,
            });
        }
        scene.regions = regions;
        Ok(scene)
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        let s2 = 2.0 * self.sigma * self.sigma;
        self.base
            + self
                .bumps
                .iter()
                .map(|&(bx, by, h)| h * (-((x - bx).powi(2) + (y - by).powi(2)) / s2).exp())
                .sum::<f64>()
    }

    fn displacement(&self, m: &Vector2<f64>, t: f64) -> Vector3<f64> {
        self.regions
            .iter()
            .map(|r| {
                let w = profile((m - r.center).norm() / r.radius, self.flat_top);
                if w == 0.0 {
                    Vector3::zeros()
                } else {
                    r.amplitude * ((self.omega * t + r.phase).sin() * w)
                }
            })
            .sum()
    }

    /// World position of material point `m` at time `t` (`None`: at rest).
    fn position(&self, m: &Vector2<f64>, t: Option<f64>) -> Vector3<f64> {
        let rest = Vector3::new(m.x, m.y, self.height(m.x, m.y));
        match t {
            Some(t) => rest + self.displacement(m, t),
            None => rest,
        }
    }

    /// Material point seen through pixel `px` of camera `pose`, with the ray
    /// parameter (camera-frame depth). Newton on `(x, y, λ)`.
    fn raycast(&self, pose: &SE3Pose, px: &Vector2<f64>, t: Option<f64>) -> Option<(Vector2<f64>, f64)> {
        let inv = pose.inverse();
        let c = inv.translation;
        let dir = inv.rotation * self.k.backproject(px, 1.0);
        let mut lam = (self.base - c.z) / dir.z;
        if !(lam > 0.0) {
            return None;
        }
        let mut m = Vector2::new(c.x + lam * dir.x, c.y + lam * dir.y);
        let h = 1e-6 * self.base;
        for _ in 0..RAYCAST_ITERATIONS {
            let f = self.position(&m, t) - c - dir * lam;
            let dx = (self.position(&(m + Vector2::new(h, 0.0)), t) - self.position(&(m - Vector2::new(h, 0.0)), t)) / (2.0 * h);
            let dy = (self.position(&(m + Vector2::new(0.0, h)), t) - self.position(&(m - Vector2::new(0.0, h)), t)) / (2.0 * h);
            let j = Matrix3::from_columns(&[dx, dy, -dir]);
            let step = j.lu().solve(&f)?;
            m -= Vector2::new(step.x, step.y);
            lam -= step.z;
            if step.amax() < RAYCAST_TOLERANCE * self.base {
                return (lam > 0.0).then_some((m, lam));
            }
        }
        let f = self.position(&m, t) - c - dir * lam;
        (lam > 0.0 && f.norm() < 1e-9 * self.base).then_some((m, lam))
    }
}

/// Pixels whose flow target cannot be computed point far outside the image.
const OFF_IMAGE: f64 = -1e6;

fn generate_frame(spec: &SceneSpec, scene: &Scene, t: usize) -> Result<FrameTruth, SynthError> {
    let (w, h) = (spec.width, spec.height);
    let pose = scene.camera.pose(t);
    let next_pose = scene.camera.pose(t + 1);
    let (tf, tn) = (t as f64, (t + 1) as f64);
    let mut points = Vec::with_capacity(w * h);
    let mut flow = Vec::with_capacity(w * h);
    let mut dynamic = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let px = Vector2::new(u as f64, v as f64);
            let (m, _) = scene
                .raycast(&pose, &px, Some(tf))
                .ok_or(SynthError::RayCast { frame: t, u, v })?;
            let now = scene.position(&m, Some(tf));
            let next = scene.position(&m, Some(tn));
            points.push(now);
            dynamic.push(next != now);
            flow.push(match project(&scene.k, &next_pose, &next) {
                Ok(p) => p - px,
                Err(_) => Vector2::new(OFF_IMAGE, OFF_IMAGE),
            });
        }
    }

    let noise = spec.noise;
    if noise.pointmap_sigma > 0.0 || noise.flow_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(t as u64 + 1);
        if noise.pointmap_sigma > 0.0 {
            let n = Normal::new(0.0, noise.pointmap_sigma).expect("sigma checked");
            for p in &mut points {
                *p += Vector3::from_fn(|_, _| n.sample(&mut rng));
            }
        }
        if noise.flow_sigma > 0.0 {
            let n = Normal::new(0.0, noise.flow_sigma).expect("sigma checked");
            for f in &mut flow {
                *f += Vector2::from_fn(|_, _| n.sample(&mut rng));
            }
        }
    }

    let pointmap = Pointmap::new(w, h, points, vec![clean_confidence(); w * h]).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let depth = depth_from_pointmap(&pointmap, &pose);
    let flow_to_next = if t + 1 < spec.n_frames {
        Some(FlowField::new(w, h, flow).map_err(|e| SynthError::InvalidSpec(e.to_string()))?)
    } else {
        None
    };
    let token_labels = token_labels(&spec.patch_grid(), &dynamic);
    Ok(FrameTruth {
        frame_id: t as u64,
        pointmap,
        depth,
        pose,
        flow_to_next,
        dynamic_mask: dynamic,
        token_labels,
    })
}

/// A patch is dynamic when at least half of its pixels are.
pub fn token_labels(grid: &PatchGrid, dynamic_mask: &[bool]) -> Vec<bool> {
    (0..grid.len())
        .map(|p| {
            let (mut total, mut moving) = (0usize, 0usize);
            for (u, v) in grid.pixels(p) {
                total += 1;
                moving += dynamic_mask[v * grid.width + u] as usize;
            }
            2 * moving >= total
        })
        .collect()
}

/// Generates every frame of `spec`. Identical specs give identical output.
pub fn generate(spec: &SceneSpec) -> Result<Vec<FrameTruth>, SynthError> {
    spec.validate()?;
    let scene = Scene::new(spec)?;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..spec.n_frames)
            .into_par_iter()
            .map(|t| generate_frame(spec, &scene, t))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..spec.n_frames).map(|t| generate_frame(spec, &scene, t)).collect()
    }
}
