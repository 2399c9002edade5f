//! Dataset directories:
//!
//! ```text
//! manifest.json
//! frames/000000/{pointmap.bin,conf.bin,depth.bin,flow.bin,pose.txt,labels.bin}
//! frames/000001/...
//! ```
//!
//! `flow.bin` maps a frame to the next one and is absent on the last frame.
//! `pose.txt` holds one TUM line for the frame.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{self, read_confidence, read_depth, read_flow, read_labels, read_points};
use super::tum::{format_line, parse_trajectory, TumPose};
use super::IoError;
use crate::geometry::{DepthMap, FlowField, Intrinsics, Pointmap, SE3Pose};
use crate::memory::PatchGrid;
use crate::pipeline::Sequence;
use crate::synth::{token_labels, FrameTruth, SceneSpec};

pub const MANIFEST_SCHEMA: &str = "recon.dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub intrinsics: ManifestIntrinsics,
    /// Generator settings, when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

impl Manifest {
    pub fn intrinsics(&self) -> Intrinsics {
        let k = &self.intrinsics;
        Intrinsics::new(k.fx, k.fy, k.cx, k.cy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub frame_id: u64,
    /// World-frame points with per-pixel confidence.
    pub pointmap: Pointmap,
    pub depth: DepthMap,
    pub pose: TumPose,
    pub flow_to_next: Option<FlowField>,
    pub dynamic_mask: Vec<bool>,
}

impl DatasetFrame {
    pub fn world_to_camera(&self) -> SE3Pose {
        self.pose.world_to_camera()
    }
}

/// Everything stored in a dataset directory. Values are exactly
/// representable in the on-disk precision, so writing then reading
/// reproduces the struct.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<DatasetFrame>,
}

fn q(x: f64) -> f64 {
    x as f32 as f64
}

impl Dataset {
    /// Rounds generated ground truth to storage precision.
    pub fn from_truth(spec: &SceneSpec, truth: &[FrameTruth]) -> Result<Self, IoError> {
        let k = spec.intrinsics();
        let frames = truth
            .iter()
            .map(|t| {
                let pm = &t.pointmap;
                let pointmap = Pointmap::new(
                    pm.width,
                    pm.height,
                    pm.points.iter().map(|p| p.map(q)).collect(),
                    pm.confidence.iter().map(|&c| q(c)).collect(),
                )?;
                let depth = DepthMap::with_mask(
                    t.depth.width,
                    t.depth.height,
                    t.depth
                        .depth
                        .iter()
                        .zip(&t.depth.valid)
                        .map(|(&d, &ok)| if ok { q(d) } else { 0.0 })
                        .collect(),
                    t.depth.valid.clone(),
                )?;
                let flow_to_next = t
                    .flow_to_next
                    .as_ref()
                    .map(|f| FlowField::new(f.width, f.height, f.flow.iter().map(|v| v.map(q)).collect()))
                    .transpose()?;
                Ok(DatasetFrame {
                    frame_id: t.frame_id,
                    pointmap,
                    depth,
                    pose: TumPose::from_world_to_camera(t.frame_id, &t.pose),
                    flow_to_next,
                    dynamic_mask: t.dynamic_mask.clone(),
                })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        Ok(Dataset {
            manifest: Manifest {
                schema: MANIFEST_SCHEMA.to_string(),
                width: spec.width,
                height: spec.height,
                n_frames: truth.len(),
                seed: spec.seed,
                patch_size: spec.patch_size,
                intrinsics: ManifestIntrinsics {
                    fx: k.fx,
                    fy: k.fy,
                    cx: k.cx,
                    cy: k.cy,
                },
                scene: Some(spec.clone()),
            },
            frames,
        })
    }

    pub fn sequence(&self) -> Sequence {
        Sequence {
            frame_ids: self.frames.iter().map(|f| f.frame_id).collect(),
            flows: (0..self.frames.len())
                .map(|k| if k == 0 { None } else { self.frames[k - 1].flow_to_next.clone() })
                .collect(),
        }
    }

    pub fn pointmaps(&self) -> Vec<Pointmap> {
        self.frames.iter().map(|f| f.pointmap.clone()).collect()
    }

    /// Per-patch labels under the manifest's patch size.
    pub fn token_labels(&self, index: usize) -> Vec<bool> {
        let m = &self.manifest;
        token_labels(&PatchGrid::new(m.width, m.height, m.patch_size), &self.frames[index].dynamic_mask)
    }
}

pub fn frame_dir(root: &Path, frame_id: u64) -> PathBuf {
    root.join("frames").join(format!("{frame_id:06}"))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, IoError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| IoError::at(path, e))
}

fn open(path: &Path) -> Result<std::io::BufReader<fs::File>, IoError> {
    fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| IoError::at(path, e))
}

/// Adds the file name to format errors.
fn in_file<T>(path: &Path, r: Result<T, IoError>) -> Result<T, IoError> {
    r.map_err(|e| match e {
        IoError::Format(m) => IoError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_dataset(root: &Path, data: &Dataset) -> Result<(), IoError> {
    fs::create_dir_all(root.join("frames")).map_err(|e| IoError::at(root, e))?;
    let manifest = serde_json::to_string_pretty(&data.manifest).map_err(|e| IoError::Format(e.to_string()))?;
    fs::write(root.join("manifest.json"), manifest + "\n").map_err(|e| IoError::at(root, e))?;
    for f in &data.frames {
        let dir = frame_dir(root, f.frame_id);
        fs::create_dir_all(&dir).map_err(|e| IoError::at(&dir, e))?;
        grid::write_points(&mut create(&dir.join("pointmap.bin"))?, &f.pointmap)?;
        grid::write_confidence(&mut create(&dir.join("conf.bin"))?, &f.pointmap)?;
        grid::write_depth(&mut create(&dir.join("depth.bin"))?, &f.depth)?;
        if let Some(flow) = &f.flow_to_next {
            grid::write_flow(&mut create(&dir.join("flow.bin"))?, flow)?;
        }
        grid::write_labels(
            &mut create(&dir.join("labels.bin"))?,
            f.pointmap.width,
            f.pointmap.height,
            &f.dynamic_mask,
        )?;
        let pose = dir.join("pose.txt");
        fs::write(&pose, format_line(&f.pose) + "\n").map_err(|e| IoError::at(&pose, e))?;
    }
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest, IoError> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| IoError::at(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| IoError::Format(format!("{}: {e}", path.display())))?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(IoError::Format(format!("unsupported manifest schema {:?}", m.schema)));
    }
    if m.width == 0 || m.height == 0 || m.n_frames == 0 {
        return Err(IoError::Format("manifest has an empty image or no frames".into()));
    }
    m.intrinsics()
        .validate(m.width, m.height)
        .map_err(|e| IoError::Format(format!("manifest intrinsics: {e}")))?;
    Ok(m)
}

/// Reads and cross-checks a dataset. Every frame but the last needs a flow.
pub fn read_dataset(root: &Path) -> Result<Dataset, IoError> {
    let manifest = read_manifest(root)?;
    let (w, h) = (manifest.width, manifest.height);
    let shape = |path: &Path, fw: usize, fh: usize| {
        if (fw, fh) == (w, h) {
            Ok(())
        } else {
            Err(IoError::Format(format!("{}: {fw}x{fh}, manifest says {w}x{h}", path.display())))
        }
    };
    let mut frames = Vec::with_capacity(manifest.n_frames);
    for i in 0..manifest.n_frames {
        let frame_id = i as u64;
        let dir = frame_dir(root, frame_id);
        let p = dir.join("pointmap.bin");
        let (pw, ph, points) = in_file(&p, read_points(&mut open(&p)?))?;
        shape(&p, pw, ph)?;
        let c = dir.join("conf.bin");
        let (cw, chh, conf) = in_file(&c, read_confidence(&mut open(&c)?))?;
        shape(&c, cw, chh)?;
        let pointmap = Pointmap::new(w, h, points, conf)?;
        let d = dir.join("depth.bin");
        let depth = in_file(&d, read_depth(&mut open(&d)?))?;
        shape(&d, depth.width, depth.height)?;
        let fpath = dir.join("flow.bin");
        let flow_to_next = if i + 1 < manifest.n_frames {
            if !fpath.exists() {
                return Err(IoError::FlowMissing { frame: frame_id });
            }
            let flow = in_file(&fpath, read_flow(&mut open(&fpath)?))?;
            shape(&fpath, flow.width, flow.height)?;
            Some(flow)
        } else {
            None
        };
        let l = dir.join("labels.bin");
        let dynamic_mask = if l.exists() {
            let (lw, lh, mask) = in_file(&l, read_labels(&mut open(&l)?))?;
            shape(&l, lw, lh)?;
            mask
        } else {
            vec![false; w * h]
        };
        let t = dir.join("pose.txt");
        let text = fs::read_to_string(&t).map_err(|e| IoError::at(&t, e))?;
        let poses = parse_trajectory(&text)?;
        let [pose] = poses.as_slice() else {
            return Err(IoError::Format(format!("{}: expected exactly one pose line", t.display())));
        };
        frames.push(DatasetFrame {
            frame_id,
            pointmap,
            depth,
            pose: *pose,
            flow_to_next,
            dynamic_mask,
        });
    }
    Ok(Dataset { manifest, frames })
}
