//! TUM trajectory text: `frame_id tx ty tz qx qy qz qw` per line, camera to
//! world, translation in metres.

use std::fmt::Write as _;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::IoError;
use crate::geometry::SE3Pose;

/// One trajectory line, kept in its text representation so that writing
/// and parsing reproduce it exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumPose {
    pub frame_id: u64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

impl TumPose {
    /// From a world-to-camera pose.
    pub fn from_world_to_camera(frame_id: u64, pose: &SE3Pose) -> Self {
        let c2w = pose.inverse();
        Self {
            frame_id,
            translation: c2w.translation,
            rotation: c2w.quaternion(),
        }
    }

    pub fn camera_to_world(&self) -> SE3Pose {
        SE3Pose::from_quaternion(&self.rotation, self.translation)
    }

    pub fn world_to_camera(&self) -> SE3Pose {
        self.camera_to_world().inverse()
    }
}

/// Shortest representation that parses back to the same `f64`.
fn num(out: &mut String, x: f64) {
    let _ = write!(out, " {x:?}");
}

pub fn format_line(p: &TumPose) -> String {
    let mut s = p.frame_id.to_string();
    for x in p.translation.iter() {
        num(&mut s, *x);
    }
    let q = p.rotation.quaternion();
    for x in [q.i, q.j, q.k, q.w] {
        num(&mut s, x);
    }
    s
}

pub fn format_trajectory(poses: &[TumPose]) -> String {
    poses.iter().map(|p| format_line(p) + "\n").collect()
}

/// Blank lines and `#` comments are skipped. Quaternions must be unit
/// length within 1e-6 and are used as written.
pub fn parse_trajectory(text: &str) -> Result<Vec<TumPose>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| IoError::Parse {
            line: i + 1,
            message: msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", fields.len())));
        }
        let frame_id = fields[0]
            .parse::<u64>()
            .or_else(|_| {
                // Timestamps such as "12.0" are accepted when integral.
                fields[0]
                    .parse::<f64>()
                    .ok()
                    .filter(|t| t.fract() == 0.0 && *t >= 0.0)
                    .map(|t| t as u64)
                    .ok_or(())
            })
            .map_err(|_| bad(format!("invalid frame id {:?}", fields[0])))?;
        let mut v = [0.0; 7];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad(format!("invalid number {f:?}")))?;
        }
        let q = Quaternion::new(v[6], v[3], v[4], v[5]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(bad(format!("quaternion norm {} is not 1", q.norm())));
        }
        out.push(TumPose {
            frame_id,
            translation: Vector3::new(v[0], v[1], v[2]),
            rotation: UnitQuaternion::new_unchecked(q),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let pose = SE3Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0 / 3.0, 2.0, -0.7));
        let p = TumPose::from_world_to_camera(7, &pose);
        let parsed = parse_trajectory(&format_trajectory(&[p])).unwrap();
        assert_eq!(parsed, vec![p]);
        let back = parsed[0].world_to_camera();
        assert!((back.rotation - pose.rotation).amax() < 1e-12);
        assert!((back.translation - pose.translation).amax() < 1e-12);
    }

    #[test]
    fn line_layout_is_w_last() {
        let p = TumPose::from_world_to_camera(3, &SE3Pose::from_translation(Vector3::new(-1.0, 0.0, 0.5)));
        assert_eq!(format_line(&p), "3 1.0 -0.0 -0.5 0.0 0.0 0.0 1.0");
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let text = "# header\n0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0\n";
        match parse_trajectory(text) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_trajectory("0 0 0 0 0 0 0 2\n").is_err());
        assert!(parse_trajectory("0 0 0 nan 0 0 0 1\n").is_err());
    }
}
