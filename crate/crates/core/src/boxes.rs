//! Oriented 3-D boxes and their JSON-lines label format.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = usize;

/// 7-DoF box: center, size (length along the heading), yaw about +z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub class: ClassId,
    #[serde(default)]
    pub num_points: u32,
}

/// Wraps an angle into `[−π, π)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    if (-PI..PI).contains(&yaw) {
        return yaw;
    }
    let y = (yaw + PI).rem_euclid(2.0 * PI) - PI;
    if y >= PI {
        y - 2.0 * PI
    } else {
        y
    }
}

impl OrientedBox {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("box has non-finite fields"));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!(
                "box dimensions must be positive, got {}x{}x{}",
                self.l, self.w, self.h
            )));
        }
        Ok(())
    }

    /// Coordinates of `(x, y)` in the box frame: `u` along the heading, `v` across.
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Whether a 3-D point lies inside the box, inflated by `tol` on every face.
    pub fn contains(&self, x: f64, y: f64, z: f64, tol: f64) -> bool {
        let (u, v) = self.to_local(x, y);
        u.abs() <= self.l / 2.0 + tol
            && v.abs() <= self.w / 2.0 + tol
            && (z - self.cz).abs() <= self.h / 2.0 + tol
    }

    /// Counter-clockwise BEV corners.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| {
            // (u, v) listed so the polygon is counter-clockwise for positive dims
            (self.cx + c * u - s * v, self.cy + s * u + c * v)
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn range(&self) -> f64 {
        self.cx.hypot(self.cy)
    }
}

pub fn write_labels(path: impl AsRef<Path>, boxes: &[OrientedBox]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for b in boxes {
        serde_json::to_writer(&mut out, b)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<OrientedBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut boxes = Vec::new();
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let b: OrientedBox = serde_json::from_str(trimmed).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset,
                reason: e.to_string(),
            })?;
            b.validate()?;
            boxes.push(b);
        }
        offset += line.len() as u64;
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(yaw: f64) -> OrientedBox {
        OrientedBox {
            cx: 1.0,
            cy: -2.0,
            cz: 0.0,
            l: 4.0,
            w: 2.0,
            h: 1.5,
            yaw,
            class: 0,
            num_points: 0,
        }
    }

    #[test]
    fn yaw_wraps_into_half_open_interval() {
        assert_eq!(normalize_yaw(PI), -PI);
        assert!((normalize_yaw(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_yaw(0.25), 0.25);
        assert!((normalize_yaw(-PI - 0.1) - (PI - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn corners_are_counter_clockwise() {
        let b = unit_box(0.7);
        let c = b.corners();
        let area: f64 = (0..4)
            .map(|i| {
                let (p, q) = (c[i], c[(i + 1) % 4]);
                p.0 * q.1 - q.0 * p.1
            })
            .sum::<f64>()
            / 2.0;
        assert!((area - 8.0).abs() < 1e-9);
    }

    #[test]
    fn containment_follows_heading() {
        let b = unit_box(PI / 2.0);
        // heading is +y, so the 4 m side runs along y
        assert!(b.contains(1.0, -0.1, 0.0, 0.0));
        assert!(!b.contains(2.5, -2.0, 0.0, 0.0));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        let boxes = vec![unit_box(0.1), unit_box(-1.0)];
        write_labels(&p, &boxes).unwrap();
        assert_eq!(read_labels(&p).unwrap(), boxes);
        std::fs::write(&p, "{\"cx\":1}\n").unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Format { offset: 0, .. })));
    }
}
