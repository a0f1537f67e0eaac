//! Point clouds, pillar BEV encoding and training-time augmentation.

use std::f64::consts::FRAC_PI_4;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{normalize_yaw, OrientedBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.intensity] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses packed little-endian `(x, y, z, intensity)` f32 quadruples.
    /// Returns the cloud and the number of non-finite points dropped; on a
    /// truncated buffer, the error carries the offset of the partial record.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(PointCloud, usize), u64> {
        if bytes.len() % 16 != 0 {
            return Err((bytes.len() - bytes.len() % 16) as u64);
        }
        let mut dropped = 0;
        let points = bytes
            .chunks_exact(16)
            .filter_map(|rec| {
                let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]);
                let p = Point {
                    x: f(0),
                    y: f(4),
                    z: f(8),
                    intensity: f(12),
                };
                if [p.x, p.y, p.z, p.intensity].iter().all(|v| v.is_finite()) {
                    Some(p)
                } else {
                    dropped += 1;
                    None
                }
            })
            .collect();
        Ok((PointCloud { points }, dropped))
    }
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cloud, dropped) = PointCloud::from_bytes(&bytes).map_err(|offset| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: format!("truncated point record ({} bytes is not a multiple of 16)", bytes.len()),
    })?;
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} non-finite points", path.display());
    }
    Ok(cloud)
}

pub fn save_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cloud.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Metric extent and BEV cell size of the pillar grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub cell: (f64, f64),
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VoxelConfig {
    /// 51.2 m square at 0.4 m: 128×128.
    pub fn desk() -> Self {
        VoxelConfig {
            x_range: (-25.6, 25.6),
            y_range: (-25.6, 25.6),
            z_range: (-3.0, 3.0),
            cell: (0.4, 0.4),
        }
    }

    /// KITTI at 0.16 m: 432×496.
    pub fn kitti() -> Self {
        VoxelConfig {
            x_range: (0.0, 69.12),
            y_range: (-39.68, 39.68),
            z_range: (-3.5, 1.5),
            cell: (0.16, 0.16),
        }
    }

    /// nuScenes at 0.075 m: 1440×1440.
    pub fn nuscenes() -> Self {
        VoxelConfig {
            x_range: (-54.0, 54.0),
            y_range: (-54.0, 54.0),
            z_range: (-5.0, 3.0),
            cell: (0.075, 0.075),
        }
    }

    /// nuScenes pillar variant at 0.2 m: 512×512.
    pub fn nuscenes_pillar() -> Self {
        VoxelConfig {
            x_range: (-51.2, 51.2),
            y_range: (-51.2, 51.2),
            z_range: (-5.0, 3.0),
            cell: (0.2, 0.2),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "kitti" => Ok(Self::kitti()),
            "nuscenes" => Ok(Self::nuscenes()),
            "nuscenes_pillar" => Ok(Self::nuscenes_pillar()),
            _ => Err(Error::invalid(format!("unknown voxel preset {name}"))),
        }
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        let axis = |(lo, hi): (f64, f64), cell: f64, name: &str| -> Result<usize> {
            if !(hi > lo) || !(cell > 0.0) {
                return Err(Error::invalid(format!("{name}: need max > min and a positive cell")));
            }
            let n = (hi - lo) / cell;
            let rounded = n.round();
            if (n - rounded).abs() > 1e-6 || rounded < 1.0 {
                return Err(Error::invalid(format!(
                    "{name}: extent {} is not a whole number of {cell} m cells",
                    hi - lo
                )));
            }
            Ok(rounded as usize)
        };
        if !(self.z_range.1 > self.z_range.0) {
            return Err(Error::invalid("z_range: need max > min"));
        }
        Ok(GridGeometry {
            x_min: self.x_range.0,
            y_min: self.y_range.0,
            cell_x: self.cell.0,
            cell_y: self.cell.1,
            cols: axis(self.x_range, self.cell.0, "x_range")?,
            rows: axis(self.y_range, self.cell.1, "y_range")?,
        })
    }
}

/// Affine map between BEV cells and ego-frame meters. Rows run along +y,
/// columns along +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub x_min: f64,
    pub y_min: f64,
    pub cell_x: f64,
    pub cell_y: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell_x,
            self.y_min + (row as f64 + 0.5) * self.cell_y,
        )
    }

    /// `(row, col)` of the cell containing `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.x_min) / self.cell_x).floor();
        let r = ((y - self.y_min) / self.cell_y).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.cols as f64 * self.cell_x
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.rows as f64 * self.cell_y
    }

    /// Coarser grid over the same extent, `factor` cells merged per axis.
    pub fn downsample(&self, factor: usize) -> Result<GridGeometry> {
        if factor == 0 || self.rows % factor != 0 || self.cols % factor != 0 {
            return Err(Error::invalid(format!(
                "{}x{} grid is not divisible by {factor}",
                self.rows, self.cols
            )));
        }
        Ok(GridGeometry {
            cell_x: self.cell_x * factor as f64,
            cell_y: self.cell_y * factor as f64,
            rows: self.rows / factor,
            cols: self.cols / factor,
            ..*self
        })
    }
}

pub const BEV_CHANNELS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    /// `1×6×H×W`: log1p(count), mean z, max z, mean intensity, mean x and y
    /// offset from the cell center.
    pub features: Tensor<f32>,
    pub geometry: GridGeometry,
}

pub fn pillarize(cloud: &PointCloud, config: &VoxelConfig) -> Result<BevGrid> {
    let g = config.geometry()?;
    let plane = g.rows * g.cols;
    let mut count = vec![0u32; plane];
    let mut sums = vec![[0.0f64; 4]; plane]; // z, intensity, dx, dy
    let mut max_z = vec![f64::NEG_INFINITY; plane];
    for p in &cloud.points {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        if z < config.z_range.0 || z >= config.z_range.1 {
            continue;
        }
        let Some((r, c)) = g.cell_of(x, y) else { continue };
        let idx = r * g.cols + c;
        let (cx, cy) = g.cell_center(r, c);
        count[idx] += 1;
        let s = &mut sums[idx];
        s[0] += z;
        s[1] += p.intensity as f64;
        s[2] += x - cx;
        s[3] += y - cy;
        max_z[idx] = max_z[idx].max(z);
    }
    let mut data = vec![0.0f32; BEV_CHANNELS * plane];
    for idx in 0..plane {
        let n = count[idx];
        if n == 0 {
            continue;
        }
        let nf = n as f64;
        let s = &sums[idx];
        let vals = [
            nf.ln_1p(),
            s[0] / nf,
            max_z[idx],
            s[1] / nf,
            s[2] / nf,
            s[3] / nf,
        ];
        for (ch, v) in vals.into_iter().enumerate() {
            data[ch * plane + idx] = v as f32;
        }
    }
    Ok(BevGrid {
        features: Tensor::new(vec![1, BEV_CHANNELS, g.rows, g.cols], data)?,
        geometry: g,
    })
}

/// One sampled set of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle: f64,
    pub scale: f64,
}

impl AugmentDraw {
    pub const SCALE_RANGE: (f64, f64) = (0.95, 1.05);

    pub fn identity() -> Self {
        AugmentDraw {
            flip: false,
            angle: 0.0,
            scale: 1.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentDraw {
            flip: rng.gen_bool(0.5),
            angle: rng.gen_range(-FRAC_PI_4..=FRAC_PI_4),
            scale: rng.gen_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1),
        }
    }

    /// Maps a 2-D ego-frame location: flip (y → −y), rotate, scale.
    pub fn apply_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let y = if self.flip { -y } else { y };
        let (s, c) = self.angle.sin_cos();
        ((c * x - s * y) * self.scale, (s * x + c * y) * self.scale)
    }

    pub fn apply_box(&self, b: &OrientedBox) -> OrientedBox {
        let (cx, cy) = self.apply_xy(b.cx, b.cy);
        let yaw = if self.flip { -b.yaw } else { b.yaw };
        OrientedBox {
            cx,
            cy,
            cz: b.cz * self.scale,
            l: b.l * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
            yaw: normalize_yaw(yaw + self.angle),
            ..*b
        }
    }
}

pub fn apply_augmentation(
    cloud: &PointCloud,
    boxes: &[OrientedBox],
    draw: &AugmentDraw,
) -> (PointCloud, Vec<OrientedBox>) {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let (x, y) = draw.apply_xy(p.x as f64, p.y as f64);
            Point {
                x: x as f32,
                y: y as f32,
                z: (p.z as f64 * draw.scale) as f32,
                intensity: p.intensity,
            }
        })
        .collect();
    let boxes = boxes.iter().map(|b| draw.apply_box(b)).collect();
    (PointCloud { points }, boxes)
}

/// Random flip along x, rotation in `[−π/4, π/4]` and scaling, all seeded.
pub fn augment(cloud: &PointCloud, boxes: &[OrientedBox], seed: u64) -> (PointCloud, Vec<OrientedBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_augmentation(cloud, boxes, &AugmentDraw::sample(&mut rng))
}
