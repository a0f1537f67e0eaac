//! Heatmap peaks to oriented boxes.

use serde::{Deserialize, Serialize};

use crate::bev::GridGeometry;
use crate::boxes::{normalize_yaw, ClassId, OrientedBox};
use crate::error::{Error, Result};
use crate::targets::BOX_CHANNELS;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub class: ClassId,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: OrientedBox,
    pub score: f64,
    pub class: ClassId,
}

/// Flat JSON form of a detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: String,
    pub class: ClassId,
    pub score: f64,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl DetectionRecord {
    pub fn new(frame: impl Into<String>, d: &Detection) -> Self {
        let b = &d.bbox;
        DetectionRecord {
            frame: frame.into(),
            class: d.class,
            score: d.score,
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            l: b.l,
            w: b.w,
            h: b.h,
            yaw: b.yaw,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection {
            bbox: OrientedBox {
                cx: self.cx,
                cy: self.cy,
                cz: self.cz,
                l: self.l,
                w: self.w,
                h: self.h,
                yaw: self.yaw,
                class: self.class,
                num_points: 0,
            },
            score: self.score,
            class: self.class,
        }
    }
}

fn planes<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("{what}: expected C×H×W or 1×C×H×W, got {:?}", t.shape()))),
    }
}

/// Local maxima of a `K×H×W` heatmap over a `window×window` neighborhood.
///
/// A cell survives if no neighbor is larger, every equal neighbor comes later
/// in row-major order, and at least one neighbor is strictly smaller. A
/// constant map therefore has no peaks.
pub fn extract_peaks<T: Real>(heatmap: &Tensor<T>, window: usize, score_thr: f64) -> Result<Vec<Peak>> {
    if window % 2 == 0 {
        return Err(Error::invalid(format!("peak window must be odd, got {window}")));
    }
    let (k, h, w) = planes(heatmap, "heatmap")?;
    let r = (window / 2) as isize;
    let data = heatmap.data();
    let mut peaks = Vec::new();
    for class in 0..k {
        let plane = &data[class * h * w..(class + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j].as_f64();
                if v < score_thr {
                    continue;
                }
                let (mut keep, mut above_some, mut neighbors) = (true, false, 0);
                'scan: for di in -r..=r {
                    for dj in -r..=r {
                        let (ni, nj) = (i as isize + di, j as isize + dj);
                        if (di, dj) == (0, 0) || ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                            continue;
                        }
                        neighbors += 1;
                        let n = plane[ni as usize * w + nj as usize].as_f64();
                        let later = (di, dj) > (0, 0);
                        if n > v || (n == v && !later) {
                            keep = false;
                            break 'scan;
                        }
                        above_some |= v > n;
                    }
                }
                if keep && (above_some || neighbors == 0) {
                    peaks.push(Peak {
                        class,
                        row: i,
                        col: j,
                        score: v,
                    });
                }
            }
        }
    }
    Ok(peaks)
}

/// Reads the 8 regression channels at each peak and maps them back to the ego frame.
pub fn decode_boxes<T: Real>(
    peaks: &[Peak],
    box_map: &Tensor<T>,
    grid: &GridGeometry,
    raw_dims: bool,
) -> Result<Vec<Detection>> {
    let (c, h, w) = planes(box_map, "box map")?;
    if c != BOX_CHANNELS || h != grid.rows || w != grid.cols {
        return Err(Error::Incompatible {
            expected: format!("{BOX_CHANNELS}×{}×{}", grid.rows, grid.cols),
            got: format!("{c}×{h}×{w}"),
        });
    }
    let plane = h * w;
    peaks
        .iter()
        .map(|p| {
            if p.row >= h || p.col >= w {
                return Err(Error::invalid(format!("peak ({}, {}) outside {h}×{w}", p.row, p.col)));
            }
            let at = |ch: usize| box_map.data()[ch * plane + p.row * w + p.col].as_f64();
            let dim = |v: f64| if raw_dims { v } else { v.exp() };
            let (x, y) = grid.cell_center(p.row, p.col);
            Ok(Detection {
                bbox: OrientedBox {
                    cx: x + at(0),
                    cy: y + at(1),
                    cz: at(2),
                    l: dim(at(3)),
                    w: dim(at(4)),
                    h: dim(at(5)),
                    yaw: normalize_yaw(at(6).atan2(at(7))),
                    class: p.class,
                    num_points: 0,
                },
                score: p.score,
                class: p.class,
            })
        })
        .collect()
}
