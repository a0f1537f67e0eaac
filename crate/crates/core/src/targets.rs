//! Training targets: oriented Gaussian center heatmaps, box regression maps
//! and point-density labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::GridGeometry;
use crate::error::{Error, Result};
use crate::tensor::{save_rtns, Tensor};

pub use crate::boxes::{ClassId, OrientedBox};

pub const BOX_CHANNELS: usize = 8;

/// Per-class `(T0, T1)` point-count thresholds, indexed by class id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityThresholds {
    pub per_class: Vec<(u32, u32)>,
}

impl DensityThresholds {
    pub fn new(per_class: Vec<(u32, u32)>) -> Result<Self> {
        for (k, &(t0, t1)) in per_class.iter().enumerate() {
            if !(0 < t0 && t0 < t1) {
                return Err(Error::invalid(format!(
                    "class {k}: thresholds need 0 < T0 < T1, got ({t0}, {t1})"
                )));
            }
        }
        Ok(DensityThresholds { per_class })
    }
}

/// Density level 1 (sparse), 2 (adequate) or 3 (dense).
pub fn density_level(n: u32, class: ClassId, thr: &DensityThresholds) -> Result<u8> {
    let &(t0, t1) = thr
        .per_class
        .get(class)
        .ok_or_else(|| Error::invalid(format!("no density thresholds for class {class}")))?;
    Ok(if n < t0 {
        1
    } else if n < t1 {
        2
    } else {
        3
    })
}

/// Nearest-rank percentile of an ascending slice: the value at 1-based rank
/// `ceil(p/100 · n)`.
pub fn nearest_rank(sorted: &[u32], p: f64) -> u32 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

pub const MIN_BOXES_PER_CLASS: usize = 10;

pub fn fit_thresholds(
    boxes: &[OrientedBox],
    num_classes: usize,
    p_lo: f64,
    p_hi: f64,
) -> Result<DensityThresholds> {
    if !(0.0 < p_lo && p_lo < p_hi && p_hi <= 100.0) {
        return Err(Error::invalid(format!("bad percentiles {p_lo}/{p_hi}")));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let mut counts: Vec<u32> = boxes.iter().filter(|b| b.class == k).map(|b| b.num_points).collect();
        if counts.len() < MIN_BOXES_PER_CLASS {
            return Err(Error::InsufficientData(format!(
                "class {k} has {} boxes, need at least {MIN_BOXES_PER_CLASS}",
                counts.len()
            )));
        }
        counts.sort_unstable();
        let t0 = nearest_rank(&counts, p_lo);
        let t1 = nearest_rank(&counts, p_hi);
        if !(0 < t0 && t0 < t1) {
            return Err(Error::InsufficientData(format!(
                "class {k}: degenerate point-count distribution gives T0={t0}, T1={t1}"
            )));
        }
        per_class.push((t0, t1));
    }
    Ok(DensityThresholds { per_class })
}

/// How targets are rendered on the output grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub num_classes: usize,
    /// Classes that use `d_small`; every other class uses `d_large`.
    pub small_classes: Vec<ClassId>,
    pub d_large: f64,
    pub d_small: f64,
    pub tau: f64,
    /// Oriented anisotropic Gaussian; when false an isotropic disc with
    /// `σ = sqrt(L·W)/d` is used instead.
    pub anisotropic: bool,
    /// Store dims as meters rather than natural logs.
    pub raw_dims: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            num_classes: 2,
            small_classes: vec![1],
            d_large: 3.0,
            d_small: 6.0,
            tau: 0.2,
            anisotropic: true,
            raw_dims: false,
        }
    }
}

impl TargetConfig {
    pub fn decay(&self, class: ClassId) -> f64 {
        if self.small_classes.contains(&class) {
            self.d_small
        } else {
            self.d_large
        }
    }
}

/// Sparse Gaussian patch: `(row, col, value)` for every nonzero cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub center: (usize, usize),
    pub cells: Vec<(usize, usize, f64)>,
}

const FOOTPRINT_TOL: f64 = 1e-9;

fn cell_size(grid: &GridGeometry) -> f64 {
    (grid.cell_x * grid.cell_y).sqrt()
}

fn center_cell(b: &OrientedBox, grid: &GridGeometry) -> Result<(usize, usize)> {
    grid.cell_of(b.cx, b.cy)
        .ok_or_else(|| Error::invalid(format!("box center ({}, {}) is outside the grid", b.cx, b.cy)))
}

/// Oriented Gaussian over the box footprint. Distances are measured in the
/// box frame from the center cell's center, so that cell is exactly 1.
pub fn anisotropic_gaussian_patch(b: &OrientedBox, grid: &GridGeometry, d_cls: f64) -> Result<Patch> {
    if !(d_cls > 0.0) {
        return Err(Error::invalid(format!("decay must be positive, got {d_cls}")));
    }
    b.validate()?;
    let center = center_cell(b, grid)?;
    let cell = cell_size(grid);
    if b.l < cell || b.w < cell {
        return Ok(Patch {
            center,
            cells: vec![(center.0, center.1, 1.0)],
        });
    }
    let sigma_u = b.l / cell / d_cls;
    let sigma_v = b.w / cell / d_cls;
    let (pcx, pcy) = grid.cell_center(center.0, center.1);
    let peak = OrientedBox { cx: pcx, cy: pcy, ..*b };
    Ok(rasterize(b, grid, center, |x, y| {
        let (u, v) = peak.to_local(x, y);
        let (u, v) = (u / cell / sigma_u, v / cell / sigma_v);
        (-0.5 * (u * u + v * v)).exp()
    }, |x, y| {
        let (u, v) = b.to_local(x, y);
        u.abs() <= b.l / 2.0 + FOOTPRINT_TOL && v.abs() <= b.w / 2.0 + FOOTPRINT_TOL
    }))
}

/// Isotropic variant: `σ = sqrt(L·W)/d` cells over a disc of radius `sqrt(l·w)/2`.
pub fn isotropic_gaussian_patch(b: &OrientedBox, grid: &GridGeometry, d_cls: f64) -> Result<Patch> {
    if !(d_cls > 0.0) {
        return Err(Error::invalid(format!("decay must be positive, got {d_cls}")));
    }
    b.validate()?;
    let center = center_cell(b, grid)?;
    let cell = cell_size(grid);
    let extent = (b.l * b.w).sqrt();
    if extent < cell {
        return Ok(Patch {
            center,
            cells: vec![(center.0, center.1, 1.0)],
        });
    }
    let sigma = extent / cell / d_cls;
    let (pcx, pcy) = grid.cell_center(center.0, center.1);
    let radius = extent / 2.0;
    Ok(rasterize(b, grid, center, |x, y| {
        let r = (x - pcx).hypot(y - pcy) / cell / sigma;
        (-0.5 * r * r).exp()
    }, |x, y| (x - b.cx).hypot(y - b.cy) <= radius + FOOTPRINT_TOL))
}

fn rasterize(
    b: &OrientedBox,
    grid: &GridGeometry,
    center: (usize, usize),
    value: impl Fn(f64, f64) -> f64,
    inside: impl Fn(f64, f64) -> bool,
) -> Patch {
    let reach = b.l.hypot(b.w) / 2.0;
    let span_c = (reach / grid.cell_x).ceil() as isize + 1;
    let span_r = (reach / grid.cell_y).ceil() as isize + 1;
    let mut cells = Vec::new();
    for dr in -span_r..=span_r {
        for dc in -span_c..=span_c {
            let (r, c) = (center.0 as isize + dr, center.1 as isize + dc);
            if r < 0 || c < 0 || r >= grid.rows as isize || c >= grid.cols as isize {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            if (r, c) == center {
                cells.push((r, c, 1.0));
                continue;
            }
            let (x, y) = grid.cell_center(r, c);
            if inside(x, y) {
                let v = value(x, y);
                if v > 0.0 {
                    cells.push((r, c, v));
                }
            }
        }
    }
    Patch { center, cells }
}

pub fn box_patch(b: &OrientedBox, grid: &GridGeometry, cfg: &TargetConfig) -> Result<Patch> {
    let d = cfg.decay(b.class);
    if cfg.anisotropic {
        anisotropic_gaussian_patch(b, grid, d)
    } else {
        isotropic_gaussian_patch(b, grid, d)
    }
}

fn check_class(b: &OrientedBox, cfg: &TargetConfig) -> Result<()> {
    if b.class >= cfg.num_classes {
        return Err(Error::invalid(format!(
            "box class {} out of range for {} classes",
            b.class, cfg.num_classes
        )));
    }
    Ok(())
}

/// `K×H×W` heatmap, overlapping boxes combined by max.
pub fn render_heatmap(boxes: &[OrientedBox], grid: &GridGeometry, cfg: &TargetConfig) -> Result<Tensor<f64>> {
    Ok(render(boxes, grid, cfg)?.0)
}

fn render(
    boxes: &[OrientedBox],
    grid: &GridGeometry,
    cfg: &TargetConfig,
) -> Result<(Tensor<f64>, Vec<Option<usize>>, Vec<f64>, Vec<Patch>)> {
    let plane = grid.rows * grid.cols;
    let mut heat = vec![0.0f64; cfg.num_classes * plane];
    let mut owner = vec![None; plane];
    let mut best = vec![0.0f64; plane];
    let mut patches = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        check_class(b, cfg)?;
        let patch = box_patch(b, grid, cfg)?;
        for &(r, c, v) in &patch.cells {
            let idx = r * grid.cols + c;
            let h = &mut heat[b.class * plane + idx];
            *h = h.max(v);
            if v > best[idx] {
                best[idx] = v;
                owner[idx] = Some(i);
            }
        }
        patches.push(patch);
    }
    let heat = Tensor::new(vec![cfg.num_classes, grid.rows, grid.cols], heat)?;
    Ok((heat, owner, best, patches))
}

/// A ground-truth center on the output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterLabel {
    pub box_index: usize,
    pub class: ClassId,
    pub row: usize,
    pub col: usize,
    /// Density level in `1..=3`, when thresholds were supplied.
    pub density: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    /// `K×H×W` in `[0, 1]`.
    pub heatmap: Tensor<f64>,
    /// `8×H×W`: δx, δy, δz, l, w, h (log unless `raw_dims`), sin θ, cos θ.
    pub box_targets: Tensor<f64>,
    /// Row-major `H×W`; true where the heatmap exceeds τ.
    pub valid_mask: Vec<bool>,
    pub centers: Vec<CenterLabel>,
    pub raw_dims: bool,
}

impl TargetMaps {
    pub fn height(&self) -> usize {
        self.heatmap.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.heatmap.shape()[2]
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m).count()
    }

    /// Writes `heatmap.rtns`, `box_targets.rtns` and `valid_mask.rtns` (0/1).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_rtns(&self.heatmap.cast::<f32>(), dir.join("heatmap.rtns"))?;
        save_rtns(&self.box_targets.cast::<f32>(), dir.join("box_targets.rtns"))?;
        let mask = self.valid_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        save_rtns(&Tensor::new(vec![self.height(), self.width()], mask)?, dir.join("valid_mask.rtns"))
    }
}

/// The 8 regression values of `b` as seen from the center of `(row, col)`.
pub fn encode_box(b: &OrientedBox, grid: &GridGeometry, row: usize, col: usize, raw_dims: bool) -> [f64; BOX_CHANNELS] {
    let (x, y) = grid.cell_center(row, col);
    let dim = |v: f64| if raw_dims { v } else { v.ln() };
    let (s, c) = b.yaw.sin_cos();
    [b.cx - x, b.cy - y, b.cz, dim(b.l), dim(b.w), dim(b.h), s, c]
}

pub fn regression_targets(
    boxes: &[OrientedBox],
    grid: &GridGeometry,
    cfg: &TargetConfig,
    thresholds: Option<&DensityThresholds>,
) -> Result<TargetMaps> {
    let (heatmap, owner, best, patches) = render(boxes, grid, cfg)?;
    let plane = grid.rows * grid.cols;
    let mut targets = vec![0.0; BOX_CHANNELS * plane];
    let mut valid_mask = vec![false; plane];
    for idx in 0..plane {
        let Some(i) = owner[idx] else { continue };
        if best[idx] <= cfg.tau {
            continue;
        }
        valid_mask[idx] = true;
        let enc = encode_box(&boxes[i], grid, idx / grid.cols, idx % grid.cols, cfg.raw_dims);
        for (ch, v) in enc.into_iter().enumerate() {
            targets[ch * plane + idx] = v;
        }
    }
    let centers = boxes
        .iter()
        .zip(&patches)
        .enumerate()
        .map(|(i, (b, p))| {
            Ok(CenterLabel {
                box_index: i,
                class: b.class,
                row: p.center.0,
                col: p.center.1,
                density: thresholds.map(|t| density_level(b.num_points, b.class, t)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetMaps {
        heatmap,
        box_targets: Tensor::new(vec![BOX_CHANNELS, grid.rows, grid.cols], targets)?,
        valid_mask,
        centers,
        raw_dims: cfg.raw_dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::VoxelConfig;
    use std::f64::consts::FRAC_PI_2;

    fn grid() -> GridGeometry {
        VoxelConfig::desk().geometry().unwrap()
    }

    fn car_at(grid: &GridGeometry, r: usize, c: usize, yaw: f64) -> OrientedBox {
        let (cx, cy) = grid.cell_center(r, c);
        OrientedBox {
            cx,
            cy,
            cz: -0.2,
            // 6.2 × 3.1 cells keeps every cell center off the footprint edge
            l: 6.2 * 0.4,
            w: 3.1 * 0.4,
            h: 1.6,
            yaw,
            class: 0,
            num_points: 40,
        }
    }

    fn dense(p: &Patch, g: &GridGeometry) -> Vec<f64> {
        let mut m = vec![0.0; g.rows * g.cols];
        for &(r, c, v) in &p.cells {
            m[r * g.cols + c] = v;
        }
        m
    }

    #[test]
    fn density_boundaries() {
        let t = DensityThresholds::new(vec![(10, 50)]).unwrap();
        let lv = |n| density_level(n, 0, &t).unwrap();
        assert_eq!((lv(0), lv(9), lv(10), lv(49), lv(50)), (1, 1, 2, 2, 3));
        assert!(density_level(5, 1, &t).is_err());
        assert!(DensityThresholds::new(vec![(5, 5)]).is_err());
    }

    #[test]
    fn thresholds_from_uniform_counts() {
        let boxes: Vec<OrientedBox> = (1..=100)
            .map(|n| OrientedBox {
                num_points: n,
                ..car_at(&grid(), 0, 0, 0.0)
            })
            .collect();
        let t = fit_thresholds(&boxes, 1, 30.0, 70.0).unwrap();
        assert_eq!(t.per_class, vec![(30, 70)]);
        let flat: Vec<OrientedBox> = boxes.iter().map(|b| OrientedBox { num_points: 7, ..*b }).collect();
        assert!(matches!(fit_thresholds(&flat, 1, 30.0, 70.0), Err(Error::InsufficientData(_))));
        assert!(fit_thresholds(&boxes[..9], 1, 30.0, 70.0).is_err());
    }

    #[test]
    fn patch_peak_and_one_sigma() {
        let g = grid();
        let b = OrientedBox {
            l: 6.0 * 0.4,
            ..car_at(&g, 60, 60, 0.0)
        };
        let p = anisotropic_gaussian_patch(&b, &g, 3.0).unwrap();
        let m = dense(&p, &g);
        assert_eq!(m[60 * 128 + 60], 1.0);
        // σ_u ≈ 2 cells along +x
        let sigma_u = b.l / 0.4 / 3.0;
        let expected = (-0.5 * (2.0 / sigma_u).powi(2)).exp();
        assert!((m[60 * 128 + 62] - expected).abs() < 1e-12);
        assert!((m[60 * 128 + 62] - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_transposes_patch() {
        let g = grid();
        let a = dense(&anisotropic_gaussian_patch(&car_at(&g, 64, 64, 0.0), &g, 3.0).unwrap(), &g);
        let b = dense(&anisotropic_gaussian_patch(&car_at(&g, 64, 64, FRAC_PI_2), &g, 3.0).unwrap(), &g);
        for r in 50..78 {
            for c in 50..78 {
                assert!((a[r * 128 + c] - b[c * 128 + r]).abs() < 1e-9, "({r},{c})");
            }
        }
    }

    #[test]
    fn small_box_is_a_single_cell() {
        let g = grid();
        let b = OrientedBox {
            l: 0.3,
            w: 0.3,
            ..car_at(&g, 5, 5, 0.3)
        };
        let p = anisotropic_gaussian_patch(&b, &g, 6.0).unwrap();
        assert_eq!(p.cells, vec![(5, 5, 1.0)]);
    }

    #[test]
    fn heatmap_combination() {
        let g = grid();
        let cfg = TargetConfig::default();
        assert!(render_heatmap(&[], &g, &cfg).unwrap().data().iter().all(|&v| v == 0.0));
        let a = car_at(&g, 20, 20, 0.3);
        let b = car_at(&g, 90, 90, -1.0);
        let ha = render_heatmap(&[a], &g, &cfg).unwrap();
        let hb = render_heatmap(&[b], &g, &cfg).unwrap();
        let hab = render_heatmap(&[a, b], &g, &cfg).unwrap();
        for i in 0..hab.len() {
            assert_eq!(hab.data()[i], ha.data()[i] + hb.data()[i]);
        }
        assert_eq!(render_heatmap(&[a, a], &g, &cfg).unwrap(), ha);
    }

    #[test]
    fn larger_decay_is_sharper() {
        let g = grid();
        let b = car_at(&g, 64, 64, 0.5);
        let soft = dense(&anisotropic_gaussian_patch(&b, &g, 2.0).unwrap(), &g);
        let sharp = dense(&anisotropic_gaussian_patch(&b, &g, 4.0).unwrap(), &g);
        assert!(soft.iter().zip(&sharp).all(|(s, t)| t <= s));
    }

    #[test]
    fn regression_at_the_peak() {
        let g = grid();
        let b = car_at(&g, 40, 70, 0.0);
        let t = regression_targets(&[b], &g, &TargetConfig::default(), None).unwrap();
        let at = |ch: usize| t.box_targets.data()[ch * 128 * 128 + 40 * 128 + 70];
        assert_eq!((at(0), at(1)), (0.0, 0.0));
        assert_eq!((at(6), at(7)), (0.0, 1.0));
        assert!((at(3) - b.l.ln()).abs() < 1e-15);
        let peaks = t.heatmap.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(peaks, 1);
    }

    #[test]
    fn mask_shrinks_with_tau() {
        let g = grid();
        let boxes = [car_at(&g, 40, 70, 0.4), car_at(&g, 80, 20, 2.0)];
        let mut last = usize::MAX;
        for tau in [0.0, 0.1, 0.2, 0.5, 0.9] {
            let cfg = TargetConfig {
                tau,
                ..Default::default()
            };
            let n = regression_targets(&boxes, &g, &cfg, None).unwrap().num_valid();
            assert!(n <= last);
            last = n;
        }
    }
}
