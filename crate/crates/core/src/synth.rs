//! Synthetic LiDAR scenes ray-cast from a spinning sensor at the origin.
//!
//! The sensor sits 1 m above flat ground and fires `rings` beams per azimuth
//! step. Vertical coverage is narrow, so every object within the grid spans
//! all rings and its hit count falls roughly as 1/range with the azimuth
//! sampling.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::{Point, PointCloud};
use crate::boxes::{ClassId, OrientedBox};
use crate::error::{Error, Result};

pub const GROUND_Z: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarModel {
    pub azimuth_step_deg: f64,
    pub rings: usize,
    pub elevation_deg: (f64, f64),
    pub range_noise: f64,
    pub max_range: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel {
            azimuth_step_deg: 0.2,
            rings: 16,
            elevation_deg: (-1.0, 1.0),
            range_noise: 0.02,
            max_range: 60.0,
        }
    }
}

impl LidarModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_step_deg > 0.0) || self.rings == 0 || !(self.max_range > 0.0) || self.range_noise < 0.0 {
            return Err(Error::invalid("lidar model needs a positive azimuth step, rings and range"));
        }
        if self.elevation_deg.1 < self.elevation_deg.0 {
            return Err(Error::invalid("lidar elevation range is reversed"));
        }
        Ok(())
    }

    fn elevations(&self) -> Vec<f64> {
        let (lo, hi) = self.elevation_deg;
        (0..self.rings)
            .map(|k| {
                let t = if self.rings == 1 { 0.5 } else { k as f64 / (self.rings - 1) as f64 };
                (lo + t * (hi - lo)).to_radians()
            })
            .collect()
    }
}

/// Nominal size of a class, jittered per instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTemplate {
    pub class: ClassId,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    /// Relative half-width of the uniform size jitter.
    pub jitter: f64,
    /// Sampling weight in the class mix.
    pub weight: f64,
    /// Vehicle-like body with a distinguishable front; plain box when absent.
    #[serde(default)]
    pub profile: Option<BodyProfile>,
}

/// The hood covers the whole footprint at reduced height, the cabin spans the
/// rear at full height, and a reflective strip marks the front face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyProfile {
    pub cabin_length: f64,
    pub hood_height: f64,
    /// Return intensity of the front strip.
    pub front_intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub boxes: (usize, usize),
    pub classes: Vec<ClassTemplate>,
    pub lidar: LidarModel,
    /// Chance that a box gets an unlabeled wall placed on its line of sight.
    pub occluder_prob: f64,
    pub poles: (usize, usize),
    pub ground_points: usize,
    pub min_range: f64,
    /// Box centers stay inside `[−half_extent, half_extent]²` minus the box reach.
    pub half_extent: f64,
    /// Minimum center separation.
    pub min_separation: f64,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            boxes: (2, 8),
            classes: vec![
                ClassTemplate {
                    class: 0,
                    l: 4.5,
                    w: 1.9,
                    h: 1.6,
                    jitter: 0.1,
                    weight: 0.5,
                    profile: Some(BodyProfile {
                        cabin_length: 0.65,
                        hood_height: 0.55,
                        front_intensity: 1.0,
                    }),
                },
                ClassTemplate {
                    class: 1,
                    l: 0.7,
                    w: 0.7,
                    h: 1.7,
                    jitter: 0.1,
                    weight: 0.5,
                    profile: None,
                },
            ],
            lidar: LidarModel::default(),
            occluder_prob: 0.2,
            poles: (0, 4),
            ground_points: 1500,
            min_range: 3.0,
            half_extent: 25.6,
            min_separation: 1.6,
            max_retries: 50,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.lidar.validate()?;
        if self.boxes.0 > self.boxes.1 || self.poles.0 > self.poles.1 {
            return Err(Error::invalid("scene count ranges need min <= max"));
        }
        if self.boxes.1 > 0 && (self.classes.is_empty() || self.classes.iter().all(|c| c.weight <= 0.0)) {
            return Err(Error::invalid("scene spec needs at least one class with positive weight"));
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) || !(self.half_extent > self.min_range) {
            return Err(Error::invalid("bad occluder probability or placement extent"));
        }
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        let bad = |p: BodyProfile| {
            !in_unit(p.cabin_length) || !in_unit(p.hood_height) || !(0.0..=1.0).contains(&p.front_intensity)
        };
        if self.classes.iter().filter_map(|c| c.profile).any(bad) {
            return Err(Error::invalid("class profile fractions must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Solid geometry hit by the sensor. Labeled objects carry their box index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Solid {
    pub shape: OrientedBox,
    pub intensity: f64,
    pub label: Option<usize>,
}

/// A scan plus the per-solid hit counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan {
    pub cloud: PointCloud,
    pub hits: Vec<u32>,
}

/// Distance along the unit ray `dir` from the origin to the box surface.
fn ray_box(dir: (f64, f64, f64), b: &OrientedBox) -> Option<f64> {
    let (s, c) = b.yaw.sin_cos();
    // origin and direction in box coordinates
    let o = (-(c * b.cx + s * b.cy), -(-s * b.cx + c * b.cy), -b.cz);
    let d = (c * dir.0 + s * dir.1, -s * dir.0 + c * dir.1, dir.2);
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for ((o, d), h) in [o.0, o.1, o.2].into_iter().zip([d.0, d.1, d.2]).zip(half) {
        if d.abs() < 1e-15 {
            if o.abs() > h {
                return None;
            }
            continue;
        }
        let (a, b) = ((-h - o) / d, (h - o) / d);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

/// Ray-casts every beam against `solids`; the nearest hit wins.
pub fn scan(solids: &[Solid], lidar: &LidarModel, rng: &mut impl Rng) -> Result<Scan> {
    lidar.validate()?;
    let noise = Normal::new(0.0, lidar.range_noise.max(1e-12)).expect("positive sigma");
    let elevations = lidar.elevations();
    let steps = (360.0 / lidar.azimuth_step_deg).round() as usize;
    // azimuth interval of each solid, to skip rays that cannot hit it
    let spans: Vec<(f64, f64, f64)> = solids
        .iter()
        .map(|s| {
            let b = &s.shape;
            let reach = b.l.hypot(b.w) / 2.0;
            let r = b.range();
            let center = b.cy.atan2(b.cx);
            let half = if r <= reach { PI } else { (reach / r).asin() };
            (center, half, r - reach)
        })
        .collect();
    let mut hits = vec![0u32; solids.len()];
    let mut points = Vec::new();
    for k in 0..steps {
        let az = -PI + (k as f64 + 0.5) * lidar.azimuth_step_deg.to_radians();
        let candidates: Vec<usize> = spans
            .iter()
            .enumerate()
            .filter(|(_, &(center, half, _))| {
                let mut d = (az - center).rem_euclid(2.0 * PI);
                if d > PI {
                    d = 2.0 * PI - d;
                }
                d <= half + 1e-9
            })
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let (sa, ca) = az.sin_cos();
        for &el in &elevations {
            let (se, ce) = el.sin_cos();
            let dir = (ce * ca, ce * sa, se);
            let mut best: Option<(f64, usize)> = None;
            for &i in &candidates {
                if let Some(t) = ray_box(dir, &solids[i].shape) {
                    if t <= lidar.max_range && best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, i));
                    }
                }
            }
            // beams below the horizon that reach the ground first are lost
            let ground_t = if se < 0.0 { GROUND_Z / se } else { f64::INFINITY };
            let Some((t, i)) = best else { continue };
            if ground_t < t {
                continue;
            }
            let t = (t + noise.sample(rng)).max(0.0);
            let intensity = (solids[i].intensity + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            points.push(Point {
                x: (t * dir.0) as f32,
                y: (t * dir.1) as f32,
                z: (t * dir.2) as f32,
                intensity: intensity as f32,
            });
            hits[i] += 1;
        }
    }
    Ok(Scan {
        cloud: PointCloud { points },
        hits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<OrientedBox>,
}

fn sample_box(spec: &SceneSpec, rng: &mut impl Rng) -> OrientedBox {
    let total: f64 = spec.classes.iter().map(|c| c.weight.max(0.0)).sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut tpl = &spec.classes[0];
    for c in &spec.classes {
        if pick < c.weight.max(0.0) {
            tpl = c;
            break;
        }
        pick -= c.weight.max(0.0);
    }
    let mut jit = |v: f64| v * (1.0 + rng.gen_range(-tpl.jitter..=tpl.jitter));
    let (l, w, h) = (jit(tpl.l), jit(tpl.w), jit(tpl.h));
    let reach = l.hypot(w) / 2.0;
    let lim = spec.half_extent - reach - 0.05;
    loop {
        let (cx, cy) = (rng.gen_range(-lim..lim), rng.gen_range(-lim..lim));
        if cx.hypot(cy) >= spec.min_range + reach {
            return OrientedBox {
                cx,
                cy,
                cz: GROUND_Z + h / 2.0,
                l,
                w,
                h,
                yaw: rng.gen_range(-PI..PI),
                class: tpl.class,
                num_points: 0,
            };
        }
    }
}

fn footprint_clear(b: &OrientedBox, placed: &[OrientedBox], min_sep: f64) -> bool {
    placed.iter().all(|p| {
        let d = (b.cx - p.cx).hypot(b.cy - p.cy);
        d >= min_sep && d > (b.l.hypot(b.w) + p.l.hypot(p.w)) / 2.0 + 0.1
    })
}

/// Unlabeled wall across the line of sight to `target`, 40–70% of the way out.
pub fn occluder_for(target: &OrientedBox, rng: &mut impl Rng) -> OrientedBox {
    let frac = rng.gen_range(0.4..0.7);
    let bearing = target.cy.atan2(target.cx);
    // lateral shift so the wall covers part of the target
    let shift = rng.gen_range(-0.5..0.5) * target.w.max(0.7);
    let (cx, cy) = (
        frac * target.cx - shift * bearing.sin(),
        frac * target.cy + shift * bearing.cos(),
    );
    OrientedBox {
        cx,
        cy,
        cz: GROUND_Z + 0.75,
        l: 0.3,
        w: rng.gen_range(0.8..1.6),
        h: 1.5,
        yaw: bearing,
        class: usize::MAX,
        num_points: 0,
    }
}

/// Solids making up a labeled object with their intensities: the box itself,
/// or hood, cabin and front strip.
fn body_parts(b: &OrientedBox, profile: Option<BodyProfile>, intensity: f64) -> Vec<(OrientedBox, f64)> {
    let Some(p) = profile else {
        return vec![(*b, intensity)];
    };
    let (s, c) = b.yaw.sin_cos();
    let along = |u: f64| (b.cx + c * u, b.cy + s * u);
    let bottom = b.cz - b.h / 2.0;
    let hood_h = p.hood_height * b.h;
    let hood = OrientedBox {
        cz: bottom + hood_h / 2.0,
        h: hood_h,
        ..*b
    };
    // cabin pushed to the rear (−u) end of the footprint
    let (cx, cy) = along(-(1.0 - p.cabin_length) * b.l / 2.0);
    let cabin = OrientedBox {
        cx,
        cy,
        l: p.cabin_length * b.l,
        ..*b
    };
    // strip sits just proud of the hood's front face so it wins the nearest hit
    let depth = 0.1;
    let (cx, cy) = along(b.l / 2.0 - depth / 2.0 + 0.01);
    let strip = OrientedBox {
        cx,
        cy,
        l: depth,
        w: 0.9 * b.w,
        ..hood
    };
    vec![(strip, p.front_intensity), (hood, intensity), (cabin, intensity)]
}

pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_boxes = rng.gen_range(spec.boxes.0..=spec.boxes.1);
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(n_boxes);
    let mut failed = 0;
    for _ in 0..n_boxes {
        let placed = (0..spec.max_retries)
            .map(|_| sample_box(spec, &mut rng))
            .find(|b| footprint_clear(b, &boxes, spec.min_separation));
        match placed {
            Some(b) => boxes.push(b),
            None => failed += 1,
        }
    }
    if failed > 0 {
        log::info!("scene {seed}: placed {} of {n_boxes} boxes", boxes.len());
    }
    let mut solids: Vec<Solid> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let intensity = rng.gen_range(0.2..0.6);
        let profile = spec.classes.iter().find(|c| c.class == b.class).and_then(|c| c.profile);
        solids.extend(body_parts(b, profile, intensity).into_iter().map(|(shape, intensity)| Solid {
            shape,
            intensity,
            label: Some(i),
        }));
    }
    let mut clutter: Vec<OrientedBox> = Vec::new();
    for b in &boxes {
        if rng.gen_bool(spec.occluder_prob) {
            let wall = occluder_for(b, &mut rng);
            if footprint_clear(&wall, &boxes, 0.0) && footprint_clear(&wall, &clutter, 0.0) {
                clutter.push(wall);
            }
        }
    }
    let n_poles = rng.gen_range(spec.poles.0..=spec.poles.1);
    for _ in 0..n_poles {
        let lim = spec.half_extent - 0.5;
        let pole = OrientedBox {
            cx: rng.gen_range(-lim..lim),
            cy: rng.gen_range(-lim..lim),
            cz: GROUND_Z + 1.5,
            l: 0.25,
            w: 0.25,
            h: 3.0,
            yaw: 0.0,
            class: usize::MAX,
            num_points: 0,
        };
        if pole.range() > spec.min_range && footprint_clear(&pole, &boxes, 0.0) && footprint_clear(&pole, &clutter, 0.0) {
            clutter.push(pole);
        }
    }
    solids.extend(clutter.iter().map(|c| Solid {
        shape: *c,
        intensity: rng.gen_range(0.1..0.6),
        label: None,
    }));
    let Scan { mut cloud, hits } = scan(&solids, &spec.lidar, &mut rng)?;
    let ground_noise = Normal::new(0.0, 0.03).expect("positive sigma");
    for _ in 0..spec.ground_points {
        let (x, y) = (
            rng.gen_range(-spec.half_extent..spec.half_extent),
            rng.gen_range(-spec.half_extent..spec.half_extent),
        );
        if boxes.iter().chain(&clutter).any(|b| b.contains(x, y, GROUND_Z, 0.0)) {
            continue;
        }
        cloud.points.push(Point {
            x: x as f32,
            y: y as f32,
            z: (GROUND_Z + ground_noise.sample(&mut rng)) as f32,
            intensity: rng.gen_range(0.02..0.2),
        });
    }
    let mut counts = vec![0u32; boxes.len()];
    for (solid, n) in solids.iter().zip(hits) {
        if let Some(i) = solid.label {
            counts[i] += n;
        }
    }
    let labeled = boxes
        .into_iter()
        .zip(counts)
        .filter(|(_, n)| *n > 0)
        .map(|(b, n)| OrientedBox { num_points: n, ..b })
        .collect();
    Ok(Scene { cloud, boxes: labeled })
}

/// Seed of scene `index` in a set generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
