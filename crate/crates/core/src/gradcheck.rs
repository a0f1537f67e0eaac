//! Finite-difference checks of every differentiable op, the range-aware
//! layer and the three losses, in double precision.
//!
//! Each case draws random inputs, reduces the op output to a scalar with a
//! random positive weighting, and compares the tape gradient against central
//! differences. The error of one entry is `|a − n| / max(|a|, |n|, 1e-3)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::bev::VoxelConfig;
use crate::boxes::OrientedBox;
use crate::error::{Error, Result};
use crate::losses::{box_loss_var, density_loss_var, focal_heatmap_loss_var, stack_heatmaps, LossWeights, DENSITY_BINS};
use crate::params::ParamStore;
use crate::raaconv::{ConvSpec, RaaConvLayer};
use crate::synth::scene_seed;
use crate::targets::{regression_targets, DensityThresholds, TargetConfig, TargetMaps, BOX_CHANNELS};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: usize = 20;
const FLOOR: f64 = 1e-3;

pub const OPS: &[&str] = &[
    "conv2d",
    "sigmoid",
    "relu",
    "add",
    "broadcast_mul",
    "concat",
    "concat_rows",
    "slice_channels",
    "channel_max",
    "channel_mean",
    "upsample",
    "log",
    "pow",
    "clamp",
    "sum",
    "mean",
    "scale",
    "offset",
    "raaconv",
    "focal_loss",
    "box_loss",
    "density_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..6)]
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var], &ParamStore<f64>) -> Result<Var> + 'a;

/// `Σ R ⊙ f(inputs)` for a fixed weighting `R`.
fn objective(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let prod = tape.broadcast_mul(r, out)?;
    Ok(tape.sum(prod))
}

/// Max relative error over every input entry and every parameter entry.
fn check_case(rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, mut store: ParamStore<f64>, f: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars, &store)?;
    let weights = uniform(rng, tape.value(out).shape().to_vec(), 0.5, 1.5);
    let loss = objective(&mut tape, out, &weights)?;
    store.zero_grad();
    let grads = tape.backward(loss, &mut store)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.wrt(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let eval = |inputs: &[Tensor<f64>], store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars, store)?;
        let loss = objective(&mut tape, out, &weights)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut worst = 0.0f64;
    let mut inputs = inputs;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x + STEP;
            let up = eval(&inputs, &store)?;
            inputs[i].data_mut()[j] = x - STEP;
            let down = eval(&inputs, &store)?;
            inputs[i].data_mut()[j] = x;
            worst = worst.max(rel_err(analytic[i][j], (up - down) / (2.0 * STEP)));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let analytic = store.get(id).grad.data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let x = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = x + STEP;
            let up = eval(&inputs, &store)?;
            store.get_mut(id).value.data_mut()[j] = x - STEP;
            let down = eval(&inputs, &store)?;
            store.get_mut(id).value.data_mut()[j] = x;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

/// Values at least 0.05 away from `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64, kinks: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > 0.05) {
            break v;
        }
    })
}

fn small_boxes(rng: &mut ChaCha8Rng, extent: f64) -> Vec<OrientedBox> {
    (0..rng.gen_range(1..4))
        .map(|i| {
            let class = i % 2;
            let (l, w) = if class == 0 { (1.9, 0.9) } else { (0.7, 0.6) };
            OrientedBox {
                cx: rng.gen_range(1.0..extent - 1.0),
                cy: rng.gen_range(1.0..extent - 1.0),
                cz: rng.gen_range(-0.5..0.5),
                l: l * rng.gen_range(0.9..1.1),
                w: w * rng.gen_range(0.9..1.1),
                h: 1.5,
                yaw: rng.gen_range(-3.0..3.0),
                class,
                num_points: rng.gen_range(1..40),
            }
        })
        .collect()
}

/// Targets on a 16×16 grid for a batch of `n`.
fn loss_targets(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<TargetMaps>> {
    let extent = 6.4;
    let grid = VoxelConfig {
        x_range: (0.0, extent),
        y_range: (0.0, extent),
        z_range: (-3.0, 3.0),
        cell: (0.4, 0.4),
    }
    .geometry()?;
    let thr = DensityThresholds::new(vec![(8, 20), (8, 20)])?;
    (0..n)
        .map(|_| regression_targets(&small_boxes(rng, extent), &grid, &TargetConfig::default(), Some(&thr)))
        .collect()
}

fn one_case(op: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let none = ParamStore::new;
    match op {
        "conv2d" => {
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..=k / 2);
            let (n, c_in, c_out) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let h = rng.gen_range(k.max(3)..8);
            let w = rng.gen_range(k.max(3)..8);
            let inputs = vec![
                uniform(rng, vec![n, c_in, h, w], -1.0, 1.0),
                uniform(rng, vec![c_out, c_in, k, k], -1.0, 1.0),
                uniform(rng, vec![c_out], -1.0, 1.0),
            ];
            check_case(rng, inputs, none(), &|t, v, _| t.conv2d(v[0], v[1], v[2], stride, pad))
        }
        "sigmoid" => {
            let d = dims(rng);
            let x = uniform(rng, d, -4.0, 4.0);
            check_case(rng, vec![x], none(), &|t, v, _| Ok(t.sigmoid(v[0])))
        }
        "relu" => {
            let d = dims(rng);
            let x = away_from(rng, d, -2.0, 2.0, &[0.0]);
            check_case(rng, vec![x], none(), &|t, v, _| Ok(t.relu(v[0])))
        }
        "add" => {
            let d = dims(rng);
            let inputs = vec![uniform(rng, d.clone(), -2.0, 2.0), uniform(rng, d, -2.0, 2.0)];
            check_case(rng, inputs, none(), &|t, v, _| t.add(v[0], v[1]))
        }
        "broadcast_mul" => {
            let d = dims(rng);
            let a_shape = match rng.gen_range(0..3) {
                0 => d.clone(),
                1 => vec![1],
                _ => vec![d[0], 1, d[2], d[3]],
            };
            let inputs = vec![uniform(rng, a_shape, -2.0, 2.0), uniform(rng, d, -2.0, 2.0)];
            check_case(rng, inputs, none(), &|t, v, _| t.broadcast_mul(v[0], v[1]))
        }
        "concat" => {
            let d = dims(rng);
            let mut e = d.clone();
            e[1] = rng.gen_range(1..4);
            let inputs = vec![uniform(rng, d, -1.0, 1.0), uniform(rng, e, -1.0, 1.0)];
            check_case(rng, inputs, none(), &|t, v, _| t.concat_channels(v[0], v[1]))
        }
        "concat_rows" => {
            let d = dims(rng);
            let mut e = d.clone();
            e[0] = rng.gen_range(1..4);
            let inputs = vec![uniform(rng, d, -1.0, 1.0), uniform(rng, e, -1.0, 1.0)];
            check_case(rng, inputs, none(), &|t, v, _| t.concat_rows(v[0], v[1]))
        }
        "slice_channels" => {
            let mut d = dims(rng);
            d[1] = rng.gen_range(2..5);
            let start = rng.gen_range(0..d[1]);
            let len = rng.gen_range(1..=d[1] - start);
            let x = uniform(rng, d, -1.0, 1.0);
            check_case(rng, vec![x], none(), &|t, v, _| t.slice_channels(v[0], start, len))
        }
        "channel_max" => {
            // channel ranks are shuffled per position and kept 0.25 apart
            let d = dims(rng);
            let (n, c, plane) = (d[0], d[1], d[2] * d[3]);
            let mut x = Tensor::zeros(d);
            for b in 0..n {
                for p in 0..plane {
                    let mut ranks: Vec<usize> = (0..c).collect();
                    ranks.shuffle(rng);
                    for (ch, r) in ranks.into_iter().enumerate() {
                        x.data_mut()[(b * c + ch) * plane + p] = r as f64 * 0.3 + rng.gen_range(0.0..0.05);
                    }
                }
            }
            check_case(rng, vec![x], none(), &|t, v, _| t.channel_max(v[0]))
        }
        "channel_mean" => {
            let d = dims(rng);
            let x = uniform(rng, d, -1.0, 1.0);
            check_case(rng, vec![x], none(), &|t, v, _| t.channel_mean(v[0]))
        }
        "upsample" => {
            let factor = rng.gen_range(1..4);
            let d = dims(rng);
            let x = uniform(rng, d, -1.0, 1.0);
            check_case(rng, vec![x], none(), &|t, v, _| t.upsample_nearest(v[0], factor))
        }
        "log" => {
            let d = dims(rng);
            let x = uniform(rng, d, 0.3, 3.0);
            check_case(rng, vec![x], none(), &|t, v, _| Ok(t.log(v[0])))
        }
        "pow" => {
            let e = [2.0, 0.5, 1.7, -1.0, 4.0][rng.gen_range(0..5)];
            let d = dims(rng);
            let x = uniform(rng, d, 0.3, 2.0);
            check_case(rng, vec![x], none(), &|t, v, _| Ok(t.pow(v[0], e)))
        }
        "clamp" => {
            let d = dims(rng);
            let x = away_from(rng, d, -1.0, 1.0, &[-0.5, 0.5]);
            check_case(rng, vec![x], none(), &|t, v, _| t.clamp(v[0], -0.5, 0.5))
        }
        "sum" => {
            let d = dims(rng);
            let x = uniform(rng, d, -1.0, 1.0);
            check_case(rng, vec![x], none(), &|t, v, _| Ok(t.sum(v[0])))
        }
        "mean" => {
            let d = dims(rng);
            let x = uniform(rng, d, -1.0, 1.0);
            check_case(rng, vec![x], none(), &|t, v, _| Ok(t.mean(v[0])))
        }
        "scale" => {
            let s = rng.gen_range(-3.0..3.0);
            let d = dims(rng);
            let x = uniform(rng, d, -1.0, 1.0);
            check_case(rng, vec![x], none(), &|t, v, _| Ok(t.scale(v[0], s)))
        }
        "offset" => {
            let s = rng.gen_range(-3.0..3.0);
            let d = dims(rng);
            let x = uniform(rng, d, -1.0, 1.0);
            check_case(rng, vec![x], none(), &|t, v, _| Ok(t.offset(v[0], s)))
        }
        "raaconv" => {
            let (c_in, c_out) = (rng.gen_range(1..4), [2, 4][rng.gen_range(0..2)]);
            let stride = rng.gen_range(1..3);
            let side = 4 * stride;
            let mut store = ParamStore::new();
            let layer = RaaConvLayer::new(&mut store, "raa", ConvSpec::same(c_in, c_out, 3, stride), rng)?;
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                if store.get(id).name.ends_with("gamma") {
                    store.get_mut(id).value.data_mut()[0] = rng.gen_range(0.5..1.5);
                }
            }
            let n = rng.gen_range(1..3);
            let x = uniform(rng, vec![n, c_in, side, side], -1.0, 1.0);
            check_case(rng, vec![x], store, &|t, v, s| layer.forward(t, s, v[0]))
        }
        "focal_loss" => {
            let n = rng.gen_range(1..3);
            let targets = loss_targets(rng, n)?;
            let refs: Vec<&TargetMaps> = targets.iter().collect();
            let gt = stack_heatmaps(&refs);
            let k = targets[0].heatmap.shape()[0];
            let p = uniform(rng, vec![n, k, targets[0].height(), targets[0].width()], 0.05, 0.95);
            let w = LossWeights::default();
            check_case(rng, vec![p], none(), &|t, v, _| Ok(focal_heatmap_loss_var(t, v[0], &gt, &w)?.0))
        }
        "box_loss" => {
            let n = rng.gen_range(1..3);
            let targets = loss_targets(rng, n)?;
            let refs: Vec<&TargetMaps> = targets.iter().collect();
            let (h, w) = (targets[0].height(), targets[0].width());
            let plane = h * w;
            // offsets on both sides of the smooth-L1 knee, never near it
            let mut p = Tensor::zeros(vec![n, BOX_CHANNELS, h, w]);
            for (b, t) in targets.iter().enumerate() {
                for ch in 0..BOX_CHANNELS {
                    for i in 0..plane {
                        let d = match rng.gen_range(0..3) {
                            0 => rng.gen_range(1.2..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                            _ => rng.gen_range(-0.8..0.8),
                        };
                        p.data_mut()[(b * BOX_CHANNELS + ch) * plane + i] = t.box_targets.data()[ch * plane + i] + d;
                    }
                }
            }
            check_case(rng, vec![p], none(), &|t, v, _| Ok(box_loss_var(t, v[0], &refs)?.0))
        }
        "density_loss" => {
            let n = rng.gen_range(1..3);
            let targets = loss_targets(rng, n)?;
            let refs: Vec<&TargetMaps> = targets.iter().collect();
            let z = uniform(rng, vec![n, DENSITY_BINS, targets[0].height(), targets[0].width()], -2.0, 2.0);
            let w = LossWeights::default();
            check_case(rng, vec![z], none(), &|t, v, _| Ok(density_loss_var(t, v[0], &refs, &w)?.0))
        }
        other => Err(Error::invalid(format!("unknown op {other:?}; known: {}", OPS.join(", ")))),
    }
}

/// Runs `SEEDS` random cases of one op.
pub fn check_op(op: &str, seed: u64) -> Result<OpReport> {
    let index = OPS
        .iter()
        .position(|&o| o == op)
        .ok_or_else(|| Error::invalid(format!("unknown op {op:?}; known: {}", OPS.join(", "))))?;
    let mut worst = 0.0f64;
    for s in 0..SEEDS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(scene_seed(seed, index as u64), s));
        worst = worst.max(one_case(op, &mut rng)?);
    }
    Ok(OpReport {
        op: op.to_string(),
        seeds: SEEDS,
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    })
}

pub fn check_all(seed: u64) -> Result<Vec<OpReport>> {
    OPS.iter().map(|op| check_op(op, seed)).collect()
}
