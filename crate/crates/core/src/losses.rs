//! Training objective: penalty-reduced focal heatmap loss, smooth-L1 box
//! regression and the density-level focal loss.
//!
//! Each loss is a fused kernel returning its value and the gradient with
//! respect to the prediction; the `*_var` wrappers splice that kernel into a
//! [`Tape`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::targets::{TargetMaps, BOX_CHANNELS};
use crate::tensor::{Real, Tensor};

pub const DENSITY_BINS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_aux: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eps: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_box: 0.25,
            lambda_aux: 0.2,
            alpha: 2.0,
            beta: 4.0,
            eps: 1e-3,
            tau: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_box, self.lambda_aux, self.alpha, self.beta, self.eps, self.tau];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::invalid("loss weights must be finite and positive"));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::invalid(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        Ok(())
    }
}

/// Loss value and gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval<T> {
    pub value: f64,
    pub grad: Vec<T>,
    /// Number of cells (or centers) the loss averaged over; 0 when the batch
    /// had nothing to supervise, in which case `value` is 0.
    pub count: usize,
}

/// `−(1/N) Σ` of `(1−p)^α log p` at positives (`gt > 1−ε`) and
/// `(1−gt)^β p^α log(1−p)` elsewhere; `N` is the positive count, at least 1.
pub fn focal_heatmap_loss<T: Real>(pred: &[T], gt: &[f64], w: &LossWeights) -> Result<LossEval<T>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "heatmap loss: prediction has {} values, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (a, b) = (w.alpha, w.beta);
    let positives = gt.iter().filter(|&&g| g > 1.0 - w.eps).count();
    let n = positives.max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        let p = p.as_f64();
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("heatmap prediction {p} outside (0, 1)")));
        }
        let (term, dterm) = if g > 1.0 - w.eps {
            let q = 1.0 - p;
            (q.powf(a) * p.ln(), -a * q.powf(a - 1.0) * p.ln() + q.powf(a) / p)
        } else {
            let wt = (1.0 - g).powf(b);
            let q = 1.0 - p;
            (
                wt * p.powf(a) * q.ln(),
                wt * (a * p.powf(a - 1.0) * q.ln() - p.powf(a) / q),
            )
        };
        total += term;
        grad.push(T::from_f64(-dterm / n));
    }
    Ok(LossEval {
        value: -total / n,
        grad,
        count: positives,
    })
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Mean over valid cells of the per-cell sum of smooth-L1 over all 8 channels.
/// `pred` is `N×8×H×W` with one target map per batch item.
pub fn box_loss<T: Real>(pred: &Tensor<T>, targets: &[&TargetMaps]) -> Result<LossEval<T>> {
    let (n, c, h, w) = pred.dims4()?;
    if c != BOX_CHANNELS || n != targets.len() {
        return Err(Error::shape(format!(
            "box loss: prediction {:?} vs {} target maps of {BOX_CHANNELS} channels",
            pred.shape(),
            targets.len()
        )));
    }
    let plane = h * w;
    let mut grad = vec![T::zero(); pred.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, t) in targets.iter().enumerate() {
        if t.height() != h || t.width() != w {
            return Err(Error::shape(format!(
                "box loss: target map {}x{} vs prediction {h}x{w}",
                t.height(),
                t.width()
            )));
        }
        count += t.num_valid();
        for idx in (0..plane).filter(|&i| t.valid_mask[i]) {
            for ch in 0..BOX_CHANNELS {
                let o = (b * c + ch) * plane + idx;
                let d = pred.data()[o].as_f64() - t.box_targets.data()[ch * plane + idx];
                total += smooth_l1(d);
                grad[o] = T::from_f64(smooth_l1_grad(d));
            }
        }
    }
    if count == 0 {
        return Ok(LossEval { value: 0.0, grad, count });
    }
    let inv = 1.0 / count as f64;
    for g in &mut grad {
        *g = T::from_f64(g.as_f64() * inv);
    }
    Ok(LossEval {
        value: total * inv,
        grad,
        count,
    })
}

/// Focal classification over the density bins, evaluated at ground-truth
/// centers only: mean of `−(1−p_c)^α log p_c` with `p = softmax(logits)`.
pub fn density_loss<T: Real>(logits: &Tensor<T>, targets: &[&TargetMaps], w: &LossWeights) -> Result<LossEval<T>> {
    let (n, c, h, wd) = logits.dims4()?;
    if c != DENSITY_BINS || n != targets.len() {
        return Err(Error::shape(format!(
            "density loss: logits {:?} vs {} target maps of {DENSITY_BINS} bins",
            logits.shape(),
            targets.len()
        )));
    }
    let plane = h * wd;
    let a = w.alpha;
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, t) in targets.iter().enumerate() {
        for center in &t.centers {
            let Some(level) = center.density else { continue };
            if !(1..=DENSITY_BINS as u8).contains(&level) || center.row >= h || center.col >= wd {
                return Err(Error::invalid(format!("bad density label {level} at ({}, {})", center.row, center.col)));
            }
            let target = (level - 1) as usize;
            let idx = center.row * wd + center.col;
            let at = |k: usize| (b * c + k) * plane + idx;
            let z: Vec<f64> = (0..c).map(|k| logits.data()[at(k)].as_f64()).collect();
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let s: f64 = e.iter().sum();
            let probs: Vec<f64> = e.iter().map(|v| v / s).collect();
            let p = probs[target];
            let q = 1.0 - p;
            total += -q.powf(a) * p.ln();
            // dL/dp, then through the softmax Jacobian p_c(δ_cj − p_j)
            let dl_dp = a * q.powf(a - 1.0) * p.ln() - q.powf(a) / p;
            for k in 0..c {
                let delta = if k == target { 1.0 } else { 0.0 };
                let g = grad[at(k)].as_f64() + dl_dp * p * (delta - probs[k]);
                grad[at(k)] = T::from_f64(g);
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok(LossEval { value: 0.0, grad, count });
    }
    let inv = 1.0 / count as f64;
    for g in &mut grad {
        *g = T::from_f64(g.as_f64() * inv);
    }
    Ok(LossEval {
        value: total * inv,
        grad,
        count,
    })
}

/// `l_hm + λ_box·l_box + λ_aux·l_aux`; the aux term is dropped when `None`.
pub fn total_loss(l_hm: f64, l_box: f64, l_aux: Option<f64>, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_hm", Some(l_hm)), ("l_box", Some(l_box)), ("l_aux", l_aux)] {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss component {name} is {v}")));
            }
        }
    }
    Ok(l_hm + w.lambda_box * l_box + l_aux.map_or(0.0, |a| w.lambda_aux * a))
}

fn splice<T: Real>(tape: &mut Tape<T>, input: Var, eval: LossEval<T>) -> Result<(Var, LossEval<T>)> {
    let value = T::from_f64(eval.value);
    let grad = eval.grad.clone();
    let v = tape.scalar_fn(input, value, grad)?;
    Ok((v, LossEval { grad: Vec::new(), ..eval }))
}

/// Heatmap loss against a ground truth laid out like `pred` (`N×K×H×W`).
pub fn focal_heatmap_loss_var<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: &[f64],
    w: &LossWeights,
) -> Result<(Var, LossEval<T>)> {
    let eval = focal_heatmap_loss(tape.value(pred).data(), gt, w)?;
    splice(tape, pred, eval)
}

pub fn box_loss_var<T: Real>(tape: &mut Tape<T>, pred: Var, targets: &[&TargetMaps]) -> Result<(Var, LossEval<T>)> {
    let eval = box_loss(tape.value(pred), targets)?;
    splice(tape, pred, eval)
}

pub fn density_loss_var<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[&TargetMaps],
    w: &LossWeights,
) -> Result<(Var, LossEval<T>)> {
    let eval = density_loss(tape.value(logits), targets, w)?;
    splice(tape, logits, eval)
}

/// Batched `N×K×H×W` heatmap ground truth.
pub fn stack_heatmaps(targets: &[&TargetMaps]) -> Vec<f64> {
    targets.iter().flat_map(|t| t.heatmap.data().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::VoxelConfig;
    use crate::targets::{regression_targets, CenterLabel, OrientedBox, TargetConfig};

    const LN2: f64 = std::f64::consts::LN_2;

    fn single_cell_target(valid: bool, values: [f64; 8], density: Option<u8>) -> TargetMaps {
        TargetMaps {
            heatmap: Tensor::zeros(vec![1, 1, 1]),
            box_targets: Tensor::new(vec![8, 1, 1], values.to_vec()).unwrap(),
            valid_mask: vec![valid],
            centers: vec![CenterLabel {
                box_index: 0,
                class: 0,
                row: 0,
                col: 0,
                density,
            }],
            raw_dims: false,
        }
    }

    #[test]
    fn focal_single_cells() {
        let w = LossWeights::default();
        let neg = focal_heatmap_loss(&[0.5f64], &[0.0], &w).unwrap();
        assert!((neg.value - 0.25 * LN2).abs() < 1e-12);
        let pos = focal_heatmap_loss(&[0.5f64], &[1.0], &w).unwrap();
        assert!((pos.value - 0.25 * LN2).abs() < 1e-12);
        let near_perfect = focal_heatmap_loss(&[1.0 - 1e-9f64, 1e-9], &[1.0, 0.0], &w).unwrap();
        assert!(near_perfect.value < 1e-15);
        assert!(focal_heatmap_loss(&[0.5f64], &[0.0, 1.0], &w).is_err());
        assert!(focal_heatmap_loss(&[1.0f64], &[1.0], &w).is_err());
    }

    #[test]
    fn focal_monotonic_in_prediction() {
        let w = LossWeights::default();
        let mut last_pos = f64::INFINITY;
        let mut last_neg = -1.0;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let pos = focal_heatmap_loss(&[p], &[1.0], &w).unwrap().value;
            let neg = focal_heatmap_loss(&[p], &[0.3], &w).unwrap().value;
            assert!(pos < last_pos && neg > last_neg);
            last_pos = pos;
            last_neg = neg;
        }
    }

    #[test]
    fn box_loss_spot_values() {
        let truth = [0.1, -0.2, 0.3, 1.0, 0.5, 0.4, 0.0, 1.0];
        let t = single_cell_target(true, truth, None);
        let p = |v: [f64; 8]| Tensor::new(vec![1, 8, 1, 1], v.to_vec()).unwrap();
        assert_eq!(box_loss(&p(truth), &[&t]).unwrap().value, 0.0);
        let mut yaw_pi = truth;
        yaw_pi[7] = -1.0;
        assert_eq!(box_loss(&p(yaw_pi), &[&t]).unwrap().value, 1.5);
        let mut off = truth;
        off[2] += 0.5;
        assert!((box_loss(&p(off), &[&t]).unwrap().value - 0.125).abs() < 1e-15);
        let empty = single_cell_target(false, truth, None);
        let e = box_loss(&p(off), &[&empty]).unwrap();
        assert_eq!((e.value, e.count), (0.0, 0));
    }

    #[test]
    fn density_spot_values() {
        let w = LossWeights::default();
        let t = single_cell_target(true, [0.0; 8], Some(2));
        let uniform = Tensor::new(vec![1, 3, 1, 1], vec![0.3f64, 0.3, 0.3]).unwrap();
        let expected = -(2.0f64 / 3.0).powi(2) * (1.0f64 / 3.0).ln();
        let got = density_loss(&uniform, &[&t], &w).unwrap().value;
        assert!((got - expected).abs() < 1e-12 && (got - 0.4882).abs() < 1e-4);
        let mut last = f64::INFINITY;
        for step in 0..40 {
            let z = step as f64 * 0.5;
            let logits = Tensor::new(vec![1, 3, 1, 1], vec![0.0, z, 0.0]).unwrap();
            let v = density_loss(&logits, &[&t], &w).unwrap().value;
            assert!(v < last || (step > 0 && v == 0.0));
            last = v;
        }
        assert!(last < 1e-12);
        let none = single_cell_target(true, [0.0; 8], None);
        assert_eq!(density_loss(&uniform, &[&none], &w).unwrap().count, 0);
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, Some(1.0), &w).unwrap(), 1.45);
        assert_eq!(total_loss(0.0, 0.0, Some(0.0), &w).unwrap(), 0.0);
        assert_eq!(total_loss(1.0, 1.0, None, &w).unwrap(), 1.25);
        let no_aux = LossWeights { lambda_aux: 0.0, ..w };
        assert_eq!(total_loss(1.0, 1.0, Some(5.0), &no_aux).unwrap(), 1.25);
        let err = total_loss(1.0, f64::NAN, None, &w).unwrap_err();
        assert!(err.to_string().contains("l_box"));
    }

    #[test]
    fn losses_are_nonnegative_on_real_targets() {
        let g = VoxelConfig::desk().geometry().unwrap();
        let b = OrientedBox {
            cx: 3.1,
            cy: -7.7,
            cz: -0.3,
            l: 4.5,
            w: 1.9,
            h: 1.6,
            yaw: 0.9,
            class: 0,
            num_points: 12,
        };
        let t = regression_targets(&[b], &g, &TargetConfig::default(), None).unwrap();
        let pred: Vec<f64> = (0..t.heatmap.len()).map(|i| 0.05 + 0.9 * ((i * 7919) % 1000) as f64 / 1000.0).collect();
        let hm = focal_heatmap_loss(&pred, t.heatmap.data(), &LossWeights::default()).unwrap();
        assert!(hm.value > 0.0 && hm.count == 1);
        let zeros = Tensor::<f64>::zeros(vec![1, 8, 128, 128]);
        assert!(box_loss(&zeros, &[&t]).unwrap().value > 0.0);
    }
}
