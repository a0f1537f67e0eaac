//! Rotated BEV IoU, greedy NMS and all-point average precision.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::boxes::{ClassId, OrientedBox};
use crate::decode::Detection;

type Pt = (f64, f64);

/// Shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p.0 * q.1 - q.0 * p.1
        })
        .sum::<f64>()
        / 2.0
}

fn cross(a: Pt, b: Pt, p: Pt) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

fn intersect(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    let (cp, cq) = (cross(a, b, p), cross(a, b, q));
    let t = cp / (cp - cq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Sutherland–Hodgman: clips `subject` against the convex counter-clockwise `clip`.
pub fn clip_polygon(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (p_in, q_in) = (cross(a, b, p) >= 0.0, cross(a, b, q) >= 0.0);
            if p_in {
                out.push(p);
            }
            if p_in != q_in {
                out.push(intersect(p, q, a, b));
            }
        }
    }
    out
}

const MIN_AREA: f64 = 1e-12;

/// BEV intersection over union of two oriented rectangles, in `[0, 1]`.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let (area_a, area_b) = (a.bev_area(), b.bev_area());
    if !(area_a > MIN_AREA && area_b > MIN_AREA) {
        return 0.0;
    }
    if a.cx == b.cx && a.cy == b.cy && a.l == b.l && a.w == b.w && a.yaw == b.yaw {
        return 1.0;
    }
    let reach = (a.l.hypot(a.w) + b.l.hypot(b.w)) / 2.0;
    if (a.cx - b.cx).hypot(a.cy - b.cy) > reach {
        return 0.0;
    }
    // Clip in a fixed argument order so the result is exactly symmetric.
    let key = |o: &OrientedBox| [o.cx, o.cy, o.l, o.w, o.yaw].map(f64::to_bits);
    let (subject, clip) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    let inter = polygon_area(&clip_polygon(&subject.corners(), &clip.corners())).max(0.0);
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy per-class suppression by descending score; ties keep the earlier
/// detection. Suppresses same-class boxes with IoU `≥ iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(dets) {
        let d = &dets[i];
        if kept
            .iter()
            .all(|k| k.class != d.class || rotated_iou(&k.bbox, &d.bbox) < iou_thr)
        {
            kept.push(d.clone());
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: ClassId,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Interpolated (non-increasing) precision at every detection rank.
    pub pr: Vec<PrPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub classes: Vec<ClassReport>,
    /// Mean over classes with ground truth.
    pub mean_ap: Option<f64>,
}

/// One frame's detections next to its ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<OrientedBox>,
}

pub fn average_precision(frames: &[Frame], num_classes: usize, iou_thr: f64) -> EvalReport {
    let classes: Vec<ClassReport> = (0..num_classes).map(|k| class_ap(frames, k, iou_thr)).collect();
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let mean_ap = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    EvalReport {
        iou_threshold: iou_thr,
        classes,
        mean_ap,
    }
}

fn class_ap(frames: &[Frame], class: ClassId, iou_thr: f64) -> ClassReport {
    // (score, frame, index within frame) in global descending-score order
    let mut dets: Vec<(f64, usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| {
            fr.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class == class)
                .map(move |(i, d)| (d.score, f, i))
        })
        .collect();
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then((a.1, a.2).cmp(&(b.1, b.2))));
    let gts: Vec<Vec<&OrientedBox>> = frames
        .iter()
        .map(|fr| fr.ground_truth.iter().filter(|g| g.class == class).collect())
        .collect();
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut raw = Vec::with_capacity(dets.len());
    for &(_, f, i) in &dets {
        let det = &frames[f].detections[i].bbox;
        let mut best = (iou_thr, None);
        for (g, gt) in gts[f].iter().enumerate() {
            if matched[f][g] {
                continue;
            }
            let iou = rotated_iou(det, gt);
            if iou >= best.0 && best.1.map_or(true, |_| iou > best.0) {
                best = (iou, Some(g));
            }
        }
        match best.1 {
            Some(g) => {
                matched[f][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let recall = if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 };
        raw.push(PrPoint {
            recall,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    for i in (0..raw.len().saturating_sub(1)).rev() {
        raw[i].precision = raw[i].precision.max(raw[i + 1].precision);
    }
    let ap = (num_gt > 0).then(|| {
        let mut prev = 0.0;
        raw.iter()
            .map(|p| {
                let area = (p.recall - prev) * p.precision;
                prev = p.recall;
                area
            })
            .sum::<f64>()
            .clamp(0.0, 1.0)
    });
    ClassReport {
        class,
        ap,
        num_gt,
        tp,
        fp,
        fn_: num_gt - tp,
        pr: raw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> OrientedBox {
        OrientedBox {
            cx,
            cy,
            cz: 0.0,
            l,
            w,
            h: 1.0,
            yaw,
            class: 0,
            num_points: 0,
        }
    }

    fn det(b: OrientedBox, score: f64) -> Detection {
        Detection {
            bbox: b,
            score,
            class: b.class,
        }
    }

    #[test]
    fn iou_closed_forms() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_iou(&a, &a), 1.0);
        assert_eq!(rotated_iou(&a, &bx(10.0, 0.0, 1.0, 1.0, 0.0)), 0.0);
        let shifted = bx(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((rotated_iou(&a, &shifted) - 1.0 / 3.0).abs() < 1e-12);
        // square rotated 45° inside itself: octagon overlap
        let r = bx(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        let inter = 2.0 * (2.0f64.sqrt() - 1.0);
        assert!((rotated_iou(&a, &r) - inter / (2.0 - inter)).abs() < 1e-12);
        assert_eq!(rotated_iou(&a, &bx(0.0, 0.0, 0.0, 1.0, 0.0)), 0.0);
    }

    #[test]
    fn iou_is_rigid_invariant() {
        let a = bx(1.0, 2.0, 4.0, 2.0, 0.3);
        let b = bx(2.0, 2.5, 3.0, 1.5, -0.4);
        let base = rotated_iou(&a, &b);
        let (phi, tx, ty) = (1.1f64, -5.0, 3.0);
        let (s, c) = phi.sin_cos();
        let mv = |o: &OrientedBox| OrientedBox {
            cx: c * o.cx - s * o.cy + tx,
            cy: s * o.cx + c * o.cy + ty,
            yaw: o.yaw + phi,
            ..*o
        };
        assert!((rotated_iou(&mv(&a), &mv(&b)) - base).abs() < 1e-9);
        assert!((rotated_iou(&b, &a) - base).abs() < 1e-12);
    }

    #[test]
    fn nms_traces() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(nms(&[det(a, 0.8), det(a, 0.9)], 0.2), vec![det(a, 0.9)]);
        let far = bx(20.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(nms(&[det(a, 0.8), det(far, 0.9)], 0.2).len(), 2);
        // A–B overlap, B–C overlap, A and C apart
        let b = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        let c = bx(2.1, 0.0, 2.0, 2.0, 0.0);
        let kept = nms(&[det(c, 0.5), det(b, 0.7), det(a, 0.9)], 0.2);
        assert_eq!(kept, vec![det(a, 0.9), det(c, 0.5)]);
    }

    #[test]
    fn ap_traces() {
        let g = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        let perfect = Frame {
            detections: vec![det(g, 0.9)],
            ground_truth: vec![g],
        };
        assert_eq!(average_precision(&[perfect], 1, 0.5).classes[0].ap, Some(1.0));
        let none = Frame {
            detections: vec![],
            ground_truth: vec![g],
        };
        assert_eq!(average_precision(&[none], 1, 0.5).classes[0].ap, Some(0.0));
        let tp_fp = Frame {
            detections: vec![det(g, 0.9), det(bx(30.0, 0.0, 4.0, 2.0, 0.0), 0.5)],
            ground_truth: vec![g],
        };
        let r = average_precision(&[tp_fp], 1, 0.5);
        assert_eq!(r.classes[0].ap, Some(1.0));
        assert_eq!((r.classes[0].tp, r.classes[0].fp, r.classes[0].fn_), (1, 1, 0));
        let no_gt = Frame {
            detections: vec![det(g, 0.9)],
            ground_truth: vec![],
        };
        let r = average_precision(&[no_gt], 1, 0.5);
        assert_eq!((r.classes[0].ap, r.mean_ap), (None, None));
    }

    #[test]
    fn fp_before_tp_halves_precision() {
        let g = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        let f = Frame {
            detections: vec![det(bx(30.0, 0.0, 4.0, 2.0, 0.0), 0.9), det(g, 0.5)],
            ground_truth: vec![g],
        };
        assert_eq!(average_precision(&[f], 1, 0.5).classes[0].ap, Some(0.5));
    }
}
