use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raanet::bev::{apply_augmentation, pillarize, AugmentDraw, GridGeometry, Point, PointCloud, VoxelConfig};
use raanet::boxes::OrientedBox;
use raanet::decode::Detection;
use raanet::eval::{average_precision, nms, rotated_iou, Frame};
use raanet::losses::{focal_heatmap_loss, total_loss, LossWeights};
use raanet::targets::{anisotropic_gaussian_patch, regression_targets, render_heatmap, Patch, TargetConfig};

fn grid() -> GridGeometry {
    VoxelConfig::desk().geometry().unwrap()
}

fn dense(p: &Patch, g: &GridGeometry) -> Vec<f64> {
    let mut m = vec![0.0; g.rows * g.cols];
    for &(r, c, v) in &p.cells {
        m[r * g.cols + c] = v;
    }
    m
}

fn bx(cx: f64, cy: f64, l: f64, w: f64, yaw: f64, class: usize) -> OrientedBox {
    OrientedBox {
        cx,
        cy,
        cz: -0.2,
        l,
        w,
        h: 1.5,
        yaw,
        class,
        num_points: 30,
    }
}

fn arb_box() -> impl Strategy<Value = OrientedBox> {
    (-20.0..20.0, -20.0..20.0, 0.5..6.0, 0.5..3.0, -PI..PI).prop_map(|(x, y, l, w, t)| bx(x, y, l, w, t, 0))
}

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| Point {
            x: rng.gen_range(-30.0..30.0),
            y: rng.gen_range(-30.0..30.0),
            z: rng.gen_range(-2.5..1.5),
            intensity: rng.gen_range(0.0..1.0),
        })
        .collect();
    PointCloud { points }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pillarize_ignores_point_order(n in 0usize..2000, seed in 0u64..10_000) {
        let cfg = VoxelConfig::desk();
        let cloud = random_cloud(n, seed);
        let mut shuffled = cloud.clone();
        shuffled.points.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
        let a = pillarize(&cloud, &cfg).unwrap();
        let b = pillarize(&shuffled, &cfg).unwrap();
        for (x, y) in a.features.data().iter().zip(b.features.data()) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn augmentation_keeps_points_in_their_box(
        b in arb_box(), flip: bool, angle in -PI / 4.0..PI / 4.0,
        scale in AugmentDraw::SCALE_RANGE.0..AugmentDraw::SCALE_RANGE.1, seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, c) = b.yaw.sin_cos();
        let points: Vec<Point> = (0..200)
            .map(|_| {
                let u = rng.gen_range(-0.5..0.5) * b.l;
                let v = rng.gen_range(-0.5..0.5) * b.w;
                let dz = rng.gen_range(-0.5..0.5) * b.h;
                Point {
                    x: (b.cx + c * u - s * v) as f32,
                    y: (b.cy + s * u + c * v) as f32,
                    z: (b.cz + dz) as f32,
                    intensity: 0.3,
                }
            })
            .collect();
        let cloud = PointCloud { points };
        let draw = AugmentDraw { flip, angle, scale };
        let (moved, boxes) = apply_augmentation(&cloud, &[b], &draw);
        for (p, q) in cloud.points.iter().zip(&moved.points) {
            if b.contains(p.x as f64, p.y as f64, p.z as f64, 1e-5) {
                prop_assert!(boxes[0].contains(q.x as f64, q.y as f64, q.z as f64, 1e-5));
            }
        }
    }

    #[test]
    fn heatmap_bounded_with_one_peak_per_box(
        cells in prop::collection::btree_set((2usize..126, 2usize..126), 1..8),
        dims in prop::collection::vec((0.2..5.0, 0.2..2.5, -PI..PI, 0usize..2), 8),
    ) {
        let g = grid();
        let boxes: Vec<OrientedBox> = cells
            .iter()
            .zip(&dims)
            .map(|(&(r, c), &(l, w, t, k))| {
                let (x, y) = g.cell_center(r, c);
                bx(x + 0.05, y - 0.07, l, w, t, k)
            })
            .collect();
        let heat = render_heatmap(&boxes, &g, &TargetConfig::default()).unwrap();
        prop_assert!(heat.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let plane = g.rows * g.cols;
        for b in &boxes {
            let (r, c) = g.cell_of(b.cx, b.cy).unwrap();
            prop_assert_eq!(heat.data()[b.class * plane + r * g.cols + c], 1.0);
        }
        prop_assert_eq!(heat.data().iter().filter(|&&v| v == 1.0).count(), boxes.len());
    }

    #[test]
    fn larger_decay_never_raises_the_patch(
        r in 10usize..118, c in 10usize..118, l in 0.5..6.0, w in 0.5..3.0, t in -PI..PI,
        d in 0.5..8.0, extra in 0.01..4.0,
    ) {
        let g = grid();
        let (x, y) = g.cell_center(r, c);
        let b = bx(x, y, l, w, t, 0);
        let soft = dense(&anisotropic_gaussian_patch(&b, &g, d).unwrap(), &g);
        let sharp = dense(&anisotropic_gaussian_patch(&b, &g, d + extra).unwrap(), &g);
        prop_assert!(soft.iter().zip(&sharp).all(|(s, t)| t <= s));
    }

    #[test]
    fn valid_mask_shrinks_with_tau(
        boxes in prop::collection::vec((12usize..116, 12usize..116, 0.5..6.0, 0.5..3.0, -PI..PI), 1..5),
        mut taus in prop::collection::vec(0.0..1.0f64, 2..6),
    ) {
        let g = grid();
        let boxes: Vec<OrientedBox> = boxes
            .into_iter()
            .map(|(r, c, l, w, t)| {
                let (x, y) = g.cell_center(r, c);
                bx(x, y, l, w, t, 0)
            })
            .collect();
        taus.sort_by(f64::total_cmp);
        let mut last = usize::MAX;
        for tau in taus {
            let cfg = TargetConfig { tau, ..Default::default() };
            let n = regression_targets(&boxes, &g, &cfg, None).unwrap().num_valid();
            prop_assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn quarter_turn_rotates_the_patch(
        r in 30usize..98, c in 30usize..98, l in 0.5..6.0, w in 0.5..3.0, t in -PI..PI, d in 1.0..6.0,
    ) {
        let g = grid();
        let (x, y) = g.cell_center(r, c);
        let a = anisotropic_gaussian_patch(&bx(x, y, l, w, t, 0), &g, d).unwrap();
        let b = dense(&anisotropic_gaussian_patch(&bx(x, y, l, w, t + FRAC_PI_2, 0), &g, d).unwrap(), &g);
        // Column offsets run along +x and row offsets along +y, so a quarter turn
        // sends the offset (dr, dc) to (dc, −dr).
        for &(ra, ca, v) in &a.cells {
            let (dr, dc) = (ra as isize - r as isize, ca as isize - c as isize);
            let (rb, cb) = ((r as isize + dc) as usize, (c as isize - dr) as usize);
            prop_assert!((b[rb * g.cols + cb] - v).abs() < 1e-9, "({}, {})", dr, dc);
        }
        let nonzero = b.iter().filter(|&&v| v > 0.0).count();
        prop_assert_eq!(nonzero, a.cells.len());
    }

    #[test]
    fn losses_nonnegative_and_focal_monotone(
        cells in prop::collection::vec((0.001..0.999f64, 0.0..1.0f64), 1..64),
        p in 0.01..0.98f64, dp in 0.001..0.01f64, g in 0.0..0.99f64,
    ) {
        let w = LossWeights::default();
        let (pred, gt): (Vec<f64>, Vec<f64>) = cells.into_iter().unzip();
        prop_assert!(focal_heatmap_loss(&pred, &gt, &w).unwrap().value >= 0.0);
        let at = |p: f64, g: f64| focal_heatmap_loss(&[p], &[g], &w).unwrap().value;
        prop_assert!(at(p + dp, 1.0) < at(p, 1.0));
        prop_assert!(at(p + dp, g) > at(p, g));
    }

    #[test]
    fn total_loss_is_linear(
        hm in 0.0..10.0f64, bl in 0.0..10.0f64, aux in 0.0..10.0f64, d in 0.0..5.0f64,
        lb in 0.0..3.0f64, la in 0.0..3.0f64,
    ) {
        let w = LossWeights { lambda_box: lb, lambda_aux: la, ..Default::default() };
        let base = total_loss(hm, bl, Some(aux), &w).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        prop_assert!(close(total_loss(hm + d, bl, Some(aux), &w).unwrap() - base, d));
        prop_assert!(close(total_loss(hm, bl + d, Some(aux), &w).unwrap() - base, lb * d));
        prop_assert!(close(total_loss(hm, bl, Some(aux + d), &w).unwrap() - base, la * d));
        prop_assert!(close(base - total_loss(hm, bl, None, &w).unwrap(), la * aux));
    }

    #[test]
    fn iou_symmetric_and_rigid(
        a in arb_box(), b in arb_box(), phi in -PI..PI, tx in -50.0..50.0, ty in -50.0..50.0,
    ) {
        let b = OrientedBox { cx: a.cx + (b.cx / 8.0), cy: a.cy + (b.cy / 8.0), ..b };
        let iou = rotated_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(iou, rotated_iou(&b, &a));
        prop_assert_eq!(rotated_iou(&a, &a), 1.0);
        let (s, c) = phi.sin_cos();
        let mv = |o: &OrientedBox| OrientedBox {
            cx: c * o.cx - s * o.cy + tx,
            cy: s * o.cx + c * o.cy + ty,
            yaw: o.yaw + phi,
            ..*o
        };
        prop_assert!((rotated_iou(&mv(&a), &mv(&b)) - iou).abs() < 1e-6);
    }

    #[test]
    fn nms_ignores_input_order(
        raw in prop::collection::vec((-8.0..8.0, -8.0..8.0, 1.0..4.0, 1.0..2.0, -PI..PI, 0usize..2), 1..30),
        thr in 0.05..0.9, seed in 0u64..10_000,
    ) {
        // Distinct scores so the order is fully decided by score.
        let dets: Vec<Detection> = raw
            .iter()
            .enumerate()
            .map(|(i, &(x, y, l, w, t, k))| Detection {
                bbox: bx(x, y, l, w, t, k),
                score: 0.01 + i as f64 / (raw.len() as f64 + 1.0),
                class: k,
            })
            .collect();
        let mut shuffled = dets.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(nms(&dets, thr), nms(&shuffled, thr));
    }

    #[test]
    fn ap_does_not_grow_with_iou_threshold(
        frames in prop::collection::vec(
            (prop::collection::vec(arb_box(), 0..4), prop::collection::vec((0.7..1.3, -0.8..0.8, -0.3..0.3, 0.0..1.0), 0..5)),
            1..5,
        ),
        mut thresholds in prop::collection::vec(0.05..0.95f64, 2..5),
    ) {
        let frames: Vec<Frame> = frames
            .into_iter()
            .map(|(gt, jitters)| {
                let detections = gt
                    .iter()
                    .zip(&jitters)
                    .map(|(g, &(sl, dx, dt, score))| Detection {
                        bbox: OrientedBox { cx: g.cx + dx, l: g.l * sl, yaw: g.yaw + dt, ..*g },
                        score,
                        class: 0,
                    })
                    .collect();
                Frame { detections, ground_truth: gt }
            })
            .collect();
        thresholds.sort_by(f64::total_cmp);
        let mut last = f64::INFINITY;
        for thr in thresholds {
            let ap = average_precision(&frames, 1, thr).classes[0].ap.unwrap_or(0.0);
            prop_assert!(ap <= last + 1e-12);
            last = ap;
        }
    }
}
