//! Deterministic training loop, validation AP, checkpoints and inference.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bev::{apply_augmentation, pillarize, AugmentDraw, BevGrid, GridGeometry, PointCloud};
use crate::boxes::OrientedBox;
use crate::config::{RunConfig, FORMAT_VERSION};
use crate::decode::{decode_boxes, extract_peaks, Detection};
use crate::error::{Error, Result};
use crate::eval::{average_precision, nms, EvalReport, Frame};
use crate::losses::{box_loss_var, density_loss_var, focal_heatmap_loss_var, stack_heatmaps, total_loss};
use crate::model::{build_model, RaaNetModel, OUTPUT_STRIDE};
use crate::params::Adam;
use crate::synth::{scene_seed, Scene};
use crate::targets::{fit_thresholds, regression_targets, DensityThresholds, TargetMaps};
use crate::tensor::{load_rtns, save_rtns, Tensor};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_hm: f64,
    pub l_box: f64,
    pub l_aux: f64,
    pub total: f64,
    pub gamma_values: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_ap: Option<f64>,
}

pub struct TrainOutcome {
    pub model: RaaNetModel,
    pub log: Vec<LogRecord>,
    /// Validation mAP after each epoch (`None` without a validation set).
    pub val_ap: Vec<Option<f64>>,
    /// Mean total loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub thresholds: Option<DensityThresholds>,
}

/// Pillar features and targets of one (possibly augmented) scene.
pub struct Prepared {
    pub grid: BevGrid,
    pub targets: TargetMaps,
}

/// Output-grid geometry for a run.
pub fn output_geometry(cfg: &RunConfig) -> Result<GridGeometry> {
    cfg.voxel.geometry()?.downsample(OUTPUT_STRIDE)
}

/// Drops boxes whose center left the grid.
fn in_range(boxes: Vec<OrientedBox>, grid: &GridGeometry) -> Vec<OrientedBox> {
    boxes.into_iter().filter(|b| grid.cell_of(b.cx, b.cy).is_some()).collect()
}

pub fn prepare(
    cfg: &RunConfig,
    cloud: &PointCloud,
    boxes: &[OrientedBox],
    draw: &AugmentDraw,
    thresholds: Option<&DensityThresholds>,
) -> Result<Prepared> {
    let (cloud, boxes) = apply_augmentation(cloud, boxes, draw);
    let grid = pillarize(&cloud, &cfg.voxel)?;
    let out = output_geometry(cfg)?;
    let boxes = in_range(boxes, &out);
    let targets = regression_targets(&boxes, &out, &cfg.target_config(), thresholds)?;
    Ok(Prepared { grid, targets })
}

fn augment_draw(cfg: &RunConfig, epoch: usize, index: usize) -> AugmentDraw {
    if !cfg.train.augment {
        return AugmentDraw::identity();
    }
    let seed = scene_seed(scene_seed(cfg.train.seed, epoch as u64), index as u64);
    AugmentDraw::sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Detections for one BEV grid: peaks, decode, NMS, top-k.
pub fn detect(model: &RaaNetModel, cfg: &RunConfig, grid: &BevGrid) -> Result<Vec<Detection>> {
    let (heat, boxes) = model.predict(&grid.features)?;
    detections_from_maps(cfg, &heat, &boxes)
}

pub fn detections_from_maps(cfg: &RunConfig, heatmap: &Tensor<f32>, box_map: &Tensor<f32>) -> Result<Vec<Detection>> {
    let e = &cfg.eval;
    let peaks = extract_peaks(heatmap, e.peak_window, e.score_threshold)?;
    let dets = decode_boxes(&peaks, box_map, &output_geometry(cfg)?, cfg.ablation.raw_dims)?;
    let mut kept = nms(&dets, e.nms_iou);
    kept.truncate(e.max_detections);
    Ok(kept)
}

pub fn evaluate(model: &RaaNetModel, cfg: &RunConfig, scenes: &[Scene]) -> Result<EvalReport> {
    let grids = pillarize_all(cfg, scenes)?;
    evaluate_grids(model, cfg, &grids, scenes)
}

fn pillarize_all(cfg: &RunConfig, scenes: &[Scene]) -> Result<Vec<BevGrid>> {
    scenes.iter().map(|s| pillarize(&s.cloud, &cfg.voxel)).collect()
}

/// [`evaluate`] with the scenes already pillarized.
fn evaluate_grids(model: &RaaNetModel, cfg: &RunConfig, grids: &[BevGrid], scenes: &[Scene]) -> Result<EvalReport> {
    let frames = grids
        .iter()
        .zip(scenes)
        .map(|(grid, s)| {
            Ok(Frame {
                detections: detect(model, cfg, grid)?,
                ground_truth: s.boxes.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average_precision(&frames, cfg.model.num_classes, cfg.eval.ap_iou))
}

/// Trains from scratch. With `out`, writes `metrics.jsonl` as it goes and the
/// final checkpoint to `out/checkpoint`; a non-finite loss aborts after
/// saving the last good parameters to `out/last_good`.
pub fn train(cfg: &RunConfig, train_set: &[Scene], val_set: &[Scene], out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let tc = &cfg.train;
    let w = &tc.weights;
    let mut model = build_model(&cfg.model_config(), tc.seed)?;
    let thresholds = if cfg.ablation.use_adle {
        let boxes: Vec<OrientedBox> = train_set.iter().flat_map(|s| s.boxes.iter().copied()).collect();
        Some(fit_thresholds(&boxes, cfg.model.num_classes, tc.density_percentiles.0, tc.density_percentiles.1)?)
    } else {
        None
    };
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let val_grids = pillarize_all(cfg, val_set)?;
    let mut adam = Adam::new(tc.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(scene_seed(tc.seed, u64::MAX));
    let mut log = Vec::new();
    let mut val_ap = Vec::new();
    let mut epoch_loss = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(tc.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let prepared = batch
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    prepare(cfg, &s.cloud, &s.boxes, &augment_draw(cfg, epoch, i), thresholds.as_ref())
                })
                .collect::<Result<Vec<_>>>()?;
            let features: Vec<Tensor<f32>> = prepared.iter().map(|p| p.grid.features.clone()).collect();
            let targets: Vec<&TargetMaps> = prepared.iter().map(|p| &p.targets).collect();

            let mut tape = Tape::new();
            let x = tape.constant(Tensor::stack(&features)?);
            let outputs = model.forward(&mut tape, x, cfg.ablation.use_adle)?;
            let (hm, hm_eval) = focal_heatmap_loss_var(&mut tape, outputs.heatmap, &stack_heatmaps(&targets), w)?;
            let (bx, bx_eval) = box_loss_var(&mut tape, outputs.boxes, &targets)?;
            let bx_scaled = tape.scale(bx, w.lambda_box);
            let mut loss = tape.add(hm, bx_scaled)?;
            let mut l_aux = 0.0;
            if let Some(d) = outputs.density {
                let (aux, aux_eval) = density_loss_var(&mut tape, d, &targets, w)?;
                let aux_scaled = tape.scale(aux, w.lambda_aux);
                loss = tape.add(loss, aux_scaled)?;
                l_aux = aux_eval.value;
            }
            let aux = cfg.ablation.use_adle.then_some(l_aux);
            let checked = total_loss(hm_eval.value, bx_eval.value, aux, w);
            let total = match checked {
                Ok(t) if tape.value(loss).all_finite() => t,
                _ => {
                    if let Some(dir) = out {
                        save_checkpoint(&model, cfg, &dir.join("last_good"))?;
                    }
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {epoch}, step {step}: l_hm={} l_box={} l_aux={l_aux}",
                        hm_eval.value, bx_eval.value
                    )));
                }
            };
            tape.backward(loss, &mut model.params)?;
            drop(tape);
            adam.step(&mut model.params)?;
            step += 1;
            loss_sum += total;
            let last = bi + 1 == batches.len();
            let epoch_ap = if last && !val_set.is_empty() {
                evaluate_grids(&model, cfg, &val_grids, val_set)?.mean_ap.or(Some(0.0))
            } else {
                None
            };
            let rec = LogRecord {
                epoch,
                step,
                l_hm: hm_eval.value,
                l_box: bx_eval.value,
                l_aux,
                total,
                gamma_values: model.gamma_values(),
                val_ap: epoch_ap,
            };
            if let Some((f, p)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
            }
            if last {
                val_ap.push(epoch_ap);
                log::info!(
                    "epoch {epoch}: mean loss {:.4}, val mAP {:?}",
                    (loss_sum + 0.0) / batches.len() as f64,
                    epoch_ap
                );
            }
            log.push(rec);
        }
        epoch_loss.push(loss_sum / batches.len() as f64);
    }
    if let Some(dir) = out {
        save_checkpoint(&model, cfg, &dir.join("checkpoint"))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        val_ap,
        epoch_loss,
        thresholds,
    })
}

/// `config.json` of a checkpoint directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: String,
    pub config: RunConfig,
    pub parameters: Vec<String>,
}

pub fn save_checkpoint(model: &RaaNetModel, cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cfg = cfg.clone();
    cfg.ablation.use_adle = model.has_density_head();
    let meta = CheckpointMeta {
        version: FORMAT_VERSION.to_string(),
        config: cfg,
        parameters: model.params.iter().map(|(_, p)| p.name.clone()).collect(),
    };
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&p, e))?;
    for (_, param) in model.params.iter() {
        save_rtns(&param.value, dir.join(format!("{}.rtns", param.name)))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, RaaNetModel)> {
    let p = dir.join("config.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::Incompatible {
            expected: FORMAT_VERSION.to_string(),
            got: meta.version,
        });
    }
    meta.config.validate()?;
    let mut model = build_model(&meta.config.model_config(), meta.config.train.seed)?;
    let expected: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
    if expected != meta.parameters {
        return Err(Error::Incompatible {
            expected: expected.join(","),
            got: meta.parameters.join(","),
        });
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.get(id).name.clone();
        let value = load_rtns(dir.join(format!("{name}.rtns")))?;
        let slot = &mut model.params.get_mut(id).value;
        if value.shape() != slot.shape() {
            return Err(Error::Incompatible {
                expected: format!("{name} {:?}", slot.shape()),
                got: format!("{:?}", value.shape()),
            });
        }
        *slot = value;
    }
    Ok((meta.config, model))
}

/// Copies a checkpoint without its auxiliary density head.
pub fn strip_density_head(src: &Path, dst: &Path) -> Result<()> {
    let (mut cfg, model) = load_checkpoint(src)?;
    cfg.ablation.use_adle = false;
    let mut stripped = build_model(&cfg.model_config(), cfg.train.seed)?;
    for id in stripped.params.ids().collect::<Vec<_>>() {
        let name = stripped.params.get(id).name.clone();
        let src_id = model.params.find(&name).ok_or_else(|| Error::invalid(format!("missing {name}")))?;
        stripped.params.get_mut(id).value = model.params.value(src_id).clone();
    }
    save_checkpoint(&stripped, &cfg, dst)
}

/// Attention maps of one range-aware layer for a single frame.
pub struct AttentionDump {
    pub layer: String,
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
}

pub struct Inference {
    pub detections: Vec<Detection>,
    pub attention: Vec<AttentionDump>,
}

/// Runs the heatmap and box heads on `cloud`; the density head never runs.
pub fn infer(model: &RaaNetModel, cfg: &RunConfig, cloud: &PointCloud) -> Result<Inference> {
    let grid = pillarize(cloud, &cfg.voxel)?;
    infer_grid(model, cfg, &grid)
}

pub fn infer_grid(model: &RaaNetModel, cfg: &RunConfig, grid: &BevGrid) -> Result<Inference> {
    let expected = cfg.voxel.geometry()?;
    if grid.geometry != expected {
        return Err(Error::Incompatible {
            expected: format!("{:?}", expected),
            got: format!("{:?}", grid.geometry),
        });
    }
    let mut tape = Tape::inference();
    let x = tape.constant(grid.features.clone());
    let out = model.forward(&mut tape, x, false)?;
    let detections = detections_from_maps(cfg, tape.value(out.heatmap), tape.value(out.boxes))?;
    let attention = out
        .attention
        .iter()
        .map(|t| AttentionDump {
            layer: t.layer.clone(),
            a: tape.value(t.a).clone(),
            b: tape.value(t.b).clone(),
        })
        .collect();
    Ok(Inference { detections, attention })
}

/// Training and validation scenes of the fixed synthetic dataset.
pub fn dataset(cfg: &RunConfig, seed: u64, train: usize, val: usize) -> Result<(Vec<Scene>, Vec<Scene>)> {
    Ok((
        generate_scenes(cfg, scene_seed(seed, 1), train)?,
        generate_scenes(cfg, scene_seed(seed, 2), val)?,
    ))
}

/// `count` scenes with seeds derived from `base`.
pub fn generate_scenes(cfg: &RunConfig, base: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| crate::synth::synth_scene(scene_seed(base, i), &cfg.scene))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.voxel.x_range = (-12.8, 12.8);
        cfg.voxel.y_range = (-12.8, 12.8);
        cfg.voxel.cell = (0.8, 0.8);
        cfg.scene.half_extent = 12.8;
        cfg.scene.boxes = (3, 5);
        cfg.model.widths = [8, 8, 8];
        cfg.model.head_width = 8;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        cfg
    }

    #[test]
    fn smoke_epoch_is_finite_and_reproducible() {
        let cfg = tiny_config();
        let scenes = generate_scenes(&cfg, 1, 24).unwrap();
        let run = || train(&cfg, &scenes[..20], &scenes[20..], None).unwrap();
        let a = run();
        assert_eq!(a.log.len(), 5);
        assert!(a.log.iter().all(|r| r.total.is_finite()));
        assert!(a.val_ap[0].is_some());
        let b = run();
        assert_eq!(a.log, b.log);
        for ((_, p), (_, q)) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_strip() {
        let cfg = tiny_config();
        let scenes = generate_scenes(&cfg, 2, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, &scenes, &[], Some(dir.path())).unwrap();
        let (cfg2, model) = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
        assert_eq!(cfg2, cfg);
        for ((_, p), (_, q)) in outcome.model.params.iter().zip(model.params.iter()) {
            assert_eq!(p.value, q.value);
        }
        let stripped_dir = dir.path().join("stripped");
        strip_density_head(&dir.path().join("checkpoint"), &stripped_dir).unwrap();
        let (cfg3, stripped) = load_checkpoint(&stripped_dir).unwrap();
        assert!(!cfg3.ablation.use_adle && !stripped.has_density_head());
        let a = infer(&model, &cfg2, &scenes[0].cloud).unwrap();
        let b = infer(&stripped, &cfg3, &scenes[0].cloud).unwrap();
        assert_eq!(a.detections, b.detections);
        let lines = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let cfg = tiny_config();
        let model = build_model(&cfg.model_config(), 0).unwrap();
        let other = pillarize(&PointCloud::default(), &crate::bev::VoxelConfig::desk()).unwrap();
        assert!(matches!(infer_grid(&model, &cfg, &other), Err(Error::Incompatible { .. })));
    }
}
