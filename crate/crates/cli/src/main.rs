use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use raanet::bev::{load_point_cloud, save_point_cloud};
use raanet::boxes::{read_labels, write_labels};
use raanet::config::{RunConfig, FORMAT_VERSION};
use raanet::decode::DetectionRecord;
use raanet::encodings::make_encodings;
use raanet::eval::{average_precision, Frame};
use raanet::gradcheck::{check_all, check_op};
use raanet::synth::{scene_seed, synth_scene, Scene};
use raanet::tensor::{save_pgm, save_rtns};
use raanet::train::{infer, load_checkpoint, train};
use raanet::{Error, Result};

#[derive(Parser)]
#[command(name = "raanet", version = FORMAT_VERSION, about = "Range-aware BEV detector on synthetic LiDAR scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes: point clouds, labels and a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a generated scene directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Scene directory scored after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect boxes in one point cloud or every scene of a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write both attention maps of every range-aware layer.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Average precision of a detections file against labels.
    Eval {
        #[arg(long)]
        dets: PathBuf,
        /// A labels file, or a scene directory.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the position and range encodings for an H×W map.
    ExportEncodings {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&json!({"error": "usage", "message": e.render().to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            report(&error_json(&e));
            ExitCode::FAILURE
        }
    }
}

fn report(v: &Value) {
    eprintln!("{v}");
}

fn error_json(e: &Error) -> Value {
    let kind = match e {
        Error::Shape(_) => "shape",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::Config { .. } => "config",
        Error::NonFinite(_) => "non_finite",
        Error::Incompatible { .. } => "incompatible",
        Error::InsufficientData(_) => "insufficient_data",
        Error::Json(_) => "json",
    };
    let mut v = json!({"error": kind, "message": e.to_string()});
    match e {
        Error::Io { path, .. } | Error::Format { path, .. } => v["path"] = json!(path),
        Error::Config { pointer, .. } => v["pointer"] = json!(pointer),
        _ => {}
    }
    v
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData {
            config,
            out,
            count,
            seed,
            force,
        } => gen_data(&load_config(config.as_deref())?, &out, count, seed, force)?,
        Command::Train { config, data, val, out } => {
            let cfg = load_config(config.as_deref())?;
            let train_set = load_scenes(&data)?;
            let val_set = match val {
                Some(dir) => load_scenes(&dir)?,
                None => Vec::new(),
            };
            create_dir(&out)?;
            write_text(&out.join("config.json"), &cfg.to_json())?;
            let outcome = train(&cfg, &train_set, &val_set, Some(&out))?;
            log::info!(
                "trained {} steps; final val mAP {:?}",
                outcome.log.len(),
                outcome.val_ap.last().copied().flatten()
            );
        }
        Command::Infer {
            ckpt,
            input,
            out,
            dump_attention,
        } => run_infer(&ckpt, &input, &out, dump_attention)?,
        Command::Eval { dets, labels, iou, out } => {
            let report = run_eval(&dets, &labels, iou)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Gradcheck { op, seed } => {
            let reports = if op == "all" { check_all(seed)? } else { vec![check_op(&op, seed)?] };
            println!("{:<16} {:>6} {:>14}  result", "op", "seeds", "max rel err");
            for r in &reports {
                let verdict = if r.passed { "pass" } else { "FAIL" };
                println!("{:<16} {:>6} {:>14.3e}  {verdict}", r.op, r.seeds, r.max_rel_err);
            }
            if reports.iter().any(|r| !r.passed) {
                report(&json!({"error": "gradcheck", "message": "analytic and numeric gradients disagree"}));
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportEncodings { h, w, out } => {
            let e = make_encodings(h, w)?;
            create_dir(&out)?;
            save_rtns(&e.xi, out.join("xi.rtns"))?;
            save_rtns(&e.rho, out.join("rho.rtns"))?;
            let plane = h * w;
            for (ch, name) in ["xi_row", "xi_col"].into_iter().enumerate() {
                let data = e.xi.data()[ch * plane..(ch + 1) * plane].to_vec();
                save_pgm(&raanet::tensor::Tensor::new(vec![h, w], data)?, out.join(format!("{name}.pgm")))?;
            }
            save_pgm(&e.rho, out.join("rho.pgm"))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn scene_name(index: usize) -> String {
    format!("scene_{index:05}")
}

fn gen_data(cfg: &RunConfig, out: &Path, count: usize, seed: u64, force: bool) -> Result<()> {
    let occupied = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Error::InvalidArgument(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    create_dir(out)?;
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let s = scene_seed(seed, i as u64);
        let scene = synth_scene(s, &cfg.scene)?;
        let name = scene_name(i);
        save_point_cloud(&scene.cloud, out.join(format!("{name}.bin")))?;
        write_labels(out.join(format!("{name}.labels.jsonl")), &scene.boxes)?;
        scenes.push(json!({"name": name, "seed": s, "boxes": scene.boxes.len()}));
    }
    let manifest = json!({
        "version": FORMAT_VERSION,
        "seed": seed,
        "count": count,
        "scenes": scenes,
    });
    write_text(&out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    log::info!("wrote {count} scenes to {}", out.display());
    Ok(())
}

/// Scene names listed in a directory's manifest.
fn manifest_names(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("manifest.json");
    let manifest: Value = serde_json::from_str(&read_text(&path)?)?;
    let scenes = manifest["scenes"].as_array().ok_or_else(|| Error::Format {
        path: path.clone(),
        offset: 0,
        reason: "manifest has no scenes array".into(),
    })?;
    scenes
        .iter()
        .map(|s| {
            s["name"].as_str().map(str::to_owned).ok_or_else(|| Error::Format {
                path: path.clone(),
                offset: 0,
                reason: "scene entry without a name".into(),
            })
        })
        .collect()
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    manifest_names(dir)?
        .iter()
        .map(|name| {
            Ok(Scene {
                cloud: load_point_cloud(dir.join(format!("{name}.bin")))?,
                boxes: read_labels(dir.join(format!("{name}.labels.jsonl")))?,
            })
        })
        .collect()
}

fn run_infer(ckpt: &Path, input: &Path, out: &Path, dump_attention: bool) -> Result<()> {
    let (cfg, model) = load_checkpoint(ckpt)?;
    let frames: Vec<(String, PathBuf)> = if input.is_dir() {
        manifest_names(input)?
            .into_iter()
            .map(|n| {
                let p = input.join(format!("{n}.bin"));
                (n, p)
            })
            .collect()
    } else {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        vec![(stem, input.to_path_buf())]
    };
    create_dir(out)?;
    let mut records = Vec::new();
    for (frame, path) in &frames {
        let result = infer(&model, &cfg, &load_point_cloud(path)?)?;
        records.extend(result.detections.iter().map(|d| DetectionRecord::new(frame.clone(), d)));
        if dump_attention {
            let dir = out.join("attention").join(frame);
            create_dir(&dir)?;
            for dump in &result.attention {
                for (branch, map) in [("a", &dump.a), ("b", &dump.b)] {
                    let stem = format!("{}_{branch}", dump.layer.replace('/', "_"));
                    save_rtns(map, dir.join(format!("{stem}.rtns")))?;
                    save_pgm(map, dir.join(format!("{stem}.pgm")))?;
                }
            }
        }
    }
    let text = serde_json::to_string_pretty(&records)? + "\n";
    write_text(&out.join("detections.json"), &text)?;
    log::info!("{} detections over {} frames", records.len(), frames.len());
    Ok(())
}

fn run_eval(dets: &Path, labels: &Path, iou: f64) -> Result<raanet::eval::EvalReport> {
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(Error::InvalidArgument(format!("--iou must lie in (0, 1], got {iou}")));
    }
    let records: Vec<DetectionRecord> = serde_json::from_str(&read_text(dets)?)?;
    let labelled: Vec<(String, Vec<raanet::boxes::OrientedBox>)> = if labels.is_dir() {
        manifest_names(labels)?
            .into_iter()
            .map(|n| {
                let boxes = read_labels(labels.join(format!("{n}.labels.jsonl")))?;
                Ok((n, boxes))
            })
            .collect::<Result<_>>()?
    } else {
        // A single labels file is one frame; every detection belongs to it.
        vec![(String::new(), read_labels(labels)?)]
    };
    let single = !labels.is_dir();
    let frames: Vec<Frame> = labelled
        .into_iter()
        .map(|(name, ground_truth)| Frame {
            detections: records
                .iter()
                .filter(|r| single || r.frame == name)
                .map(DetectionRecord::detection)
                .collect(),
            ground_truth,
        })
        .collect();
    let num_classes = frames
        .iter()
        .flat_map(|f| f.ground_truth.iter().map(|b| b.class).chain(f.detections.iter().map(|d| d.class)))
        .max()
        .map_or(0, |c| c + 1);
    Ok(average_precision(&frames, num_classes, iou))
}
