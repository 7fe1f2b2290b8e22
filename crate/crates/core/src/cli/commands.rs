use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use super::{Command, ExportFormat, RunManifest, EXIT_NUMERIC, EXIT_OK};
use crate::dataio::{encode_ply, generate_synthetic, read_dataset, write_dataset, write_sscv, LabelSpace, SceneSample, VoxelGrid};
use crate::error::{config_err, Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::pipeline::{
    evaluate, evaluate_with, load_checkpoint, run_gradient_suite, save_checkpoint, train, EpochRecord, LossReport,
    Model, ModelConfig, GRAD_TOLERANCE,
};

pub(super) fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen { config, out, count } => gen(config.as_deref(), &out, count),
        Command::Train { config, data, out, sweep_d_exp } => train_cmd(config.as_deref(), &data, &out, sweep_d_exp),
        Command::Eval { checkpoint, data, report, workers, oracle } => {
            eval(checkpoint.as_deref(), &data, &report, workers, oracle)
        }
        Command::Gradcheck { config, corrupt_grad } => gradcheck(config.as_deref(), corrupt_grad),
        Command::Export { checkpoint, data, out, format } => export(&checkpoint, &data, &out, format),
    }
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    path.map_or_else(|| Ok(ModelConfig::default()), ModelConfig::load)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn relative(root: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn gen(config: Option<&Path>, out: &Path, count: usize) -> Result<i32> {
    let cfg = load_config(config)?;
    if count == 0 {
        return Err(config_err!("--count must be at least 1"));
    }
    let spec = VoxelGridSpec::forward_facing(cfg.grid, cfg.resolution)?;
    let ls = LabelSpace::synthetic();
    let samples = generate_synthetic(cfg.seed, count, &spec, &ls, (cfg.image_w, cfg.image_h))?;
    let dirs = write_dataset(&samples, &ls, out)?;
    let mut manifest = RunManifest::new("gen", &cfg);
    manifest.outputs.push("labels.txt".into());
    manifest.outputs.extend(dirs.iter().map(|d| relative(out, d)));
    manifest.write(&out.join("manifest.txt"))?;
    println!("wrote {count} samples to {}", out.display());
    Ok(EXIT_OK)
}

fn check_data(cfg: &ModelConfig, data: &[SceneSample]) -> Result<()> {
    for (i, s) in data.iter().enumerate() {
        if s.spec.dims != cfg.grid || s.image_size() != (cfg.image_w, cfg.image_h) {
            return Err(Error::Data(format!(
                "sample {i}: grid {:?} and image {:?} do not match the config's {:?} and {:?}",
                s.spec.dims,
                s.image_size(),
                cfg.grid,
                (cfg.image_w, cfg.image_h)
            )));
        }
    }
    Ok(())
}

fn losses_csv(epochs: &[EpochRecord]) -> String {
    let mut s = format!("epoch,steps,{},scene_iou,miou\n", LossReport::CSV_HEADER);
    for e in epochs {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.steps, e.loss.csv_row(), opt(e.scene_iou), opt(e.miou));
    }
    s
}

struct TrainSummary {
    steps: usize,
    final_loss: f64,
    scene_iou: f64,
    miou: f64,
}

/// Trains one model into `out` and writes its checkpoint, losses.csv and
/// metrics.csv.
fn train_one(cfg: &ModelConfig, ls: &LabelSpace, data: &[SceneSample], out: &Path, manifest: &mut RunManifest, root: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    let mut model = Model::new(cfg.clone(), ls.num_classes())?;
    let outcome = train(&mut model, data)?;
    let ckpt = out.join("checkpoint.ssck");
    save_checkpoint(&model, &ckpt)?;
    let losses = out.join("losses.csv");
    write_text(&losses, &losses_csv(&outcome.epochs))?;
    let cm = evaluate(&model, data, 1)?;
    let metrics = out.join("metrics.csv");
    write_text(&metrics, &cm.report_csv(&ls.names))?;
    manifest.outputs.extend([&ckpt, &losses, &metrics].map(|p| relative(root, p)));
    let untouched = outcome.untouched_params(&model.store);
    if !untouched.is_empty() {
        info!("parameters that never received a gradient: {}", untouched.join(", "));
    }
    Ok(TrainSummary {
        steps: outcome.steps,
        final_loss: outcome.epochs.last().map_or(f64::NAN, |e| e.loss.total),
        scene_iou: cm.scene_iou(),
        miou: cm.semantic_miou().1,
    })
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, sweep: Option<Vec<usize>>) -> Result<i32> {
    let cfg = load_config(config)?;
    let cfg = cfg.clone().with_variant(cfg.variant);
    let (ls, samples) = read_dataset(data)?;
    check_data(&cfg, &samples)?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("train", &cfg);
    match sweep {
        None => {
            let s = train_one(&cfg, &ls, &samples, out, &mut manifest, out)?;
            println!("trained {} steps: scene_iou {:.6}, miou {:.6}", s.steps, s.scene_iou, s.miou);
        }
        Some(dims) => {
            if dims.is_empty() {
                return Err(config_err!("--sweep-d-exp needs at least one value"));
            }
            let mut csv = String::from("d_exp,steps,final_loss,scene_iou,miou\n");
            for d in dims {
                let mut c = cfg.clone();
                c.d_exp = d;
                c.validate()?;
                let s = train_one(&c, &ls, &samples, &out.join(format!("d_exp_{d}")), &mut manifest, out)?;
                let _ = writeln!(csv, "{d},{},{:.6},{:.6},{:.6}", s.steps, s.final_loss, s.scene_iou, s.miou);
                println!("d_exp {d}: scene_iou {:.6}, miou {:.6}", s.scene_iou, s.miou);
            }
            write_text(&out.join("sweep.csv"), &csv)?;
            manifest.outputs.push("sweep.csv".into());
        }
    }
    manifest.write(&out.join("manifest.txt"))?;
    Ok(EXIT_OK)
}

fn load_compatible(checkpoint: &Path, ls: &LabelSpace, data: &[SceneSample]) -> Result<Model> {
    let model = load_checkpoint(checkpoint)?;
    if model.num_classes != ls.num_classes() {
        return Err(Error::Checkpoint(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model.num_classes,
            ls.num_classes()
        )));
    }
    check_data(&model.cfg, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(model)
}

fn eval(checkpoint: Option<&Path>, data: &Path, report: &Path, workers: usize, oracle: bool) -> Result<i32> {
    let (ls, samples) = read_dataset(data)?;
    let (cm, cfg) = if oracle {
        let cm = evaluate_with(&samples, ls.num_classes(), workers, |s| Ok(s.gt.labels.clone()))?;
        (cm, ModelConfig::default())
    } else {
        let path = checkpoint.ok_or_else(|| config_err!("--checkpoint is required without --oracle"))?;
        let model = load_compatible(path, &ls, &samples)?;
        (evaluate(&model, &samples, workers)?, model.cfg)
    };
    write_text(report, &cm.report_csv(&ls.names))?;
    let mut manifest = RunManifest::new(if oracle { "eval --oracle" } else { "eval" }, &cfg);
    manifest.outputs.push(report.file_name().map(PathBuf::from).unwrap_or_default());
    let mut mpath = report.as_os_str().to_owned();
    mpath.push(".manifest.txt");
    manifest.write(Path::new(&mpath))?;
    println!("scene_iou {:.6}, miou {:.6}", cm.scene_iou(), cm.semantic_miou().1);
    Ok(EXIT_OK)
}

fn gradcheck(config: Option<&Path>, corrupt: bool) -> Result<i32> {
    let cfg = load_config(config)?;
    let rows = match run_gradient_suite(&cfg, if corrupt { 1.5 } else { 1.0 }) {
        Ok(rows) => rows,
        Err((loss, e)) => {
            eprintln!("gradcheck failed on loss {loss}: {e}");
            return Ok(if loss == "setup" { super::exit_code(&e) } else { EXIT_NUMERIC });
        }
    };
    println!("{:<10} {:>14} {:>8}  {:<22} status", "loss", "max_rel_error", "entries", "worst_param");
    for r in &rows {
        println!(
            "{:<10} {:>14.3e} {:>8}  {:<22} {}",
            r.loss,
            r.report.max_rel_error,
            r.report.entries_checked,
            r.worst_param.as_deref().unwrap_or("-"),
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    let ok = rows.iter().all(|r| r.passed());
    println!("{} (tolerance {GRAD_TOLERANCE:e})", if ok { "all losses pass" } else { "gradient check failed" });
    Ok(if ok { EXIT_OK } else { EXIT_NUMERIC })
}

fn export(checkpoint: &Path, data: &Path, out: &Path, format: ExportFormat) -> Result<i32> {
    let (ls, samples) = read_dataset(data)?;
    let model = load_compatible(checkpoint, &ls, &samples)?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("export", &model.cfg);
    for (i, s) in samples.iter().enumerate() {
        let labels = model.predict(s)?;
        let grid = VoxelGrid::new(s.spec.dims, labels, vec![true; s.spec.num_voxels()])?;
        let path = match format {
            ExportFormat::Sscv => {
                let p = out.join(format!("sample_{i:04}.sscv"));
                write_sscv(&grid, &p)?;
                p
            }
            ExportFormat::Ply => {
                let p = out.join(format!("sample_{i:04}.ply"));
                write_text(&p, &encode_ply(&grid, &s.spec, &ls)?)?;
                p
            }
        };
        manifest.outputs.push(relative(out, &path));
    }
    manifest.write(&out.join("manifest.txt"))?;
    println!("exported {} samples to {}", samples.len(), out.display());
    Ok(EXIT_OK)
}
