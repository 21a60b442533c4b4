//! `minet`: projection, training, inference, evaluation and cost reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error. `--json` switches every report to one JSON document on stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use minet::config::{load_config, Config};
use minet::data::io::{read_labeled_scan, read_labels, read_scan, write_atomic, write_labels, write_scan};
use minet::data::synthetic::SensorSpec;
use minet::data::PointLabels;
use minet::eval::ConfusionMatrix;
use minet::model::{Heads, Minet};
use minet::nn::container::{Container, EntryData};
use minet::postprocess::knn_refine;
use minet::projection::{depth_pgm, normalize, project, to_network_input, unproject_labels};
use minet::trainer::{predict_labels, synthetic_scans, train_with, Dataset};
use minet::Error;

#[derive(Parser)]
#[command(name = "minet", version, about = "Range-image LiDAR semantic segmentation")]
struct Cli {
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project a scan to a range image.
    Project {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scan: PathBuf,
        /// Optional label file, stored with the image.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Container with the `h × w × 5` channels and validity mask.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Depth image as binary PGM.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Train on a scan directory or on synthetic scenes.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// History file, one JSON record per step.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Booster heads, e.g. `top,mid,edge`; empty for none.
        #[arg(long)]
        heads: Option<String>,
        /// Directory with `velodyne/*.bin` and `labels/*.label`.
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Number of synthetic scenes to train on.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Label every point of a scan.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Refine with k-NN voting.
        #[arg(long)]
        knn: bool,
        /// Heads the checkpoint was trained with, when they differ from the config.
        #[arg(long)]
        heads: Option<String>,
    },
    /// Per-class IoU and mIoU of a prediction against ground truth.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Count undefined classes as 0 in the mean.
        #[arg(long)]
        strict: bool,
    },
    /// Per-module parameter and FLOP table.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `HxW`; defaults to the configured projection size.
        #[arg(long)]
        resolution: Option<String>,
    },
    /// Local inference throughput at the configured resolution.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
    },
    /// Write synthetic scenes in the scan/label file layout.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            e => Failure::Data(e),
        }
    }
}

type Outcome = Result<Value, Failure>;

fn config_at(path: &Path) -> Result<Config, Failure> {
    load_config(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(format!("cannot read config {}: {e}", path.display())),
        e => Failure::from(e),
    })
}

fn config_or_default(path: &Option<PathBuf>) -> Result<Config, Failure> {
    path.as_deref().map_or_else(|| Ok(Config::new(19)), config_at)
}

fn apply_heads(cfg: &mut Config, heads: &Option<String>) -> Result<(), Failure> {
    if let Some(h) = heads {
        cfg.model.heads = Heads::parse(h)?;
    }
    Ok(())
}

fn sensor_for(cfg: &Config) -> SensorSpec {
    let p = &cfg.projection;
    SensorSpec {
        fov_up: p.fov_up,
        fov_down: p.fov_down,
        ..SensorSpec::new(p.h, p.w)
    }
}

fn project_cmd(config: &Path, scan: &Path, labels: &Option<PathBuf>, out: &Option<PathBuf>, pgm: &Option<PathBuf>) -> Outcome {
    let cfg = config_at(config)?;
    let cloud = read_scan(scan)?;
    let img = project(&cloud, &cfg.projection)?;
    let (h, w) = (img.height(), img.width());
    if let Some(out) = out {
        let mut c = Container::new(0);
        c.push("channels", &[h, w, 5], EntryData::F64(img.channels().data().to_vec()))?;
        c.push("valid", &[h, w], EntryData::U8(img.valid_mask().iter().map(|&v| u8::from(v)).collect()))?;
        if let Some(path) = labels {
            let (_, l) = read_labeled_scan(scan, path, &cfg.classes)?;
            let pixel = img.pixel_labels(&l)?;
            c.push(
                "labels",
                &[h, w],
                EntryData::I64(pixel.iter().map(|&l| if l == minet::data::IGNORE { -1 } else { i64::from(l) }).collect()),
            )?;
        }
        c.save(out)?;
    }
    if let Some(pgm) = pgm {
        write_atomic(pgm, &depth_pgm(&img))?;
    }
    let in_view = img.point_pixel().iter().filter(|p| p.is_some()).count();
    Ok(json!({
        "points": cloud.len(),
        "in_view": in_view,
        "valid_pixels": img.valid_count(),
        "height": h,
        "width": w,
    }))
}

fn load_dataset(cfg: &Config, data: &Option<PathBuf>, synthetic: Option<usize>, seed: u64) -> Result<Dataset, Failure> {
    let scans = match (data, synthetic) {
        (Some(dir), _) => {
            let velodyne = dir.join("velodyne");
            let mut files: Vec<PathBuf> = std::fs::read_dir(&velodyne)
                .map_err(|e| Failure::Data(Error::Io { path: velodyne.clone(), source: e }))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                .collect();
            files.sort();
            files
                .iter()
                .map(|scan| {
                    let stem = scan.file_stem().unwrap_or_default();
                    let label = dir.join("labels").join(stem).with_extension("label");
                    read_labeled_scan(scan, &label, &cfg.classes)
                })
                .collect::<minet::Result<Vec<_>>>()?
        }
        (None, Some(n)) => {
            if cfg.model.num_classes != 4 {
                return Err(Failure::Usage("synthetic scenes have 4 classes; set num_classes = 4".into()));
            }
            synthetic_scans(n, seed, sensor_for(cfg))?
        }
        (None, None) => return Err(Failure::Usage("train needs --data <dir> or --synthetic <count>".into())),
    };
    Ok(Dataset::from_scans(&scans, &cfg.projection, cfg.model.num_classes)?)
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    config: &Path,
    out: &Path,
    log: &Option<PathBuf>,
    lambda: Option<f64>,
    heads: &Option<String>,
    data: &Option<PathBuf>,
    synthetic: Option<usize>,
    seed: u64,
    quiet: bool,
) -> Outcome {
    let mut cfg = config_at(config)?;
    apply_heads(&mut cfg, heads)?;
    if let Some(l) = lambda {
        cfg.loss.lambda = l;
    }
    cfg.validate()?;
    let dataset = load_dataset(&cfg, data, synthetic, seed)?;
    let mut model = Minet::build(&cfg.model, cfg.train.seed)?;
    let mut records = String::new();
    let start = Instant::now();
    let history = train_with(&mut model, &dataset, &cfg.loss, &cfg.train, |s| {
        records.push_str(&serde_json::to_string(s).expect("records serialize"));
        records.push('\n');
        if !quiet && (s.batch_miou.is_some() || s.iteration == 0) {
            eprintln!("step {:>5}  loss {:.4}", s.iteration, s.total);
        }
    })?;
    let seconds = start.elapsed().as_secs_f64();
    model.save(out)?;
    if let Some(log) = log {
        write_atomic(log, records.as_bytes())?;
    }
    Ok(json!({
        "scans": dataset.len(),
        "iterations": cfg.train.iterations,
        "final_miou": history.final_miou,
        "final_loss": history.final_terms.main(),
        "final_terms": history.final_terms,
        "class_weights": history.class_weights,
        "seconds": seconds,
        "checkpoint": out,
    }))
}

fn infer_cmd(config: &Path, checkpoint: &Path, scan: &Path, out: &Path, knn: bool, heads: &Option<String>) -> Outcome {
    let mut cfg = config_at(config)?;
    apply_heads(&mut cfg, heads)?;
    let model = Minet::load(&cfg.model, checkpoint)?;
    let cloud = read_scan(scan)?;
    let img = project(&cloud, &cfg.projection)?;
    let x = to_network_input(&normalize(&img, &cfg.projection))?;
    let pixel = predict_labels(&model.predict(&x)?)?;
    let labels: PointLabels = if knn {
        knn_refine(&cloud, &img, &pixel, &cfg.knn)?
    } else {
        unproject_labels(&pixel, &img)?
    };
    write_labels(out, &labels, &cfg.classes)?;
    let mut counts = vec![0usize; cfg.model.num_classes];
    for &l in labels.labels() {
        if let Some(c) = counts.get_mut(l as usize) {
            *c += 1;
        }
    }
    Ok(json!({
        "points": cloud.len(),
        "labeled": counts.iter().sum::<usize>(),
        "class_counts": counts,
        "knn": knn,
        "out": out,
    }))
}

fn eval_cmd(config: &Path, pred: &Path, gt: &Path, strict: bool) -> Outcome {
    let cfg = config_at(config)?;
    let p = read_labels(pred, &cfg.classes)?;
    let g = read_labels(gt, &cfg.classes)?;
    let mut cm = ConfusionMatrix::new(cfg.model.num_classes);
    cm.accumulate(g.labels(), p.labels())?;
    let report = if strict { cm.miou_strict()? } else { cm.miou()? };
    let per_class: Vec<Value> = report
        .per_class
        .iter()
        .zip(cfg.classes.class_names())
        .enumerate()
        .map(|(i, (iou, name))| json!({ "class": i, "name": name, "iou": iou }))
        .collect();
    Ok(json!({ "per_class": per_class, "miou": report.mean, "strict": strict, "evaluated": cm.total() }))
}

fn parse_resolution(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("resolution `{s}` is not of the form HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn flops_cmd(config: &Option<PathBuf>, resolution: &Option<String>) -> Outcome {
    let cfg = config_or_default(config)?;
    let (h, w) = match resolution {
        Some(r) => parse_resolution(r)?,
        None => (cfg.projection.h, cfg.projection.w),
    };
    let (mh, mw) = cfg.model.input_multiple();
    if h == 0 || w == 0 || h % mh != 0 || w % mw != 0 {
        return Err(Failure::Usage(format!("resolution {h}x{w} must be a positive multiple of {mh}x{mw}")));
    }
    let model = Minet::build(&cfg.model, 0)?;
    let report = model.cost_report(h, w);
    let modules: Vec<Value> = report
        .modules
        .iter()
        .map(|m| {
            json!({
                "module": m.module,
                "params": m.cost.params,
                "flops": m.cost.flops(),
                "training_only": m.training_only,
            })
        })
        .collect();
    Ok(json!({
        "resolution": [h, w],
        "paths": cfg.model.describe_paths(),
        "modules": modules,
        "total_params": report.params(),
        "inference_flops": report.inference_flops(),
        "training_flops": report.training_flops(),
    }))
}

fn bench_cmd(config: &Option<PathBuf>, iterations: usize) -> Outcome {
    let cfg = config_or_default(config)?;
    let model = Minet::build(&cfg.model, 0)?;
    let scans = synthetic_scans(1, 0, sensor_for(&cfg))?;
    let img = project(&scans[0].0, &cfg.projection)?;
    let x = to_network_input(&normalize(&img, &cfg.projection))?;
    model.predict(&x)?;
    let start = Instant::now();
    for _ in 0..iterations.max(1) {
        model.predict(&x)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(json!({
        "resolution": [cfg.projection.h, cfg.projection.w],
        "iterations": iterations.max(1),
        "seconds": seconds,
        "scans_per_second": iterations.max(1) as f64 / seconds,
    }))
}

fn synth_cmd(config: &Path, out: &Path, count: usize, seed: u64) -> Outcome {
    let cfg = config_at(config)?;
    if cfg.classes.num_classes() != 4 {
        return Err(Failure::Usage("synthetic scenes have 4 classes; set num_classes = 4".into()));
    }
    let scans = synthetic_scans(count, seed, sensor_for(&cfg))?;
    let io = |e: std::io::Error, p: &Path| Failure::Data(Error::Io { path: p.to_path_buf(), source: e });
    for sub in ["velodyne", "labels"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| io(e, &d))?;
    }
    for (i, (cloud, labels)) in scans.iter().enumerate() {
        write_scan(&out.join("velodyne").join(format!("{i:06}.bin")), cloud)?;
        write_labels(&out.join("labels").join(format!("{i:06}.label")), labels, &cfg.classes)?;
    }
    Ok(json!({ "scans": count, "out": out }))
}

fn print_human(command: &Command, v: &Value) {
    match command {
        Command::Flops { .. } => {
            let res = &v["resolution"];
            println!("{} at {}x{}", v["paths"].as_str().unwrap_or(""), res[0], res[1]);
            println!("{:<34} {:>12} {:>10}", "module", "params", "GFLOPs");
            for m in v["modules"].as_array().into_iter().flatten() {
                let name = m["module"].as_str().unwrap_or("");
                let label = if m["training_only"].as_bool() == Some(true) {
                    format!("{name} (training only)")
                } else {
                    name.to_string()
                };
                let gflops = m["flops"].as_f64().unwrap_or(0.0) / 1e9;
                println!("{label:<34} {:>12} {gflops:>10.3}", m["params"].as_u64().unwrap_or(0));
            }
            let params = v["total_params"].as_f64().unwrap_or(0.0);
            println!("{:<34} {:>12} {:>10}", "total params", params, format!("{:.3} M", params / 1e6));
            let gflops = v["inference_flops"].as_f64().unwrap_or(0.0) / 1e9;
            println!("{:<34} {:>12} {gflops:>10.3}", "inference GFLOPs", "");
        }
        Command::Eval { .. } => {
            println!("{:<6} {:<16} {:>8}", "class", "name", "IoU");
            for c in v["per_class"].as_array().into_iter().flatten() {
                let iou = c["iou"].as_f64().map_or("undefined".to_string(), |x| format!("{x:.4}"));
                println!("{:<6} {:<16} {iou:>8}", c["class"].as_u64().unwrap_or(0), c["name"].as_str().unwrap_or(""));
            }
            println!("mIoU {:.4}", v["miou"].as_f64().unwrap_or(f64::NAN));
        }
        _ => {
            if let Some(obj) = v.as_object() {
                for (k, val) in obj {
                    println!("{k}: {val}");
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Project { config, scan, labels, out, pgm } => project_cmd(config, scan, labels, out, pgm),
        Command::Train { config, out, log, lambda, heads, data, synthetic, seed } => {
            train_cmd(config, out, log, *lambda, heads, data, *synthetic, *seed, cli.json)
        }
        Command::Infer { config, checkpoint, scan, out, knn, heads } => infer_cmd(config, checkpoint, scan, out, *knn, heads),
        Command::Eval { config, pred, gt, strict } => eval_cmd(config, pred, gt, *strict),
        Command::Flops { config, resolution } => flops_cmd(config, resolution),
        Command::Bench { config, iterations } => bench_cmd(config, *iterations),
        Command::Synth { config, out, count, seed } => synth_cmd(config, out, *count, *seed),
    };
    match outcome {
        Ok(v) => {
            if cli.json {
                println!("{v}");
            } else {
                print_human(&cli.command, &v);
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
