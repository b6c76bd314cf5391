use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vmmc::checkpoint::{load_classifier, load_detector, save_detector, CheckpointConfig, ModelConfig};
use vmmc::detection::{detect_image, open_rgb, pretrain_car_detector, CarDetectorConfig, FileProbe, SsdCarDetector};
use vmmc::evaluation::{append_json_line, evaluate_files, fps_benchmark, ranked_entries, read_predictions, score_entries, DetectionEntry, Metric};
use vmmc::fraudwatch::FraudService;
use vmmc::http::{fraud_router, review_router, serve};
use vmmc::imaging::{preprocess_rgb, to_chw};
use vmmc::ingest::{class_images, ingest_dir};
use vmmc::manifest::{load_manifest, write_manifest};
use vmmc::pipeline::{create_run_dir, run_experiment, ExperimentConfig, ExperimentId};
use vmmc::review::{save_store, ReviewService};
use vmmc::synth::{generate_corpus, SynthConfig};
use vmmc_core::annotation::{run_campaign, AnnotationConfig};
use vmmc_core::split::{split_indices, SplitSpec};
use vmmc_core::ClassId;
use vmmc_nn::checkpoint::import_weights;

#[derive(Parser)]
#[command(name = "vmmc", version, about = "Vehicle make-model recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 300-pixel inputs, 100 classifier epochs, full SSD.
    Paper,
    /// 128-pixel inputs, 10 epochs, compact SSD.
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Accuracy,
    Confusion,
    Map,
}

#[derive(Subcommand)]
enum Command {
    /// Build a manifest from class folders.
    Ingest {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Folder to class mapping; defaults to DIR/classes.json or folder-name prefixes.
        #[arg(long)]
        classes: Option<PathBuf>,
    },
    /// Stratified split into <stem>.train.csv, <stem>.val.csv and <stem>.test.csv.
    Split {
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        fractions: Vec<f64>,
    },
    /// Auto-annotate class folders with the car detector and queue the rest for review.
    Annotate {
        root: PathBuf,
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        certain_size: f64,
        #[arg(long, default_value_t = 0.5)]
        confidence: f64,
        #[arg(long)]
        out: PathBuf,
        /// Car detector checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Serve the review queue of an annotation campaign.
    ServeReview {
        #[arg(long)]
        annotations: PathBuf,
        /// Image root; defaults to the annotation file's folder.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Train one experiment into a checkpoint directory.
    Train {
        #[arg(long)]
        experiment: u8,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Preset::Paper)]
        preset: Preset,
        /// Car detector checkpoint, required by experiment 2.
        #[arg(long)]
        car_ckpt: Option<PathBuf>,
        /// Detector checkpoint whose backbone initializes experiment 3.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Class probabilities for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Sort by probability instead of class order.
        #[arg(long)]
        ranked: bool,
    },
    /// Detections for one image, one JSON object per line.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        conf: f64,
    },
    /// Run an experiment into runs/<timestamp>-exp<id>/.
    Run {
        #[arg(long)]
        experiment: u8,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Paper)]
        preset: Preset,
        #[arg(long)]
        car_ckpt: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Score a predictions file against a manifest.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Serve the plate fraud API.
    ServeFraud {
        #[arg(long)]
        registry: PathBuf,
        /// Classifier checkpoint for observations that send a vehicle image.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 8081)]
        port: u16,
        #[arg(long, default_value = "audit.jsonl")]
        audit: PathBuf,
        #[arg(long, default_value_t = vmmc_core::fraud::DEFAULT_CONFIDENCE_FLOOR)]
        floor: f64,
        /// Root for image paths in observations.
        #[arg(long, default_value = ".")]
        images: PathBuf,
    },
    /// Render a synthetic corpus with exact boxes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write a .plate sidecar next to every image.
        #[arg(long)]
        plates: bool,
    },
    /// Detector throughput over the images of a manifest.
    Fps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Append the report to this JSON-lines file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a foreign safetensors checkpoint using a JSON name map.
    ImportWeights {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        /// `{"source_name": "target_name", ...}`
        #[arg(long)]
        rename: PathBuf,
    },
    /// Pretrain the car detector on synthetic scenes.
    CarDetector {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        seed: u64,
        #[arg(long, default_value_t = 150)]
        per_class: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
    },
}

fn experiment_id(n: u8) -> Result<ExperimentId> {
    ExperimentId::try_from(n).map_err(|_| anyhow::anyhow!("experiment must be 1, 2 or 3, got {n}"))
}

fn experiment_config(id: ExperimentId, seed: u64, preset: Preset) -> ExperimentConfig {
    match preset {
        Preset::Paper => ExperimentConfig::paper(id, seed),
        Preset::Desk => ExperimentConfig::desk(id, seed),
    }
}

fn car_detector(dir: &Path) -> Result<SsdCarDetector> {
    let loaded = load_detector(dir).with_context(|| format!("loading car detector from {}", dir.display()))?;
    Ok(SsdCarDetector { net: loaded.net, detect: loaded.detect })
}

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Prefix that makes paths under `root` relative to `base`.
fn relative_prefix(root: &Path, base: &Path) -> Result<PathBuf> {
    let root = root.canonicalize().with_context(|| root.display().to_string())?;
    let base = base.canonicalize().with_context(|| base.display().to_string())?;
    root.strip_prefix(&base).map(Path::to_path_buf).map_err(|_| anyhow::anyhow!("the manifest must sit in {} or one of its parents", root.display()))
}

fn run_one(cfg: &ExperimentConfig, manifest: &Path, car_ckpt: Option<&Path>, backbone: Option<&Path>, run_dir: &Path) -> Result<()> {
    let data = load_manifest(manifest)?;
    let car = car_ckpt.map(car_detector).transpose()?;
    if cfg.experiment == ExperimentId::II && car.is_none() {
        bail!("experiment 2 needs --car-ckpt (see `vmmc car-detector`)");
    }
    let backbone = backbone.map(|p| load_detector(p).map(|d| d.net)).transpose()?;
    let report = run_experiment(cfg, &data, &manifest_root(manifest), car.as_ref(), backbone.as_ref(), run_dir)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest { dir, out, classes } => {
            let base = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            std::fs::create_dir_all(base)?;
            let prefix = relative_prefix(&dir, base)?;
            let mut records = ingest_dir(&dir, classes.as_deref())?;
            for r in &mut records {
                r.image_path = prefix.join(&r.image_path).to_string_lossy().replace('\\', "/");
            }
            write_manifest(&records, &out)?;
            log::info!("{} images written to {}", records.len(), out.display());
        }
        Command::Split { manifest, seed, fractions } => {
            let [a, b, c] = fractions[..] else { bail!("--fractions takes three values") };
            let data = load_manifest(&manifest)?;
            let classes: Vec<ClassId> = data.records().iter().map(|r| r.class_id).collect();
            let split = split_indices(&classes, &SplitSpec::new(seed, [a, b, c])?)?;
            let stem = manifest.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
                let path = manifest.with_file_name(format!("{stem}.{name}.csv"));
                write_manifest(data.select(idx).records(), &path)?;
                println!("{name}: {} records -> {}", idx.len(), path.display());
            }
        }
        Command::Annotate { root, classes, certain_size, confidence, out, ckpt } => {
            let detector = car_detector(&ckpt)?;
            let folders = class_images(&root, classes.as_deref())?;
            let mut probe = FileProbe { root: root.clone(), detector: &detector };
            let cfg = AnnotationConfig { certain_size, confidence_threshold: confidence, ..Default::default() };
            let store = run_campaign(&folders, &mut probe, &cfg)?;
            if manifest_root(&out).canonicalize().ok() != root.canonicalize().ok() {
                log::warn!("annotation paths are relative to {}; serve the review with --root", root.display());
            }
            save_store(&store, &out)?;
            let s = store.stats();
            println!("{} auto rows, {} images queued for review", s.auto_rows, s.pending);
        }
        Command::ServeReview { annotations, root, port } => {
            let mut service = ReviewService::open(&annotations)?;
            if let Some(root) = root {
                service = service.with_image_root(root);
            }
            let app = review_router(Arc::new(service));
            tokio::runtime::Runtime::new()?.block_on(serve(app, SocketAddr::from(([0, 0, 0, 0], port))))?;
        }
        Command::Train { experiment, manifest, out, epochs, batch, seed, preset, car_ckpt, backbone } => {
            let mut cfg = experiment_config(experiment_id(experiment)?, seed, preset);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.detector_train.epochs = e;
            }
            if let Some(b) = batch {
                cfg.train.batch_size = b;
                cfg.detector_train.batch_size = b;
            }
            run_one(&cfg, &manifest, car_ckpt.as_deref(), backbone.as_deref(), &out)?;
        }
        Command::Predict { ckpt, image, ranked } => {
            let model = load_classifier(&ckpt)?;
            let img = open_rgb(&image).with_context(|| image.display().to_string())?;
            let scores = model.net.predict(&to_chw(&preprocess_rgb(&img, model.input_size())?))?;
            let entries = if ranked { ranked_entries(&scores) } else { score_entries(&scores) };
            println!("{}", serde_json::to_string(&entries)?);
        }
        Command::Detect { ckpt, image, conf } => {
            let model = load_detector(&ckpt)?;
            let img = open_rgb(&image).with_context(|| image.display().to_string())?;
            let cfg = vmmc_nn::ssd::DetectConfig { report_floor: conf, ..model.detect };
            for d in detect_image(&model.net, &cfg, &img)? {
                println!("{}", serde_json::to_string(&DetectionEntry::from(&d))?);
            }
        }
        Command::Run { experiment, manifest, seed, out, preset, car_ckpt, backbone } => {
            let id = experiment_id(experiment)?;
            let run_dir = create_run_dir(&out, id)?;
            log::info!("writing to {}", run_dir.display());
            run_one(&experiment_config(id, seed, preset), &manifest, car_ckpt.as_deref(), backbone.as_deref(), &run_dir)?;
        }
        Command::Eval { pred, truth, metric, out, iou } => {
            let metric = match metric {
                MetricArg::Accuracy => Metric::Accuracy,
                MetricArg::Confusion => Metric::Confusion,
                MetricArg::Map => Metric::Map,
            };
            let report = evaluate_files(&read_predictions(&pred)?, &load_manifest(&truth)?, metric, iou, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ServeFraud { registry, ckpt, port, audit, floor, images } => {
            let mut service = FraudService::with_registry_file(&registry)?.with_audit_log(&audit).with_floor(floor).with_image_root(&images);
            if let Some(dir) = ckpt {
                service = service.with_classifier(Box::new(load_classifier(&dir)?));
            }
            log::info!("{} registry entries", service.snapshot().len());
            let app = fraud_router(Arc::new(service));
            tokio::runtime::Runtime::new()?.block_on(serve(app, SocketAddr::from(([0, 0, 0, 0], port))))?;
        }
        Command::Synth { out, per_class, seed, plates } => {
            let m = generate_corpus(&out, &SynthConfig { per_class, seed, plates, ..Default::default() })?;
            println!("{} images written to {}", m.len(), out.display());
        }
        Command::Fps { ckpt, manifest, seconds, warmup, out } => {
            let model = load_detector(&ckpt)?;
            let data = load_manifest(&manifest)?;
            let root = manifest_root(&manifest);
            let frames = data.records().iter().map(|r| open_rgb(&root.join(&r.image_path))).collect::<Result<Vec<_>, _>>()?;
            if frames.is_empty() {
                bail!("{} has no images", manifest.display());
            }
            let stream = frames.iter().cycle();
            let report = fps_benchmark(stream, warmup, Duration::from_secs_f64(seconds), |img| {
                if let Err(e) = detect_image(&model.net, &model.detect, img) {
                    log::error!("{e}");
                }
            })?;
            if let Some(path) = out {
                append_json_line(&path, &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ImportWeights { src, dst, rename } => {
            let map: BTreeMap<String, String> = serde_json::from_slice(&std::fs::read(&rename)?)?;
            let n = import_weights(&src, &dst, &map)?;
            println!("{n} tensors written to {}", dst.display());
        }
        Command::CarDetector { out, seed, per_class, epochs } => {
            let mut cfg = CarDetectorConfig { corpus_seed: seed, per_class, ..Default::default() };
            cfg.train.epochs = epochs;
            let started = SystemTime::now();
            let (det, metrics) = pretrain_car_detector(&cfg)?;
            let config = CheckpointConfig {
                model: ModelConfig::Detector { spec: det.net.spec().clone(), train: cfg.train.clone(), detect: det.detect },
                run: serde_json::json!({ "corpus_seed": seed, "per_class": per_class }),
            };
            save_detector(&out, &det.net, &config, &metrics)?;
            log::info!("trained in {:.0} s", started.elapsed().unwrap_or_default().as_secs_f64());
            println!("car detector written to {}", out.display());
        }
    }
    Ok(())
}
