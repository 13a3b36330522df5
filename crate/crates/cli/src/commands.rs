use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use saber_core::export::latent_trace;
use saber_core::scene::{import_maad as convert_maad, load_scenes, save_scenes, MaadSequence};
use saber_core::training::TrainOptions;
use saber_core::{
    evaluate as compute_metrics, load_checkpoint, score_scenes, BaselineKind, DatasetSpec, Detector, Label, MapSpec,
    MetricReport, Scene, ScoreOptions, ScoreSeries, TrainConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::ManifestBuilder;
use crate::{DetectorArgs, EvaluateArgs, ExportArgs, GenDataArgs, ImportArgs, ScoreArgs, TrainArgs, WindowArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{0}")]
    Usage(String),
}

/// `gen-data` config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub dataset: DatasetSpec,
    pub map: MapSpec,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path, manifest: &mut ManifestBuilder) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    manifest.input(path)?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// A scene file, or `default_name` inside a directory.
fn resolve_data(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn read_scenes(path: &Path, manifest: &mut ManifestBuilder) -> Result<Vec<Scene>> {
    let scenes = load_scenes(path).with_context(|| format!("loading scenes from {}", path.display()))?;
    manifest.input(path)?;
    Ok(scenes)
}

fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    let file = if path.is_dir() { path.join("best.json") } else { path.to_path_buf() };
    if !file.is_file() {
        return Err(CliError::MissingCheckpoint(file).into());
    }
    Ok(file)
}

/// Window options from an explicit config, the `config.toml` written next to
/// a checkpoint by `train`, or the defaults.
fn load_window_config(explicit: Option<&Path>, checkpoint: Option<&Path>, manifest: &mut ManifestBuilder) -> Result<TrainConfig> {
    let sibling = checkpoint
        .and_then(Path::parent)
        .map(|d| d.join("config.toml"))
        .filter(|p| p.is_file());
    match explicit.map(Path::to_path_buf).or(sibling) {
        Some(path) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            manifest.input(&path)?;
            Ok(TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => Ok(TrainConfig::default()),
    }
}

#[derive(Debug, Serialize)]
struct ScoreConfig<'a> {
    detector: &'a str,
    checkpoint: Option<&'a Path>,
    options: &'a ScoreOptions,
}

/// Builds the detector and its scoring options.
fn load_detector(
    detector: &DetectorArgs,
    window: &WindowArgs,
    manifest: &mut ManifestBuilder,
) -> Result<(Detector, ScoreOptions, Option<PathBuf>)> {
    let (det, ckpt) = match (&detector.checkpoint, detector.baseline) {
        (Some(path), _) => {
            let file = resolve_checkpoint(path)?;
            let model = load_checkpoint(&file, None).with_context(|| format!("loading {}", file.display()))?;
            manifest.input(&file)?;
            (Detector::Model(Box::new(model)), Some(file))
        }
        (None, Some(BaselineKind::Cvm)) => (Detector::Cvm, None),
        (None, Some(kind)) => {
            return Err(CliError::Usage(format!("baseline `{kind}` must be trained; pass its --checkpoint")).into())
        }
        (None, None) => return Err(CliError::Usage("pass --checkpoint or --baseline".into()).into()),
    };
    let config = load_window_config(window.config.as_deref(), ckpt.as_deref(), manifest)?;
    let options = ScoreOptions {
        samples: window.samples,
        seed: window.score_seed,
        ..ScoreOptions::from(&config)
    };
    Ok((det, options, ckpt))
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("gen-data");
    let mut config: GenConfig = match &args.config {
        Some(path) => read_toml(path, &mut manifest)?,
        None => GenConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.dataset.seed = seed;
    }
    let (train, test) = saber_core::generate_dataset(&config.dataset, &config.map)?;
    create_dir(&args.out)?;
    for (name, scenes) in [("train.jsonl", &train), ("test.jsonl", &test)] {
        let path = args.out.join(name);
        save_scenes(scenes, &path)?;
        manifest.output(path);
    }
    log::info!("wrote {} training and {} test scenes to {}", train.len(), test.len(), args.out.display());
    manifest.finish(&args.out, &config, config.dataset.seed)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("train");
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            manifest.input(path)?;
            TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.variant {
        config.variant = v;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    let data = resolve_data(&args.data, "train.jsonl");
    let scenes = read_scenes(&data, &mut manifest)?;
    create_dir(&args.out)?;
    let config_path = args.out.join("config.toml");
    fs::write(&config_path, config.to_toml()).with_context(|| format!("writing {}", config_path.display()))?;

    let options = TrainOptions {
        out_dir: Some(args.out.clone()),
        max_steps: args.max_steps,
    };
    let outcome = saber_core::train(&scenes, &config, &options)?;
    log::info!(
        "trained {} for {} steps; best epoch {} (loss {:.6})",
        config.variant,
        outcome.steps,
        outcome.best_epoch,
        outcome.log.get(outcome.best_epoch).map_or(f64::NAN, |r| r.loss)
    );
    for name in ["config.toml", "best.json", "last.json", "train_log.jsonl"] {
        manifest.output(args.out.join(name));
    }
    manifest.finish(&args.out, &config, config.seed)?;
    Ok(())
}

fn write_scores(series: &[ScoreSeries], out: &Path, manifest: &mut ManifestBuilder) -> Result<()> {
    let jsonl = out.join("scores.jsonl");
    let mut w = BufWriter::new(fs::File::create(&jsonl).with_context(|| format!("creating {}", jsonl.display()))?);
    for s in series {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    manifest.output(jsonl);

    // Long format for plotting score curves.
    let csv_path = out.join("scores.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    w.write_record(["scene_id", "anomaly_type", "timestep", "label", "score", "display_score"])?;
    for s in series {
        let display = s.display_scores();
        for (t, label) in s.labels.iter().enumerate() {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            w.write_record([
                s.scene_id.clone(),
                s.anomaly_type.clone().unwrap_or_default(),
                t.to_string(),
                label_name(*label).to_string(),
                opt(s.scores[t]),
                opt(display[t]),
            ])?;
        }
    }
    w.flush()?;
    manifest.output(csv_path);
    Ok(())
}

fn label_name(label: Label) -> &'static str {
    match label {
        Label::Normal => "normal",
        Label::Ignored => "ignored",
        Label::Abnormal => "abnormal",
    }
}

pub fn score(args: &ScoreArgs, jobs: usize) -> Result<()> {
    let mut manifest = ManifestBuilder::start("score");
    let (detector, options, ckpt) = load_detector(&args.detector, &args.window, &mut manifest)?;
    let data = resolve_data(&args.data, "test.jsonl");
    let scenes = read_scenes(&data, &mut manifest)?;
    let series = score_scenes(&detector, &scenes, &options, jobs)?;
    create_dir(&args.out)?;
    write_scores(&series, &args.out, &mut manifest)?;
    let config = ScoreConfig {
        detector: detector.name(),
        checkpoint: ckpt.as_deref(),
        options: &options,
    };
    manifest.finish(&args.out, &config, options.seed)?;
    Ok(())
}

fn read_score_file(path: &Path) -> Result<Vec<ScoreSeries>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Deterministic scene split: scenes ordered by a salted digest of their id,
/// the first `fraction` of them held out.
fn split_validation(series: Vec<ScoreSeries>, fraction: f64, seed: u64) -> (Vec<ScoreSeries>, Vec<ScoreSeries>) {
    let key = |id: &str| {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(id.as_bytes());
        h.finalize()
    };
    let mut ranked: Vec<_> = series.into_iter().enumerate().map(|(i, s)| (key(&s.scene_id), i, s)).collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0));
    let held = (fraction * ranked.len() as f64).round() as usize;
    let mut validation = Vec::new();
    let mut rest = Vec::new();
    for (rank, (_, i, s)) in ranked.into_iter().enumerate() {
        if rank < held {
            validation.push((i, s));
        } else {
            rest.push((i, s));
        }
    }
    validation.sort_by_key(|p| p.0);
    rest.sort_by_key(|p| p.0);
    (
        rest.into_iter().map(|p| p.1).collect(),
        validation.into_iter().map(|p| p.1).collect(),
    )
}

fn write_report(report: &MetricReport, out: &Path, stem: &str, manifest: &mut ManifestBuilder) -> Result<()> {
    let json = out.join(format!("{stem}.json"));
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n")?;
    manifest.output(json);
    let txt = out.join(format!("{stem}.txt"));
    fs::write(&txt, report.to_table())?;
    manifest.output(txt);
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvaluateConfig<'a> {
    source: &'a str,
    checkpoint: Option<&'a Path>,
    options: Option<&'a ScoreOptions>,
    validation_split: Option<f64>,
    split_seed: u64,
}

pub fn evaluate(args: &EvaluateArgs, jobs: usize) -> Result<()> {
    let mut manifest = ManifestBuilder::start("evaluate");
    if let Some(f) = args.validation_split {
        if !(0.0..1.0).contains(&f) {
            return Err(CliError::Usage(format!("--validation-split must be in [0, 1), got {f}")).into());
        }
    }
    let (series, options, ckpt, source) = match &args.scores {
        Some(path) => {
            let file = resolve_data(path, "scores.jsonl");
            let series = read_score_file(&file)?;
            manifest.input(&file)?;
            (series, None, None, "scores".to_string())
        }
        None => {
            let detector_args = DetectorArgs {
                checkpoint: args.checkpoint.clone(),
                baseline: args.baseline,
            };
            let (detector, options, ckpt) = load_detector(&detector_args, &args.window, &mut manifest)?;
            let data = args
                .data
                .as_deref()
                .ok_or_else(|| CliError::Usage("--data (or SABER_DATA_DIR) is required with a detector".into()))?;
            let scenes = read_scenes(&resolve_data(data, "test.jsonl"), &mut manifest)?;
            let series = score_scenes(&detector, &scenes, &options, jobs)?;
            (series, Some(options), ckpt, detector.name().to_string())
        }
    };

    let (test, validation) = match args.validation_split {
        Some(f) => split_validation(series, f, args.split_seed),
        None => (series, Vec::new()),
    };
    let report = compute_metrics(&test)?;
    create_dir(&args.out)?;
    write_report(&report, &args.out, "report", &mut manifest)?;
    if args.validation_split.is_some() {
        let val = compute_metrics(&validation).context("validation split")?;
        write_report(&val, &args.out, "validation_report", &mut manifest)?;
    }
    print!("{}", report.to_table());
    let config = EvaluateConfig {
        source: &source,
        checkpoint: ckpt.as_deref(),
        options: options.as_ref(),
        validation_split: args.validation_split,
        split_seed: args.split_seed,
    };
    manifest.finish(&args.out, &config, options.as_ref().map_or(0, |o| o.seed))?;
    Ok(())
}

pub fn export_latent(args: &ExportArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("export-latent");
    let file = resolve_checkpoint(&args.checkpoint)?;
    let model = load_checkpoint(&file, None).with_context(|| format!("loading {}", file.display()))?;
    manifest.input(&file)?;
    let config = load_window_config(args.config.as_deref(), Some(&file), &mut manifest)?;
    let scenes = read_scenes(&resolve_data(&args.data, "test.jsonl"), &mut manifest)?;
    create_dir(&args.out)?;

    let j = model.config.latent_dim;
    let path = args.out.join("latent.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut header: Vec<String> = ["scene_id", "vehicle", "timestep", "label", "anomaly_type"]
        .map(String::from)
        .to_vec();
    for prefix in ["mu", "sigma", "mu_next"] {
        header.extend((0..j).map(|i| format!("{prefix}_{i}")));
    }
    w.write_record(&header)?;
    for scene in &scenes {
        for p in latent_trace(&model, scene, config.neighbor_radius)? {
            let mut row = vec![
                p.scene_id,
                p.vehicle.to_string(),
                p.timestep.to_string(),
                label_name(p.label).to_string(),
                p.anomaly_type.unwrap_or_default(),
            ];
            row.extend(p.mean.iter().map(f64::to_string));
            row.extend(p.deviation.iter().map(f64::to_string));
            match &p.propagated_mean {
                Some(m) => row.extend(m.iter().map(f64::to_string)),
                None => row.extend((0..j).map(|_| String::new())),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    manifest.output(path);

    #[derive(Serialize)]
    struct ExportConfig<'a> {
        checkpoint: &'a Path,
        neighbor_radius: f64,
    }
    let snapshot = ExportConfig {
        checkpoint: &file,
        neighbor_radius: config.neighbor_radius,
    };
    manifest.finish(&args.out, &snapshot, 0)?;
    Ok(())
}

pub fn import_maad(args: &ImportArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::start("import-maad");
    let map: MapSpec = match &args.map {
        Some(path) => read_toml(path, &mut manifest)?,
        None => MapSpec::default(),
    };
    let text = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    manifest.input(&args.input)?;
    let sequences: Vec<MaadSequence> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.input.display()))?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} record {}", args.input.display(), i + 1)))
            .collect::<Result<_>>()?
    };
    let scenes = convert_maad(&sequences, &map, args.dt)?;
    create_dir(&args.out)?;
    let path = args.out.join("scenes.jsonl");
    save_scenes(&scenes, &path)?;
    manifest.output(path);
    log::info!("imported {} scenes", scenes.len());

    #[derive(Serialize)]
    struct ImportConfig<'a> {
        map: &'a MapSpec,
        dt: f64,
    }
    manifest.finish(&args.out, &ImportConfig { map: &map, dt: args.dt }, 0)?;
    Ok(())
}
