//! Command-line pipeline driver.
//!
//! Every subcommand reads settings from three layers: command-line flags
//! override values from an optional `--config` file (flat `key=value`
//! lines), which override built-in defaults. Unknown config keys are
//! rejected. Each run writes its effective settings to `<out>/config.txt`,
//! which is itself loadable through `--config`, and all artifacts land
//! under the `--out` directory. Exit codes: 0 ok, 1 runtime error, 2 usage
//! error.

use crate::cam::{bilinear_resize, cam_from_dense_weights, heatmap_render, CamVariant, ColorRamp};
use crate::data::{
    augment, generate_glyphs, load_gaze_csv, load_images, oracle_fixmaps, save_dataset, split,
    AugmentParams, Dataset,
};
use crate::error::{Error, Result};
use crate::gaze::{fixation_map, ivt_extract, IvtParams};
use crate::model::Model;
use crate::pfm::write_pfm;
use crate::rng::derive_seed;
use crate::stats::{mcnemar, weight_stats, zero_map_monte_carlo, zero_map_probs, ContingencyTable, McNemarMethod};
use crate::train::{
    evaluate, train_baseline, train_vegam, write_eval_csv, write_metrics_csv, CamClassMode,
    MapNorm, SampleRecord, TrainConfig,
};
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Seed stream for the train/test split so it never collides with the
/// streams the training engine derives internally.
const STREAM_TEST_SPLIT: u64 = 100;

/// Runs the CLI on pre-split arguments (no program name) and returns the
/// process exit code.
pub fn run(args: &[String]) -> i32 {
    let full = std::iter::once("gazecam".to_string()).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(full) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Parser)]
#[command(
    name = "gazecam",
    version,
    about = "Fixation maps from gaze data, class activation maps, and fixation-supervised training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset
    GenData(GenDataArgs),
    /// Expand a dataset with affine-augmented copies
    Augment(AugmentArgs),
    /// Extract fixations from raw gaze recordings (velocity threshold)
    Fixations(FixationsArgs),
    /// Build fixation heat maps from raw gaze recordings
    Fixmaps(FixmapsArgs),
    /// Build synthetic class-discriminative fixation maps for a dataset
    OracleFixmaps(OracleFixmapsArgs),
    /// Train a classifier (cross-entropy baseline or fixation-supervised)
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Emit class activation maps for dataset samples
    Cam(CamArgs),
    /// McNemar comparison of two per-sample prediction files
    Compare(CompareArgs),
    /// Distribution diagnostics for a checkpoint's dense weights
    AnalyzeWeights(AnalyzeWeightsArgs),
    /// Analytic vs Monte-Carlo zero-map probabilities for both CAM variants
    ZeroMapStudy(ZeroMapStudyArgs),
    /// Train at several MSE weights and tabulate test accuracy
    SweepLambda(SweepLambdaArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Flat key=value settings file; flags override it
    #[arg(long)]
    config: Option<String>,
    /// Output run directory [default: run]
    #[arg(long)]
    out: Option<String>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<String>,
    /// Number of glyph classes, 2..=16 [default: 10]
    #[arg(long)]
    classes: Option<String>,
    /// Samples per class [default: 85]
    #[arg(long)]
    per_class: Option<String>,
    /// Square image side in pixels [default: 64]
    #[arg(long)]
    side: Option<String>,
}

#[derive(clap::Args)]
struct AugmentArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Dataset directory (manifest.csv + images)
    #[arg(long)]
    data: Option<String>,
    /// Load images at this square side [default: 64]
    #[arg(long)]
    side: Option<String>,
    /// Augmented copies per sample [default: 1]
    #[arg(long)]
    copies: Option<String>,
    /// Maximum shear factor [default: 0.2]
    #[arg(long)]
    shear: Option<String>,
    /// Maximum absolute rotation, degrees [default: 40]
    #[arg(long)]
    rotation: Option<String>,
    /// Allow horizontal flips [default: true]
    #[arg(long)]
    h_flip: Option<String>,
    /// Allow vertical flips [default: true]
    #[arg(long)]
    v_flip: Option<String>,
}

#[derive(clap::Args)]
struct FixationsArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Gaze CSV (trial_id,t_ms,x_px,y_px,valid)
    #[arg(long)]
    gaze: Option<String>,
    /// Fixation velocity threshold, px/s [default: 900]
    #[arg(long)]
    velocity: Option<String>,
    /// Minimum fixation duration, ms [default: 60]
    #[arg(long)]
    min_duration: Option<String>,
    /// Sample gaps longer than this split fixations, ms [default: 100]
    #[arg(long)]
    gap: Option<String>,
}

#[derive(clap::Args)]
struct FixmapsArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Gaze CSV (trial_id,t_ms,x_px,y_px,valid)
    #[arg(long)]
    gaze: Option<String>,
    /// Map width, px [default: 400]
    #[arg(long)]
    width: Option<String>,
    /// Map height, px [default: 400]
    #[arg(long)]
    height: Option<String>,
    /// Gaussian spread, px [default: 40]
    #[arg(long)]
    sigma: Option<String>,
    /// Fixation velocity threshold, px/s [default: 900]
    #[arg(long)]
    velocity: Option<String>,
    /// Minimum fixation duration, ms [default: 60]
    #[arg(long)]
    min_duration: Option<String>,
    /// Sample gaps longer than this split fixations, ms [default: 100]
    #[arg(long)]
    gap: Option<String>,
}

#[derive(clap::Args)]
struct OracleFixmapsArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Dataset directory; fixmaps are written alongside its images
    #[arg(long)]
    data: Option<String>,
    /// Load images at this square side [default: 64]
    #[arg(long)]
    side: Option<String>,
    /// Gaussian spread of the pseudo-fixation map, px [default: 4]
    #[arg(long)]
    sigma: Option<String>,
    /// Fraction of most class-discriminative pixels used [default: 0.05]
    #[arg(long)]
    top_q: Option<String>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// baseline (CE only) or vegam (CE + fixation-map MSE)
    #[arg(long)]
    mode: Option<String>,
    /// Dataset directory
    #[arg(long)]
    data: Option<String>,
    /// Load images at this square side [default: 64]
    #[arg(long)]
    side: Option<String>,
    /// Fraction held out as the test split [default: 0.2]
    #[arg(long)]
    test_fraction: Option<String>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<String>,
    /// Batch size [default: 64]
    #[arg(long)]
    batch_size: Option<String>,
    /// Weight of the fixation-map MSE term [default: 1]
    #[arg(long)]
    lambda: Option<String>,
    /// Epoch cap [default: 30]
    #[arg(long)]
    max_epochs: Option<String>,
    /// Early-stopping patience on validation CE, epochs [default: 5]
    #[arg(long)]
    patience: Option<String>,
    /// Class row driving the training-time map: predicted or true [default: predicted]
    #[arg(long)]
    cam_class: Option<String>,
    /// Map scaling before the MSE: minmax or none [default: minmax]
    #[arg(long)]
    map_norm: Option<String>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Checkpoint file
    #[arg(long)]
    model: Option<String>,
    /// Dataset directory
    #[arg(long)]
    data: Option<String>,
}

#[derive(clap::Args)]
struct CamArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Checkpoint file
    #[arg(long)]
    model: Option<String>,
    /// Dataset directory
    #[arg(long)]
    data: Option<String>,
    /// classical (mean-gradient weights) or modified (Hadamard) [default: modified]
    #[arg(long)]
    variant: Option<String>,
    /// Samples to map, 0 = all [default: 16]
    #[arg(long)]
    limit: Option<String>,
    /// Class the maps explain: predicted, true, or an index [default: predicted]
    #[arg(long)]
    class: Option<String>,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// First per-sample prediction CSV
    #[arg(long)]
    first: Option<String>,
    /// Second per-sample prediction CSV
    #[arg(long)]
    second: Option<String>,
}

#[derive(clap::Args)]
struct AnalyzeWeightsArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Checkpoint file
    #[arg(long)]
    model: Option<String>,
}

#[derive(clap::Args)]
struct ZeroMapStudyArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Checkpoint file
    #[arg(long)]
    model: Option<String>,
    /// Dataset directory supplying the activation stack
    #[arg(long)]
    data: Option<String>,
    /// Index of the sample whose activations are studied [default: 0]
    #[arg(long)]
    index: Option<String>,
    /// Weight mean: 'fit' (from the checkpoint) or a number [default: fit]
    #[arg(long)]
    mu: Option<String>,
    /// Weight standard deviation: 'fit' or a number [default: fit]
    #[arg(long)]
    sigma: Option<String>,
    /// Monte-Carlo trials [default: 10000]
    #[arg(long)]
    trials: Option<String>,
}

#[derive(clap::Args)]
struct SweepLambdaArgs {
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Dataset directory with fixation maps alongside images
    #[arg(long)]
    data: Option<String>,
    /// Comma-separated MSE weights [default: 0,0.25,0.5,1,2]
    #[arg(long)]
    lambdas: Option<String>,
    /// Load images at this square side [default: 64]
    #[arg(long)]
    side: Option<String>,
    /// Fraction held out as the test split [default: 0.2]
    #[arg(long)]
    test_fraction: Option<String>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<String>,
    /// Batch size [default: 64]
    #[arg(long)]
    batch_size: Option<String>,
    /// Epoch cap [default: 30]
    #[arg(long)]
    max_epochs: Option<String>,
    /// Early-stopping patience, epochs [default: 5]
    #[arg(long)]
    patience: Option<String>,
    /// predicted or true [default: predicted]
    #[arg(long)]
    cam_class: Option<String>,
    /// minmax or none [default: minmax]
    #[arg(long)]
    map_norm: Option<String>,
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Fixations(a) => cmd_fixations(a),
        Command::Fixmaps(a) => cmd_fixmaps(a),
        Command::OracleFixmaps(a) => cmd_oracle_fixmaps(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cam(a) => cmd_cam(a),
        Command::Compare(a) => cmd_compare(a),
        Command::AnalyzeWeights(a) => cmd_analyze_weights(a),
        Command::ZeroMapStudy(a) => cmd_zero_map_study(a),
        Command::SweepLambda(a) => cmd_sweep_lambda(a),
    }
}

// ── setting resolution ───────────────────────────────────────────────────

/// Merges flag values, config-file values, and defaults, recording the
/// effective value of every key for the run's config snapshot.
#[derive(Debug)]
struct Resolver {
    file: BTreeMap<String, String>,
    snapshot: BTreeMap<String, String>,
}

impl Resolver {
    fn from_config(config: Option<&String>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (idx, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let parse_err = |message: String| Error::Parse {
                    path: path.clone(),
                    line: (idx + 1) as u64,
                    message,
                };
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| parse_err("expected key=value".into()))?;
                let key = k.trim().to_string();
                if file.insert(key.clone(), v.trim().to_string()).is_some() {
                    return Err(parse_err(format!("duplicate key '{key}'")));
                }
            }
        }
        Ok(Self {
            file,
            snapshot: BTreeMap::new(),
        })
    }

    fn raw(&mut self, key: &str, cli: &Option<String>, default: Option<&str>) -> Result<String> {
        let from_file = self.file.remove(key);
        let value = cli
            .clone()
            .or(from_file)
            .or_else(|| default.map(str::to_string))
            .ok_or_else(|| Error::Usage(format!("--{key} is required")))?;
        self.snapshot.insert(key.to_string(), value.clone());
        Ok(value)
    }

    fn parsed<T: std::str::FromStr>(
        &mut self,
        key: &str,
        cli: &Option<String>,
        default: Option<&str>,
        what: &str,
    ) -> Result<T> {
        let raw = self.raw(key, cli, default)?;
        raw.parse()
            .map_err(|_| Error::Usage(format!("--{key}: expected {what}, got '{raw}'")))
    }

    fn u64(&mut self, key: &str, cli: &Option<String>, default: &str) -> Result<u64> {
        self.parsed(key, cli, Some(default), "an unsigned integer")
    }

    fn usize(&mut self, key: &str, cli: &Option<String>, default: &str) -> Result<usize> {
        self.parsed(key, cli, Some(default), "an unsigned integer")
    }

    fn f64(&mut self, key: &str, cli: &Option<String>, default: &str) -> Result<f64> {
        self.parsed(key, cli, Some(default), "a number")
    }

    fn bool(&mut self, key: &str, cli: &Option<String>, default: &str) -> Result<bool> {
        self.parsed(key, cli, Some(default), "true or false")
    }

    fn path(&mut self, key: &str, cli: &Option<String>, default: Option<&str>) -> Result<PathBuf> {
        Ok(PathBuf::from(self.raw(key, cli, default)?))
    }

    /// Rejects config-file keys no resolver call consumed, then writes the
    /// effective settings to `<out>/config.txt`.
    fn seal(self, command: &str, out: &Path) -> Result<()> {
        if let Some(key) = self.file.keys().next() {
            return Err(Error::Usage(format!("unknown config key '{key}'")));
        }
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut text = format!("# command: {command}\n");
        for (k, v) in &self.snapshot {
            text.push_str(&format!("{k}={v}\n"));
        }
        let path = out.join("config.txt");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn parse_cam_class(s: &str) -> Result<CamClassMode> {
    match s {
        "predicted" => Ok(CamClassMode::Predicted),
        "true" => Ok(CamClassMode::True),
        _ => Err(Error::Usage(format!(
            "--cam-class: expected predicted or true, got '{s}'"
        ))),
    }
}

fn parse_map_norm(s: &str) -> Result<MapNorm> {
    match s {
        "minmax" => Ok(MapNorm::MinMax),
        "none" => Ok(MapNorm::None),
        _ => Err(Error::Usage(format!(
            "--map-norm: expected minmax or none, got '{s}'"
        ))),
    }
}

fn parse_variant(s: &str) -> Result<CamVariant> {
    match s {
        "classical" => Ok(CamVariant::Classical),
        "modified" => Ok(CamVariant::Modified),
        _ => Err(Error::Usage(format!(
            "--variant: expected classical or modified, got '{s}'"
        ))),
    }
}

// ── small io helpers ─────────────────────────────────────────────────────

fn make_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn csv_write(path: &Path, w: &mut csv::Writer<std::fs::File>, record: &[String]) -> Result<()> {
    w.write_record(record)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn csv_finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    Model::load(path)
}

// ── subcommands ──────────────────────────────────────────────────────────

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let seed = r.u64("seed", &a.seed, "0")?;
    let classes = r.usize("classes", &a.classes, "10")?;
    let per_class = r.usize("per-class", &a.per_class, "85")?;
    let side = r.usize("side", &a.side, "64")?;
    r.seal("gen-data", &out)?;

    let dataset = generate_glyphs(classes, per_class, side, seed)?;
    let data_dir = out.join("data");
    save_dataset(&dataset, &data_dir)?;
    println!(
        "wrote {} samples across {} classes to {}",
        dataset.samples.len(),
        dataset.num_classes,
        data_dir.display()
    );
    Ok(())
}

fn cmd_augment(a: AugmentArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let seed = r.u64("seed", &a.seed, "0")?;
    let data = r.path("data", &a.data, None)?;
    let side = r.usize("side", &a.side, "64")?;
    let copies = r.usize("copies", &a.copies, "1")?;
    let shear = r.f64("shear", &a.shear, "0.2")?;
    let rotation = r.f64("rotation", &a.rotation, "40")?;
    let h_flip = r.bool("h-flip", &a.h_flip, "true")?;
    let v_flip = r.bool("v-flip", &a.v_flip, "true")?;
    r.seal("augment", &out)?;

    let dataset = load_images(&data, side)?;
    let mut samples = dataset.samples.clone();
    for copy in 1..=copies {
        for (idx, sample) in dataset.samples.iter().enumerate() {
            let params = AugmentParams {
                shear,
                rotation_deg: rotation,
                h_flip,
                v_flip,
                seed: derive_seed(seed, &[copy as u64, idx as u64]),
            };
            let mut augmented = augment(sample, &params)?;
            augmented.id = format!("{}_a{copy}", sample.id);
            samples.push(augmented);
        }
    }
    let expanded = Dataset {
        samples,
        num_classes: dataset.num_classes,
    };
    let data_dir = out.join("data");
    save_dataset(&expanded, &data_dir)?;
    println!(
        "wrote {} samples ({} originals + {copies} augmented copies each) to {}",
        expanded.samples.len(),
        dataset.samples.len(),
        data_dir.display()
    );
    Ok(())
}

fn cmd_fixations(a: FixationsArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let gaze = r.path("gaze", &a.gaze, None)?;
    let params = IvtParams {
        velocity_threshold: r.f64("velocity", &a.velocity, "900")?,
        min_duration_ms: r.f64("min-duration", &a.min_duration, "60")?,
        gap_split_ms: r.f64("gap", &a.gap, "100")?,
    };
    r.seal("fixations", &out)?;

    let trials = load_gaze_csv(&gaze)?;
    let path = out.join("fixations.csv");
    let mut w = csv_writer(&path)?;
    csv_write(
        &path,
        &mut w,
        &["trial_id", "x_px", "y_px", "duration_ms"].map(String::from),
    )?;
    let mut total = 0usize;
    let mut skipped = 0usize;
    for trial in &trials {
        let result = ivt_extract(&trial.samples, &params)?;
        if result.too_few_samples {
            skipped += 1;
        }
        for f in &result.fixations {
            csv_write(
                &path,
                &mut w,
                &[
                    trial.id.clone(),
                    f.x.to_string(),
                    f.y.to_string(),
                    f.duration.to_string(),
                ],
            )?;
            total += 1;
        }
    }
    csv_finish(&path, w)?;
    println!(
        "extracted {total} fixations from {} trials ({skipped} too short to process) to {}",
        trials.len(),
        path.display()
    );
    Ok(())
}

fn cmd_fixmaps(a: FixmapsArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let gaze = r.path("gaze", &a.gaze, None)?;
    let width = r.usize("width", &a.width, "400")?;
    let height = r.usize("height", &a.height, "400")?;
    let sigma = r.f64("sigma", &a.sigma, "40")?;
    let params = IvtParams {
        velocity_threshold: r.f64("velocity", &a.velocity, "900")?,
        min_duration_ms: r.f64("min-duration", &a.min_duration, "60")?,
        gap_split_ms: r.f64("gap", &a.gap, "100")?,
    };
    r.seal("fixmaps", &out)?;

    let trials = load_gaze_csv(&gaze)?;
    let maps_dir = out.join("maps");
    make_dir(&maps_dir)?;
    let mut written = 0usize;
    let mut skipped = 0usize;
    for trial in &trials {
        let result = ivt_extract(&trial.samples, &params)?;
        if result.fixations.is_empty() {
            skipped += 1;
            continue;
        }
        let map = fixation_map(&result.fixations, width, height, sigma)?;
        write_pfm(&maps_dir.join(format!("{}.pfm", trial.id)), &map.values)?;
        let img = heatmap_render(&map.values, ColorRamp::Hot)?;
        save_png(&img, &maps_dir.join(format!("{}.png", trial.id)))?;
        written += 1;
    }
    println!(
        "wrote {written} fixation maps ({skipped} trials without fixations) to {}",
        maps_dir.display()
    );
    Ok(())
}

/// Image paths from a dataset manifest, keyed by sample id.
fn manifest_paths(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let path = dir.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        if let (Some(id), Some(rel)) = (record.get(0), record.get(1)) {
            map.insert(id.to_string(), dir.join(rel));
        }
    }
    Ok(map)
}

fn cmd_oracle_fixmaps(a: OracleFixmapsArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let data = r.path("data", &a.data, None)?;
    let side = r.usize("side", &a.side, "64")?;
    let sigma = r.f64("sigma", &a.sigma, "4")?;
    let top_q = r.f64("top-q", &a.top_q, "0.05")?;
    r.seal("oracle-fixmaps", &out)?;

    let dataset = load_images(&data, side)?;
    let maps = oracle_fixmaps(&dataset, sigma, top_q)?;
    let paths = manifest_paths(&data)?;
    for (sample, map) in dataset.samples.iter().zip(&maps) {
        let image_path = paths.get(&sample.id).ok_or_else(|| {
            Error::Data(format!("sample {} is missing from the manifest", sample.id))
        })?;
        write_pfm(&crate::data::fixmap_path(image_path), &map.values)?;
    }
    // one rendered preview per class
    let mut seen = vec![false; dataset.num_classes];
    for (sample, map) in dataset.samples.iter().zip(&maps) {
        if !seen[sample.label] {
            seen[sample.label] = true;
            let img = heatmap_render(&map.values, ColorRamp::Hot)?;
            save_png(&img, &out.join(format!("class{:02}.png", sample.label)))?;
        }
    }
    println!(
        "wrote {} oracle fixation maps alongside images in {}",
        maps.len(),
        data.display()
    );
    Ok(())
}

struct TrainSettings {
    data: PathBuf,
    side: usize,
    test_fraction: f64,
    config: TrainConfig,
}

fn resolve_train_knobs(
    r: &mut Resolver,
    data: &Option<String>,
    side: &Option<String>,
    test_fraction: &Option<String>,
    seed: &Option<String>,
    lr: &Option<String>,
    batch_size: &Option<String>,
    max_epochs: &Option<String>,
    patience: &Option<String>,
    cam_class: &Option<String>,
    map_norm: &Option<String>,
) -> Result<TrainSettings> {
    let data = r.path("data", data, None)?;
    let side = r.usize("side", side, "64")?;
    let test_fraction = r.f64("test-fraction", test_fraction, "0.2")?;
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Usage(format!(
            "--test-fraction: expected a value in (0, 1), got {test_fraction}"
        )));
    }
    let config = TrainConfig {
        lr: r.f64("lr", lr, "0.001")?,
        batch_size: r.usize("batch-size", batch_size, "64")?,
        lambda: 1.0,
        max_epochs: r.usize("max-epochs", max_epochs, "30")?,
        patience: r.usize("patience", patience, "5")?,
        seed: r.u64("seed", seed, "0")?,
        cam_class_mode: parse_cam_class(&r.raw("cam-class", cam_class, Some("predicted"))?)?,
        map_norm: parse_map_norm(&r.raw("map-norm", map_norm, Some("minmax"))?)?,
    };
    Ok(TrainSettings {
        data,
        side,
        test_fraction,
        config,
    })
}

fn train_summary(
    mode: &str,
    train_len: usize,
    test_len: usize,
    test_accuracy: f64,
    report: &crate::train::TrainReport,
) -> String {
    format!(
        "mode={mode}\ntrain_samples={train_len}\ntest_samples={test_len}\ntest_accuracy={test_accuracy}\nbest_epoch={}\nstopped_epoch={}\n",
        report.best_epoch, report.stopped_epoch
    )
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let mode = r.raw("mode", &a.mode, None)?;
    if mode != "baseline" && mode != "vegam" {
        return Err(Error::Usage(format!(
            "--mode: expected baseline or vegam, got '{mode}'"
        )));
    }
    let mut settings = resolve_train_knobs(
        &mut r,
        &a.data,
        &a.side,
        &a.test_fraction,
        &a.seed,
        &a.lr,
        &a.batch_size,
        &a.max_epochs,
        &a.patience,
        &a.cam_class,
        &a.map_norm,
    )?;
    settings.config.lambda = r.f64("lambda", &a.lambda, "1")?;
    r.seal("train", &out)?;

    let dataset = load_images(&settings.data, settings.side)?;
    let (train_set, test_set) = split(
        &dataset,
        1.0 - settings.test_fraction,
        derive_seed(settings.config.seed, &[STREAM_TEST_SPLIT]),
    )?;
    let (model, report) = if mode == "baseline" {
        train_baseline(&train_set, &settings.config)?
    } else {
        let fixmaps = crate::data::fixmap_tensors(&train_set)?;
        train_vegam(&train_set, &fixmaps, &settings.config)?
    };
    model.save(&out.join("model.gzcm"))?;
    write_metrics_csv(&out.join("metrics.csv"), &report)?;
    let (test_accuracy, records) = evaluate(&model, &test_set)?;
    write_eval_csv(&out.join("eval.csv"), &records)?;
    write_text(
        &out.join("summary.txt"),
        &train_summary(
            &mode,
            train_set.samples.len(),
            test_set.samples.len(),
            test_accuracy,
            &report,
        ),
    )?;
    println!(
        "{mode}: test accuracy {test_accuracy:.4} after {} epochs (best epoch {}); artifacts in {}",
        report.stopped_epoch,
        report.best_epoch,
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let model_path = r.path("model", &a.model, None)?;
    let data = r.path("data", &a.data, None)?;
    r.seal("eval", &out)?;

    let model = load_checkpoint(&model_path)?;
    let dataset = load_images(&data, model.config().input_side)?;
    let (accuracy, records) = evaluate(&model, &dataset)?;
    write_eval_csv(&out.join("eval.csv"), &records)?;
    write_text(
        &out.join("summary.txt"),
        &format!("samples={}\naccuracy={accuracy}\n", records.len()),
    )?;
    println!(
        "accuracy {accuracy:.4} over {} samples; records in {}",
        records.len(),
        out.join("eval.csv").display()
    );
    Ok(())
}

fn cmd_cam(a: CamArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let model_path = r.path("model", &a.model, None)?;
    let data = r.path("data", &a.data, None)?;
    let variant = parse_variant(&r.raw("variant", &a.variant, Some("modified"))?)?;
    let limit = r.usize("limit", &a.limit, "16")?;
    let class_key = r.raw("class", &a.class, Some("predicted"))?;
    if class_key != "predicted" && class_key != "true" && class_key.parse::<usize>().is_err() {
        return Err(Error::Usage(format!(
            "--class: expected predicted, true, or a class index, got '{class_key}'"
        )));
    }
    r.seal("cam", &out)?;

    let model = load_checkpoint(&model_path)?;
    let side = model.config().input_side;
    let classes = model.config().num_classes;
    let dataset = load_images(&data, side)?;
    let take = if limit == 0 {
        dataset.samples.len()
    } else {
        limit.min(dataset.samples.len())
    };
    let maps_dir = out.join("maps");
    make_dir(&maps_dir)?;
    let csv_path = out.join("cams.csv");
    let mut w = csv_writer(&csv_path)?;
    csv_write(
        &csv_path,
        &mut w,
        &["sample_id", "label", "predicted", "class", "variant", "all_zero", "max_value"]
            .map(String::from),
    )?;
    let mut zeros = 0usize;
    for sample in &dataset.samples[..take] {
        let trace = model.forward(&sample.image)?;
        let class = match class_key.as_str() {
            "predicted" => trace.predicted,
            "true" => sample.label,
            other => {
                let c: usize = other.parse().expect("validated above");
                if c >= classes {
                    return Err(Error::Index(format!(
                        "class {c} out of range for {classes} classes"
                    )));
                }
                c
            }
        };
        let cam = cam_from_dense_weights(&model, &trace.activations, class, variant)?;
        write_pfm(&maps_dir.join(format!("{}.pfm", sample.id)), &cam.values)?;
        let upsized = bilinear_resize(&cam.values, side, side)?;
        let img = heatmap_render(&upsized, ColorRamp::Hot)?;
        save_png(&img, &maps_dir.join(format!("{}.png", sample.id)))?;
        if cam.all_zero {
            zeros += 1;
        }
        let max = cam.values.data().iter().cloned().fold(0.0f64, f64::max);
        csv_write(
            &csv_path,
            &mut w,
            &[
                sample.id.clone(),
                sample.label.to_string(),
                trace.predicted.to_string(),
                class.to_string(),
                variant.to_string(),
                cam.all_zero.to_string(),
                max.to_string(),
            ],
        )?;
    }
    csv_finish(&csv_path, w)?;
    println!(
        "wrote {take} {variant} maps ({zeros} all-zero) to {}",
        maps_dir.display()
    );
    Ok(())
}

fn method_name(method: McNemarMethod) -> &'static str {
    match method {
        McNemarMethod::ExactBinomial => "exact-binomial",
        McNemarMethod::ChiSquare => "chi-square",
        McNemarMethod::Degenerate => "degenerate",
    }
}

/// Aligns two prediction files by sample id and builds the paired table.
fn paired_table(first: &[SampleRecord], second: &[SampleRecord]) -> Result<ContingencyTable> {
    if first.len() != second.len() {
        return Err(Error::Data(format!(
            "prediction files cover {} vs {} samples",
            first.len(),
            second.len()
        )));
    }
    let mut by_id: BTreeMap<&str, &SampleRecord> = BTreeMap::new();
    for r in second {
        if by_id.insert(r.sample_id.as_str(), r).is_some() {
            return Err(Error::Data(format!(
                "duplicate sample id '{}' in the second file",
                r.sample_id
            )));
        }
    }
    let mut truth = Vec::with_capacity(first.len());
    let mut p1 = Vec::with_capacity(first.len());
    let mut p2 = Vec::with_capacity(first.len());
    for r in first {
        let other = by_id.get(r.sample_id.as_str()).ok_or_else(|| {
            Error::Data(format!(
                "sample '{}' is missing from the second file",
                r.sample_id
            ))
        })?;
        if other.true_label != r.true_label {
            return Err(Error::Data(format!(
                "sample '{}' has true label {} in one file and {} in the other",
                r.sample_id, r.true_label, other.true_label
            )));
        }
        truth.push(r.true_label);
        p1.push(r.predicted);
        p2.push(other.predicted);
    }
    ContingencyTable::from_paired(&truth, &p1, &p2)
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let first = r.path("first", &a.first, None)?;
    let second = r.path("second", &a.second, None)?;
    r.seal("compare", &out)?;

    let table = paired_table(
        &crate::train::read_eval_csv(&first)?,
        &crate::train::read_eval_csv(&second)?,
    )?;
    let result = mcnemar(&table);
    let path = out.join("compare.csv");
    let mut w = csv_writer(&path)?;
    csv_write(
        &path,
        &mut w,
        &["a", "b", "c", "d", "statistic", "p_value", "method"].map(String::from),
    )?;
    csv_write(
        &path,
        &mut w,
        &[
            table.a.to_string(),
            table.b.to_string(),
            table.c.to_string(),
            table.d.to_string(),
            result.statistic.map(|s| s.to_string()).unwrap_or_default(),
            result.p_value.to_string(),
            method_name(result.method).to_string(),
        ],
    )?;
    csv_finish(&path, w)?;
    let line = format!(
        "a={} b={} c={} d={} p={} ({})",
        table.a,
        table.b,
        table.c,
        table.d,
        result.p_value,
        method_name(result.method)
    );
    write_text(&out.join("summary.txt"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

fn cmd_analyze_weights(a: AnalyzeWeightsArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let model_path = r.path("model", &a.model, None)?;
    r.seal("analyze-weights", &out)?;

    let model = load_checkpoint(&model_path)?;
    let stats = weight_stats(model.dense_weight().data())?;
    let path = out.join("weights.csv");
    let mut w = csv_writer(&path)?;
    csv_write(
        &path,
        &mut w,
        &[
            "count",
            "mean",
            "variance",
            "skewness",
            "excess_kurtosis",
            "ks_distance",
            "ks_critical",
            "normal_plausible",
            "degenerate",
        ]
        .map(String::from),
    )?;
    csv_write(
        &path,
        &mut w,
        &[
            stats.count.to_string(),
            stats.mean.to_string(),
            stats.variance.to_string(),
            stats.skewness.to_string(),
            stats.excess_kurtosis.to_string(),
            stats.ks_distance.to_string(),
            stats.ks_critical.to_string(),
            stats.normal_plausible.to_string(),
            stats.degenerate.to_string(),
        ],
    )?;
    csv_finish(&path, w)?;

    let hist_path = out.join("histogram.csv");
    let mut hw = csv_writer(&hist_path)?;
    csv_write(&hist_path, &mut hw, &["bin_lo", "bin_hi", "count"].map(String::from))?;
    for (i, &count) in stats.histogram.counts.iter().enumerate() {
        csv_write(
            &hist_path,
            &mut hw,
            &[
                stats.histogram.edges[i].to_string(),
                stats.histogram.edges[i + 1].to_string(),
                count.to_string(),
            ],
        )?;
    }
    csv_finish(&hist_path, hw)?;

    let verdict = if stats.degenerate {
        "degenerate (all weights equal)"
    } else if stats.normal_plausible {
        "consistent with a normal fit (KS below the 5% critical distance)"
    } else {
        "not consistent with a normal fit (KS above the 5% critical distance)"
    };
    write_text(
        &out.join("summary.txt"),
        &format!(
            "count={}\nmean={}\nvariance={}\nskewness={}\nexcess_kurtosis={}\nks_distance={}\nks_critical={}\nverdict={verdict}\n",
            stats.count, stats.mean, stats.variance, stats.skewness, stats.excess_kurtosis,
            stats.ks_distance, stats.ks_critical
        ),
    )?;
    println!(
        "dense weights: mean {:.4e}, sd {:.4e}, {verdict}",
        stats.mean,
        stats.variance.sqrt()
    );
    Ok(())
}

fn cmd_zero_map_study(a: ZeroMapStudyArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let seed = r.u64("seed", &a.seed, "0")?;
    let model_path = r.path("model", &a.model, None)?;
    let data = r.path("data", &a.data, None)?;
    let index = r.usize("index", &a.index, "0")?;
    let mu_raw = r.raw("mu", &a.mu, Some("fit"))?;
    let sigma_raw = r.raw("sigma", &a.sigma, Some("fit"))?;
    let trials = r.usize("trials", &a.trials, "10000")?;
    r.seal("zero-map-study", &out)?;

    let model = load_checkpoint(&model_path)?;
    let dataset = load_images(&data, model.config().input_side)?;
    if index >= dataset.samples.len() {
        return Err(Error::Index(format!(
            "sample index {index} out of range for {} samples",
            dataset.samples.len()
        )));
    }
    let fit = if mu_raw == "fit" || sigma_raw == "fit" {
        Some(weight_stats(model.dense_weight().data())?)
    } else {
        None
    };
    let number = |key: &str, raw: &str| -> Result<f64> {
        raw.parse().map_err(|_| {
            Error::Usage(format!("--{key}: expected 'fit' or a number, got '{raw}'"))
        })
    };
    let mu = if mu_raw == "fit" {
        fit.as_ref().unwrap().mean
    } else {
        number("mu", &mu_raw)?
    };
    let sigma = if sigma_raw == "fit" {
        fit.as_ref().unwrap().variance.sqrt()
    } else {
        number("sigma", &sigma_raw)?
    };

    let trace = model.forward(&dataset.samples[index].image)?;
    let analysis = zero_map_probs(&trace.activations, mu, sigma)?;
    let mc = zero_map_monte_carlo(&trace.activations, mu, sigma, trials, seed)?;

    let n = analysis.side;
    let path = out.join("zero_map.csv");
    let mut w = csv_writer(&path)?;
    csv_write(
        &path,
        &mut w,
        &[
            "y",
            "x",
            "mu1",
            "sigma1_sq",
            "p_modified",
            "p_classical",
            "mc_modified",
            "mc_classical",
            "se_modified",
            "se_classical",
            "degenerate",
        ]
        .map(String::from),
    )?;
    let mut within_mod = 0usize;
    let mut within_cls = 0usize;
    let mut live = 0usize;
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            csv_write(
                &path,
                &mut w,
                &[
                    y.to_string(),
                    x.to_string(),
                    analysis.mu1.data()[i].to_string(),
                    analysis.sigma1_sq.data()[i].to_string(),
                    analysis.p_modified.data()[i].to_string(),
                    analysis.p_classical.data()[i].to_string(),
                    mc.pos_frac_modified.data()[i].to_string(),
                    mc.pos_frac_classical.data()[i].to_string(),
                    mc.se_modified.data()[i].to_string(),
                    mc.se_classical.data()[i].to_string(),
                    analysis.degenerate[i].to_string(),
                ],
            )?;
            if !analysis.degenerate[i] {
                live += 1;
                // the SE of the empirical fraction under the analytic
                // probability; the observed-fraction SE degenerates to zero
                // whenever no trial fires
                let null_se =
                    |p: f64| (p * (1.0 - p) / trials as f64).sqrt().max(f64::MIN_POSITIVE);
                if (analysis.p_modified.data()[i] - mc.pos_frac_modified.data()[i]).abs()
                    <= 3.0 * null_se(analysis.p_modified.data()[i])
                {
                    within_mod += 1;
                }
                if (analysis.p_classical.data()[i] - mc.pos_frac_classical.data()[i]).abs()
                    <= 3.0 * null_se(analysis.p_classical.data()[i])
                {
                    within_cls += 1;
                }
            }
        }
    }
    csv_finish(&path, w)?;
    write_text(
        &out.join("summary.txt"),
        &format!(
            "mu={mu}\nsigma={sigma}\ntrials={trials}\nmap_side={n}\nlive_pixels={live}\nwithin_3se_modified={within_mod}\nwithin_3se_classical={within_cls}\nzero_map_frac_modified={}\nzero_map_frac_classical={}\n",
            mc.zero_map_frac_modified, mc.zero_map_frac_classical
        ),
    )?;
    println!(
        "zero-map study: {within_mod}/{live} modified and {within_cls}/{live} classical pixels within 3 SE; all-zero map fraction classical {:.4} vs modified {:.4}",
        mc.zero_map_frac_classical, mc.zero_map_frac_modified
    );
    Ok(())
}

fn cmd_sweep_lambda(a: SweepLambdaArgs) -> Result<()> {
    let mut r = Resolver::from_config(a.config.as_ref())?;
    let out = r.path("out", &a.out, Some("run"))?;
    let lambdas_raw = r.raw("lambdas", &a.lambdas, Some("0,0.25,0.5,1,2"))?;
    let settings = resolve_train_knobs(
        &mut r,
        &a.data,
        &a.side,
        &a.test_fraction,
        &a.seed,
        &a.lr,
        &a.batch_size,
        &a.max_epochs,
        &a.patience,
        &a.cam_class,
        &a.map_norm,
    )?;
    let lambdas: Vec<f64> = lambdas_raw
        .split(',')
        .map(|part| {
            let part = part.trim();
            part.parse::<f64>()
                .ok()
                .filter(|v| *v >= 0.0 && v.is_finite())
                .ok_or_else(|| {
                    Error::Usage(format!(
                        "--lambdas: expected comma-separated non-negative numbers, got '{part}'"
                    ))
                })
        })
        .collect::<Result<_>>()?;
    if lambdas.is_empty() {
        return Err(Error::Usage("--lambdas: the list is empty".into()));
    }
    r.seal("sweep-lambda", &out)?;

    let dataset = load_images(&settings.data, settings.side)?;
    let (train_set, test_set) = split(
        &dataset,
        1.0 - settings.test_fraction,
        derive_seed(settings.config.seed, &[STREAM_TEST_SPLIT]),
    )?;
    let fixmaps = crate::data::fixmap_tensors(&train_set)?;

    let path = out.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    csv_write(
        &path,
        &mut w,
        &["lambda", "test_accuracy", "best_epoch", "stopped_epoch", "best_val_ce"]
            .map(String::from),
    )?;
    for &lambda in &lambdas {
        let config = TrainConfig {
            lambda,
            ..settings.config
        };
        let (model, report) = train_vegam(&train_set, &fixmaps, &config)?;
        let (accuracy, _) = evaluate(&model, &test_set)?;
        let best_val = report.epochs[report.best_epoch - 1].val_ce;
        csv_write(
            &path,
            &mut w,
            &[
                lambda.to_string(),
                accuracy.to_string(),
                report.best_epoch.to_string(),
                report.stopped_epoch.to_string(),
                best_val.to_string(),
            ],
        )?;
        println!("lambda {lambda}: test accuracy {accuracy:.4}");
    }
    csv_finish(&path, w)?;
    println!("sweep table in {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &str) -> Option<String> {
        Some(v.to_string())
    }

    #[test]
    fn flags_override_config_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "# comment\nclasses=4\nside=32\n").unwrap();
        let mut r = Resolver::from_config(Some(&cfg.display().to_string())).unwrap();
        // flag beats file
        assert_eq!(r.usize("classes", &s("6"), "10").unwrap(), 6);
        // file beats default
        assert_eq!(r.usize("side", &None, "64").unwrap(), 32);
        // default fills the rest
        assert_eq!(r.usize("per-class", &None, "85").unwrap(), 85);
        r.seal("gen-data", dir.path()).unwrap();
        let snap = std::fs::read_to_string(dir.path().join("config.txt")).unwrap();
        assert_eq!(snap, "# command: gen-data\nclasses=6\nper-class=85\nside=32\n");
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "classes=4\nbogus=1\n").unwrap();
        let mut r = Resolver::from_config(Some(&cfg.display().to_string())).unwrap();
        r.usize("classes", &None, "10").unwrap();
        let err = r.seal("gen-data", dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn malformed_config_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "classes=4\nnot a pair\n").unwrap();
        let err = Resolver::from_config(Some(&cfg.display().to_string())).unwrap_err();
        assert!(err.to_string().contains(":2"), "{err}");
    }

    #[test]
    fn missing_required_and_bad_values_are_usage_errors() {
        let mut r = Resolver::from_config(None).unwrap();
        let missing = r.path("data", &None, None).unwrap_err();
        assert_eq!(missing.exit_code(), 2);
        let bad = r.usize("side", &s("huge"), "64").unwrap_err();
        assert_eq!(bad.exit_code(), 2);
        assert!(bad.to_string().contains("side"));
    }

    #[test]
    fn snapshot_reloads_as_a_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Resolver::from_config(None).unwrap();
        r.usize("classes", &s("3"), "10").unwrap();
        r.u64("seed", &s("9"), "0").unwrap();
        r.seal("gen-data", dir.path()).unwrap();

        let snap = dir.path().join("config.txt");
        let mut reloaded = Resolver::from_config(Some(&snap.display().to_string())).unwrap();
        assert_eq!(reloaded.usize("classes", &None, "10").unwrap(), 3);
        assert_eq!(reloaded.u64("seed", &None, "0").unwrap(), 9);
    }

    #[test]
    fn enum_flags_reject_unknown_values() {
        assert!(parse_variant("classical").is_ok());
        assert!(parse_variant("spectral").is_err());
        assert!(parse_cam_class("true").is_ok());
        assert!(parse_cam_class("argmax").is_err());
        assert!(parse_map_norm("none").is_ok());
        assert!(parse_map_norm("zscore").is_err());
    }

    #[test]
    fn unknown_subcommands_and_flags_exit_2() {
        assert_eq!(run(&["no-such-command".into()]), 2);
        assert_eq!(run(&["gen-data".into(), "--bogus".into(), "1".into()]), 2);
        assert_eq!(run(&["--help".into()]), 0);
    }

    #[test]
    fn gen_data_writes_dataset_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let code = run(&[
            "gen-data".into(),
            "--classes".into(),
            "2".into(),
            "--per-class".into(),
            "2".into(),
            "--side".into(),
            "16".into(),
            "--out".into(),
            out.display().to_string(),
        ]);
        assert_eq!(code, 0);
        assert!(out.join("config.txt").exists());
        assert!(out.join("data/manifest.csv").exists());
        assert!(out.join("data/g00_0000.png").exists());
        let ds = load_images(&out.join("data"), 16).unwrap();
        assert_eq!(ds.samples.len(), 4);
    }
}
