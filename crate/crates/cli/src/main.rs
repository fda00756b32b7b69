use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use vqa_core::config::{CropConfig, DetectorKind, RunConfig};
use vqa_core::crop::{parse_candidates, DetectionProvider, FagMode, Rect, SidecarDetector, StubDetector};
use vqa_core::data_io::{generate_synthetic_dataset, load_manifest, LoadOptions, MosScale, SyntheticSpec};
use vqa_core::metrics::{evaluate, read_predictions};
use vqa_core::pipeline::{evaluate_checkpoint, run_crop, train_to_dir, CandidateSource, Checkpoint, Cropper};
use vqa_core::VqaError;

#[derive(Parser, Debug)]
#[command(name = "vqa", version, about = "No-reference quality assessment for generated video")]
struct Cli {
    /// Overrides the config seed where one applies.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only `cpu` is supported.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a manifest with a checkpoint and report PLCC/SROCC/KROCC.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Only evaluate rows of this split.
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        range: MosRange,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pick the best crop window for every frame of an image or frame directory.
    Crop(CropArgs),
    /// Correlation report for a JSON-lines predictions file.
    Metrics {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        range: MosRange,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic dataset (PNG frame directories plus manifest.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        n_train: usize,
        #[arg(long, default_value_t = 10)]
        n_test: usize,
    },
}

#[derive(Args, Debug)]
struct MosRange {
    /// Raw MOS range of the manifest; defaults to the checkpoint's range, or 0-100.
    #[arg(long)]
    mos_min: Option<f64>,
    #[arg(long)]
    mos_max: Option<f64>,
}

impl MosRange {
    fn resolve(&self, fallback: MosScale) -> vqa_core::Result<MosScale> {
        match (self.mos_min, self.mos_max) {
            (None, None) => Ok(fallback),
            (lo, hi) => MosScale::new(lo.unwrap_or(fallback.min), hi.unwrap_or(fallback.max)),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Candidates {
    Grid,
    File,
}

#[derive(Args, Debug)]
struct CropArgs {
    input: PathBuf,
    #[arg(long, value_enum, default_value = "grid")]
    candidates: Candidates,
    /// JSON list of `[x1, y1, x2, y2]` windows for `--candidates file`.
    #[arg(long)]
    candidates_file: Option<PathBuf>,
    /// Crop settings as a TOML document with the keys of the `[crop]` config section.
    #[arg(long)]
    crop_config: Option<PathBuf>,
    /// Detection sidecar applied to every frame.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Stub detection `x1,y1,x2,y2,confidence`; repeatable.
    #[arg(long = "stub-box", value_delimiter = ';')]
    stub_boxes: Vec<String>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    spatial_exp_sign: Option<i8>,
    #[arg(long, value_enum)]
    fag_mode: Option<FagArg>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FagArg {
    Hadamard,
    Projection,
}

/// Maps library errors to exit codes: divergence is 3, everything else the
/// caller could fix by changing inputs is 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<VqaError>() {
        Some(VqaError::Diverged(_) | VqaError::NonFinite { .. }) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn emit(value: &Value, output: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    log::info!("resolved config:\n{}", cfg.to_toml());
    let run = train_to_dir(&cfg)?;
    emit(&serde_json::to_value(&run.summary)?, None)
}

fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    split: Option<&str>,
    range: &MosRange,
    output: Option<&Path>,
) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let scale = range.resolve(ck.mos_scale)?;
    let m = load_manifest(manifest, LoadOptions { scale, check_paths: true })?;
    if m.is_empty() {
        return Err(VqaError::Empty("manifest has no videos").into());
    }
    let base = checkpoint.parent().unwrap_or(Path::new("."));
    let out = evaluate_checkpoint(&ck, &m, split, base)?;
    emit(&serde_json::to_value(&out)?, output)
}

fn parse_stub_box(s: &str) -> vqa_core::Result<(Rect, f64)> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| VqaError::InvalidArgument(format!("stub box `{s}`: {e}")))?;
    match v.as_slice() {
        [x1, y1, x2, y2, c] => Ok((Rect::new(*x1, *y1, *x2, *y2)?, *c)),
        _ => Err(VqaError::InvalidArgument(format!("stub box `{s}` needs five numbers"))),
    }
}

fn cmd_crop(args: &CropArgs, seed: u64) -> anyhow::Result<()> {
    let mut cfg = match &args.crop_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| VqaError::io(p, e))?;
            toml::from_str::<CropConfig>(&text).map_err(|e| VqaError::Config(e.to_string()))?
        }
        None => CropConfig::default(),
    };
    if let Some(n) = args.top_n {
        cfg.top_n = n;
    }
    if let Some(s) = args.spatial_exp_sign {
        cfg.spatial_exp_sign = s;
    }
    if let Some(m) = args.fag_mode {
        cfg.fag_mode = match m {
            FagArg::Hadamard => FagMode::Hadamard,
            FagArg::Projection => FagMode::Projection,
        };
    }
    if args.sidecar.is_some() {
        cfg.detector = DetectorKind::Sidecar;
        cfg.sidecar_dir = args.sidecar.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf);
    }
    for b in &args.stub_boxes {
        let (r, c) = parse_stub_box(b)?;
        let [x1, y1, x2, y2] = r.to_array();
        cfg.stub_boxes.push([x1, y1, x2, y2, c]);
    }
    cfg.validate()?;
    let cropper = Cropper::fit(&cfg, seed)?;
    let detector: Box<dyn DetectionProvider> = match &args.sidecar {
        Some(p) => Box::new(SidecarDetector::from_file(p, cropper.featurizer.clone())?),
        None => {
            let boxes = cfg
                .stub_boxes
                .iter()
                .map(|b| Ok((Rect::new(b[0], b[1], b[2], b[3])?, b[4])))
                .collect::<vqa_core::Result<Vec<_>>>()?;
            Box::new(StubDetector::new(boxes, cropper.featurizer.clone()))
        }
    };
    let (source, file_candidates) = match args.candidates {
        Candidates::Grid => (CandidateSource::Grid, None),
        Candidates::File => {
            let path = args
                .candidates_file
                .as_ref()
                .ok_or_else(|| VqaError::InvalidArgument("--candidates file needs --candidates-file".into()))?;
            let text = fs::read_to_string(path).map_err(|e| VqaError::io(path, e))?;
            (CandidateSource::File, Some(parse_candidates(&text)?))
        }
    };
    let report = run_crop(
        &args.input,
        &cropper,
        source,
        file_candidates.as_deref(),
        detector.as_ref(),
        seed,
    )?;
    emit(&serde_json::to_value(&report)?, args.output.as_deref())
}

fn cmd_metrics(predictions: &Path, manifest: &Path, range: &MosRange, output: Option<&Path>) -> anyhow::Result<()> {
    let scale = range.resolve(MosScale::default())?;
    let m = load_manifest(manifest, LoadOptions { scale, check_paths: false })?;
    if m.is_empty() {
        return Err(VqaError::Empty("manifest has no videos").into());
    }
    let preds = read_predictions(predictions)?;
    let report = evaluate(&preds, &m)?;
    emit(&serde_json::to_value(&report)?, output)
}

fn cmd_synth(out: &Path, n_train: usize, n_test: usize, seed: u64) -> anyhow::Result<()> {
    let ds = generate_synthetic_dataset(&SyntheticSpec::new(n_train, n_test), seed)?;
    let manifest = ds.write_to(out)?;
    let scale = ds.manifest.scale;
    emit(
        &serde_json::json!({ "manifest": manifest, "mos_min": scale.min, "mos_max": scale.max, "videos": ds.clips.len() }),
        None,
    )
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.device != "cpu" {
        return Err(VqaError::InvalidArgument(format!("unsupported device `{}`; only `cpu` is available", cli.device)).into());
    }
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Train { config } => cmd_train(config, cli.seed),
        Command::Eval {
            checkpoint,
            manifest,
            split,
            range,
            output,
        } => cmd_eval(checkpoint, manifest, split.as_deref(), range, output.as_deref()),
        Command::Crop(args) => cmd_crop(args, seed),
        Command::Metrics {
            predictions,
            manifest,
            range,
            output,
        } => cmd_metrics(predictions, manifest, range, output.as_deref()),
        Command::Synth { out, n_train, n_test } => cmd_synth(out, *n_train, *n_test, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
