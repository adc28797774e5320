//! `walkpose`: generate synthetic gait data, train and evaluate the lifter,
//! filter sequences, and run or benchmark the streaming pipeline.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use walkpose_core::filter::{filter_sequence, OneEuroConfig};
use walkpose_core::geometry::{CalibrationError, CameraRig};
use walkpose_core::lifter::{train, LiftContext, LiftSample, LifterError, TrainConfig, Variant};
use walkpose_core::metrics::{MetricsReport, DEFAULT_PCK_2D_PX, DEFAULT_PCK_3D_MM};
use walkpose_core::preprocess::{MODEL_HEIGHT, MODEL_WIDTH};
use walkpose_core::runtime::{
    bench, paced, run_stream, DetectorSelection, DropPolicy, ExecutionMode, Frame, PipelineConfig, RuntimeError,
    SyntheticStream,
};
use walkpose_core::skeleton::{
    format_record_3d, read_sequence_2d, read_sequence_3d, write_sequence_2d, write_sequence_3d, SequenceHeader,
    SequenceSpace,
};
use walkpose_core::synthgait::{default_rig, generate_dataset, DatasetConfig, NoiseModel, SubjectSplit};
use walkpose_core::Topology;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "walkpose",
    version,
    about = "Dual-camera 3D pose estimation for walker-assisted gait"
)]
struct Cli {
    /// JSON config for the chosen verb; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: calibration, ground truth and detections.
    Gen {
        #[arg(long)]
        subjects: Option<u32>,
        /// Comma-separated walking speeds, m/s.
        #[arg(long, value_delimiter = ',')]
        speeds: Option<Vec<f64>>,
        /// Seconds per sequence.
        #[arg(long)]
        duration: Option<f64>,
        /// Output rate, Hz.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, value_parser = ["clean", "paper-like"])]
        noise_preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a lifter on a generated dataset.
    Train {
        /// Directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Initial learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value = "default")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted and ground-truth sequences.
    Eval {
        /// Predicted sequence files, paired in order with --gt.
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        gt: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "3d")]
        space: Space,
        /// mm in 3D, px in 2D.
        #[arg(long)]
        pck_threshold: Option<f64>,
        /// Write the JSON summary here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the per-joint table here.
        #[arg(long)]
        joint_table: Option<PathBuf>,
    },
    /// Smooth a 3D sequence with the one-euro filter.
    Filter {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        fc_min: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        d_cutoff: Option<f64>,
    },
    /// Stream frames through the pipeline and emit 3D skeletons.
    Run {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Read detections from this 2D sequence (`-` for stdin) instead of
        /// the synthetic detector.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the synthetic ground truth.
        #[arg(long)]
        gt_out: Option<PathBuf>,
        /// One worker thread per stage.
        #[arg(long)]
        threaded: bool,
        /// Release frames at the source rate instead of as fast as possible.
        #[arg(long)]
        realtime: bool,
    },
    /// Measure per-stage latency against the frame budget.
    Bench {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        frames: Option<usize>,
        /// Skip image rendering and preprocessing.
        #[arg(long)]
        no_render: bool,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Validate a calibration file, or write the built-in one.
    CalibCheck {
        /// Calibration to check.
        rig: Option<PathBuf>,
        /// Write the built-in calibration here.
        #[arg(long, conflicts_with = "rig")]
        write_default: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct PipelineArgs {
    /// Lifter model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Calibration file; the built-in rig when absent.
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Synthetic source: subject id.
    #[arg(long)]
    subject: Option<u32>,
    /// Synthetic source: walking speed, m/s.
    #[arg(long)]
    speed: Option<f64>,
    /// Synthetic source: seconds.
    #[arg(long)]
    duration: Option<f64>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_err(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error: error.into(),
    }
}

fn runtime_err(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        error: error.into(),
    }
}

impl From<RuntimeError> for Failure {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Config(_) | RuntimeError::Calibration(_) => config_err(e),
            RuntimeError::Model(LifterError::BadModelFile(_) | LifterError::Io(_)) => config_err(e),
            other => runtime_err(other),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Index written next to the sequences by `gen`.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetIndex {
    config: DatasetConfig,
    split: SubjectSplit,
    sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceEntry {
    name: String,
    subject: u32,
    speed: f64,
    role: String,
    frames: usize,
}

const INDEX_FILE: &str = "dataset.json";
const CALIBRATION_FILE: &str = "calibration.json";

fn gt_file(name: &str) -> String {
    format!("{name}.gt.seq")
}

fn det_file(name: &str) -> String {
    format!("{name}.det.seq")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid JSON in {}", path.display()))
        .map_err(config_err)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(runtime_err)
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(config_err)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_gen(
    cli: &Cli,
    subjects: Option<u32>,
    speeds: Option<Vec<f64>>,
    duration: Option<f64>,
    rate: Option<f64>,
    noise_preset: Option<&str>,
    out: &Path,
) -> Outcome {
    let mut cfg: DatasetConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(v) = subjects {
        cfg.subjects = v;
    }
    if let Some(v) = speeds {
        cfg.speeds = v;
    }
    if let Some(v) = duration {
        cfg.duration = v;
    }
    if let Some(v) = rate {
        cfg.target_rate = v;
    }
    if let Some(name) = noise_preset {
        cfg.noise = NoiseModel::preset(name).ok_or_else(|| config_err(anyhow!("unknown noise preset `{name}`")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cfg.subjects < 3 {
        return Err(config_err(anyhow!(
            "need at least 3 subjects for a train/val/test split"
        )));
    }
    if cfg.speeds.is_empty() || !(cfg.duration > 0.0) || !(cfg.target_rate > 0.0) {
        return Err(config_err(anyhow!(
            "speeds, duration and rate must be non-empty and positive"
        )));
    }
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(runtime_err)?;
    let rig = default_rig();
    let ds = generate_dataset(&cfg, &rig).map_err(runtime_err)?;
    rig.save(out.join(CALIBRATION_FILE)).map_err(runtime_err)?;
    let mut entries = Vec::new();
    for seq in &ds.sequences {
        let name = seq.name();
        let role = ds.split.role(seq.subject).unwrap_or("unused");
        let meta = |h: SequenceHeader| h.with_meta("subject", seq.subject).with_meta("speed", seq.speed);
        let gt_header = meta(SequenceHeader::new(SequenceSpace::ThreeD));
        write_sequence_3d(create(&out.join(gt_file(&name)))?, &gt_header, &seq.gt).map_err(runtime_err)?;
        let det_header = meta(SequenceHeader::new(SequenceSpace::TwoD {
            width: MODEL_WIDTH as u32,
            height: MODEL_HEIGHT as u32,
        }));
        write_sequence_2d(create(&out.join(det_file(&name)))?, &det_header, &seq.detections).map_err(runtime_err)?;
        entries.push(SequenceEntry {
            name,
            subject: seq.subject,
            speed: seq.speed,
            role: role.to_string(),
            frames: seq.gt.len(),
        });
    }
    let index = DatasetIndex {
        config: cfg,
        split: ds.split,
        sequences: entries,
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(out.join(INDEX_FILE), text + "\n").map_err(runtime_err)?;
    println!(
        "wrote {} sequences ({} frames) to {}",
        index.sequences.len(),
        index.sequences.iter().map(|s| s.frames).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn load_samples(
    data: &Path,
    index: &DatasetIndex,
    ids: &[u32],
    ctx: &LiftContext,
    variant: Variant,
) -> Result<Vec<LiftSample>, Failure> {
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for entry in index.sequences.iter().filter(|e| ids.contains(&e.subject)) {
        let (_, gt) = read_sequence_3d(open(&data.join(gt_file(&entry.name)))?)
            .with_context(|| entry.name.clone())
            .map_err(config_err)?;
        let (_, det) = read_sequence_2d(open(&data.join(det_file(&entry.name)))?)
            .with_context(|| entry.name.clone())
            .map_err(config_err)?;
        if gt.len() != det.len() {
            return Err(config_err(anyhow!(
                "{}: {} ground-truth frames but {} detections",
                entry.name,
                gt.len(),
                det.len()
            )));
        }
        for (d, g) in det.iter().zip(&gt) {
            match ctx.sample(variant, d, g, entry.subject) {
                Ok(s) => out.push(s),
                Err(LifterError::AllDepthDead) => skipped += 1,
                Err(e) => return Err(runtime_err(e)),
            }
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} frames with no live depth");
    }
    Ok(out)
}

fn cmd_train(
    cli: &Cli,
    data: &Path,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    variant: Variant,
    out: &Path,
) -> Outcome {
    let mut cfg: TrainConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = batch {
        cfg.batch_size = v;
    }
    if let Some(v) = lr {
        cfg.lr_init = v;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(config_err)?;
    let index: DatasetIndex = read_json(&data.join(INDEX_FILE))?;
    let rig = CameraRig::load(data.join(CALIBRATION_FILE)).map_err(config_err)?;
    let ctx = LiftContext::new(rig);
    let train_set = load_samples(data, &index, &index.split.train, &ctx, variant)?;
    let val_set = load_samples(data, &index, &index.split.val, &ctx, variant)?;
    log::info!("{} training and {} validation samples", train_set.len(), val_set.len());
    let outcome = train(&train_set, &val_set, variant, &cfg).map_err(|e| match e {
        LifterError::InvalidConfig(_) | LifterError::OverlappingSplits(_) | LifterError::EmptyDataset => config_err(e),
        other => runtime_err(other),
    })?;
    for e in &outcome.log {
        log::info!(
            "epoch {:>3}  loss {:.6}  val MPJPE {:.2} mm  lr {:.2e}",
            e.epoch,
            e.train_loss,
            e.val_mpjpe_mm,
            e.lr_end
        );
    }
    outcome.model.save(out).map_err(runtime_err)?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "{} model saved to {}: best epoch {} with validation MPJPE {:.2} mm",
        variant,
        out.display(),
        outcome.best_epoch,
        best.val_mpjpe_mm
    );
    Ok(())
}

fn cmd_eval(
    pred: &[PathBuf],
    gt: &[PathBuf],
    space: Space,
    threshold: Option<f64>,
    json: Option<&Path>,
    joint_table: Option<&Path>,
) -> Outcome {
    if pred.len() != gt.len() {
        return Err(config_err(anyhow!(
            "{} --pred files but {} --gt files",
            pred.len(),
            gt.len()
        )));
    }
    let topo = Topology::walker17();
    let report = match space {
        Space::ThreeD => {
            let (mut p_all, mut g_all) = (Vec::new(), Vec::new());
            for (p, g) in pred.iter().zip(gt) {
                let (_, p) = read_sequence_3d(open(p)?).map_err(config_err)?;
                let (_, g) = read_sequence_3d(open(g)?).map_err(config_err)?;
                p_all.extend(p);
                g_all.extend(g);
            }
            MetricsReport::evaluate_3d(&p_all, &g_all, &topo, threshold.unwrap_or(DEFAULT_PCK_3D_MM))
        }
        Space::TwoD => {
            let (mut p_all, mut g_all) = (Vec::new(), Vec::new());
            for (p, g) in pred.iter().zip(gt) {
                let (_, p) = read_sequence_2d(open(p)?).map_err(config_err)?;
                let (_, g) = read_sequence_2d(open(g)?).map_err(config_err)?;
                p_all.extend(p);
                g_all.extend(g);
            }
            MetricsReport::evaluate_2d(&p_all, &g_all, &topo, threshold.unwrap_or(DEFAULT_PCK_2D_PX))
        }
    }
    .map_err(config_err)?;
    print!("{}", report.to_text());
    if let Some(path) = json {
        fs::write(path, report.to_json() + "\n").map_err(runtime_err)?;
    }
    if let Some(path) = joint_table {
        fs::write(path, report.joint_table()).map_err(runtime_err)?;
    }
    Ok(())
}

fn cmd_filter(
    cli: &Cli,
    input: &Path,
    out: Option<&Path>,
    fc_min: Option<f64>,
    beta: Option<f64>,
    d_cutoff: Option<f64>,
) -> Outcome {
    let mut cfg: OneEuroConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => OneEuroConfig::default(),
    };
    if let Some(v) = fc_min {
        cfg.fc_min = v;
    }
    if let Some(v) = beta {
        cfg.beta = v;
    }
    if let Some(v) = d_cutoff {
        cfg.d_cutoff = v;
    }
    cfg.validate().map_err(config_err)?;
    let (header, frames) = read_sequence_3d(open(input)?).map_err(config_err)?;
    let filtered = filter_sequence(&frames, &cfg).map_err(runtime_err)?;
    let mut w = output(out)?;
    write_sequence_3d(&mut w, &header, &filtered).map_err(runtime_err)?;
    w.flush().map_err(runtime_err)?;
    Ok(())
}

fn pipeline_config(cli: &Cli, args: &PipelineArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let model = args
                .model
                .clone()
                .ok_or_else(|| config_err(anyhow!("--model is required without --config")))?;
            PipelineConfig::new(model)
        }
    };
    if let Some(m) = &args.model {
        cfg.model = m.clone();
    }
    if let Some(r) = &args.rig {
        cfg.rig = Some(r.clone());
    }
    if let Some(v) = args.subject {
        cfg.source.subject = v;
    }
    if let Some(v) = args.speed {
        cfg.source.speed = v;
    }
    if let Some(v) = args.duration {
        cfg.source.duration = v;
    }
    if let Some(s) = cli.seed {
        cfg.source.seed = s;
    }
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    cli: &Cli,
    args: &PipelineArgs,
    detections: Option<&Path>,
    out: Option<&Path>,
    gt_out: Option<&Path>,
    threaded: bool,
    realtime: bool,
) -> Outcome {
    let mut cfg = pipeline_config(cli, args)?;
    if let Some(p) = detections {
        cfg.detector = DetectorSelection::ExternalStream { path: p.to_path_buf() };
    }
    if let Some(p) = out {
        cfg.output = Some(p.to_path_buf());
    }
    if threaded {
        cfg.execution.mode = ExecutionMode::Threaded;
    }
    if !realtime {
        // Offline: nothing is gained by dropping frames.
        cfg.execution.drop_policy = DropPolicy::Block;
    }
    cfg.validate()?;
    let rig = cfg.load_rig()?;
    let model = cfg.load_model()?;
    let stream = match cfg.detector {
        DetectorSelection::Synthetic => Some(SyntheticStream::generate(&cfg.source, &rig)?),
        DetectorSelection::ExternalStream { .. } => None,
    };
    if let (Some(path), Some(s)) = (gt_out, &stream) {
        let header = SequenceHeader::new(SequenceSpace::ThreeD).with_meta("subject", cfg.source.subject);
        write_sequence_3d(create(path)?, &header, &s.gt).map_err(runtime_err)?;
    } else if gt_out.is_some() {
        log::warn!("--gt-out needs the synthetic detector; ignored");
    }
    let detector = cfg.detector(stream.as_ref())?;
    let pipeline = cfg.pipeline(rig, model, detector);

    let mut sink = output(cfg.output.as_deref())?;
    writeln!(sink, "{}", SequenceHeader::new(SequenceSpace::ThreeD).to_line()).map_err(runtime_err)?;
    let mut line = String::new();
    let write = |o: &walkpose_core::runtime::FrameOutput| {
        format_record_3d(&mut line, &o.skeleton);
        writeln!(sink, "{line}")
    };
    let report = match &stream {
        Some(s) => {
            let frames = s.frames(&rig, s.len(), cfg.source.render);
            if realtime {
                run_stream(pipeline, paced(frames, cfg.source.rate_hz), &cfg.execution, write)
            } else {
                run_stream(pipeline, frames, &cfg.execution, write)
            }
        }
        None => {
            let frames = (0..).map(|index| Frame { index, images: None });
            run_stream(pipeline, frames, &cfg.execution, write)
        }
    }?;
    if !report.dropped.is_empty() {
        log::warn!("{} frames dropped by the source queue", report.dropped.len());
    }
    log::info!(
        "{} frames out, {} lost, {} dropped, {} budget overruns",
        report.outputs.len(),
        report.errors.len(),
        report.dropped.len(),
        report.timeouts
    );
    Ok(())
}

fn cmd_bench(cli: &Cli, args: &PipelineArgs, frames: Option<usize>, no_render: bool, json: Option<&Path>) -> Outcome {
    let mut cfg = pipeline_config(cli, args)?;
    if let Some(n) = frames {
        cfg.bench.frames = n;
    }
    if no_render {
        cfg.source.render = false;
    }
    cfg.detector = DetectorSelection::Synthetic;
    cfg.validate()?;
    let rig = cfg.load_rig()?;
    let model = cfg.load_model()?;
    let stream = SyntheticStream::generate(&cfg.source, &rig)?;
    let detector = cfg.detector(Some(&stream))?;
    let pipeline = cfg.pipeline(rig, model, detector);
    let total = cfg.bench.frames + cfg.bench.warmup;
    let report = bench(
        pipeline,
        stream.frames(&rig, total, cfg.source.render),
        cfg.bench.frames,
        cfg.bench.warmup,
    )?;
    print!("{}", report.to_text());
    if let Some(path) = json {
        fs::write(path, report.to_json() + "\n").map_err(runtime_err)?;
    }
    if !report.within_budget {
        return Err(runtime_err(anyhow!(
            "p95 frame latency exceeds the {:.1} ms budget",
            report.budget_ms
        )));
    }
    Ok(())
}

fn cmd_calib_check(rig: Option<&Path>, write_default: Option<&Path>) -> Outcome {
    if let Some(path) = write_default {
        default_rig().save(path).map_err(runtime_err)?;
        println!("wrote the built-in calibration to {}", path.display());
        return Ok(());
    }
    let path = rig.ok_or_else(|| config_err(anyhow!("give a calibration file or --write-default")))?;
    let rig = CameraRig::load(path).map_err(|e| match e {
        CalibrationError::Io(_) => config_err(anyhow!(e).context(format!("cannot read {}", path.display()))),
        other => config_err(other),
    })?;
    let t = &rig.gait_to_posture;
    println!("{}: valid", path.display());
    for (name, c) in [("posture", &rig.posture), ("gait", &rig.gait)] {
        println!(
            "  {name:<8} {}x{}  fx {:.2}  fy {:.2}  cx {:.2}  cy {:.2}  depth {}..{} m",
            c.width, c.height, c.fx, c.fy, c.cx, c.cy, c.depth_min, c.depth_max
        );
    }
    let orth = (t.rotation().transpose() * t.rotation() - walkpose_core::geometry::Mat3::identity())
        .abs()
        .max();
    println!(
        "  gait->posture  baseline {:.4} m  scale {}  max |RᵀR − I| {orth:.1e}  det {:.6}",
        t.translation().norm(),
        t.scale(),
        t.rotation().determinant()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Gen {
            subjects,
            speeds,
            duration,
            rate,
            noise_preset,
            out,
        } => cmd_gen(
            cli,
            *subjects,
            speeds.clone(),
            *duration,
            *rate,
            noise_preset.as_deref(),
            out,
        ),
        Command::Train {
            data,
            epochs,
            batch,
            lr,
            variant,
            out,
        } => cmd_train(cli, data, *epochs, *batch, *lr, *variant, out),
        Command::Eval {
            pred,
            gt,
            space,
            pck_threshold,
            json,
            joint_table,
        } => cmd_eval(
            pred,
            gt,
            *space,
            *pck_threshold,
            json.as_deref(),
            joint_table.as_deref(),
        ),
        Command::Filter {
            input,
            output,
            fc_min,
            beta,
            d_cutoff,
        } => cmd_filter(cli, input, output.as_deref(), *fc_min, *beta, *d_cutoff),
        Command::Run {
            pipeline,
            detections,
            out,
            gt_out,
            threaded,
            realtime,
        } => cmd_run(
            cli,
            pipeline,
            detections.as_deref(),
            out.as_deref(),
            gt_out.as_deref(),
            *threaded,
            *realtime,
        ),
        Command::Bench {
            pipeline,
            frames,
            no_render,
            json,
        } => cmd_bench(cli, pipeline, *frames, *no_render, json.as_deref()),
        Command::CalibCheck { rig, write_default } => cmd_calib_check(rig.as_deref(), write_default.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            if let Some(e) = error.downcast_ref::<io::Error>() {
                if e.kind() == io::ErrorKind::BrokenPipe {
                    return ExitCode::SUCCESS;
                }
            }
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
