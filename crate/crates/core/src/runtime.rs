//! Streaming pipeline: preprocess → detect → lift → filter, with per-stage
//! timing, a pluggable detector and a latency bench.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{
    filter_skeleton_2d_stream, filter_skeleton_stream, FilterError, OneEuroConfig, OneEuroState, OneEuroState2D,
};
use crate::geometry::{CalibrationError, CameraId, CameraRig, Vec3};
use crate::lifter::{LiftContext, LifterError, LifterModel, RootSource, Variant};
use crate::metrics::{latency_stats, LatencyStats};
use crate::preprocess::{preprocess, FramePair, ModelInput, PreprocessError, MODEL_HEIGHT, MODEL_WIDTH};
use crate::skeleton::{parse_record_2d, SequenceError, SequenceHeader, SequenceSpace, Skeleton2D, Skeleton3D};
use crate::synthgait::{
    default_rig, generate_sequence, render_frame_pair, render_observations, synthetic_detector, FrameObservation,
    GaitParams, NoiseModel, Subject, SynthError,
};

/// Per-frame budget, ms (a 19 Hz camera).
pub const FRAME_BUDGET_MS: f64 = 53.0;
pub const WARMUP_FRAMES: usize = 10;
pub const MIN_BENCH_FRAMES: usize = 100;
pub const STAGES: [&str; 5] = ["preprocess", "detect", "lift", "filter", "total"];

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("config error: {0}")]
    Config(String),
    #[error("detector failed on frame {frame}: {reason}")]
    DetectorFailure { frame: usize, reason: String },
    #[error("stage {stage} took {elapsed_ms:.2} ms on frame {frame}, over its {budget_ms:.1} ms budget")]
    StageTimeout {
        frame: usize,
        stage: &'static str,
        elapsed_ms: f64,
        budget_ms: f64,
    },
    #[error("preprocess failed on frame {frame}: {source}")]
    Preprocess { frame: usize, source: PreprocessError },
    #[error("lifting failed on frame {frame}: {source}")]
    Lift { frame: usize, source: LifterError },
    #[error("filter failed on frame {frame}: {source}")]
    Filter { frame: usize, source: FilterError },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Model(#[from] LifterError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl RuntimeError {
    /// Errors that end a run, as opposed to losing one frame.
    pub fn is_fatal(&self) -> bool {
        !matches!(
            self,
            RuntimeError::Preprocess { .. } | RuntimeError::Lift { .. } | RuntimeError::Filter { .. }
        )
    }

    pub fn frame(&self) -> Option<usize> {
        match self {
            RuntimeError::DetectorFailure { frame, .. }
            | RuntimeError::StageTimeout { frame, .. }
            | RuntimeError::Preprocess { frame, .. }
            | RuntimeError::Lift { frame, .. }
            | RuntimeError::Filter { frame, .. } => Some(*frame),
            _ => None,
        }
    }
}

/// A 2D keypoint detector. Takes the preprocessed model input (absent when
/// the source has no images) and returns a model-resolution skeleton, or
/// `None` once its stream is exhausted.
pub trait Detector: Send {
    fn detect(&mut self, frame: usize, input: Option<&ModelInput>) -> Result<Option<Skeleton2D>, String>;

    /// Declared per-call budget, ms.
    fn budget_ms(&self) -> f64 {
        FRAME_BUDGET_MS
    }
}

/// Replays precomputed detections, cycling with a time offset so that
/// timestamps keep increasing past the end.
#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    detections: Vec<Skeleton2D>,
    period: f64,
}

impl SyntheticDetector {
    pub fn new(detections: Vec<Skeleton2D>, rate_hz: f64) -> Self {
        let period = detections.len() as f64 / rate_hz;
        Self { detections, period }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

impl Detector for SyntheticDetector {
    fn detect(&mut self, frame: usize, _input: Option<&ModelInput>) -> Result<Option<Skeleton2D>, String> {
        if self.detections.is_empty() {
            return Err("no detections to replay".into());
        }
        let n = self.detections.len();
        let mut s = self.detections[frame % n];
        s.timestamp += (frame / n) as f64 * self.period;
        Ok(Some(s))
    }
}

/// Reads 2D skeleton records in the sequence wire format from any reader
/// (a file, a pipe, a socket). Record `i` answers frame `i`; records for
/// frames that never reach the detector are skipped.
pub struct ExternalStreamDetector<R> {
    reader: R,
    next: usize,
    line: String,
    lineno: usize,
}

impl<R: BufRead + Send> ExternalStreamDetector<R> {
    pub fn new(mut reader: R) -> Result<Self, RuntimeError> {
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let header = SequenceHeader::parse(first.trim_end())?;
        match header.space {
            SequenceSpace::TwoD { width, height }
                if (width as usize, height as usize) == (MODEL_WIDTH, MODEL_HEIGHT) => {}
            other => {
                return Err(RuntimeError::Config(format!(
                    "external stream must be 2d at {MODEL_WIDTH}x{MODEL_HEIGHT}, got {other:?}"
                )))
            }
        }
        Ok(Self {
            reader,
            next: 0,
            line: String::new(),
            lineno: 1,
        })
    }

    fn read_record(&mut self) -> Result<Option<Skeleton2D>, String> {
        loop {
            self.line.clear();
            self.lineno += 1;
            match self.reader.read_line(&mut self.line) {
                Ok(0) => return Ok(None),
                Ok(_) if self.line.trim().is_empty() => continue,
                Ok(_) => {
                    return parse_record_2d(self.line.trim_end(), self.lineno)
                        .map(Some)
                        .map_err(|e| e.to_string())
                }
                Err(e) => return Err(e.to_string()),
            }
        }
    }
}

impl<R: BufRead + Send> Detector for ExternalStreamDetector<R> {
    fn detect(&mut self, frame: usize, _input: Option<&ModelInput>) -> Result<Option<Skeleton2D>, String> {
        if frame < self.next {
            return Err(format!("frame {frame} requested after frame {}", self.next - 1));
        }
        while self.next < frame {
            if self.read_record()?.is_none() {
                return Ok(None);
            }
            self.next += 1;
        }
        self.next += 1;
        self.read_record()
    }
}

/// One unit of input. `images` is absent for detector-only streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub images: Option<FramePair>,
}

/// Wall time per stage, ms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess: f64,
    pub detect: f64,
    pub lift: f64,
    pub filter: f64,
    pub total: f64,
}

impl StageTimings {
    pub fn get(&self, stage: &str) -> Option<f64> {
        match stage {
            "preprocess" => Some(self.preprocess),
            "detect" => Some(self.detect),
            "lift" => Some(self.lift),
            "filter" => Some(self.filter),
            "total" => Some(self.total),
            _ => None,
        }
    }

    pub fn non_detector(&self) -> f64 {
        self.preprocess + self.lift + self.filter
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub index: usize,
    /// Filtered, absolute, posture-camera frame.
    pub skeleton: Skeleton3D,
    pub root_source: RootSource,
    pub timings: StageTimings,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub struct PreprocessStage {
    pub depth_max: f64,
}

impl PreprocessStage {
    pub fn run(&self, frame: &Frame) -> Result<Option<ModelInput>, RuntimeError> {
        frame
            .images
            .as_ref()
            .map(|fp| preprocess(fp, MODEL_WIDTH, MODEL_HEIGHT, self.depth_max))
            .transpose()
            .map_err(|source| RuntimeError::Preprocess {
                frame: frame.index,
                source,
            })
    }
}

pub struct DetectStage {
    pub detector: Box<dyn Detector>,
    /// Optional smoothing of the detected pixels before lifting.
    pub smoothing: Option<(OneEuroConfig, OneEuroState2D)>,
}

impl DetectStage {
    pub fn new(detector: Box<dyn Detector>) -> Self {
        Self {
            detector,
            smoothing: None,
        }
    }

    pub fn run(&mut self, frame: usize, input: Option<&ModelInput>) -> Result<Option<Skeleton2D>, RuntimeError> {
        let skel = self
            .detector
            .detect(frame, input)
            .map_err(|reason| RuntimeError::DetectorFailure { frame, reason })?;
        match (skel, &mut self.smoothing) {
            (Some(s), Some((cfg, state))) => filter_skeleton_2d_stream(state, &s, cfg)
                .map(Some)
                .map_err(|source| RuntimeError::Filter { frame, source }),
            (skel, _) => Ok(skel),
        }
    }
}

pub struct LiftStage {
    pub ctx: LiftContext,
    pub model: LifterModel,
    previous_root: Option<Vec3>,
}

impl LiftStage {
    pub fn new(ctx: LiftContext, model: LifterModel) -> Self {
        Self {
            ctx,
            model,
            previous_root: None,
        }
    }

    /// Replaces each keypoint's depth with the native depth image reading
    /// under it (0 outside the image).
    pub fn lookup_depth(&self, skel: &mut Skeleton2D, fp: &FramePair) -> Result<(), LifterError> {
        let native = self.ctx.to_native(skel)?;
        for (k, (cam, px)) in native.iter().enumerate() {
            let img = match cam {
                CameraId::Posture => &fp.posture_depth,
                CameraId::Gait => &fp.gait_depth,
            };
            let (u, v) = (px.x.round(), px.y.round());
            skel.depth_at_kp[k] = if u >= 0.0 && v >= 0.0 && (u as usize) < img.width && (v as usize) < img.height {
                img.data[v as usize * img.width + u as usize] as f64 / 1000.0
            } else {
                0.0
            };
        }
        Ok(())
    }

    pub fn run(
        &mut self,
        frame: usize,
        mut skel: Skeleton2D,
        images: Option<&FramePair>,
    ) -> Result<(Skeleton3D, RootSource), RuntimeError> {
        let wrap = |source| RuntimeError::Lift { frame, source };
        if let Some(fp) = images {
            self.lookup_depth(&mut skel, fp).map_err(wrap)?;
        }
        let (abs, root, source) = self
            .ctx
            .predict_absolute(&self.model, &skel, self.previous_root)
            .map_err(wrap)?;
        if source != RootSource::Unknown {
            self.previous_root = Some(root);
        }
        Ok((abs, source))
    }
}

pub struct FilterStage {
    pub cfg: OneEuroConfig,
    state: OneEuroState,
}

impl FilterStage {
    pub fn new(cfg: OneEuroConfig) -> Self {
        Self {
            cfg,
            state: OneEuroState::new(),
        }
    }

    pub fn run(&mut self, frame: usize, skel: &Skeleton3D) -> Result<Skeleton3D, RuntimeError> {
        filter_skeleton_stream(&mut self.state, skel, &self.cfg)
            .map_err(|source| RuntimeError::Filter { frame, source })
    }
}

/// All four stages; each owns its state.
pub struct Pipeline {
    pub preprocess: PreprocessStage,
    pub detect: DetectStage,
    pub lift: LiftStage,
    pub filter: FilterStage,
    pub budget_ms: f64,
}

/// Outcome of pushing one frame through the pipeline.
#[derive(Debug)]
pub enum Step {
    Output(FrameOutput),
    /// The frame was lost; the run continues.
    Skipped(RuntimeError),
    /// The detector has no more data.
    End,
}

impl Pipeline {
    pub fn new(ctx: LiftContext, model: LifterModel, detector: Box<dyn Detector>, filter: OneEuroConfig) -> Self {
        Self {
            preprocess: PreprocessStage {
                depth_max: ctx.depth_max,
            },
            detect: DetectStage::new(detector),
            lift: LiftStage::new(ctx, model),
            filter: FilterStage::new(filter),
            budget_ms: FRAME_BUDGET_MS,
        }
    }

    /// Runs one frame inline. Fatal errors come back as `Err`.
    pub fn process(&mut self, frame: Frame) -> Result<Step, RuntimeError> {
        let start = Instant::now();
        let mut t = StageTimings::default();
        let input = match self.preprocess.run(&frame) {
            Ok(i) => i,
            Err(e) => return Ok(Step::Skipped(e)),
        };
        t.preprocess = ms_since(start);
        let t0 = Instant::now();
        let Some(skel) = self.detect.run(frame.index, input.as_ref())? else {
            return Ok(Step::End);
        };
        t.detect = ms_since(t0);
        let t0 = Instant::now();
        let lifted = self.lift.run(frame.index, skel, frame.images.as_ref());
        t.lift = ms_since(t0);
        let (abs, root_source) = match lifted {
            Ok(v) => v,
            Err(e) => return Ok(Step::Skipped(e)),
        };
        let t0 = Instant::now();
        let filtered = match self.filter.run(frame.index, &abs) {
            Ok(s) => s,
            Err(e) => return Ok(Step::Skipped(e)),
        };
        t.filter = ms_since(t0);
        t.total = ms_since(start);
        let out = FrameOutput {
            index: frame.index,
            skeleton: filtered,
            root_source,
            timings: t,
        };
        check_budgets(&out, self.detect.detector.budget_ms(), self.budget_ms);
        Ok(Step::Output(out))
    }
}

/// Logs a `StageTimeout` for every budget overrun; never fails.
fn check_budgets(out: &FrameOutput, detector_budget: f64, frame_budget: f64) -> usize {
    let mut n = 0;
    for (stage, elapsed_ms, budget_ms) in [
        ("detect", out.timings.detect, detector_budget),
        ("total", out.timings.total, frame_budget),
    ] {
        if elapsed_ms > budget_ms {
            log::warn!(
                "{}",
                RuntimeError::StageTimeout {
                    frame: out.index,
                    stage,
                    elapsed_ms,
                    budget_ms,
                }
            );
            n += 1;
        }
    }
    n
}

/// What a full queue does with a new item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropPolicy {
    /// The producer waits.
    Block,
    /// The oldest queued item is evicted and counted.
    #[default]
    KeepLatest,
}

struct QueueState<T> {
    items: VecDeque<T>,
    closed: bool,
    dropped: u64,
}

/// Fixed-capacity MPMC queue.
pub struct BoundedQueue<T> {
    state: Mutex<QueueState<T>>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
    policy: DropPolicy,
}

/// Push into a closed queue; the item is handed back.
#[derive(Debug, PartialEq, Eq)]
pub struct Closed<T>(pub T);

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize, policy: DropPolicy) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        Self {
            state: Mutex::new(QueueState {
                items: VecDeque::with_capacity(capacity),
                closed: false,
                dropped: 0,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            capacity,
            policy,
        }
    }

    /// Enqueues `item`. Under `KeepLatest` a full queue evicts and returns
    /// its oldest item.
    pub fn push(&self, item: T) -> Result<Option<T>, Closed<T>> {
        let mut st = self.state.lock().expect("queue lock");
        let mut evicted = None;
        loop {
            if st.closed {
                return Err(Closed(item));
            }
            if st.items.len() < self.capacity {
                break;
            }
            match self.policy {
                DropPolicy::Block => st = self.not_full.wait(st).expect("queue lock"),
                DropPolicy::KeepLatest => {
                    evicted = st.items.pop_front();
                    st.dropped += 1;
                    break;
                }
            }
        }
        st.items.push_back(item);
        drop(st);
        self.not_empty.notify_one();
        Ok(evicted)
    }

    /// Next item, or `None` once the queue is closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut st = self.state.lock().expect("queue lock");
        loop {
            if let Some(item) = st.items.pop_front() {
                drop(st);
                self.not_full.notify_one();
                return Some(item);
            }
            if st.closed {
                return None;
            }
            st = self.not_empty.wait(st).expect("queue lock");
        }
    }

    /// Rejects further pushes and wakes every waiter. Queued items can
    /// still be popped.
    pub fn close(&self) {
        self.state.lock().expect("queue lock").closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("queue lock").items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().expect("queue lock").dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecutionMode {
    /// Every stage on the calling thread.
    #[default]
    Inline,
    /// One worker thread per stage, joined by bounded queues.
    Threaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionConfig {
    pub mode: ExecutionMode,
    pub queue_capacity: usize,
    /// Applies to the source queue; inner queues always block.
    pub drop_policy: DropPolicy,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            mode: ExecutionMode::Inline,
            queue_capacity: 4,
            drop_policy: DropPolicy::KeepLatest,
        }
    }
}

#[derive(Debug, Default)]
pub struct RunReport {
    pub outputs: Vec<FrameOutput>,
    /// Frames lost to a non-fatal error.
    pub errors: Vec<RuntimeError>,
    /// Frames evicted from the source queue.
    pub dropped: Vec<usize>,
    pub timeouts: usize,
}

impl RunReport {
    /// Every input index below `n`, each accounted for exactly once.
    pub fn accounts_for(&self, n: usize) -> bool {
        let mut seen = vec![0u8; n];
        let errs = self.errors.iter().filter_map(RuntimeError::frame);
        for i in self
            .outputs
            .iter()
            .map(|o| o.index)
            .chain(errs)
            .chain(self.dropped.iter().copied())
        {
            match seen.get_mut(i) {
                Some(c) => *c += 1,
                None => return false,
            }
        }
        seen.iter().all(|&c| c == 1)
    }
}

/// Runs `frames` through `pipeline`, handing each output to `sink` in
/// input order.
pub fn run_stream(
    pipeline: Pipeline,
    frames: impl Iterator<Item = Frame> + Send,
    exec: &ExecutionConfig,
    sink: impl FnMut(&FrameOutput) -> io::Result<()>,
) -> Result<RunReport, RuntimeError> {
    match exec.mode {
        ExecutionMode::Inline => run_inline(pipeline, frames, sink),
        ExecutionMode::Threaded => run_threaded(pipeline, frames, exec, sink),
    }
}

fn run_inline(
    mut pipeline: Pipeline,
    frames: impl Iterator<Item = Frame>,
    mut sink: impl FnMut(&FrameOutput) -> io::Result<()>,
) -> Result<RunReport, RuntimeError> {
    let mut report = RunReport::default();
    let det_budget = pipeline.detect.detector.budget_ms();
    for frame in frames {
        match pipeline.process(frame)? {
            Step::Output(out) => {
                sink(&out)?;
                report.outputs.push(out);
            }
            Step::Skipped(e) => {
                log::warn!("{e}");
                report.errors.push(e);
            }
            Step::End => break,
        }
    }
    report.timeouts = report
        .outputs
        .iter()
        .map(|o| (o.timings.detect > det_budget) as usize + (o.timings.total > pipeline.budget_ms) as usize)
        .sum();
    Ok(report)
}

struct Packet {
    index: usize,
    started: Instant,
    timings: StageTimings,
    images: Option<FramePair>,
    input: Option<ModelInput>,
    skel2d: Option<Skeleton2D>,
    lifted: Option<(Skeleton3D, RootSource)>,
}

type Msg = Result<Packet, RuntimeError>;

fn run_threaded(
    pipeline: Pipeline,
    frames: impl Iterator<Item = Frame> + Send,
    exec: &ExecutionConfig,
    mut sink: impl FnMut(&FrameOutput) -> io::Result<()>,
) -> Result<RunReport, RuntimeError> {
    let Pipeline {
        preprocess: pre,
        detect: mut det,
        mut lift,
        filter: mut filt,
        budget_ms,
    } = pipeline;
    let det_budget = det.detector.budget_ms();
    let cap = exec.queue_capacity.max(1);
    let q_src: BoundedQueue<Frame> = BoundedQueue::new(cap, exec.drop_policy);
    let q_pre: BoundedQueue<Msg> = BoundedQueue::new(cap, DropPolicy::Block);
    let q_det: BoundedQueue<Msg> = BoundedQueue::new(cap, DropPolicy::Block);
    let q_lift: BoundedQueue<Msg> = BoundedQueue::new(cap, DropPolicy::Block);
    let mut report = RunReport::default();
    let mut fatal = None;

    thread::scope(|s| {
        let source = s.spawn(|| {
            let mut dropped = Vec::new();
            for f in frames {
                match q_src.push(f) {
                    Ok(Some(evicted)) => dropped.push(evicted.index),
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
            q_src.close();
            dropped
        });
        s.spawn(|| {
            while let Some(frame) = q_src.pop() {
                let started = Instant::now();
                let msg = pre.run(&frame).map(|input| {
                    let timings = StageTimings {
                        preprocess: ms_since(started),
                        ..StageTimings::default()
                    };
                    Packet {
                        index: frame.index,
                        started,
                        timings,
                        images: frame.images,
                        input,
                        skel2d: None,
                        lifted: None,
                    }
                });
                if q_pre.push(msg).is_err() {
                    break;
                }
            }
            q_pre.close();
        });
        s.spawn(|| {
            while let Some(msg) = q_pre.pop() {
                let msg = match msg {
                    Ok(mut p) => {
                        let t0 = Instant::now();
                        match det.run(p.index, p.input.as_ref()) {
                            Ok(Some(skel)) => {
                                p.timings.detect = ms_since(t0);
                                p.input = None;
                                p.skel2d = Some(skel);
                                Ok(p)
                            }
                            Ok(None) => break,
                            Err(e) => {
                                let _ = q_det.push(Err(e));
                                break;
                            }
                        }
                    }
                    Err(e) => Err(e),
                };
                if q_det.push(msg).is_err() {
                    break;
                }
            }
            q_src.close();
            q_pre.close();
            q_det.close();
        });
        s.spawn(|| {
            while let Some(msg) = q_det.pop() {
                let msg = msg.and_then(|mut p| {
                    let t0 = Instant::now();
                    let skel = p.skel2d.take().expect("detected");
                    let lifted = lift.run(p.index, skel, p.images.as_ref());
                    p.timings.lift = ms_since(t0);
                    p.images = None;
                    p.lifted = Some(lifted?);
                    Ok(p)
                });
                if q_lift.push(msg).is_err() {
                    break;
                }
            }
            q_lift.close();
        });
        while let Some(msg) = q_lift.pop() {
            let result = msg.and_then(|mut p| {
                let t0 = Instant::now();
                let (abs, root_source) = p.lifted.take().expect("lifted");
                let skeleton = filt.run(p.index, &abs)?;
                p.timings.filter = ms_since(t0);
                p.timings.total = ms_since(p.started);
                Ok(FrameOutput {
                    index: p.index,
                    skeleton,
                    root_source,
                    timings: p.timings,
                })
            });
            match result {
                Ok(out) => {
                    report.timeouts += check_budgets(&out, det_budget, budget_ms);
                    if let Err(e) = sink(&out) {
                        fatal = Some(e.into());
                        break;
                    }
                    report.outputs.push(out);
                }
                Err(e) if e.is_fatal() => {
                    fatal = Some(e);
                    break;
                }
                Err(e) => {
                    log::warn!("{e}");
                    report.errors.push(e);
                }
            }
        }
        // Unblock every producer if the consumer stopped early.
        for q in [&q_pre, &q_det, &q_lift] {
            q.close();
        }
        q_src.close();
        report.dropped = source.join().expect("source thread");
    });
    match fatal {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Latency of one stage over the measured frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: &'static str,
    pub stats: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub warmup: usize,
    pub budget_ms: f64,
    pub rows: Vec<StageRow>,
    /// Mean of preprocess + lift + filter, ms.
    pub non_detector_mean_ms: f64,
    pub within_budget: bool,
    pub timeouts: usize,
}

impl BenchReport {
    pub fn row(&self, stage: &str) -> Option<&LatencyStats> {
        self.rows.iter().find(|r| r.stage == stage).map(|r| &r.stats)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# {} frames after {} warm-up, budget {:.1} ms\n# stage         mean      std       p50       p95       max   (ms)\n",
            self.frames, self.warmup, self.budget_ms
        );
        for r in &self.rows {
            let st = &r.stats;
            let _ = writeln!(
                s,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                r.stage, st.mean, st.std, st.p50, st.p95, st.max
            );
        }
        let _ = writeln!(
            s,
            "# non-detector mean {:.4} ms; p95 total {} the budget; {} timeouts",
            self.non_detector_mean_ms,
            if self.within_budget { "within" } else { "OVER" },
            self.timeouts
        );
        s
    }
}

/// Runs `n_frames` frames inline and reports latency per stage, excluding
/// the first `warmup` frames.
pub fn bench(
    mut pipeline: Pipeline,
    frames: impl Iterator<Item = Frame>,
    n_frames: usize,
    warmup: usize,
) -> Result<BenchReport, RuntimeError> {
    if n_frames < MIN_BENCH_FRAMES {
        return Err(RuntimeError::Config(format!(
            "bench needs at least {MIN_BENCH_FRAMES} frames, got {n_frames}"
        )));
    }
    let mut timings = Vec::with_capacity(n_frames);
    for frame in frames.take(warmup + n_frames) {
        match pipeline.process(frame)? {
            Step::Output(out) => timings.push(out.timings),
            Step::Skipped(e) => log::warn!("{e}"),
            Step::End => break,
        }
    }
    if timings.len() <= warmup {
        return Err(RuntimeError::Config(
            "source ran out before the warm-up finished".into(),
        ));
    }
    let measured = &timings[warmup..];
    let mut rows = Vec::with_capacity(STAGES.len());
    for stage in STAGES {
        let samples: Vec<f64> = measured.iter().map(|t| t.get(stage).expect("known stage")).collect();
        let stats = latency_stats(&samples).expect("non-empty");
        rows.push(StageRow { stage, stats });
    }
    let non_detector_mean_ms = measured.iter().map(StageTimings::non_detector).sum::<f64>() / measured.len() as f64;
    let det_budget = pipeline.detect.detector.budget_ms();
    let timeouts = measured
        .iter()
        .map(|t| (t.detect > det_budget) as usize + (t.total > pipeline.budget_ms) as usize)
        .sum();
    let total_p95 = rows.last().expect("total row").stats.p95;
    let within_budget = total_p95 < pipeline.budget_ms;
    if !within_budget {
        log::warn!(
            "p95 frame latency {total_p95:.2} ms exceeds the {:.1} ms budget",
            pipeline.budget_ms
        );
    }
    Ok(BenchReport {
        frames: measured.len(),
        warmup,
        budget_ms: pipeline.budget_ms,
        rows,
        non_detector_mean_ms,
        within_budget,
        timeouts,
    })
}

/// A rendered synthetic walk: ground truth, observations, detections.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub rate_hz: f64,
    pub gt: Vec<Skeleton3D>,
    pub observations: Vec<FrameObservation>,
    pub detections: Vec<Skeleton2D>,
}

impl SyntheticStream {
    pub fn generate(src: &SourceConfig, rig: &CameraRig) -> Result<Self, RuntimeError> {
        let noise = NoiseModel::preset(&src.noise)
            .ok_or_else(|| RuntimeError::Config(format!("unknown noise preset `{}`", src.noise)))?;
        let mut params = GaitParams::new(Subject::generate(src.subject, src.seed), src.speed, src.seed);
        params.duration = src.duration;
        params.rate_hz = src.rate_hz;
        params.noise = noise;
        let seq = generate_sequence(&params)?;
        let observations = render_observations(&seq, rig, &noise, src.seed ^ 0x5EED)?;
        let detections = synthetic_detector(&observations, rig, MODEL_WIDTH, MODEL_HEIGHT);
        Ok(Self {
            rate_hz: src.rate_hz,
            gt: seq.gt_3d,
            observations,
            detections,
        })
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn detector(&self) -> SyntheticDetector {
        SyntheticDetector::new(self.detections.clone(), self.rate_hz)
    }

    /// `n` frames, cycling through the sequence. Images are rendered lazily
    /// when `render` is set.
    pub fn frames<'a>(&'a self, rig: &'a CameraRig, n: usize, render: bool) -> impl Iterator<Item = Frame> + Send + 'a {
        (0..n).map(move |index| {
            let obs = &self.observations[index % self.observations.len()];
            let images = render.then(|| render_frame_pair(obs, rig));
            Frame { index, images }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DetectorSelection {
    #[default]
    Synthetic,
    /// Skeleton records from a file, or stdin for `-`.
    ExternalStream { path: PathBuf },
}

/// The synthetic walk fed through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub subject: u32,
    pub speed: f64,
    pub duration: f64,
    pub rate_hz: f64,
    pub noise: String,
    pub seed: u64,
    /// Render and preprocess images, taking depth from them.
    pub render: bool,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            subject: 100,
            speed: 0.5,
            duration: 10.0,
            rate_hz: 30.0,
            noise: "paper-like".into(),
            seed: 0,
            render: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub frames: usize,
    pub warmup: usize,
    pub budget_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            frames: 1000,
            warmup: WARMUP_FRAMES,
            budget_ms: FRAME_BUDGET_MS,
        }
    }
}

/// Everything `run` and `bench` need, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Calibration file; the built-in rig when absent.
    #[serde(default)]
    pub rig: Option<PathBuf>,
    pub model: PathBuf,
    /// Checked against the model file when given.
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default)]
    pub filter: OneEuroConfig,
    /// Also smooth the 2D detections before lifting.
    #[serde(default)]
    pub filter_2d: Option<OneEuroConfig>,
    #[serde(default)]
    pub detector: DetectorSelection,
    #[serde(default)]
    pub source: SourceConfig,
    /// Skeleton sequence output; stdout when absent.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub execution: ExecutionConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl PipelineConfig {
    pub fn new(model: impl Into<PathBuf>) -> Self {
        Self {
            rig: None,
            model: model.into(),
            variant: None,
            filter: OneEuroConfig::default(),
            filter_2d: None,
            detector: DetectorSelection::Synthetic,
            source: SourceConfig::default(),
            output: None,
            execution: ExecutionConfig::default(),
            bench: BenchConfig::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| RuntimeError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| RuntimeError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        let cfg = |m: String| RuntimeError::Config(m);
        let must_exist = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(cfg(format!("{what} {} does not exist", p.display())))
            }
        };
        must_exist(&self.model, "model file")?;
        if let Some(r) = &self.rig {
            must_exist(r, "calibration file")?;
        }
        if let DetectorSelection::ExternalStream { path } = &self.detector {
            if path.as_os_str() != "-" {
                must_exist(path, "detector stream")?;
            }
        }
        self.filter.validate().map_err(|e| cfg(e.to_string()))?;
        if let Some(f) = &self.filter_2d {
            f.validate().map_err(|e| cfg(format!("filter_2d: {e}")))?;
        }
        let s = &self.source;
        if !(s.rate_hz > 0.0 && s.duration > 0.0 && s.speed >= 0.0) {
            return Err(cfg(
                "source rate and duration must be positive, speed non-negative".into()
            ));
        }
        if NoiseModel::preset(&s.noise).is_none() {
            return Err(cfg(format!("unknown noise preset `{}`", s.noise)));
        }
        if self.execution.queue_capacity == 0 {
            return Err(cfg("queue capacity must be positive".into()));
        }
        if !(self.bench.budget_ms > 0.0) {
            return Err(cfg("budget must be positive".into()));
        }
        Ok(())
    }

    pub fn load_rig(&self) -> Result<CameraRig, RuntimeError> {
        match &self.rig {
            Some(p) => Ok(CameraRig::load(p)?),
            None => Ok(default_rig()),
        }
    }

    pub fn load_model(&self) -> Result<LifterModel, RuntimeError> {
        let model = LifterModel::load(&self.model)?;
        if let Some(v) = self.variant {
            if v != model.variant {
                return Err(RuntimeError::Config(format!(
                    "config asks for the {v} variant but {} holds {}",
                    self.model.display(),
                    model.variant
                )));
            }
        }
        Ok(model)
    }

    /// Detector for this config. The synthetic one replays `stream`.
    pub fn detector(&self, stream: Option<&SyntheticStream>) -> Result<Box<dyn Detector>, RuntimeError> {
        match &self.detector {
            DetectorSelection::Synthetic => {
                let s =
                    stream.ok_or_else(|| RuntimeError::Config("synthetic detector needs a synthetic source".into()))?;
                Ok(Box::new(s.detector()))
            }
            DetectorSelection::ExternalStream { path } if path.as_os_str() == "-" => {
                Ok(Box::new(ExternalStreamDetector::new(BufReader::new(io::stdin()))?))
            }
            DetectorSelection::ExternalStream { path } => Ok(Box::new(ExternalStreamDetector::new(BufReader::new(
                File::open(path)?,
            ))?)),
        }
    }

    pub fn pipeline(&self, rig: CameraRig, model: LifterModel, detector: Box<dyn Detector>) -> Pipeline {
        let mut p = Pipeline::new(LiftContext::new(rig), model, detector, self.filter);
        p.budget_ms = self.bench.budget_ms;
        p.detect.smoothing = self.filter_2d.map(|c| (c, OneEuroState2D::default()));
        p
    }
}

/// Blocks the source to a fixed frame rate.
pub fn paced<I: Iterator<Item = Frame>>(frames: I, rate_hz: f64) -> impl Iterator<Item = Frame> {
    let start = Instant::now();
    let dt = Duration::from_secs_f64(1.0 / rate_hz);
    frames.enumerate().map(move |(i, f)| {
        let due = start + dt * i as u32;
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        f
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifter::{train, TrainConfig};
    use crate::metrics::mpjpe;
    use crate::skeleton::{format_record_2d, Topology};
    use std::sync::Arc;

    fn untrained(variant: Variant) -> LifterModel {
        LifterModel::new(variant, 32, 1, 3)
    }

    fn stream(noise: &str, duration: f64) -> (CameraRig, SyntheticStream) {
        let rig = default_rig();
        let src = SourceConfig {
            noise: noise.into(),
            duration,
            ..SourceConfig::default()
        };
        let s = SyntheticStream::generate(&src, &rig).unwrap();
        (rig, s)
    }

    fn pipeline(rig: &CameraRig, s: &SyntheticStream, model: LifterModel) -> Pipeline {
        Pipeline::new(
            LiftContext::new(*rig),
            model,
            Box::new(s.detector()),
            OneEuroConfig::default(),
        )
    }

    fn collect(p: Pipeline, frames: impl Iterator<Item = Frame> + Send, exec: ExecutionConfig) -> RunReport {
        run_stream(p, frames, &exec, |_| Ok(())).unwrap()
    }

    #[test]
    fn queue_blocks_or_evicts() {
        let q = BoundedQueue::new(2, DropPolicy::KeepLatest);
        assert_eq!(q.push(1), Ok(None));
        assert_eq!(q.push(2), Ok(None));
        assert_eq!(q.push(3), Ok(Some(1)));
        assert_eq!(q.dropped(), 1);
        assert_eq!(q.len(), 2);
        q.close();
        assert_eq!(q.push(4), Err(Closed(4)));
        assert_eq!(q.pop(), Some(2));
        assert_eq!(q.pop(), Some(3));
        assert_eq!(q.pop(), None);

        let q = Arc::new(BoundedQueue::new(1, DropPolicy::Block));
        q.push(0).unwrap();
        let q2 = Arc::clone(&q);
        let producer = thread::spawn(move || {
            for i in 1..50 {
                q2.push(i).unwrap();
                assert!(q2.len() <= 1);
            }
            q2.close();
        });
        let got: Vec<i32> = std::iter::from_fn(|| q.pop()).collect();
        producer.join().unwrap();
        assert_eq!(got, (0..50).collect::<Vec<_>>());
        assert_eq!(q.dropped(), 0);
    }

    #[test]
    fn inline_and_threaded_agree() {
        let (rig, s) = stream("paper-like", 2.0);
        let model = untrained(Variant::Default);
        let n = s.len();
        let inline = collect(
            pipeline(&rig, &s, model.clone()),
            s.frames(&rig, n, true),
            ExecutionConfig::default(),
        );
        let exec = ExecutionConfig {
            mode: ExecutionMode::Threaded,
            queue_capacity: 2,
            drop_policy: DropPolicy::Block,
        };
        let threaded = collect(pipeline(&rig, &s, model), s.frames(&rig, n, true), exec);
        assert_eq!(inline.outputs.len(), n);
        assert!(threaded.dropped.is_empty());
        assert!(inline.accounts_for(n) && threaded.accounts_for(n));
        let strip = |r: &RunReport| {
            r.outputs
                .iter()
                .map(|o| (o.index, o.skeleton, o.root_source))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&inline), strip(&threaded));
    }

    #[test]
    fn keep_latest_counts_every_drop() {
        let (rig, s) = stream("clean", 2.0);
        let n = s.len();
        let exec = ExecutionConfig {
            mode: ExecutionMode::Threaded,
            queue_capacity: 1,
            drop_policy: DropPolicy::KeepLatest,
        };
        let report = collect(
            pipeline(&rig, &s, untrained(Variant::Default)),
            s.frames(&rig, n, true),
            exec,
        );
        assert!(report.accounts_for(n));
        assert!(report.outputs.windows(2).all(|w| w[0].index < w[1].index));
    }

    #[test]
    fn lost_frames_are_logged_not_silent() {
        let (rig, mut s) = stream("clean", 1.0);
        for d in s.detections.iter_mut().skip(3).step_by(5) {
            d.depth_at_kp = [0.0; 17];
        }
        let n = s.len();
        let model = untrained(Variant::ProjectionResidual);
        let report = collect(
            pipeline(&rig, &s, model),
            s.frames(&rig, n, false),
            ExecutionConfig::default(),
        );
        assert!(!report.errors.is_empty());
        assert!(report.errors.iter().all(|e| matches!(e, RuntimeError::Lift { .. })));
        assert!(report.accounts_for(n));
    }

    #[test]
    fn external_stream_matches_synthetic() {
        let (rig, s) = stream("paper-like", 1.0);
        let header = SequenceHeader::new(SequenceSpace::TwoD {
            width: MODEL_WIDTH as u32,
            height: MODEL_HEIGHT as u32,
        });
        let mut text = header.to_line() + "\n";
        let mut line = String::new();
        for d in &s.detections {
            format_record_2d(&mut line, d);
            text.push_str(&line);
            text.push('\n');
        }
        let mut ext = ExternalStreamDetector::new(io::Cursor::new(text.into_bytes())).unwrap();
        let mut syn = s.detector();
        for i in (0..s.len()).step_by(3) {
            let a = ext.detect(i, None).unwrap().unwrap();
            let b = syn.detect(i, None).unwrap().unwrap();
            assert!((a.timestamp - b.timestamp).abs() < 1e-8);
            for k in 0..17 {
                assert!((a.coords[k] - b.coords[k]).norm() < 1e-6);
            }
        }
        assert!(ext.detect(s.len() + 5, None).unwrap().is_none());

        let model = untrained(Variant::Default);
        let ext = ExternalStreamDetector::new(io::Cursor::new(header.to_line().into_bytes())).unwrap();
        let p = Pipeline::new(LiftContext::new(rig), model, Box::new(ext), OneEuroConfig::default());
        let frames = (0..).map(|index| Frame { index, images: None });
        let report = run_stream(p, frames, &ExecutionConfig::default(), |_| Ok(())).unwrap();
        assert!(report.outputs.is_empty());
    }

    #[test]
    fn synthetic_detector_keeps_time_increasing() {
        let (_, s) = stream("clean", 1.0);
        let mut d = s.detector();
        let n = s.len();
        let ts: Vec<f64> = (0..3 * n)
            .map(|i| d.detect(i, None).unwrap().unwrap().timestamp)
            .collect();
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn static_stream_converges() {
        let (rig, s) = stream("clean", 1.0);
        let frozen = SyntheticDetector::new(vec![s.detections[0]], 30.0);
        let p = Pipeline::new(
            LiftContext::new(rig),
            untrained(Variant::Default),
            Box::new(frozen),
            OneEuroConfig::default(),
        );
        let frames = (0..90).map(|index| Frame { index, images: None });
        let out = collect(p, frames, ExecutionConfig::default()).outputs;
        let last = &out[89].skeleton;
        let prev = &out[88].skeleton;
        for k in 0..17 {
            assert!((last.coords[k] - prev.coords[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn rendered_depth_lookup_recovers_observed_depth() {
        let (rig, s) = stream("clean", 1.0);
        let stage = LiftStage::new(LiftContext::new(rig), untrained(Variant::Default));
        let fp = render_frame_pair(&s.observations[5], &rig);
        let mut skel = s.detections[5];
        stage.lookup_depth(&mut skel, &fp).unwrap();
        let close = (0..17)
            .filter(|&k| (skel.depth_at_kp[k] - s.detections[5].depth_at_kp[k]).abs() < 1e-3)
            .count();
        assert!(close >= 12, "only {close} keypoints kept their depth");
    }

    #[test]
    fn bench_report_shape() {
        let (rig, s) = stream("clean", 1.0);
        let p = pipeline(&rig, &s, untrained(Variant::Default));
        let r = bench(p, s.frames(&rig, 200, false), 100, WARMUP_FRAMES).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert_eq!(r.frames, 100);
        assert!(r
            .rows
            .iter()
            .all(|row| row.stats.mean.is_finite() && row.stats.p95.is_finite()));
        assert!(r.to_text().lines().count() >= 7);
        let p = pipeline(&rig, &s, untrained(Variant::Default));
        assert!(matches!(
            bench(p, s.frames(&rig, 200, false), 50, 10),
            Err(RuntimeError::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        let model_path = dir.path().join("m.wplm");
        let mut cfg = PipelineConfig::new(&model_path);
        assert!(matches!(cfg.validate(), Err(RuntimeError::Config(_))));
        untrained(Variant::Baseline).save(&model_path).unwrap();
        cfg.validate().unwrap();
        cfg.variant = Some(Variant::Default);
        assert!(cfg.load_model().is_err());
        cfg.source.noise = "fog".into();
        assert!(cfg.validate().is_err());

        let json = r#"{"model": "m.wplm", "detector": {"kind": "external-stream", "path": "-"},
                       "execution": {"mode": "threaded"}}"#;
        let parsed: PipelineConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.execution.mode, ExecutionMode::Threaded);
        assert_eq!(parsed.execution.queue_capacity, 4);
        assert_eq!(parsed.source, SourceConfig::default());
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&parsed).unwrap()).unwrap();
        assert_eq!(back, parsed);
    }

    #[test]
    fn optional_2d_smoothing_before_lifting() {
        let (rig, s) = stream("paper-like", 2.0);
        let mut plain = DetectStage::new(Box::new(s.detector()));
        let mut smooth = DetectStage::new(Box::new(s.detector()));
        smooth.smoothing = Some((OneEuroConfig::default(), OneEuroState2D::default()));
        let (mut raw_step, mut smooth_step) = (0.0, 0.0);
        let mut prev: Option<(Skeleton2D, Skeleton2D)> = None;
        for i in 0..s.len() {
            let a = plain.run(i, None).unwrap().unwrap();
            let b = smooth.run(i, None).unwrap().unwrap();
            assert_eq!(a.confidence, b.confidence);
            if let Some((pa, pb)) = prev {
                raw_step += (a.coords[7] - pa.coords[7]).norm();
                smooth_step += (b.coords[7] - pb.coords[7]).norm();
            } else {
                assert_eq!(a, b);
            }
            prev = Some((a, b));
        }
        assert!(smooth_step < raw_step, "{smooth_step} vs {raw_step}");

        let dir = tempfile::tempdir().unwrap();
        let model_path = dir.path().join("m.wplm");
        untrained(Variant::Default).save(&model_path).unwrap();
        let mut cfg = PipelineConfig::new(&model_path);
        cfg.filter_2d = Some(OneEuroConfig::default());
        cfg.validate().unwrap();
        assert!(cfg
            .pipeline(rig, untrained(Variant::Default), Box::new(s.detector()))
            .detect
            .smoothing
            .is_some());
        cfg.filter_2d = Some(OneEuroConfig {
            fc_min: 0.0,
            ..OneEuroConfig::default()
        });
        match cfg.validate() {
            Err(RuntimeError::Config(msg)) => assert!(msg.contains("filter_2d"), "{msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    #[ignore = "trains a full model; run with --ignored"]
    fn clean_stream_with_trained_lifter() {
        use crate::synthgait::{generate_dataset, DatasetConfig};
        let rig = default_rig();
        let ds = generate_dataset(&DatasetConfig::default(), &rig).unwrap();
        let ctx = LiftContext::new(rig);
        let samples = |ids: &[u32]| {
            ds.subset(ids)
                .flat_map(|s| s.detections.iter().zip(&s.gt).map(move |(d, g)| (d, g, s.subject)))
                .filter_map(|(d, g, sub)| ctx.sample(Variant::Default, d, g, sub).ok())
                .collect::<Vec<_>>()
        };
        let out = train(
            &samples(&ds.split.train),
            &samples(&ds.split.val),
            Variant::Default,
            &TrainConfig::default(),
        )
        .unwrap();
        let (rig, s) = stream("clean", 10.0);
        let n = s.len();
        let report = collect(
            pipeline(&rig, &s, out.model),
            s.frames(&rig, n, true),
            ExecutionConfig::default(),
        );
        let pred: Vec<Skeleton3D> = report.outputs.iter().map(|o| o.skeleton).collect();
        let err = mpjpe(&pred, &s.gt, &Topology::walker17()).unwrap();
        assert!(err < 20.0, "pipeline MPJPE {err:.2} mm");
    }
}
