//! Subcommands of the `emgpose` binary, evaluation reports and CSV export.
//!
//! Every command is a plain function so it can be driven from tests and
//! examples as well as from [`main_with`]. Configuration is one JSON file
//! ([`PipelineConfig`]); command-line flags override it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synth, make_windows, read_jsonl_values, synchronize, write_jsonl_values, EmgFrame, KeypointFrame,
    PoseRecord, Recording, SynthConfig,
};
use crate::error::{Error, Result};
use crate::hand_model::{HandPose, KinematicModel};
use crate::net::{model_forward, train_with, DecoderState, EpochLoss, ModelConfig, NetworkParams, TrainConfig, TrainOutcome};
use crate::retarget::{normalize_human_frame, retarget_pose, RetargetConfig};
use crate::stream::{emitted_sample_index, LatencyStats, StreamConfig, StreamEngine};
use crate::NUM_DOF;

pub const REPORT_SCHEMA: &str = "emgpose-report/1";

/// Carried in every report so nobody mistakes offline pose error for the
/// outcome of experiments on the physical system.
pub const NOT_REPRODUCED: [&str; 2] = [
    "Teleoperation success-rate tables for the physical robot hand (single- and dual-hand tasks) are not reproduced: they need the armband, the hand and human operators.",
    "Long-horizon teleoperation results are not reproduced for the same reason. Gradient, retargeting, streaming and file-format property tests stand in for them.",
];

/// Shared configuration for all subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stream: StreamConfig,
    /// Fraction of the recording (by time) used for training; `eval` scores
    /// the rest.
    pub train_fraction: f64,
    /// Stride between training windows, in samples.
    pub train_stride: usize,
    /// Seed for the network initialisation.
    pub init_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stream: StreamConfig::default(),
            train_fraction: 0.8,
            train_stride: 20,
            init_seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::validation(format!("config: {e}")))
    }

    /// `--seed` drives every random choice: data, initialisation and
    /// shuffling.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.init_seed = seed;
    }

    /// The window is shared by the network and the streaming engine.
    pub fn set_window(&mut self, window: usize) {
        self.model.window = window;
        self.stream.window = window;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::validation("train_fraction must lie in (0, 1)"));
        }
        if self.train_stride == 0 {
            return Err(Error::validation("train_stride must be positive"));
        }
        self.synth.validate()?;
        self.model.validate()
    }
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMae {
    pub joint: String,
    pub mae: f64,
}

/// Pose error summary written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    /// How predictions were produced, e.g. `windowed` or `predictions`.
    pub protocol: String,
    pub frames: usize,
    /// Mean absolute joint error (rad); the uniform mean of `per_joint_mae`.
    pub overall_mae: f64,
    pub per_joint_mae: Vec<JointMae>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_task_mae: BTreeMap<String, f64>,
    /// MAE of holding each window's starting pose, for scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_mae: Option<f64>,
    pub not_reproduced: Vec<String>,
}

/// MAE of `pred` against `gt`, overall, per joint and (when `tasks` is
/// given, one label per frame) per task.
pub fn mae_report(
    model: &KinematicModel,
    pred: &[HandPose],
    gt: &[HandPose],
    tasks: Option<&[Option<String>]>,
    protocol: &str,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::validation(format!(
            "{} predicted frames for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if tasks.is_some_and(|t| t.len() != gt.len()) {
        return Err(Error::validation("one task label per frame is required"));
    }
    if pred.iter().chain(gt).any(|p| !p.is_finite()) {
        return Err(Error::validation("poses must be finite"));
    }
    let n = gt.len();
    let mut joint_sum = [0.0; NUM_DOF];
    let mut task_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
        let mut frame = 0.0;
        for j in 0..NUM_DOF {
            let e = (p[j] - g[j]).abs();
            joint_sum[j] += e;
            frame += e;
        }
        if let Some(Some(label)) = tasks.map(|t| &t[k]) {
            let entry = task_sum.entry(label.clone()).or_default();
            entry.0 += frame / NUM_DOF as f64;
            entry.1 += 1;
        }
    }
    let denom = n.max(1) as f64;
    let per_joint: Vec<f64> = joint_sum.iter().map(|s| s / denom).collect();
    let names = model.joint_names();
    Ok(EvalReport {
        schema: REPORT_SCHEMA.into(),
        protocol: protocol.into(),
        frames: n,
        overall_mae: per_joint.iter().sum::<f64>() / NUM_DOF as f64,
        per_joint_mae: names
            .into_iter()
            .zip(per_joint)
            .map(|(joint, mae)| JointMae { joint, mae })
            .collect(),
        per_task_mae: task_sum.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        baseline_mae: None,
        not_reproduced: NOT_REPRODUCED.iter().map(|s| s.to_string()).collect(),
    })
}

/// Predictions for a held-out synchronised recording: non-overlapping
/// windows, each decoded from a fresh LSTM state starting at the pose just
/// before it (the network's rest pose for the first). Returns
/// `(pred, gt, hold)`, where `hold` repeats each window's starting pose.
pub fn windowed_predictions(
    params: &NetworkParams,
    rec: &Recording,
) -> Result<(Vec<HandPose>, Vec<HandPose>, Vec<HandPose>)> {
    let w = params.config().window;
    let windows = make_windows(rec, w, w, &params.rest_pose())?;
    let mut pred = Vec::with_capacity(windows.len() * w);
    let mut gt = Vec::with_capacity(windows.len() * w);
    let mut hold = Vec::with_capacity(windows.len() * w);
    for s in &windows {
        let state = DecoderState::starting_at(params, s.theta0);
        let (chunk, _) = model_forward(params, &s.emg, &state)?;
        pred.extend(chunk.poses);
        gt.extend_from_slice(&s.theta_gt);
        hold.extend(std::iter::repeat_n(s.theta0, w));
    }
    Ok((pred, gt, hold))
}

/// Windowed evaluation of `params` on a held-out recording.
pub fn evaluate_model(model: &KinematicModel, params: &NetworkParams, rec: &Recording) -> Result<EvalReport> {
    let rec = if rec.is_synchronized() { rec.clone() } else { synchronize(rec)? };
    let (pred, gt, hold) = windowed_predictions(params, &rec)?;
    let tasks: Vec<Option<String>> = (0..gt.len())
        .map(|i| rec.task_at(rec.emg_t_us[i]).map(str::to_string))
        .collect();
    let mut report = mae_report(model, &pred, &gt, Some(&tasks), "windowed")?;
    report.baseline_mae = Some(mae_report(model, &hold, &gt, None, "hold")?.overall_mae);
    Ok(report)
}

/// Writes `frame,<joint>_gt,<joint>_pred,...` rows for the chosen joints.
/// Joint labels are matched case-insensitively with spaces or underscores.
pub fn export_joint_csv(
    model: &KinematicModel,
    pred: &[HandPose],
    gt: &[HandPose],
    joints: &[&str],
    out: &mut impl Write,
) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::validation("prediction and ground truth lengths differ"));
    }
    let names = model.joint_names();
    let idx = joints
        .iter()
        .map(|j| {
            model.joint_index(j).ok_or_else(|| {
                Error::validation(format!("unknown joint `{j}`; valid joints: {}", names.join(", ")))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write!(out, "frame")?;
    for &j in &idx {
        write!(out, ",{0}_gt,{0}_pred", names[j])?;
    }
    writeln!(out)?;
    for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
        write!(out, "{k}")?;
        for &j in &idx {
            // `{}` on f64 prints the shortest string that parses back exactly
            write!(out, ",{},{}", g[j], p[j])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn export_joint_csv_file(
    model: &KinematicModel,
    pred: &[HandPose],
    gt: &[HandPose],
    joints: &[&str],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    export_joint_csv(model, pred, gt, joints, &mut w)?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// commands

pub fn cmd_gen_synth(cfg: &PipelineConfig, model: &KinematicModel, out: &Path) -> Result<Recording> {
    let rec = gen_synth(&cfg.synth, model)?;
    save_recording(&rec, out)?;
    Ok(rec)
}

/// Trains on the first `train_fraction` of the recording and saves the
/// parameters to `out`.
pub fn cmd_train(
    cfg: &PipelineConfig,
    model: &KinematicModel,
    input: &Path,
    out: &Path,
    on_epoch: impl FnMut(&EpochLoss, &NetworkParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let rec = synchronize(&Recording::load_any(input)?)?;
    let (train_part, _) = rec.split(cfg.train_fraction)?;
    let init = NetworkParams::init(cfg.model.clone(), model, cfg.init_seed)?;
    let windows = make_windows(&train_part, cfg.model.window, cfg.train_stride, &init.rest_pose())?;
    let outcome = train_with(&init, &windows, &[], &cfg.train, on_epoch)?;
    outcome.params.save(out)?;
    Ok(outcome)
}

/// Scores either a network (`params`) on the held-out part of the recording
/// or a pose stream (`predictions`, one [`PoseRecord`] per EMG timestamp it
/// covers) against the recording's synchronised poses.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    model: &KinematicModel,
    input: &Path,
    params: Option<&Path>,
    predictions: Option<&Path>,
) -> Result<(EvalReport, Vec<HandPose>, Vec<HandPose>)> {
    let rec = synchronize(&Recording::load_any(input)?)?;
    match (params, predictions) {
        (Some(p), None) => {
            let params = NetworkParams::load(p)?;
            let (_, held_out) = rec.split(cfg.train_fraction)?;
            let report = evaluate_model(model, &params, &held_out)?;
            let (pred, gt, _) = windowed_predictions(&params, &held_out)?;
            Ok((report, pred, gt))
        }
        (None, Some(p)) => {
            let records: Vec<PoseRecord> = read_jsonl_values(BufReader::new(File::open(p)?))?;
            let mut pred = Vec::with_capacity(records.len());
            let mut gt = Vec::with_capacity(records.len());
            let mut tasks = Vec::with_capacity(records.len());
            for r in &records {
                let i = rec.emg_t_us.binary_search(&r.t_us).map_err(|_| {
                    Error::validation(format!("prediction at t_us {} matches no recording sample", r.t_us))
                })?;
                pred.push(HandPose::from_slice(&r.pose)?);
                gt.push(rec.poses[i]);
                tasks.push(rec.task_at(r.t_us).map(str::to_string));
            }
            let report = mae_report(model, &pred, &gt, Some(&tasks), "predictions")?;
            Ok((report, pred, gt))
        }
        _ => Err(Error::validation("eval needs exactly one of --params or --predictions")),
    }
}

/// Retargets one keypoint frame per line, warm-starting each solve from the
/// previous result.
pub fn cmd_retarget(model: &KinematicModel, input: &Path, out: &Path, normalize: bool) -> Result<Vec<PoseRecord>> {
    let frames: Vec<KeypointFrame> = read_jsonl_values(BufReader::new(File::open(input)?))?;
    let config = RetargetConfig::for_model(model);
    let mut prev = model.rest_pose();
    let mut records = Vec::with_capacity(frames.len());
    for f in &frames {
        let mut set = f.to_set()?;
        if normalize {
            set = normalize_human_frame(model, &set)?;
        }
        let targets = model.select_correspondence(&set)?;
        let r = retarget_pose(model, &targets, &config, &prev)?;
        prev = r.pose;
        records.push(PoseRecord {
            t_us: f.t_us,
            pose: r.pose.0.to_vec(),
            residual: Some(r.residual),
            clamped: Some(r.clamped),
        });
    }
    write_records(out, &records)?;
    Ok(records)
}

/// Replays the recording's EMG through a [`StreamEngine`] `execute_n`
/// samples at a time. Each emitted pose is stamped with the EMG sample it is
/// aligned to.
pub fn cmd_stream(
    cfg: &PipelineConfig,
    input: &Path,
    params: &Path,
    out: Option<&Path>,
) -> Result<(Vec<PoseRecord>, LatencyStats)> {
    let rec = Recording::load_any(input)?;
    rec.validate()?;
    let params = NetworkParams::load(params)?;
    let mut engine = StreamEngine::with_params(params, cfg.stream.clone())?;
    let (w, e) = (cfg.stream.window, cfg.stream.execute_n);
    let mut records = Vec::new();
    for block in rec.emg.chunks(e) {
        for pose in engine.push_samples(block)? {
            let k = records.len();
            // chunk c covers samples [c*E, c*E + W); its executed poses align
            // to the newest E of them
            let sample = (k / e) * e + emitted_sample_index(k % e, w, e);
            records.push(PoseRecord {
                t_us: rec.emg_t_us[sample],
                pose: pose.0.to_vec(),
                residual: None,
                clamped: None,
            });
        }
    }
    if let Some(out) = out {
        write_records(out, &records)?;
    }
    Ok((records, engine.latency_stats()))
}

/// Times `chunks` inferences of a freshly initialised network on seeded
/// noise, in realtime mode so deadline misses are counted.
pub fn cmd_bench(cfg: &PipelineConfig, model: &KinematicModel, chunks: usize) -> Result<LatencyStats> {
    if chunks == 0 {
        return Err(Error::validation("bench needs at least one chunk"));
    }
    let params = NetworkParams::init(cfg.model.clone(), model, cfg.init_seed)?;
    let stream = StreamConfig {
        realtime: true,
        ..cfg.stream.clone()
    };
    let mut engine = StreamEngine::with_params(params, stream.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let n = stream.window + (chunks - 1) * stream.execute_n;
    let samples: Vec<EmgFrame> = (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    engine.push_samples(&samples)?;
    Ok(engine.latency_stats())
}

fn save_recording(rec: &Recording, out: &Path) -> Result<()> {
    if out.extension().is_some_and(|e| e == "jsonl") {
        rec.save_jsonl(out)
    } else {
        rec.save(out)
    }
}

fn write_records(out: &Path, records: &[PoseRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(out)?);
    write_jsonl_values(&mut w, records)?;
    w.flush()?;
    Ok(())
}

fn write_json(out: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(out, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// argument parsing

/// sEMG hand-pose pipeline: synthetic data, training, evaluation,
/// retargeting and streaming inference.
#[derive(Debug, Parser)]
#[command(name = "emgpose", version)]
pub struct Cli {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Hand model JSON (defaults to the bundled 22-DOF hand).
    #[arg(long, global = true, value_name = "FILE")]
    pub hand: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic recording (.eprc, or JSONL for a .jsonl path).
    GenSynth(GenSynthArgs),
    /// Train a network on the first part of a recording.
    Train(TrainArgs),
    /// Write an evaluation report for a network or a pose stream.
    Eval(EvalArgs),
    /// Retarget human keypoint frames (JSONL) to robot poses (JSONL).
    Retarget(RetargetArgs),
    /// Replay a recording through the streaming engine.
    Stream(StreamArgs),
    /// Time streaming inference on seeded noise.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output recording path.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for every random choice.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Recording length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Recording to train on (.eprc or .jsonl).
    #[arg(long)]
    pub input: PathBuf,
    /// Output parameter file.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for initialisation and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of passes over the training windows.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Window length in samples.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Recording with ground-truth poses.
    #[arg(long)]
    pub input: PathBuf,
    /// Network to evaluate on the held-out part of the recording.
    #[arg(long, conflicts_with = "predictions")]
    pub params: Option<PathBuf>,
    /// Pose stream (JSONL) to score instead of running a network.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Report path; the report is printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV of selected joint trajectories (ground truth and prediction).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Comma-separated joints for --csv.
    #[arg(long, value_delimiter = ',', default_value = "THUMB_CMC_FE,INDEX_MCP_FE")]
    pub joints: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RetargetArgs {
    /// Keypoint frames, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Output pose stream.
    #[arg(long)]
    pub out: PathBuf,
    /// Input is raw tracker output; normalise it into the hand-base frame.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Recording whose EMG is replayed.
    #[arg(long)]
    pub input: PathBuf,
    /// Trained parameter file.
    #[arg(long)]
    pub params: PathBuf,
    /// Window length in samples; must match the network.
    #[arg(long)]
    pub window: Option<usize>,
    /// Poses executed per chunk.
    #[arg(long)]
    pub execute: Option<usize>,
    /// Count deadline misses against the emission budget.
    #[arg(long)]
    pub realtime: bool,
    /// Output pose stream (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Number of chunks to time.
    #[arg(long, default_value_t = 10)]
    pub chunks: usize,
    /// Window length in samples.
    #[arg(long)]
    pub window: Option<usize>,
    /// Poses executed per chunk.
    #[arg(long)]
    pub execute: Option<usize>,
    /// Seed for the network and the input noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the stats here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit status for an error: 2 for I/O failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 2,
        _ => 1,
    }
}

/// Machine-readable form of an error for stderr.
pub fn error_json(err: &Error) -> String {
    let kind = match err {
        Error::Validation(_) => "validation",
        Error::Invariant(_) => "invariant",
        Error::Format { .. } => "format",
        Error::Training { .. } => "training",
        Error::State(_) => "state",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    };
    serde_json::json!({ "error": kind, "message": err.to_string() }).to_string()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let model = match &cli.hand {
        Some(p) => KinematicModel::load(p)?,
        None => KinematicModel::canonical(),
    };
    match cli.command {
        Command::GenSynth(a) => {
            if let Some(s) = a.seed {
                cfg.set_seed(s);
            }
            if let Some(d) = a.duration {
                cfg.synth.duration_s = d;
            }
            cmd_gen_synth(&cfg, &model, &a.out)?;
        }
        Command::Train(a) => {
            if let Some(s) = a.seed {
                cfg.set_seed(s);
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(w) = a.window {
                cfg.set_window(w);
            }
            cmd_train(&cfg, &model, &a.input, &a.out, |e, _| {
                eprintln!("epoch {} loss {:.6}", e.epoch, e.train);
            })?;
        }
        Command::Eval(a) => {
            let (report, pred, gt) = cmd_eval(&cfg, &model, &a.input, a.params.as_deref(), a.predictions.as_deref())?;
            if let Some(csv) = &a.csv {
                let joints: Vec<&str> = a.joints.iter().map(String::as_str).collect();
                export_joint_csv_file(&model, &pred, &gt, &joints, csv)?;
            }
            if let Some(out) = &a.out {
                write_json(out, &report)?;
            }
            print_json(&report)?;
        }
        Command::Retarget(a) => {
            cmd_retarget(&model, &a.input, &a.out, a.normalize)?;
        }
        Command::Stream(a) => {
            if let Some(w) = a.window {
                cfg.set_window(w);
            }
            if let Some(e) = a.execute {
                cfg.stream.execute_n = e;
            }
            cfg.stream.realtime |= a.realtime;
            let (_, stats) = cmd_stream(&cfg, &a.input, &a.params, a.out.as_deref())?;
            print_json(&stats)?;
        }
        Command::Bench(a) => {
            if let Some(s) = a.seed {
                cfg.set_seed(s);
            }
            if let Some(w) = a.window {
                cfg.set_window(w);
            }
            if let Some(e) = a.execute {
                cfg.stream.execute_n = e;
            }
            let stats = cmd_bench(&cfg, &model, a.chunks)?;
            if let Some(out) = &a.out {
                write_json(out, &stats)?;
            }
            print_json(&stats)?;
        }
    }
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
/// Errors go to stderr as one JSON object.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}
