//! Recordings, EMG/pose synchronisation, windowing and the synthetic
//! muscle-synergy generator.
//!
//! # Recording file (`emgpose-rec/1`, `.eprc`)
//!
//! Little-endian throughout; strings are a u32 byte length then UTF-8.
//!
//! | section | contents |
//! |---------|----------|
//! | magic | 4 bytes `EPRC` |
//! | version | u32 = 1 |
//! | rates | f64 emg_rate, f64 pose_rate (Hz) |
//! | counts | u64 n_emg, u64 n_pose |
//! | meta | str subject, str session, str task, u64 truncated_samples, u32 n_segments, then per segment: str label, u64 start_us, u64 end_us |
//! | emg_timestamps | n_emg × u64 (µs) |
//! | emg | n_emg × 8 × f64, sample-major |
//! | pose_timestamps | n_pose × u64 (µs) |
//! | poses | n_pose × 22 × f64, sample-major |
//!
//! # JSONL
//!
//! An optional first line `{"meta": {...}}` carries rates and labels. Every
//! other line is `{"t_us": int, "emg": [8 floats]?, "pose": [22 floats]?}`
//! with at least one of `emg`/`pose`; rows appear in timestamp order and a
//! row holding both means the two streams share that timestamp.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::hand_model::{HandPose, KeypointSet, KinematicModel};
use crate::retarget::clamp_to_safe_manifold;
use crate::{EMG_CHANNELS, NUM_DOF};

pub const RECORDING_MAGIC: &[u8; 4] = b"EPRC";
pub const RECORDING_VERSION: u32 = 1;
pub const DEFAULT_EMG_RATE: f64 = 500.0;
pub const DEFAULT_POSE_RATE: f64 = 120.0;

/// One EMG sample: a value per channel.
pub type EmgFrame = [f64; EMG_CHANNELS];

/// A fixed-length `(8 × len)` block of normalised EMG, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmgWindow {
    len: usize,
    values: Vec<f64>,
}

impl EmgWindow {
    pub fn from_channel_major(values: Vec<f64>, len: usize) -> Result<Self> {
        if values.len() != EMG_CHANNELS * len {
            return Err(Error::validation(format!(
                "EMG window of length {len} needs {} values, got {}",
                EMG_CHANNELS * len,
                values.len()
            )));
        }
        Ok(EmgWindow { len, values })
    }

    pub fn from_frames(frames: &[EmgFrame]) -> Self {
        let len = frames.len();
        let mut values = vec![0.0; EMG_CHANNELS * len];
        for (t, f) in frames.iter().enumerate() {
            for c in 0..EMG_CHANNELS {
                values[c * len + t] = f[c];
            }
        }
        EmgWindow { len, values }
    }

    pub fn zeros(len: usize) -> Self {
        EmgWindow {
            len,
            values: vec![0.0; EMG_CHANNELS * len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.len..(c + 1) * self.len]
    }

    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.values[c * self.len + t]
    }

    pub fn frame(&self, t: usize) -> EmgFrame {
        std::array::from_fn(|c| self.get(c, t))
    }
}

/// A training/evaluation window on the EMG timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub emg: EmgWindow,
    /// Ground-truth pose at every EMG sample of the window.
    pub theta_gt: Vec<HandPose>,
    /// Pose just before the window (rest pose for the first window).
    pub theta0: HandPose,
    /// Index of the first EMG sample in the source recording.
    pub start: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSegment {
    pub label: String,
    pub start_us: u64,
    /// Exclusive.
    pub end_us: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecordingMeta {
    pub subject: String,
    pub session: String,
    pub task: String,
    /// EMG samples dropped by [`synchronize`] for lying outside the pose span.
    pub truncated_samples: u64,
    pub segments: Vec<TaskSegment>,
}

/// Time-stamped EMG and pose streams, each at its own rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub emg_rate: f64,
    pub pose_rate: f64,
    pub emg_t_us: Vec<u64>,
    pub emg: Vec<EmgFrame>,
    pub pose_t_us: Vec<u64>,
    pub poses: Vec<HandPose>,
    pub meta: RecordingMeta,
}

fn strictly_increasing(t: &[u64]) -> bool {
    t.windows(2).all(|w| w[0] < w[1])
}

impl Recording {
    /// Checks the recording invariants: matching lengths, increasing
    /// timestamps, finite EMG in `[-1, 1]`, finite poses.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(format!("recording: {m}")));
        if !(self.emg_rate > 0.0 && self.pose_rate > 0.0) {
            return fail("rates must be positive".into());
        }
        if self.emg.len() != self.emg_t_us.len() || self.poses.len() != self.pose_t_us.len() {
            return fail("timestamp and sample counts differ".into());
        }
        if !strictly_increasing(&self.emg_t_us) || !strictly_increasing(&self.pose_t_us) {
            return fail("timestamps must be strictly increasing".into());
        }
        if let Some(i) = self.emg.iter().position(|f| f.iter().any(|v| !(-1.0..=1.0).contains(v))) {
            return fail(format!("EMG sample {i} outside [-1, 1]"));
        }
        if let Some(i) = self.poses.iter().position(|p| !p.is_finite()) {
            return fail(format!("pose {i} is not finite"));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus every pose inside the joint limits.
    pub fn validate_for(&self, model: &KinematicModel) -> Result<()> {
        self.validate()?;
        if let Some(i) = self.poses.iter().position(|p| !model.within_limits(p)) {
            return Err(Error::validation(format!("recording: pose {i} outside joint limits")));
        }
        Ok(())
    }

    /// True once poses share the EMG timeline.
    pub fn is_synchronized(&self) -> bool {
        self.pose_t_us == self.emg_t_us
    }

    pub fn duration_s(&self) -> f64 {
        self.emg.len() as f64 / self.emg_rate
    }

    /// Task label covering timestamp `t_us`, if any.
    pub fn task_at(&self, t_us: u64) -> Option<&str> {
        self.meta
            .segments
            .iter()
            .find(|s| s.start_us <= t_us && t_us < s.end_us)
            .map(|s| s.label.as_str())
    }

    /// Splits by time: EMG samples before index `round(fraction * n_emg)` go
    /// to the first part, poses are split at the same timestamp.
    pub fn split(&self, fraction: f64) -> Result<(Recording, Recording)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::validation("split fraction must lie in [0, 1]"));
        }
        let cut = (fraction * self.emg.len() as f64).round() as usize;
        let boundary = self.emg_t_us.get(cut).copied().unwrap_or(u64::MAX);
        let pcut = self.pose_t_us.partition_point(|&t| t < boundary);
        let part = |e: std::ops::Range<usize>, p: std::ops::Range<usize>| Recording {
            emg_rate: self.emg_rate,
            pose_rate: self.pose_rate,
            emg_t_us: self.emg_t_us[e.clone()].to_vec(),
            emg: self.emg[e].to_vec(),
            pose_t_us: self.pose_t_us[p.clone()].to_vec(),
            poses: self.poses[p].to_vec(),
            meta: self.meta.clone(),
        };
        Ok((
            part(0..cut, 0..pcut),
            part(cut..self.emg.len(), pcut..self.poses.len()),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(RECORDING_MAGIC);
        w.u32(RECORDING_VERSION);
        w.f64(self.emg_rate);
        w.f64(self.pose_rate);
        w.u64(self.emg.len() as u64);
        w.u64(self.poses.len() as u64);
        w.str(&self.meta.subject);
        w.str(&self.meta.session);
        w.str(&self.meta.task);
        w.u64(self.meta.truncated_samples);
        w.u32(self.meta.segments.len() as u32);
        for s in &self.meta.segments {
            w.str(&s.label);
            w.u64(s.start_us);
            w.u64(s.end_us);
        }
        for &t in &self.emg_t_us {
            w.u64(t);
        }
        for f in &self.emg {
            w.f64s(f);
        }
        for &t in &self.pose_t_us {
            w.u64(t);
        }
        for p in &self.poses {
            w.f64s(p.angles());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.section("magic");
        if r.take(4)? != RECORDING_MAGIC {
            return Err(r.error_at(0, "not an emgpose-rec/1 file"));
        }
        r.section("version");
        let at = r.offset();
        let version = r.u32()?;
        if version != RECORDING_VERSION {
            return Err(r.error_at(at, format!("unsupported version {version}")));
        }
        r.section("rates");
        let emg_rate = r.f64()?;
        let pose_rate = r.f64()?;
        r.section("counts");
        let n_emg = r.u64()? as usize;
        let n_pose = r.u64()? as usize;
        r.section("meta");
        let subject = r.str()?;
        let session = r.str()?;
        let task = r.str()?;
        let truncated_samples = r.u64()?;
        let n_seg = r.u32()? as usize;
        let mut segments = Vec::new();
        for _ in 0..n_seg {
            segments.push(TaskSegment {
                label: r.str()?,
                start_us: r.u64()?,
                end_us: r.u64()?,
            });
        }
        r.section("emg_timestamps");
        let emg_t_us = read_u64s(&mut r, n_emg)?;
        r.section("emg");
        let emg = r
            .f64s(n_emg.saturating_mul(EMG_CHANNELS))?
            .chunks_exact(EMG_CHANNELS)
            .map(|c| c.try_into().unwrap())
            .collect();
        r.section("pose_timestamps");
        let pose_t_us = read_u64s(&mut r, n_pose)?;
        r.section("poses");
        let poses = r
            .f64s(n_pose.saturating_mul(NUM_DOF))?
            .chunks_exact(NUM_DOF)
            .map(|c| HandPose(c.try_into().unwrap()))
            .collect();
        r.section("end");
        r.finish()?;
        let rec = Recording {
            emg_rate,
            pose_rate,
            emg_t_us,
            emg,
            pose_t_us,
            poses,
            meta: RecordingMeta {
                subject,
                session,
                task,
                truncated_samples,
                segments,
            },
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Writes the JSONL form, meta line first.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        let meta = JsonlMeta {
            emg_rate: self.emg_rate,
            pose_rate: self.pose_rate,
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut *out, &serde_json::json!({ "meta": meta }))?;
        writeln!(out)?;
        let mut rows: BTreeMap<u64, JsonlRow> = BTreeMap::new();
        for (t, f) in self.emg_t_us.iter().zip(&self.emg) {
            rows.entry(*t).or_insert_with(|| JsonlRow::at(*t)).emg = Some(f.to_vec());
        }
        for (t, p) in self.pose_t_us.iter().zip(&self.poses) {
            rows.entry(*t).or_insert_with(|| JsonlRow::at(*t)).pose = Some(p.0.to_vec());
        }
        for row in rows.values() {
            serde_json::to_writer(&mut *out, row)?;
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Parses the JSONL form. Without a meta line the default rates are used.
    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut rec = Recording {
            emg_rate: DEFAULT_EMG_RATE,
            pose_rate: DEFAULT_POSE_RATE,
            emg_t_us: Vec::new(),
            emg: Vec::new(),
            pose_t_us: Vec::new(),
            poses: Vec::new(),
            meta: RecordingMeta::default(),
        };
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::validation(format!("JSONL line {}: {m}", n + 1));
            let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if let Some(meta) = value.get("meta") {
                let m: JsonlMeta = serde_json::from_value(meta.clone()).map_err(|e| bad(e.to_string()))?;
                rec.emg_rate = m.emg_rate;
                rec.pose_rate = m.pose_rate;
                rec.meta = m.meta;
                continue;
            }
            let row: JsonlRow = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            if row.emg.is_none() && row.pose.is_none() {
                return Err(bad("row has neither emg nor pose".into()));
            }
            if let Some(e) = row.emg {
                let frame: EmgFrame = e
                    .try_into()
                    .map_err(|_| bad(format!("emg needs {EMG_CHANNELS} values")))?;
                rec.emg_t_us.push(row.t_us);
                rec.emg.push(frame);
            }
            if let Some(p) = row.pose {
                rec.pose_t_us.push(row.t_us);
                rec.poses.push(HandPose::from_slice(&p).map_err(|e| bad(e.to_string()))?);
            }
        }
        rec.validate()?;
        Ok(rec)
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Loads `.jsonl` files as JSONL and anything else as `.eprc`.
    pub fn load_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e == "jsonl") {
            Self::load_jsonl(path)
        } else {
            Self::load(path)
        }
    }
}

fn read_u64s(r: &mut Reader, n: usize) -> Result<Vec<u64>> {
    let bytes = r.take(n.checked_mul(8).ok_or_else(|| r.error("length overflow"))?)?;
    Ok(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}

#[derive(Serialize, Deserialize)]
struct JsonlMeta {
    emg_rate: f64,
    pose_rate: f64,
    #[serde(default)]
    meta: RecordingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRow {
    t_us: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    emg: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pose: Option<Vec<f64>>,
}

impl JsonlRow {
    fn at(t_us: u64) -> Self {
        JsonlRow {
            t_us,
            emg: None,
            pose: None,
        }
    }
}

/// One frame of human keypoints for the `retarget` command:
/// `{"t_us": int, "labels": [..], "points": [[x, y, z], ..]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointFrame {
    pub t_us: u64,
    pub labels: Vec<String>,
    pub points: Vec<[f64; 3]>,
}

impl KeypointFrame {
    pub fn from_set(t_us: u64, set: &KeypointSet) -> Self {
        KeypointFrame {
            t_us,
            labels: set.labels.clone(),
            points: set.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }

    pub fn to_set(&self) -> Result<KeypointSet> {
        KeypointSet::new(
            self.points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            self.labels.clone(),
        )
    }
}

/// One output pose: `{"t_us": int, "pose": [22 floats]}` plus optional
/// retargeting diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t_us: u64,
    pub pose: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clamped: Option<bool>,
}

/// Reads one JSON value per non-empty line.
pub fn read_jsonl_values<T: for<'de> Deserialize<'de>>(input: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::validation(format!("JSONL line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl_values<T: Serialize>(out: &mut impl Write, values: &[T]) -> Result<()> {
    for v in values {
        serde_json::to_writer(&mut *out, v)?;
        writeln!(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

/// Interpolates poses onto the EMG timestamps, joint by joint. EMG samples
/// outside the pose span are dropped and counted in
/// `meta.truncated_samples`. The result has `pose_t_us == emg_t_us`.
pub fn synchronize(rec: &Recording) -> Result<Recording> {
    rec.validate()?;
    if rec.poses.is_empty() {
        return Err(Error::validation("cannot synchronise a recording without poses"));
    }
    let (first, last) = (rec.pose_t_us[0], *rec.pose_t_us.last().unwrap());
    let mut out = Recording {
        emg_rate: rec.emg_rate,
        pose_rate: rec.emg_rate,
        emg_t_us: Vec::with_capacity(rec.emg.len()),
        emg: Vec::with_capacity(rec.emg.len()),
        pose_t_us: Vec::new(),
        poses: Vec::with_capacity(rec.emg.len()),
        meta: rec.meta.clone(),
    };
    let mut dropped = 0;
    let mut k = 0;
    for (&t, f) in rec.emg_t_us.iter().zip(&rec.emg) {
        if t < first || t > last {
            dropped += 1;
            continue;
        }
        while k + 1 < rec.pose_t_us.len() && rec.pose_t_us[k + 1] <= t {
            k += 1;
        }
        let pose = if rec.pose_t_us[k] == t {
            rec.poses[k]
        } else {
            let (t0, t1) = (rec.pose_t_us[k], rec.pose_t_us[k + 1]);
            let s = (t - t0) as f64 / (t1 - t0) as f64;
            rec.poses[k].lerp(&rec.poses[k + 1], s)
        };
        out.emg_t_us.push(t);
        out.emg.push(*f);
        out.poses.push(pose);
    }
    out.pose_t_us = out.emg_t_us.clone();
    out.meta.truncated_samples += dropped;
    Ok(out)
}

/// Number of windows of length `w` at stride `e` in `n` samples.
pub fn window_count(n: usize, w: usize, e: usize) -> usize {
    if w == 0 || e == 0 || w > n {
        0
    } else {
        (n - w) / e + 1
    }
}

/// Cuts a synchronised recording into windows of `w` samples every `e`
/// samples. Window `k` starts at `k * e` and its `theta0` is the pose at
/// `k * e - 1`, or `rest` for the first window.
pub fn make_windows(rec: &Recording, w: usize, e: usize, rest: &HandPose) -> Result<Vec<WindowSample>> {
    if !rec.is_synchronized() {
        return Err(Error::validation("make_windows needs a synchronised recording"));
    }
    if w == 0 || e == 0 {
        return Err(Error::validation("window and stride must be positive"));
    }
    if w > rec.emg.len() {
        return Err(Error::validation(format!(
            "window {w} longer than recording ({} samples)",
            rec.emg.len()
        )));
    }
    Ok((0..window_count(rec.emg.len(), w, e))
        .map(|k| {
            let start = k * e;
            WindowSample {
                emg: EmgWindow::from_frames(&rec.emg[start..start + w]),
                theta_gt: rec.poses[start..start + w].to_vec(),
                theta0: if start == 0 { *rest } else { rec.poses[start - 1] },
                start,
            }
        })
        .collect())
}

/// Per-step velocity targets: `v[0] = θ[0] - θ0`, `v[t] = θ[t] - θ[t-1]`.
pub fn velocity_labels(theta_gt: &[HandPose], theta0: &HandPose) -> Vec<[f64; NUM_DOF]> {
    let mut prev = theta0;
    theta_gt
        .iter()
        .map(|p| {
            let v = std::array::from_fn(|j| p[j] - prev[j]);
            prev = p;
            v
        })
        .collect()
}

/// Inverse of [`velocity_labels`]: running sum from `theta0`.
pub fn integrate_velocities(velocities: &[[f64; NUM_DOF]], theta0: &HandPose) -> Vec<HandPose> {
    let mut p = *theta0;
    velocities
        .iter()
        .map(|v| {
            for j in 0..NUM_DOF {
                p[j] += v[j];
            }
            p
        })
        .collect()
}

/// Maps raw EMG into `[-1, 1]`: optional per-channel z-scoring, then one
/// global division by the largest magnitude.
pub fn normalize_emg(frames: &mut [EmgFrame], zscore: bool) {
    if frames.is_empty() {
        return;
    }
    if zscore {
        let n = frames.len() as f64;
        for c in 0..EMG_CHANNELS {
            let mean = frames.iter().map(|f| f[c]).sum::<f64>() / n;
            let var = frames.iter().map(|f| (f[c] - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            for f in frames.iter_mut() {
                f[c] = (f[c] - mean) / sd;
            }
        }
    }
    let peak = frames.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in frames.iter_mut().flatten() {
            *v = (*v / peak).clamp(-1.0, 1.0);
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_synergies: usize,
    /// `22 × K` synergy-to-pose matrix (radians per unit activation); drawn
    /// from the seed when absent.
    pub synergy_to_pose: Option<Vec<Vec<f64>>>,
    /// `8 × K` synergy-to-EMG matrix; drawn from the seed when absent.
    pub synergy_to_emg: Option<Vec<Vec<f64>>>,
    /// Carrier noise band in Hz.
    pub carrier_band: [f64; 2],
    pub noise_snr_db: f64,
    pub duration_s: f64,
    pub emg_rate: f64,
    pub pose_rate: f64,
    /// Multiplies every activation; 0 gives a motionless hand.
    pub activation_gain: f64,
    /// Weight of the `|a_k'|` term in the EMG envelope, in seconds.
    pub velocity_gain: f64,
    /// Entries of the random synergy-to-pose matrix are drawn from
    /// `±pose_spread · range_j / √K`.
    pub pose_spread: f64,
    /// Extra factor on the abduction (`*_AA`) rows of the random
    /// synergy-to-pose matrix. Large sideways motion pushes neighbouring
    /// fingers into each other, and the collision clamp then makes the pose
    /// depend on its history rather than on the activations.
    pub abduction_scale: f64,
    /// Task labels; the recording is split into equal consecutive segments,
    /// each with its own synergy emphasis.
    pub tasks: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_synergies: 6,
            synergy_to_pose: None,
            synergy_to_emg: None,
            carrier_band: [20.0, 150.0],
            noise_snr_db: 20.0,
            duration_s: 60.0,
            emg_rate: DEFAULT_EMG_RATE,
            pose_rate: DEFAULT_POSE_RATE,
            activation_gain: 1.0,
            velocity_gain: 0.05,
            pose_spread: 1.0,
            abduction_scale: 0.2,
            tasks: vec!["power_grasp".into(), "precision_pinch".into(), "in_hand_rotation".into()],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::validation(format!("synth config: {m}")));
        let k = self.n_synergies;
        if k == 0 {
            return fail("n_synergies must be at least 1");
        }
        if !(self.emg_rate > 0.0 && self.pose_rate > 0.0 && self.duration_s > 0.0) {
            return fail("rates and duration must be positive");
        }
        let [lo, hi] = self.carrier_band;
        if !(lo > 0.0 && lo < hi && hi < self.emg_rate / 2.0) {
            return fail("carrier band must lie inside (0, emg_rate / 2)");
        }
        let shape_ok = |m: &Option<Vec<Vec<f64>>>, rows: usize| {
            m.as_ref().is_none_or(|m| {
                m.len() == rows && m.iter().all(|r| r.len() == k && r.iter().all(|v| v.is_finite()))
            })
        };
        if !shape_ok(&self.synergy_to_pose, NUM_DOF) {
            return fail("synergy_to_pose must be 22 x n_synergies and finite");
        }
        if !shape_ok(&self.synergy_to_emg, EMG_CHANNELS) {
            return fail("synergy_to_emg must be 8 x n_synergies and finite");
        }
        if !self.noise_snr_db.is_finite() || !self.activation_gain.is_finite() || !self.velocity_gain.is_finite() {
            return fail("gains and SNR must be finite");
        }
        if !(self.pose_spread.is_finite() && self.abduction_scale.is_finite()) {
            return fail("pose_spread and abduction_scale must be finite");
        }
        if self.tasks.is_empty() {
            return fail("at least one task label is required");
        }
        Ok(())
    }
}

/// Smooth activation: a normalised sum of 2 to 5 sinusoids at 0.2-2 Hz.
struct Activation {
    terms: Vec<(f64, f64, f64)>,
}

impl Activation {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(2..=5);
        let raw: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| {
                let f = rng.random_range(0.2..2.0);
                let a = rng.random_range(0.2..1.0);
                (a, TAU * f, rng.random_range(0.0..TAU))
            })
            .collect();
        // unit variance scaled to 1/2
        let total: f64 = (2.0 * raw.iter().map(|t| t.0 * t.0).sum::<f64>()).sqrt();
        let terms = raw.into_iter().map(|(a, w, p)| (a / total, w, p)).collect();
        Activation { terms }
    }

    fn value(&self, t: f64) -> f64 {
        self.terms.iter().map(|(a, w, p)| a * (w * t + p).sin()).sum()
    }

    fn rate(&self, t: f64) -> f64 {
        self.terms.iter().map(|(a, w, p)| a * w * (w * t + p).cos()).sum()
    }
}

/// Generates a synthetic recording from `K` latent muscle synergies.
///
/// Each synergy follows a smooth signal `s_k(t)` with standard deviation 1/2,
/// scaled by the current task's emphasis `g_k` and by `G = activation_gain`.
/// Its nonnegative muscle activation is `a_k = max(0, (G + G g_k s_k) / 2)`
/// and its signed drive is `d_k = 2 a_k - G`. The pose is
/// `θ = clamp(θ_mid + S d)`, then pulled onto the collision-free set.
/// EMG channel `c` is a band-limited unit carrier modulated by the envelope
/// `Σ_k |W_ck| (a_k + velocity_gain · |a_k'|)`, plus Gaussian sensor noise at
/// `noise_snr_db`, normalised to `[-1, 1]`.
pub fn gen_synth(cfg: &SynthConfig, model: &KinematicModel) -> Result<Recording> {
    cfg.validate()?;
    let k = cfg.n_synergies;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mid = model.mid_pose();
    let (lo, hi) = (model.limits_lo(), model.limits_hi());
    let spread = cfg.pose_spread / (k as f64).sqrt();
    let names = model.joint_names();
    let s = match &cfg.synergy_to_pose {
        Some(m) => m.clone(),
        None => {
            let mut u: Vec<f64> = (0..NUM_DOF * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            // rescale to the uniform draw's expected RMS so the range of
            // motion does not vary with the seed
            let rms = (u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64).sqrt();
            u.iter_mut().for_each(|v| *v *= 1.0 / (3f64.sqrt() * rms));
            (0..NUM_DOF)
                .map(|j| {
                    let sc = if names[j].ends_with("_AA") { cfg.abduction_scale } else { 1.0 };
                    (0..k).map(|q| u[j * k + q] * spread * (hi[j] - lo[j]) * sc).collect()
                })
                .collect()
        }
    };
    // each synergy dominates one channel (cyclically) with some crosstalk
    let w = match &cfg.synergy_to_emg {
        Some(m) => m.clone(),
        None => (0..EMG_CHANNELS)
            .map(|c| {
                (0..k)
                    .map(|q| rng.random_range(0.0..0.2) + if c % k == q { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect(),
    };
    let acts: Vec<Activation> = (0..k).map(|_| Activation::random(&mut rng)).collect();
    let task_gains: Vec<Vec<f64>> = cfg
        .tasks
        .iter()
        .map(|_| (0..k).map(|_| rng.random_range(0.6..1.0)).collect())
        .collect();
    let carriers: Vec<Vec<(f64, f64)>> = (0..EMG_CHANNELS)
        .map(|_| {
            (0..48)
                .map(|_| {
                    (
                        TAU * rng.random_range(cfg.carrier_band[0]..cfg.carrier_band[1]),
                        rng.random_range(0.0..TAU),
                    )
                })
                .collect()
        })
        .collect();
    let carrier_amp = (2.0f64 / 48.0).sqrt();

    let n_emg = (cfg.duration_s * cfg.emg_rate).round() as usize;
    let n_pose = (cfg.duration_s * cfg.pose_rate).round() as usize + 1;
    let stamp = |i: usize, rate: f64| (i as f64 * 1e6 / rate).round() as u64;
    let duration_us = stamp(n_emg, cfg.emg_rate);
    let seg_len = duration_us.div_ceil(cfg.tasks.len() as u64);
    let segments: Vec<TaskSegment> = cfg
        .tasks
        .iter()
        .enumerate()
        .map(|(i, label)| TaskSegment {
            label: label.clone(),
            start_us: i as u64 * seg_len,
            end_us: ((i as u64 + 1) * seg_len).min(duration_us),
        })
        .collect();
    // activations with the task emphasis, blended across segment boundaries
    // so the pose stays smooth
    // returns (d, a, a')
    let activation = |t: f64| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let seg = seg_len as f64 * 1e-6;
        let x = t / seg - 0.5;
        let i0 = (x.floor().max(0.0) as usize).min(cfg.tasks.len() - 1);
        let i1 = (i0 + 1).min(cfg.tasks.len() - 1);
        let f = (x - x.floor()).clamp(0.0, 1.0);
        let f = if x < 0.0 { 0.0 } else { f };
        let g: Vec<f64> = (0..k).map(|q| (1.0 - f) * task_gains[i0][q] + f * task_gains[i1][q]).collect();
        let gain = cfg.activation_gain;
        let raw: Vec<f64> = (0..k).map(|q| gain * g[q] * acts[q].value(t)).collect();
        let a: Vec<f64> = (0..k).map(|q| (0.5 * (gain + raw[q])).max(0.0)).collect();
        let drive = (0..k).map(|q| 2.0 * a[q] - gain).collect();
        let da = (0..k)
            .map(|q| if a[q] > 0.0 { 0.5 * gain * g[q] * acts[q].rate(t) } else { 0.0 })
            .collect();
        (drive, a, da)
    };

    let mut pose_t_us = Vec::with_capacity(n_pose);
    let mut poses = Vec::with_capacity(n_pose);
    let mut prev_safe = mid;
    for i in 0..n_pose {
        let t_us = stamp(i, cfg.pose_rate);
        let (drive, _, _) = activation(t_us as f64 * 1e-6);
        let raw = HandPose(std::array::from_fn(|j| {
            mid[j] + (0..k).map(|q| s[j][q] * drive[q]).sum::<f64>()
        }));
        let q = clamp_to_safe_manifold(model, &model.clamp_limits(&raw), &prev_safe)?;
        prev_safe = q;
        pose_t_us.push(t_us);
        poses.push(q);
    }

    let mut emg_t_us = Vec::with_capacity(n_emg);
    let mut emg: Vec<EmgFrame> = Vec::with_capacity(n_emg);
    for i in 0..n_emg {
        let t_us = stamp(i, cfg.emg_rate);
        let t = t_us as f64 * 1e-6;
        let (_, a, da) = activation(t);
        let frame = std::array::from_fn(|c| {
            let env: f64 = (0..k)
                .map(|q| w[c][q].abs() * (a[q] + cfg.velocity_gain * da[q].abs()))
                .sum();
            let carrier: f64 = carriers[c].iter().map(|(f, p)| (f * t + p).sin()).sum::<f64>() * carrier_amp;
            env * carrier
        });
        emg_t_us.push(t_us);
        emg.push(frame);
    }
    let count = (n_emg * EMG_CHANNELS) as f64;
    let rms = (emg.iter().flatten().map(|v| v * v).sum::<f64>() / count.max(1.0)).sqrt();
    if rms > 0.0 {
        emg.iter_mut().flatten().for_each(|v| *v /= rms);
    }
    let noise = Normal::new(0.0, 10f64.powf(-cfg.noise_snr_db / 20.0))
        .map_err(|e| Error::validation(format!("noise level: {e}")))?;
    for v in emg.iter_mut().flatten() {
        *v += noise.sample(&mut rng);
    }
    normalize_emg(&mut emg, false);

    let rec = Recording {
        emg_rate: cfg.emg_rate,
        pose_rate: cfg.pose_rate,
        emg_t_us,
        emg,
        pose_t_us,
        poses,
        meta: RecordingMeta {
            subject: "synthetic".into(),
            session: format!("seed-{}", cfg.seed),
            task: if cfg.tasks.len() == 1 { cfg.tasks[0].clone() } else { "mixed".into() },
            truncated_samples: 0,
            segments,
        },
    };
    rec.validate_for(model)?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_roundtrip_layout() {
        let frames: Vec<EmgFrame> = (0..5).map(|t| std::array::from_fn(|c| (c * 10 + t) as f64)).collect();
        let w = EmgWindow::from_frames(&frames);
        assert_eq!(w.len(), 5);
        assert_eq!(w.channel(3), &[30.0, 31.0, 32.0, 33.0, 34.0]);
        assert_eq!(w.frame(2), frames[2]);
        assert!(EmgWindow::from_channel_major(vec![0.0; 7], 1).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_count(400, 400, 1), 1);
        assert_eq!(window_count(1000, 400, 20), 31);
        assert_eq!(window_count(399, 400, 1), 0);
    }

    #[test]
    fn normalize_bounds() {
        let mut f = vec![[2.0; EMG_CHANNELS], [-4.0; EMG_CHANNELS]];
        normalize_emg(&mut f, false);
        assert_eq!(f[1][0], -1.0);
        assert_eq!(f[0][0], 0.5);
        let mut z = vec![[1.0; EMG_CHANNELS], [3.0; EMG_CHANNELS], [5.0; EMG_CHANNELS]];
        normalize_emg(&mut z, true);
        assert!(z.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(z[1][0], 0.0);
    }

    #[test]
    fn synth_config_checks() {
        let mut c = SynthConfig::default();
        c.carrier_band = [20.0, 300.0];
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.n_synergies = 0;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.synergy_to_emg = Some(vec![vec![0.0; 6]; 7]);
        assert!(c.validate().is_err());
    }
}
