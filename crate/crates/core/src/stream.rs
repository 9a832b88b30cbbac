//! Sliding-window streaming inference.
//!
//! Samples are buffered until a full window of `W` has arrived. From then on,
//! every `E` new samples trigger one inference on the latest `W` samples and
//! `E` poses are emitted, aligned to the newest `E` inputs. The decoder state
//! (LSTM memory and last emitted pose) is carried from chunk to chunk, so the
//! emitted trajectory is one continuous integration:
//!
//! * the first inference decodes the whole window from the initial pose
//!   (the same as a training window) and emits its executed columns;
//! * every later inference encodes the full window but decodes only its
//!   executed columns, continuing from the carried state.
//!
//! Which columns are executed is decided by [`executed_columns`] alone.

use std::collections::VecDeque;
use std::ops::Range;
use std::time::Instant;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{EmgFrame, EmgWindow};
use crate::error::{Error, Result};
use crate::hand_model::HandPose;
use crate::net::{decoder_forward, encoder_forward, resample_linear, DecoderState, NetworkParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Window length `W` in samples.
    pub window: usize,
    /// Samples executed per chunk, `E`.
    pub execute_n: usize,
    /// Count deadline misses against the `E / rate` emission budget.
    pub realtime: bool,
    /// EMG sample rate in Hz.
    pub rate: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            window: 400,
            execute_n: 20,
            realtime: false,
            rate: 500.0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self, params: &NetworkParams) -> Result<()> {
        if self.execute_n == 0 || self.execute_n > self.window {
            return Err(Error::validation(format!(
                "execute_n must lie in 1..={}, got {}",
                self.window, self.execute_n
            )));
        }
        if self.window != params.config().window {
            return Err(Error::validation(format!(
                "stream window {} differs from the network's trained window {}",
                self.window,
                params.config().window
            )));
        }
        if !(self.rate > 0.0) {
            return Err(Error::validation("rate must be positive"));
        }
        params.config().check_len(self.window)
    }

    /// Time available per chunk, `E / rate`, in µs.
    pub fn budget_us(&self) -> f64 {
        self.execute_n as f64 / self.rate * 1e6
    }
}

/// Window columns whose poses are executed: the newest `execute_n`.
pub fn executed_columns(window: usize, execute_n: usize) -> Range<usize> {
    window - execute_n..window
}

/// Number of poses emitted for an `n`-sample stream.
pub fn emitted_count(n: usize, window: usize, execute_n: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / execute_n * execute_n + execute_n
    }
}

struct Ready {
    params: NetworkParams,
    config: StreamConfig,
    buffer: VecDeque<EmgFrame>,
    since_last: usize,
    state: DecoderState,
    started: bool,
    inference_us: Vec<f64>,
}

/// Streaming engine; see the module docs for the execution policy.
#[derive(Default)]
pub struct StreamEngine {
    inner: Option<Ready>,
}

impl StreamEngine {
    /// An engine with no network; every call except
    /// [`initialize`](Self::initialize) fails with a state error.
    pub fn new() -> Self {
        StreamEngine { inner: None }
    }

    pub fn with_params(params: NetworkParams, config: StreamConfig) -> Result<Self> {
        let mut e = Self::new();
        e.initialize(params, config)?;
        Ok(e)
    }

    /// Loads a network and resets all buffers. The first chunk integrates
    /// from the network's rest pose unless [`set_initial_pose`](Self::set_initial_pose)
    /// says otherwise.
    pub fn initialize(&mut self, params: NetworkParams, config: StreamConfig) -> Result<()> {
        config.validate(&params)?;
        let state = DecoderState::fresh(&params);
        self.inner = Some(Ready {
            buffer: VecDeque::with_capacity(config.window),
            params,
            config,
            since_last: 0,
            state,
            started: false,
            inference_us: Vec::new(),
        });
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.inner.is_some()
    }

    fn ready(&mut self) -> Result<&mut Ready> {
        self.inner
            .as_mut()
            .ok_or_else(|| Error::State("engine not initialized".into()))
    }

    /// Pose the first chunk integrates from; only valid before it runs.
    pub fn set_initial_pose(&mut self, pose: HandPose) -> Result<()> {
        let r = self.ready()?;
        if r.started {
            return Err(Error::State("initial pose can only be set before the first chunk".into()));
        }
        if !pose.is_finite() {
            return Err(Error::validation("initial pose must be finite"));
        }
        r.state = DecoderState::starting_at(&r.params, pose);
        Ok(())
    }

    pub fn config(&self) -> Option<&StreamConfig> {
        self.inner.as_ref().map(|r| &r.config)
    }

    /// Decoder state carried into the next chunk.
    pub fn state(&self) -> Option<&DecoderState> {
        self.inner.as_ref().map(|r| &r.state)
    }

    /// Buffers samples and returns every pose emitted while doing so.
    pub fn push_samples(&mut self, samples: &[EmgFrame]) -> Result<Vec<HandPose>> {
        let r = self.ready()?;
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("EMG samples must be finite"));
        }
        let mut out = Vec::new();
        for s in samples {
            if r.buffer.len() == r.config.window {
                r.buffer.pop_front();
            }
            r.buffer.push_back(*s);
            r.since_last += 1;
            let due = if r.started {
                r.since_last == r.config.execute_n
            } else {
                r.buffer.len() == r.config.window
            };
            if due {
                out.extend(r.infer()?);
            }
        }
        Ok(out)
    }

    /// [`push_samples`](Self::push_samples) for a channel-major `(8 × n)` block.
    pub fn push_window(&mut self, block: &EmgWindow) -> Result<Vec<HandPose>> {
        let frames: Vec<EmgFrame> = (0..block.len()).map(|t| block.frame(t)).collect();
        self.push_samples(&frames)
    }

    pub fn latency_stats(&self) -> LatencyStats {
        match &self.inner {
            None => LatencyStats::empty(0.0, false),
            Some(r) => LatencyStats::from_samples(&r.inference_us, &r.config),
        }
    }
}

impl Ready {
    fn infer(&mut self) -> Result<Vec<HandPose>> {
        let t0 = Instant::now();
        let frames: Vec<EmgFrame> = self.buffer.iter().copied().collect();
        let (poses, state) = run_chunk(&self.params, &self.config, &frames, &self.state, !self.started)?;
        self.inference_us.push(t0.elapsed().as_secs_f64() * 1e6);
        self.state = state;
        self.started = true;
        self.since_last = 0;
        Ok(poses)
    }
}

/// One inference on a full window. The first chunk decodes every column up
/// to the executed ones; later chunks decode only the executed columns.
fn run_chunk(
    params: &NetworkParams,
    cfg: &StreamConfig,
    window: &[EmgFrame],
    state: &DecoderState,
    first: bool,
) -> Result<(Vec<HandPose>, DecoderState)> {
    let emg = EmgWindow::from_frames(window);
    let feats = resample_linear(&encoder_forward(params, &emg)?, emg.len())?;
    let cols = executed_columns(cfg.window, cfg.execute_n);
    let decode = if first { 0..cols.end } else { cols.clone() };
    let out = decoder_forward(params, &feats.columns(decode.clone())?, state)?;
    let skip = cols.start - decode.start;
    Ok((out.chunk.poses[skip..].to_vec(), out.state))
}

/// Offline equivalent of feeding `samples` through a [`StreamEngine`]: loops
/// over the window positions directly, carrying the decoder state.
pub fn offline_replay(
    params: &NetworkParams,
    cfg: &StreamConfig,
    samples: &[EmgFrame],
    initial: &HandPose,
) -> Result<Vec<HandPose>> {
    cfg.validate(params)?;
    let (w, e) = (cfg.window, cfg.execute_n);
    let mut state = DecoderState::starting_at(params, *initial);
    let mut out = Vec::new();
    if samples.len() < w {
        return Ok(out);
    }
    let mut end = w;
    let mut first = true;
    while end <= samples.len() {
        let (poses, next) = run_chunk(params, cfg, &samples[end - w..end], &state, first)?;
        out.extend(poses);
        state = next;
        first = false;
        end += e;
    }
    Ok(out)
}

/// Index of the input sample each emitted pose is aligned to.
pub fn emitted_sample_index(k: usize, window: usize, execute_n: usize) -> usize {
    executed_columns(window, execute_n).start + k
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    /// `None` for an empty slice. p95 is the nearest-rank percentile.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Some(Summary {
            min: v[0],
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p95: v[rank - 1],
            max: v[v.len() - 1],
        })
    }
}

/// Wall-clock timing of processed chunks (µs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub chunks: usize,
    /// True when no chunk has run yet; the summaries are then absent.
    pub empty: bool,
    pub inference_us: Option<Summary>,
    /// Sample-to-command delay of the oldest executed sample in a chunk:
    /// buffering of `E - 1` sample periods plus inference time.
    pub end_to_end_us: Option<Summary>,
    pub budget_us: f64,
    /// Chunks whose inference exceeded the budget (realtime mode only).
    pub deadline_misses: Option<usize>,
}

impl LatencyStats {
    fn empty(budget_us: f64, realtime: bool) -> Self {
        LatencyStats {
            chunks: 0,
            empty: true,
            inference_us: None,
            end_to_end_us: None,
            budget_us,
            deadline_misses: realtime.then_some(0),
        }
    }

    pub fn from_samples(inference_us: &[f64], cfg: &StreamConfig) -> Self {
        let budget = cfg.budget_us();
        if inference_us.is_empty() {
            return Self::empty(budget, cfg.realtime);
        }
        let buffering = (cfg.execute_n - 1) as f64 / cfg.rate * 1e6;
        let e2e: Vec<f64> = inference_us.iter().map(|t| t + buffering).collect();
        LatencyStats {
            chunks: inference_us.len(),
            empty: false,
            inference_us: Summary::of(inference_us),
            end_to_end_us: Summary::of(&e2e),
            budget_us: budget,
            deadline_misses: cfg
                .realtime
                .then(|| inference_us.iter().filter(|&&t| t > budget).count()),
        }
    }
}

/// Wrist position (m) and orientation as a unit quaternion `[w, x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WristPose {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

const QUAT_TOL: f64 = 1e-9;

impl WristPose {
    pub fn identity() -> Self {
        WristPose {
            position: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        let q = orientation.quaternion();
        WristPose {
            position: [position.x, position.y, position.z],
            orientation: [q.w, q.i, q.j, q.k],
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    /// The orientation, rejecting quaternions whose norm is off by more than 1e-9.
    pub fn rotation(&self) -> Result<UnitQuaternion<f64>> {
        let [w, x, y, z] = self.orientation;
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || (n - 1.0).abs() > QUAT_TOL || !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(format!("wrist orientation must be a unit quaternion (norm {n})")));
        }
        Ok(UnitQuaternion::new_unchecked(q))
    }

    /// `self ∘ delta`: apply `delta` expressed in this pose's frame.
    pub fn compose(&self, delta: &WristPose) -> Result<WristPose> {
        let (r, d) = (self.rotation()?, delta.rotation()?);
        Ok(WristPose::new(self.translation() + r * delta.translation(), r * d))
    }
}

/// Relative motion from `prev` to `curr`, expressed in `prev`'s frame:
/// rotation `q_prev* ⊗ q_curr`, translation `q_prev* (p_curr - p_prev)`.
pub fn wrist_increment(prev: &WristPose, curr: &WristPose) -> Result<WristPose> {
    let (rp, rc) = (prev.rotation()?, curr.rotation()?);
    let inv = rp.inverse();
    Ok(WristPose::new(inv * (curr.translation() - prev.translation()), inv * rc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_percentile() {
        let s = Summary::of(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((s.min, s.mean, s.p95, s.max), (1.0, 3.0, 5.0, 5.0));
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn emission_formula() {
        assert_eq!(emitted_count(399, 400, 20), 0);
        assert_eq!(emitted_count(400, 400, 20), 20);
        assert_eq!(emitted_count(419, 400, 20), 20);
        assert_eq!(emitted_count(420, 400, 20), 40);
    }

    #[test]
    fn uninitialized_engine_is_a_state_error() {
        let mut e = StreamEngine::new();
        assert!(matches!(e.push_samples(&[[0.0; 8]]), Err(Error::State(_))));
        assert!(e.latency_stats().empty);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let bad = WristPose {
            position: [0.0; 3],
            orientation: [1.0, 0.1, 0.0, 0.0],
        };
        assert!(wrist_increment(&bad, &WristPose::identity()).is_err());
    }
}
