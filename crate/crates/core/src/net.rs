//! EMG2Pose regression network.
//!
//! `(8, T)` EMG goes through two strided conv blocks to `(32, T/4)`, then two
//! time-depth-separable stages, is linearly resampled back to `T` steps and
//! decoded by a feedback LSTM + MLP into per-step joint velocities. Poses are
//! integrated from the carried pose: `θ_t = clamp(θ_{t-1} + v_t)`.
//!
//! All convolutions are causal (left padded), so the feature at step `t`
//! never depends on later EMG samples. Parameters live in one flat `f64`
//! vector; [`NetworkParams::segments`] lists the named slices in storage order.
//!
//! # Parameter file (`emgpose-net/1`)
//!
//! All integers and floats little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `EPNT` |
//! | 4 | u32 version = 1 |
//! | 4 × 13 | u32 config: in_channels, conv_channels[0], conv_channels[1], conv_kernel, conv_strides[0], conv_strides[1], tds_stages, tds_groups, tds_kernel, ff_hidden, lstm_hidden, mlp_hidden, out_dof |
//! | 4 | u32 window |
//! | 8 | f64 velocity_scale |
//! | 8 | u64 value count `n` |
//! | 8 × n | f64 values in segment order |

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::data::{velocity_labels, EmgWindow, WindowSample};
use crate::error::{Error, Result};
use crate::hand_model::{HandPose, KinematicModel};
use crate::{EMG_CHANNELS, NUM_DOF};

pub const PARAMS_MAGIC: &[u8; 4] = b"EPNT";
pub const PARAMS_VERSION: u32 = 1;
pub const FEAT_CHANNELS: usize = 32;
const LN_EPS: f64 = 1e-5;
/// Training aborts when a sample loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub conv_channels: [usize; 2],
    pub conv_kernel: usize,
    pub conv_strides: [usize; 2],
    pub tds_stages: usize,
    /// TDS convolution channels; the 32 features are viewed as
    /// `tds_groups × (32 / tds_groups)` and the conv weights are shared
    /// across the second axis.
    pub tds_groups: usize,
    pub tds_kernel: usize,
    pub ff_hidden: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    pub out_dof: usize,
    /// Training/streaming window length `T` in samples.
    pub window: usize,
    /// Fixed factor on the MLP output, in rad per step. Keeps per-step
    /// velocities small while the head weights stay O(1).
    pub velocity_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: EMG_CHANNELS,
            conv_channels: [16, FEAT_CHANNELS],
            conv_kernel: 5,
            conv_strides: [2, 2],
            tds_stages: 2,
            tds_groups: 4,
            tds_kernel: 9,
            ff_hidden: 128,
            lstm_hidden: 48,
            mlp_hidden: 64,
            out_dof: NUM_DOF,
            window: 400,
            velocity_scale: 0.01,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            tds_kernel: 3,
            ff_hidden: 16,
            lstm_hidden: 8,
            mlp_hidden: 8,
            window: 32,
            ..Default::default()
        }
    }

    pub fn feat_channels(&self) -> usize {
        self.conv_channels[1]
    }

    pub fn downsample(&self) -> usize {
        self.conv_strides[0] * self.conv_strides[1]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(format!("model config: {m}")));
        if self.in_channels != EMG_CHANNELS {
            return fail(format!("in_channels must be {EMG_CHANNELS}"));
        }
        if self.conv_channels[1] != FEAT_CHANNELS {
            return fail(format!("feature channels must be {FEAT_CHANNELS}"));
        }
        if self.out_dof != NUM_DOF {
            return fail(format!("out_dof must be {NUM_DOF}"));
        }
        if self.downsample() != 4 || self.conv_strides.contains(&0) {
            return fail("conv strides must multiply to 4".into());
        }
        if self.tds_groups == 0 || FEAT_CHANNELS % self.tds_groups != 0 {
            return fail("tds_groups must divide 32".into());
        }
        let sizes = [
            self.conv_channels[0],
            self.conv_kernel,
            self.tds_kernel,
            self.ff_hidden,
            self.lstm_hidden,
            self.mlp_hidden,
        ];
        if sizes.contains(&0) {
            return fail("layer sizes must be positive".into());
        }
        if !(self.velocity_scale.is_finite() && self.velocity_scale > 0.0) {
            return fail("velocity_scale must be finite and positive".into());
        }
        self.check_len(self.window)
    }

    /// Valid input lengths are multiples of 4 giving at least two encoder steps.
    pub fn check_len(&self, t: usize) -> Result<()> {
        if t % self.downsample() != 0 || t / self.downsample() < 2 {
            return Err(Error::validation(format!(
                "sequence length {t} must be a multiple of {} and at least {}",
                self.downsample(),
                2 * self.downsample()
            )));
        }
        Ok(())
    }
}

/// A named slice of the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    /// Frozen segments (rest pose, joint limits) are never updated.
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvSlots {
    w: Range<usize>,
    b: Range<usize>,
    gain: Range<usize>,
    bias: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct TdsSlots {
    conv_w: Range<usize>,
    conv_b: Range<usize>,
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    ff1_w: Range<usize>,
    ff1_b: Range<usize>,
    ff2_w: Range<usize>,
    ff2_b: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
struct Slots {
    conv: Vec<ConvSlots>,
    tds: Vec<TdsSlots>,
    lstm_wx: Range<usize>,
    lstm_wh: Range<usize>,
    lstm_b: Range<usize>,
    mlp1_w: Range<usize>,
    mlp1_b: Range<usize>,
    mlp2_w: Range<usize>,
    mlp2_b: Range<usize>,
    rest: Range<usize>,
    lo: Range<usize>,
    hi: Range<usize>,
}

struct LayoutBuilder {
    segments: Vec<Segment>,
    len: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> Range<usize> {
        let n: usize = shape.iter().product();
        let range = self.len..self.len + n;
        self.len += n;
        self.segments.push(Segment {
            name: name.into(),
            shape: shape.to_vec(),
            range: range.clone(),
            trainable,
        });
        range
    }
}

fn build_layout(cfg: &ModelConfig) -> (Vec<Segment>, Slots, usize) {
    let mut b = LayoutBuilder { segments: Vec::new(), len: 0 };
    let c = FEAT_CHANNELS;
    let mut conv = Vec::new();
    let mut cin = cfg.in_channels;
    for (i, &cout) in cfg.conv_channels.iter().enumerate() {
        conv.push(ConvSlots {
            w: b.add(format!("conv{i}.weight"), &[cout, cin, cfg.conv_kernel], true),
            b: b.add(format!("conv{i}.bias"), &[cout], true),
            gain: b.add(format!("conv{i}.norm.gain"), &[cout], true),
            bias: b.add(format!("conv{i}.norm.bias"), &[cout], true),
        });
        cin = cout;
    }
    let g = cfg.tds_groups;
    let tds = (0..cfg.tds_stages)
        .map(|s| TdsSlots {
            conv_w: b.add(format!("tds{s}.conv.weight"), &[g, g, cfg.tds_kernel], true),
            conv_b: b.add(format!("tds{s}.conv.bias"), &[g], true),
            ln1_g: b.add(format!("tds{s}.norm1.gain"), &[c], true),
            ln1_b: b.add(format!("tds{s}.norm1.bias"), &[c], true),
            ff1_w: b.add(format!("tds{s}.ff1.weight"), &[cfg.ff_hidden, c], true),
            ff1_b: b.add(format!("tds{s}.ff1.bias"), &[cfg.ff_hidden], true),
            ff2_w: b.add(format!("tds{s}.ff2.weight"), &[c, cfg.ff_hidden], true),
            ff2_b: b.add(format!("tds{s}.ff2.bias"), &[c], true),
            ln2_g: b.add(format!("tds{s}.norm2.gain"), &[c], true),
            ln2_b: b.add(format!("tds{s}.norm2.bias"), &[c], true),
        })
        .collect();
    let h = cfg.lstm_hidden;
    let d = cfg.out_dof;
    let slots = Slots {
        conv,
        tds,
        lstm_wx: b.add("lstm.weight_input", &[4 * h, c + d], true),
        lstm_wh: b.add("lstm.weight_hidden", &[4 * h, h], true),
        lstm_b: b.add("lstm.bias", &[4 * h], true),
        mlp1_w: b.add("mlp1.weight", &[cfg.mlp_hidden, h], true),
        mlp1_b: b.add("mlp1.bias", &[cfg.mlp_hidden], true),
        mlp2_w: b.add("mlp2.weight", &[d, cfg.mlp_hidden], true),
        mlp2_b: b.add("mlp2.bias", &[d], true),
        rest: b.add("rest_pose", &[d], false),
        lo: b.add("limit_lo", &[d], false),
        hi: b.add("limit_hi", &[d], false),
    };
    (b.segments, slots, b.len)
}

/// All network weights plus the frozen rest pose and joint limits.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    config: ModelConfig,
    values: Vec<f64>,
    segments: Vec<Segment>,
    slots: Slots,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl NetworkParams {
    /// All-zero weights, unit norm gains, rest pose at mid-range and limits
    /// copied from `model`.
    pub fn zeroed(config: ModelConfig, model: &KinematicModel) -> Result<Self> {
        config.validate()?;
        let (segments, slots, len) = build_layout(&config);
        let mut p = NetworkParams {
            config,
            values: vec![0.0; len],
            segments,
            slots,
        };
        for seg in p.segments.clone() {
            if seg.name.ends_with(".gain") {
                p.values[seg.range].fill(1.0);
            }
        }
        let mid = model.mid_pose();
        p.values[p.slots.rest.clone()].copy_from_slice(mid.angles());
        p.values[p.slots.lo.clone()].copy_from_slice(&model.limits_lo());
        p.values[p.slots.hi.clone()].copy_from_slice(&model.limits_hi());
        Ok(p)
    }

    /// Seeded random initialisation: uniform `±1/sqrt(fan_in)` weights, zero
    /// biases, forget-gate bias 1 and a velocity head scaled down 10×.
    pub fn init(config: ModelConfig, model: &KinematicModel, seed: u64) -> Result<Self> {
        let mut p = Self::zeroed(config, model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for seg in p.segments.clone() {
            if !seg.trainable || !seg.name.contains("weight") {
                continue;
            }
            let fan_in: usize = seg.shape[1..].iter().product();
            let mut bound = 1.0 / (fan_in as f64).sqrt();
            if seg.name == "mlp2.weight" {
                bound *= 0.1;
            }
            for v in &mut p.values[seg.range] {
                *v = rng.random_range(-bound..bound);
            }
        }
        let h = p.config.lstm_hidden;
        let forget = p.slots.lstm_b.start + h..p.slots.lstm_b.start + 2 * h;
        p.values[forget].fill(1.0);
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let seg = self.segments.iter().find(|s| s.name == name)?;
        Some(&self.values[seg.range.clone()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.segments.iter().find(|s| s.name == name)?;
        Some(&mut self.values[seg.range.clone()])
    }

    pub fn num_trainable(&self) -> usize {
        self.segments.iter().filter(|s| s.trainable).map(|s| s.range.len()).sum()
    }

    /// Indices of trainable values in storage order.
    pub fn trainable_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .filter(|s| s.trainable)
            .flat_map(|s| s.range.clone())
    }

    pub fn rest_pose(&self) -> HandPose {
        HandPose::from_slice(&self.values[self.slots.rest.clone()]).unwrap()
    }

    pub fn set_rest_pose(&mut self, pose: &HandPose) {
        self.values[self.slots.rest.clone()].copy_from_slice(pose.angles());
    }

    fn clamp_pose(&self, p: &mut [f64]) {
        let lo = &self.values[self.slots.lo.clone()];
        let hi = &self.values[self.slots.hi.clone()];
        for j in 0..p.len() {
            p[j] = p[j].clamp(lo[j], hi[j]);
        }
    }

    fn zeros_like(&self) -> Self {
        NetworkParams {
            config: self.config.clone(),
            values: vec![0.0; self.values.len()],
            segments: self.segments.clone(),
            slots: self.slots.clone(),
        }
    }

    fn w(&self, r: &Range<usize>) -> &[f64] {
        &self.values[r.clone()]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(PARAMS_MAGIC);
        w.u32(PARAMS_VERSION);
        for v in [
            c.in_channels,
            c.conv_channels[0],
            c.conv_channels[1],
            c.conv_kernel,
            c.conv_strides[0],
            c.conv_strides[1],
            c.tds_stages,
            c.tds_groups,
            c.tds_kernel,
            c.ff_hidden,
            c.lstm_hidden,
            c.mlp_hidden,
            c.out_dof,
            c.window,
        ] {
            w.u32(v as u32);
        }
        w.f64(c.velocity_scale);
        w.u64(self.values.len() as u64);
        w.f64s(&self.values);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.section("magic");
        if r.take(4)? != PARAMS_MAGIC {
            return Err(r.error_at(0, "not an emgpose-net/1 file"));
        }
        r.section("version");
        let at = r.offset();
        let version = r.u32()?;
        if version != PARAMS_VERSION {
            return Err(r.error_at(at, format!("unsupported version {version}")));
        }
        r.section("config");
        let mut f = [0usize; 14];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            in_channels: f[0],
            conv_channels: [f[1], f[2]],
            conv_kernel: f[3],
            conv_strides: [f[4], f[5]],
            tds_stages: f[6],
            tds_groups: f[7],
            tds_kernel: f[8],
            ff_hidden: f[9],
            lstm_hidden: f[10],
            mlp_hidden: f[11],
            out_dof: f[12],
            window: f[13],
            velocity_scale: r.f64()?,
        };
        config
            .validate()
            .map_err(|e| Error::format("config", 8, e.to_string()))?;
        let (segments, slots, len) = build_layout(&config);
        r.section("values");
        let at = r.offset();
        let n = r.u64()?;
        if n != len as u64 {
            return Err(r.error_at(at, format!("expected {len} values, header says {n}")));
        }
        let values = r.f64s(len)?;
        r.finish()?;
        Ok(NetworkParams {
            config,
            values,
            segments,
            slots,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Channel-major `(channels × len)` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeq {
    pub channels: usize,
    pub len: usize,
    pub values: Vec<f64>,
    /// Input samples per feature step.
    pub time_scale: f64,
}

impl FeatureSeq {
    pub fn new(channels: usize, len: usize, values: Vec<f64>, time_scale: f64) -> Result<Self> {
        if values.len() != channels * len {
            return Err(Error::validation(format!(
                "feature values: expected {} got {}",
                channels * len,
                values.len()
            )));
        }
        Ok(FeatureSeq {
            channels,
            len,
            values,
            time_scale,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.len..(c + 1) * self.len]
    }

    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.values[c * self.len + t]
    }

    /// Time steps `range` of every channel.
    pub fn columns(&self, range: Range<usize>) -> Result<FeatureSeq> {
        if range.is_empty() || range.end > self.len {
            return Err(Error::validation(format!(
                "columns {range:?} of length {}",
                self.len
            )));
        }
        let values = (0..self.channels)
            .flat_map(|c| self.channel(c)[range.clone()].iter().copied())
            .collect();
        FeatureSeq::new(self.channels, range.len(), values, self.time_scale)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Recurrent state threaded between decoder calls.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub lstm_hidden: Vec<f64>,
    pub lstm_cell: Vec<f64>,
    pub last_pose: HandPose,
}

impl DecoderState {
    /// Zero LSTM state, pose at the network's rest pose.
    pub fn fresh(params: &NetworkParams) -> Self {
        Self::starting_at(params, params.rest_pose())
    }

    pub fn starting_at(params: &NetworkParams, pose: HandPose) -> Self {
        let h = params.config.lstm_hidden;
        DecoderState {
            lstm_hidden: vec![0.0; h],
            lstm_cell: vec![0.0; h],
            last_pose: pose,
        }
    }
}

/// `(22 × T*)` joint trajectory, one pose per step.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub poses: Vec<HandPose>,
}

impl ActionChunk {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// `(rows, cols)` in the `(dof, time)` convention.
    pub fn shape(&self) -> (usize, usize) {
        (NUM_DOF, self.poses.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub chunk: ActionChunk,
    /// Raw per-step velocities `v_t` (rad/step) before integration.
    pub velocities: Vec<[f64; NUM_DOF]>,
    pub state: DecoderState,
}

// ---------------------------------------------------------------------------
// kernels

/// Causal strided conv: output `i` sees inputs ending at `(i + 1) * stride - 1`.
#[allow(clippy::too_many_arguments)]
fn conv1d(x: &[f64], cin: usize, tin: usize, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize) -> Vec<f64> {
    let tout = tin / stride;
    let mut y = vec![0.0; cout * tout];
    for o in 0..cout {
        let yo = &mut y[o * tout..(o + 1) * tout];
        yo.fill(b[o]);
        for c in 0..cin {
            let xc = &x[c * tin..(c + 1) * tin];
            for kk in 0..k {
                let wv = w[(o * cin + c) * k + kk];
                // input index for output i: (i+1)*stride - k + kk
                let shift = kk as isize + 1 - k as isize;
                for (i, yv) in yo.iter_mut().enumerate() {
                    let idx = ((i + 1) * stride) as isize - 1 + shift;
                    if idx >= 0 {
                        *yv += wv * xc[idx as usize];
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    x: &[f64],
    cin: usize,
    tin: usize,
    w: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let tout = tin / stride;
    for o in 0..cout {
        let dyo = &dy[o * tout..(o + 1) * tout];
        db[o] += dyo.iter().sum::<f64>();
        for c in 0..cin {
            let xc = &x[c * tin..(c + 1) * tin];
            for kk in 0..k {
                let wi = (o * cin + c) * k + kk;
                let shift = kk as isize + 1 - k as isize;
                let mut acc = 0.0;
                for (i, &g) in dyo.iter().enumerate() {
                    let idx = ((i + 1) * stride) as isize - 1 + shift;
                    if idx >= 0 {
                        acc += g * xc[idx as usize];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[c * tin + idx as usize] += g * w[wi];
                        }
                    }
                }
                dw[wi] += acc;
            }
        }
    }
}

/// Causal stride-1 conv mixing `groups` channels with weights shared across
/// the `sub` positions of each group: channel `g * sub + s`.
#[allow(clippy::too_many_arguments)]
fn tds_conv(x: &[f64], groups: usize, sub: usize, len: usize, w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut y = vec![0.0; groups * sub * len];
    for go in 0..groups {
        for s in 0..sub {
            let yo = &mut y[(go * sub + s) * len..(go * sub + s + 1) * len];
            yo.fill(b[go]);
            for gi in 0..groups {
                let xc = &x[(gi * sub + s) * len..(gi * sub + s + 1) * len];
                for kk in 0..k {
                    let wv = w[(go * groups + gi) * k + kk];
                    let lag = k - 1 - kk;
                    for t in lag..len {
                        yo[t] += wv * xc[t - lag];
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn tds_conv_backward(
    x: &[f64],
    groups: usize,
    sub: usize,
    len: usize,
    w: &[f64],
    k: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for go in 0..groups {
        for s in 0..sub {
            let dyo = &dy[(go * sub + s) * len..(go * sub + s + 1) * len];
            db[go] += dyo.iter().sum::<f64>();
            for gi in 0..groups {
                let xo = (gi * sub + s) * len;
                for kk in 0..k {
                    let wi = (go * groups + gi) * k + kk;
                    let lag = k - 1 - kk;
                    let mut acc = 0.0;
                    for t in lag..len {
                        acc += dyo[t] * x[xo + t - lag];
                        dx[xo + t - lag] += dyo[t] * w[wi];
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
}

/// Per-time-step linear map on a channel-major sequence.
fn linear_seq(x: &[f64], cin: usize, len: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut y = vec![0.0; cout * len];
    for o in 0..cout {
        let yo = &mut y[o * len..(o + 1) * len];
        yo.fill(b[o]);
        for i in 0..cin {
            let wv = w[o * cin + i];
            let xi = &x[i * len..(i + 1) * len];
            for (yv, xv) in yo.iter_mut().zip(xi) {
                *yv += wv * xv;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn linear_seq_backward(
    x: &[f64],
    cin: usize,
    len: usize,
    w: &[f64],
    cout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for o in 0..cout {
        let dyo = &dy[o * len..(o + 1) * len];
        db[o] += dyo.iter().sum::<f64>();
        for i in 0..cin {
            let xi = &x[i * len..(i + 1) * len];
            dw[o * cin + i] += dyo.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            let wv = w[o * cin + i];
            for (d, g) in dx[i * len..(i + 1) * len].iter_mut().zip(dyo) {
                *d += wv * g;
            }
        }
    }
}

struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Layer norm over channels at each time step. A step whose channels are all
/// equal normalises to exactly zero.
fn layer_norm(x: &[f64], c: usize, len: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let n = c as f64;
    let mut mean = vec![0.0; len];
    let mut constant = vec![true; len];
    for ch in 0..c {
        let xc = &x[ch * len..(ch + 1) * len];
        for t in 0..len {
            mean[t] += xc[t];
            constant[t] &= xc[t] == x[t];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for ch in 0..c {
        for t in 0..len {
            let d = x[ch * len + t] - mean[t];
            var[t] += d * d;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n + LN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; c * len];
    let mut y = vec![0.0; c * len];
    for ch in 0..c {
        for t in 0..len {
            let i = ch * len + t;
            let z = if constant[t] { 0.0 } else { (x[i] - mean[t]) * inv_std[t] };
            xhat[i] = z;
            y[i] = gain[ch] * z + bias[ch];
        }
    }
    (y, NormCache { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    c: usize,
    len: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = c as f64;
    let mut m1 = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    let mut dxhat = vec![0.0; c * len];
    for ch in 0..c {
        for t in 0..len {
            let i = ch * len + t;
            dgain[ch] += dy[i] * cache.xhat[i];
            dbias[ch] += dy[i];
            let g = dy[i] * gain[ch];
            dxhat[i] = g;
            m1[t] += g;
            m2[t] += g * cache.xhat[i];
        }
    }
    for ch in 0..c {
        for t in 0..len {
            let i = ch * len + t;
            dxhat[i] = cache.inv_std[t] * (dxhat[i] - m1[t] / n - cache.xhat[i] * m2[t] / n);
        }
    }
    dxhat
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Interpolation grid: for each output step, the left source index and weight
/// of the right neighbour.
fn resample_grid(from: usize, to: usize) -> Vec<(usize, f64)> {
    (0..to)
        .map(|t| {
            if to == 1 {
                return (0, 0.0);
            }
            let u = (t * (from - 1)) as f64 / (to - 1) as f64;
            let i = (u.floor() as usize).min(from - 2);
            (i, u - i as f64)
        })
        .collect()
}

fn resample_values(x: &[f64], channels: usize, from: usize, to: usize) -> Vec<f64> {
    let grid = resample_grid(from, to);
    let mut y = vec![0.0; channels * to];
    for c in 0..channels {
        let xc = &x[c * from..(c + 1) * from];
        for (t, &(i, f)) in grid.iter().enumerate() {
            y[c * to + t] = if f == 0.0 { xc[i] } else { (1.0 - f) * xc[i] + f * xc[i + 1] };
        }
    }
    y
}

fn resample_backward(dy: &[f64], channels: usize, from: usize, to: usize) -> Vec<f64> {
    let grid = resample_grid(from, to);
    let mut dx = vec![0.0; channels * from];
    for c in 0..channels {
        for (t, &(i, f)) in grid.iter().enumerate() {
            let g = dy[c * to + t];
            dx[c * from + i] += (1.0 - f) * g;
            if f != 0.0 {
                dx[c * from + i + 1] += f * g;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// forward passes with optional caches

struct ConvCache {
    input: Vec<f64>,
    tin: usize,
    pre: Vec<f64>,
    norm: NormCache,
}

struct TdsCache {
    input: Vec<f64>,
    conv_pre: Vec<f64>,
    norm1: NormCache,
    u: Vec<f64>,
    ff_pre: Vec<f64>,
    norm2: NormCache,
}

struct EncoderCache {
    conv: Vec<ConvCache>,
    tds: Vec<TdsCache>,
}

fn conv_block(p: &NetworkParams, i: usize, x: Vec<f64>, cin: usize, tin: usize) -> (Vec<f64>, ConvCache) {
    let cfg = &p.config;
    let s = &p.slots.conv[i];
    let cout = cfg.conv_channels[i];
    let pre = conv1d(&x, cin, tin, p.w(&s.w), p.w(&s.b), cout, cfg.conv_kernel, cfg.conv_strides[i]);
    let tout = tin / cfg.conv_strides[i];
    let (y, norm) = layer_norm(&relu(&pre), cout, tout, p.w(&s.gain), p.w(&s.bias));
    (
        y,
        ConvCache {
            input: x,
            tin,
            pre,
            norm,
        },
    )
}

fn tds_block(p: &NetworkParams, stage: usize, x: Vec<f64>, len: usize) -> (Vec<f64>, TdsCache) {
    let cfg = &p.config;
    let s = &p.slots.tds[stage];
    let c = FEAT_CHANNELS;
    let groups = cfg.tds_groups;
    let conv_pre = tds_conv(&x, groups, c / groups, len, p.w(&s.conv_w), p.w(&s.conv_b), cfg.tds_kernel);
    let z: Vec<f64> = x.iter().zip(&conv_pre).map(|(a, b)| a + b.max(0.0)).collect();
    let (u, norm1) = layer_norm(&z, c, len, p.w(&s.ln1_g), p.w(&s.ln1_b));
    let ff_pre = linear_seq(&u, c, len, p.w(&s.ff1_w), p.w(&s.ff1_b), cfg.ff_hidden);
    let f = linear_seq(&relu(&ff_pre), cfg.ff_hidden, len, p.w(&s.ff2_w), p.w(&s.ff2_b), c);
    let z2: Vec<f64> = u.iter().zip(&f).map(|(a, b)| a + b).collect();
    let (y, norm2) = layer_norm(&z2, c, len, p.w(&s.ln2_g), p.w(&s.ln2_b));
    (
        y,
        TdsCache {
            input: x,
            conv_pre,
            norm1,
            u,
            ff_pre,
            norm2,
        },
    )
}

fn check_emg(params: &NetworkParams, emg: &EmgWindow) -> Result<()> {
    params.config.check_len(emg.len())?;
    if !emg.values().iter().all(|v| v.is_finite()) {
        return Err(Error::validation("EMG window contains non-finite values"));
    }
    Ok(())
}

fn encode(params: &NetworkParams, emg: &EmgWindow) -> (FeatureSeq, EncoderCache) {
    let cfg = &params.config;
    let mut x = emg.values().to_vec();
    let mut cin = cfg.in_channels;
    let mut len = emg.len();
    let mut conv = Vec::new();
    for i in 0..2 {
        let (y, cache) = conv_block(params, i, x, cin, len);
        conv.push(cache);
        x = y;
        cin = cfg.conv_channels[i];
        len /= cfg.conv_strides[i];
    }
    let mut tds = Vec::new();
    for s in 0..cfg.tds_stages {
        let (y, cache) = tds_block(params, s, x, len);
        tds.push(cache);
        x = y;
    }
    let feats = FeatureSeq {
        channels: FEAT_CHANNELS,
        len,
        values: x,
        time_scale: cfg.downsample() as f64,
    };
    (feats, EncoderCache { conv, tds })
}

/// Conv blocks followed by TDS stages: `(8, T)` to `(32, T/4)`.
pub fn encoder_forward(params: &NetworkParams, emg: &EmgWindow) -> Result<FeatureSeq> {
    check_emg(params, emg)?;
    Ok(encode(params, emg).0)
}

/// One TDS stage: causal conv + ReLU + residual + norm, then
/// feed-forward + residual + norm. Shape preserving.
pub fn tds_stage_forward(params: &NetworkParams, stage: usize, x: &FeatureSeq) -> Result<FeatureSeq> {
    if stage >= params.config.tds_stages {
        return Err(Error::validation(format!("no TDS stage {stage}")));
    }
    if x.channels != FEAT_CHANNELS || x.values.len() != x.channels * x.len {
        return Err(Error::validation(format!(
            "TDS input must have {FEAT_CHANNELS} channels"
        )));
    }
    if !x.is_finite() {
        return Err(Error::validation("TDS input contains non-finite values"));
    }
    let (values, _) = tds_block(params, stage, x.values.clone(), x.len);
    Ok(FeatureSeq {
        values,
        ..x.clone()
    })
}

/// Linear interpolation onto `target_len` uniformly spaced points spanning
/// the same interval; both endpoints are kept exactly.
pub fn resample_linear(x: &FeatureSeq, target_len: usize) -> Result<FeatureSeq> {
    if target_len < 1 {
        return Err(Error::validation("resample target length must be at least 1"));
    }
    if x.len < 2 {
        return Err(Error::validation("resampling needs at least 2 input steps"));
    }
    Ok(FeatureSeq {
        channels: x.channels,
        len: target_len,
        values: resample_values(&x.values, x.channels, x.len, target_len),
        time_scale: x.time_scale * (x.len - 1) as f64 / (target_len.max(2) - 1) as f64,
    })
}

/// Everything the decoder computed, step by step, for the backward pass.
struct DecodeTrace {
    len: usize,
    xs: Vec<f64>,
    gates: Vec<f64>,
    cells: Vec<f64>,
    hiddens: Vec<f64>,
    tanh_c: Vec<f64>,
    mlp_pre: Vec<f64>,
    velocities: Vec<f64>,
    poses: Vec<f64>,
    /// 1 where the integration clamp left the joint free.
    free: Vec<f64>,
}

fn decode(params: &NetworkParams, feats: &[f64], len: usize, state: &DecoderState, clamp: bool) -> DecodeTrace {
    let cfg = &params.config;
    let (c, d, h, m) = (FEAT_CHANNELS, cfg.out_dof, cfg.lstm_hidden, cfg.mlp_hidden);
    let nx = c + d;
    let wx = params.w(&params.slots.lstm_wx);
    let wh = params.w(&params.slots.lstm_wh);
    let bl = params.w(&params.slots.lstm_b);
    let w1 = params.w(&params.slots.mlp1_w);
    let b1 = params.w(&params.slots.mlp1_b);
    let w2 = params.w(&params.slots.mlp2_w);
    let b2 = params.w(&params.slots.mlp2_b);
    let rest = params.w(&params.slots.rest);

    let mut tr = DecodeTrace {
        len,
        xs: vec![0.0; len * nx],
        gates: vec![0.0; len * 4 * h],
        cells: vec![0.0; (len + 1) * h],
        hiddens: vec![0.0; (len + 1) * h],
        tanh_c: vec![0.0; len * h],
        mlp_pre: vec![0.0; len * m],
        velocities: vec![0.0; len * d],
        poses: vec![0.0; (len + 1) * d],
        free: vec![1.0; len * d],
    };
    tr.cells[..h].copy_from_slice(&state.lstm_cell);
    tr.hiddens[..h].copy_from_slice(&state.lstm_hidden);
    tr.poses[..d].copy_from_slice(state.last_pose.angles());

    let mut pre = vec![0.0; 4 * h];
    let mut mh = vec![0.0; m];
    for t in 0..len {
        let x = &mut tr.xs[t * nx..(t + 1) * nx];
        for ch in 0..c {
            x[ch] = feats[ch * len + t];
        }
        for j in 0..d {
            x[c + j] = tr.poses[t * d + j] - rest[j];
        }
        let x = &tr.xs[t * nx..(t + 1) * nx];
        let hp = &tr.hiddens[t * h..(t + 1) * h];
        for r in 0..4 * h {
            let rx = &wx[r * nx..(r + 1) * nx];
            let rh = &wh[r * h..(r + 1) * h];
            pre[r] = bl[r]
                + rx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                + rh.iter().zip(hp).map(|(a, b)| a * b).sum::<f64>();
        }
        let g = &mut tr.gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            g[k] = sigmoid(pre[k]);
            g[h + k] = sigmoid(pre[h + k]);
            g[2 * h + k] = pre[2 * h + k].tanh();
            g[3 * h + k] = sigmoid(pre[3 * h + k]);
        }
        for k in 0..h {
            let cell = g[h + k] * tr.cells[t * h + k] + g[k] * g[2 * h + k];
            let tc = cell.tanh();
            tr.cells[(t + 1) * h + k] = cell;
            tr.tanh_c[t * h + k] = tc;
            tr.hiddens[(t + 1) * h + k] = g[3 * h + k] * tc;
        }
        let hn = &tr.hiddens[(t + 1) * h..(t + 2) * h];
        for r in 0..m {
            let z = b1[r] + w1[r * h..(r + 1) * h].iter().zip(hn).map(|(a, b)| a * b).sum::<f64>();
            tr.mlp_pre[t * m + r] = z;
            mh[r] = z.max(0.0);
        }
        for j in 0..d {
            let v = cfg.velocity_scale * (b2[j] + w2[j * m..(j + 1) * m].iter().zip(&mh).map(|(a, b)| a * b).sum::<f64>());
            tr.velocities[t * d + j] = v;
            tr.poses[(t + 1) * d + j] = tr.poses[t * d + j] + v;
        }
        if clamp {
            let next = &mut tr.poses[(t + 1) * d..(t + 2) * d];
            let unclamped: Vec<f64> = next.to_vec();
            params.clamp_pose(next);
            for j in 0..d {
                if next[j] != unclamped[j] {
                    tr.free[t * d + j] = 0.0;
                }
            }
        }
    }
    tr
}

fn trace_output(params: &NetworkParams, tr: &DecodeTrace) -> DecoderOutput {
    let (d, h) = (params.config.out_dof, params.config.lstm_hidden);
    let len = tr.len;
    let poses = (1..=len)
        .map(|t| HandPose::from_slice(&tr.poses[t * d..(t + 1) * d]).unwrap())
        .collect();
    let velocities = (0..len)
        .map(|t| std::array::from_fn(|j| tr.velocities[t * d + j]))
        .collect();
    DecoderOutput {
        chunk: ActionChunk { poses },
        velocities,
        state: DecoderState {
            lstm_hidden: tr.hiddens[len * h..].to_vec(),
            lstm_cell: tr.cells[len * h..].to_vec(),
            last_pose: HandPose::from_slice(&tr.poses[len * d..]).unwrap(),
        },
    }
}

fn check_state(params: &NetworkParams, state: &DecoderState) -> Result<()> {
    let h = params.config.lstm_hidden;
    if state.lstm_hidden.len() != h || state.lstm_cell.len() != h {
        return Err(Error::validation(format!("decoder state must have hidden size {h}")));
    }
    let finite = state.lstm_hidden.iter().chain(&state.lstm_cell).all(|v| v.is_finite());
    if !finite || !state.last_pose.is_finite() {
        return Err(Error::validation("decoder state contains non-finite values"));
    }
    Ok(())
}

/// Runs the LSTM + MLP over every feature step and integrates the velocities
/// from `state.last_pose`, clamping each pose into the joint limits.
pub fn decoder_forward(params: &NetworkParams, feats: &FeatureSeq, state: &DecoderState) -> Result<DecoderOutput> {
    decoder_forward_with(params, feats, state, true)
}

/// [`decoder_forward`] with the integration clamp optionally disabled.
pub fn decoder_forward_with(
    params: &NetworkParams,
    feats: &FeatureSeq,
    state: &DecoderState,
    clamp: bool,
) -> Result<DecoderOutput> {
    if feats.channels != FEAT_CHANNELS || feats.values.len() != feats.channels * feats.len {
        return Err(Error::validation(format!("decoder expects {FEAT_CHANNELS} feature channels")));
    }
    if feats.len == 0 || !feats.is_finite() {
        return Err(Error::validation("decoder features must be non-empty and finite"));
    }
    check_state(params, state)?;
    let tr = decode(params, &feats.values, feats.len, state, clamp);
    Ok(trace_output(params, &tr))
}

/// Encoder, resample back to the input length, decoder.
pub fn model_forward(params: &NetworkParams, emg: &EmgWindow, state: &DecoderState) -> Result<(ActionChunk, DecoderState)> {
    let feats = encoder_forward(params, emg)?;
    let feats = resample_linear(&feats, emg.len())?;
    let out = decoder_forward(params, &feats, state)?;
    Ok((out.chunk, out.state))
}

// ---------------------------------------------------------------------------
// loss and gradients

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the pose MSE term.
    pub lambda_pose: f64,
    /// Clamp integrated poses to the joint limits (disable for gradient checks).
    pub clamp_poses: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_pose: 1.0,
            clamp_poses: true,
        }
    }
}

fn check_sample(params: &NetworkParams, s: &WindowSample) -> Result<()> {
    check_emg(params, &s.emg)?;
    if s.theta_gt.len() != s.emg.len() {
        return Err(Error::validation(format!(
            "window has {} EMG samples but {} poses",
            s.emg.len(),
            s.theta_gt.len()
        )));
    }
    Ok(())
}

/// Forward pass of one sample; returns the trace and loss.
fn sample_forward(
    params: &NetworkParams,
    s: &WindowSample,
    loss: &LossConfig,
) -> (f64, EncoderCache, FeatureSeq, DecodeTrace, Vec<[f64; NUM_DOF]>) {
    let (enc, cache) = encode(params, &s.emg);
    let t = s.emg.len();
    let feats = resample_linear(&enc, t).expect("checked length");
    let state = DecoderState::starting_at(params, s.theta0);
    let tr = decode(params, &feats.values, t, &state, loss.clamp_poses);
    let v_gt = velocity_labels(&s.theta_gt, &s.theta0);
    let d = NUM_DOF;
    let scale = 1.0 / (d * t) as f64;
    let mut lv = 0.0;
    let mut lp = 0.0;
    for step in 0..t {
        for j in 0..d {
            let ev = tr.velocities[step * d + j] - v_gt[step][j];
            let ep = tr.poses[(step + 1) * d + j] - s.theta_gt[step][j];
            lv += ev * ev;
            lp += ep * ep;
        }
    }
    let total = scale * (lv + loss.lambda_pose * lp);
    (total, cache, enc, tr, v_gt)
}

/// Loss of a single window (no gradient).
pub fn sample_loss(params: &NetworkParams, s: &WindowSample, loss: &LossConfig) -> Result<f64> {
    check_sample(params, s)?;
    Ok(sample_forward(params, s, loss).0)
}

/// Loss and gradient of one sample; gradient accumulated into `g`.
fn sample_grad(params: &NetworkParams, s: &WindowSample, loss: &LossConfig, g: &mut NetworkParams) -> f64 {
    let (total, enc_cache, enc, tr, v_gt) = sample_forward(params, s, loss);
    let cfg = &params.config;
    let (c, d, h, m) = (FEAT_CHANNELS, cfg.out_dof, cfg.lstm_hidden, cfg.mlp_hidden);
    let nx = c + d;
    let t_len = tr.len;
    let scale = 2.0 / (d * t_len) as f64;
    let sl = &params.slots;

    let wx = params.w(&sl.lstm_wx);
    let wh = params.w(&sl.lstm_wh);
    let w1 = params.w(&sl.mlp1_w);
    let w2 = params.w(&sl.mlp2_w);

    let mut d_wx = vec![0.0; wx.len()];
    let mut d_wh = vec![0.0; wh.len()];
    let mut d_bl = vec![0.0; 4 * h];
    let mut d_w1 = vec![0.0; w1.len()];
    let mut d_b1 = vec![0.0; m];
    let mut d_w2 = vec![0.0; w2.len()];
    let mut d_b2 = vec![0.0; d];
    let mut d_feats = vec![0.0; c * t_len];

    // gradient flowing into p_t and h_t, c_t from later steps
    let mut dp_next = vec![0.0; d];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dv = vec![0.0; d];
    let mut dmh = vec![0.0; m];
    let mut da = vec![0.0; 4 * h];

    for t in (0..t_len).rev() {
        // p_t: loss term plus whatever later steps sent back
        for j in 0..d {
            let ep = tr.poses[(t + 1) * d + j] - s.theta_gt[t][j];
            let dp = dp_next[j] + scale * loss.lambda_pose * ep;
            // through the clamp into the unclamped sum p_{t-1} + v_t
            let du = dp * tr.free[t * d + j];
            let ev = tr.velocities[t * d + j] - v_gt[t][j];
            dv[j] = du + scale * ev;
            dp_next[j] = du;
        }
        // MLP head
        let hn = &tr.hiddens[(t + 1) * h..(t + 2) * h];
        let mpre = &tr.mlp_pre[t * m..(t + 1) * m];
        dmh.fill(0.0);
        for j in 0..d {
            dv[j] *= cfg.velocity_scale;
            d_b2[j] += dv[j];
            for r in 0..m {
                d_w2[j * m + r] += dv[j] * mpre[r].max(0.0);
                dmh[r] += dv[j] * w2[j * m + r];
            }
        }
        let mut dh = dh_next.clone();
        for r in 0..m {
            if mpre[r] <= 0.0 {
                continue;
            }
            let gz = dmh[r];
            d_b1[r] += gz;
            for k in 0..h {
                d_w1[r * h + k] += gz * hn[k];
                dh[k] += gz * w1[r * h + k];
            }
        }
        // LSTM cell
        let gt = &tr.gates[t * 4 * h..(t + 1) * 4 * h];
        let c_prev = &tr.cells[t * h..(t + 1) * h];
        let tc = &tr.tanh_c[t * h..(t + 1) * h];
        for k in 0..h {
            let (i, f, gg, o) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
            let d_o = dh[k] * tc[k];
            let dc = dh[k] * o * (1.0 - tc[k] * tc[k]) + dc_next[k];
            da[k] = dc * gg * i * (1.0 - i);
            da[h + k] = dc * c_prev[k] * f * (1.0 - f);
            da[2 * h + k] = dc * i * (1.0 - gg * gg);
            da[3 * h + k] = d_o * o * (1.0 - o);
            dc_next[k] = dc * f;
        }
        let x = &tr.xs[t * nx..(t + 1) * nx];
        let hp = &tr.hiddens[t * h..(t + 1) * h];
        dh_next.fill(0.0);
        let mut dx = vec![0.0; nx];
        for r in 0..4 * h {
            let a = da[r];
            if a == 0.0 {
                continue;
            }
            d_bl[r] += a;
            let rx = &wx[r * nx..(r + 1) * nx];
            for (q, (dw, w)) in d_wx[r * nx..(r + 1) * nx].iter_mut().zip(rx).enumerate() {
                *dw += a * x[q];
                dx[q] += a * w;
            }
            let rh = &wh[r * h..(r + 1) * h];
            for (k, (dw, w)) in d_wh[r * h..(r + 1) * h].iter_mut().zip(rh).enumerate() {
                *dw += a * hp[k];
                dh_next[k] += a * w;
            }
        }
        for ch in 0..c {
            d_feats[ch * t_len + t] = dx[ch];
        }
        for j in 0..d {
            dp_next[j] += dx[c + j];
        }
    }

    let acc = |g: &mut NetworkParams, r: &Range<usize>, src: &[f64]| {
        for (a, b) in g.values[r.clone()].iter_mut().zip(src) {
            *a += b;
        }
    };
    acc(g, &sl.lstm_wx, &d_wx);
    acc(g, &sl.lstm_wh, &d_wh);
    acc(g, &sl.lstm_b, &d_bl);
    acc(g, &sl.mlp1_w, &d_w1);
    acc(g, &sl.mlp1_b, &d_b1);
    acc(g, &sl.mlp2_w, &d_w2);
    acc(g, &sl.mlp2_b, &d_b2);

    // resample, TDS stages, conv blocks
    let mut dy = resample_backward(&d_feats, c, enc.len, t_len);
    let len = enc.len;
    for stage in (0..cfg.tds_stages).rev() {
        dy = tds_backward(params, stage, &enc_cache.tds[stage], len, &dy, g);
    }
    for i in (0..2).rev() {
        dy = conv_backward(params, i, &enc_cache.conv[i], &dy, g, i > 0);
    }
    total
}

fn tds_backward(p: &NetworkParams, stage: usize, cache: &TdsCache, len: usize, dout: &[f64], g: &mut NetworkParams) -> Vec<f64> {
    let cfg = &p.config;
    let s = &p.slots.tds[stage];
    let c = FEAT_CHANNELS;
    let f = cfg.ff_hidden;
    let groups = cfg.tds_groups;

    let mut dg2 = vec![0.0; c];
    let mut db2n = vec![0.0; c];
    let dz2 = layer_norm_backward(dout, &cache.norm2, c, len, p.w(&s.ln2_g), &mut dg2, &mut db2n);
    let mut du = dz2.clone();
    let hidden = relu(&cache.ff_pre);
    let mut dw2 = vec![0.0; c * f];
    let mut dbf2 = vec![0.0; c];
    let mut dhid = vec![0.0; f * len];
    linear_seq_backward(&hidden, f, len, p.w(&s.ff2_w), c, &dz2, &mut dw2, &mut dbf2, &mut dhid);
    for (d, z) in dhid.iter_mut().zip(&cache.ff_pre) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    let mut dw1 = vec![0.0; f * c];
    let mut dbf1 = vec![0.0; f];
    linear_seq_backward(&cache.u, c, len, p.w(&s.ff1_w), f, &dhid, &mut dw1, &mut dbf1, &mut du);
    let mut dg1 = vec![0.0; c];
    let mut db1n = vec![0.0; c];
    let dz = layer_norm_backward(&du, &cache.norm1, c, len, p.w(&s.ln1_g), &mut dg1, &mut db1n);
    let mut dx = dz.clone();
    let dconv: Vec<f64> = dz
        .iter()
        .zip(&cache.conv_pre)
        .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
        .collect();
    let mut dcw = vec![0.0; groups * groups * cfg.tds_kernel];
    let mut dcb = vec![0.0; groups];
    tds_conv_backward(
        &cache.input,
        groups,
        c / groups,
        len,
        p.w(&s.conv_w),
        cfg.tds_kernel,
        &dconv,
        &mut dcw,
        &mut dcb,
        &mut dx,
    );
    for (r, src) in [
        (&s.conv_w, &dcw),
        (&s.conv_b, &dcb),
        (&s.ln1_g, &dg1),
        (&s.ln1_b, &db1n),
        (&s.ff1_w, &dw1),
        (&s.ff1_b, &dbf1),
        (&s.ff2_w, &dw2),
        (&s.ff2_b, &dbf2),
        (&s.ln2_g, &dg2),
        (&s.ln2_b, &db2n),
    ] {
        for (a, b) in g.values[r.clone()].iter_mut().zip(src.iter()) {
            *a += b;
        }
    }
    dx
}

fn conv_backward(p: &NetworkParams, i: usize, cache: &ConvCache, dout: &[f64], g: &mut NetworkParams, need_dx: bool) -> Vec<f64> {
    let cfg = &p.config;
    let s = &p.slots.conv[i];
    let cout = cfg.conv_channels[i];
    let cin = if i == 0 { cfg.in_channels } else { cfg.conv_channels[i - 1] };
    let tout = cache.tin / cfg.conv_strides[i];
    let mut dgain = vec![0.0; cout];
    let mut dbias = vec![0.0; cout];
    let mut da = layer_norm_backward(dout, &cache.norm, cout, tout, p.w(&s.gain), &mut dgain, &mut dbias);
    for (d, z) in da.iter_mut().zip(&cache.pre) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    let mut dw = vec![0.0; s.w.len()];
    let mut db = vec![0.0; cout];
    let mut dx = if need_dx { vec![0.0; cin * cache.tin] } else { Vec::new() };
    conv1d_backward(
        &cache.input,
        cin,
        cache.tin,
        p.w(&s.w),
        cout,
        cfg.conv_kernel,
        cfg.conv_strides[i],
        &da,
        &mut dw,
        &mut db,
        need_dx.then_some(dx.as_mut_slice()),
    );
    for (r, src) in [(&s.w, &dw), (&s.b, &db), (&s.gain, &dgain), (&s.bias, &dbias)] {
        for (a, b) in g.values[r.clone()].iter_mut().zip(src.iter()) {
            *a += b;
        }
    }
    dx
}

fn checked_loss(loss: f64, index: usize) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Training {
            sample: index,
            message: format!("non-finite loss {loss}"),
        });
    }
    if loss > DIVERGENCE_LOSS {
        return Err(Error::Training {
            sample: index,
            message: format!("loss {loss:.3e} exceeds divergence threshold {DIVERGENCE_LOSS:.0e}"),
        });
    }
    Ok(loss)
}

/// Mean loss over `batch` and its gradient with respect to every parameter.
/// Frozen segments get zero gradient. Per-sample work runs in parallel and is
/// summed in index order, so the result does not depend on the thread count.
pub fn loss_and_grad(params: &NetworkParams, batch: &[WindowSample], loss: &LossConfig) -> Result<(f64, NetworkParams)> {
    loss_and_grad_indexed(params, batch, loss, |i| i)
}

fn loss_and_grad_indexed(
    params: &NetworkParams,
    batch: &[WindowSample],
    loss: &LossConfig,
    index_of: impl Fn(usize) -> usize + Sync,
) -> Result<(f64, NetworkParams)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    for s in batch {
        check_sample(params, s)?;
    }
    let parts: Vec<(f64, NetworkParams)> = batch
        .par_iter()
        .map(|s| {
            let mut g = params.zeros_like();
            let l = sample_grad(params, s, loss, &mut g);
            (l, g)
        })
        .collect();
    let n = batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    for (i, (l, g)) in parts.iter().enumerate() {
        total += checked_loss(*l, index_of(i))?;
        for (a, b) in grad.values.iter_mut().zip(&g.values) {
            *a += b;
        }
    }
    grad.values.iter_mut().for_each(|v| *v /= n);
    for seg in &params.segments {
        if !seg.trainable {
            grad.values[seg.range.clone()].fill(0.0);
        }
    }
    Ok((total / n, grad))
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Flip the sign of each EMG channel of each training window with
    /// probability 1/2. Envelopes survive; carrier fine structure does not.
    pub sign_flip: bool,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            clip_norm: 5.0,
            sign_flip: true,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::validation("learning_rate must be >= 0 and clip_norm > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    /// `None` without a validation set.
    pub val: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub curve: Vec<EpochLoss>,
}

/// Mean loss over a set of windows.
pub fn evaluate_loss(params: &NetworkParams, set: &[WindowSample], loss: &LossConfig) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::validation("empty evaluation set"));
    }
    for s in set {
        check_sample(params, s)?;
    }
    let losses: Vec<f64> = set.par_iter().map(|s| sample_forward(params, s, loss).0).collect();
    let mut total = 0.0;
    for (i, l) in losses.into_iter().enumerate() {
        total += checked_loss(l, i)?;
    }
    Ok(total / set.len() as f64)
}

/// Adam over shuffled mini-batches. `on_epoch` is called after every epoch.
pub fn train_with(
    params: &NetworkParams,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss, &NetworkParams),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    let mut p = params.clone();
    let n = p.values.len();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut step = 0i32;
    let trainable: Vec<usize> = p.trainable_indices().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Fisher-Yates with the seeded RNG
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<WindowSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            if cfg.sign_flip {
                for w in &mut batch {
                    let len = w.emg.len();
                    for c in 0..EMG_CHANNELS {
                        if rng.random_bool(0.5) {
                            w.emg.values_mut()[c * len..(c + 1) * len].iter_mut().for_each(|v| *v = -*v);
                        }
                    }
                }
            }
            let (l, g) = loss_and_grad_indexed(&p, &batch, &cfg.loss, |k| chunk[k])?;
            epoch_loss += l * chunk.len() as f64;
            if cfg.learning_rate == 0.0 {
                continue;
            }
            let norm = trainable.iter().map(|&i| g.values[i] * g.values[i]).sum::<f64>().sqrt();
            let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for &i in &trainable {
                let gi = g.values[i] * clip;
                m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * gi;
                m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * gi * gi;
                p.values[i] -= cfg.learning_rate
                    * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + cfg.adam_eps);
            }
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(&p, val_set, &cfg.loss)?)
        };
        let entry = EpochLoss {
            epoch,
            train: epoch_loss / train_set.len() as f64,
            val,
        };
        on_epoch(&entry, &p);
        curve.push(entry);
    }
    Ok(TrainOutcome { params: p, curve })
}

pub fn train(
    params: &NetworkParams,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(params, train_set, val_set, cfg, |_, _| {})
}
