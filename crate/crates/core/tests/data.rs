use emgpose::data::{
    gen_synth, integrate_velocities, make_windows, synchronize, velocity_labels, window_count, EmgFrame, Recording,
    RecordingMeta, SynthConfig, TaskSegment,
};
use emgpose::{Error, HandPose, KinematicModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> KinematicModel {
    KinematicModel::canonical()
}

fn pose_of(v: f64) -> HandPose {
    HandPose(std::array::from_fn(|j| v + 0.01 * j as f64))
}

fn frame_of(v: f64) -> EmgFrame {
    std::array::from_fn(|c| (v + 0.1 * c as f64).sin())
}

/// EMG every 2 ms, poses at the given timestamps with `pose(t) = f(t)`.
fn rec(n_emg: usize, pose_t: &[u64], f: impl Fn(u64) -> HandPose) -> Recording {
    let emg_t_us: Vec<u64> = (0..n_emg as u64).map(|i| i * 2000).collect();
    Recording {
        emg_rate: 500.0,
        pose_rate: 120.0,
        emg: emg_t_us.iter().map(|&t| frame_of(t as f64 * 1e-3)).collect(),
        emg_t_us,
        pose_t_us: pose_t.to_vec(),
        poses: pose_t.iter().map(|&t| f(t)).collect(),
        meta: RecordingMeta::default(),
    }
}

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        duration_s: 2.0,
        ..Default::default()
    }
}

// ---------------------------------------------------------------------------
// synchronisation

#[test]
fn sync_on_shared_timestamps_is_identity() {
    let t: Vec<u64> = (0..50).map(|i| i * 2000).collect();
    let r = rec(50, &t, |t| pose_of(t as f64 * 1e-5));
    let s = synchronize(&r).unwrap();
    assert_eq!(s.poses, r.poses);
    assert_eq!(s.emg, r.emg);
    assert_eq!(s.meta.truncated_samples, 0);
    assert!(s.is_synchronized());
}

#[test]
fn sync_reproduces_a_ramp() {
    // poses every 8333 us on a linear ramp; interpolation must be exact
    let t: Vec<u64> = (0..13).map(|i| i * 8333).collect();
    let ramp = |t: u64| pose_of(t as f64 * 1e-6);
    let r = rec(60, &t, ramp);
    let s = synchronize(&r).unwrap();
    let last = 12 * 8333;
    let kept = (0..60u64).filter(|i| i * 2000 <= last).count();
    assert_eq!(s.emg.len(), kept);
    assert_eq!(s.meta.truncated_samples, (60 - kept) as u64);
    for (t, p) in s.emg_t_us.iter().zip(&s.poses) {
        assert!(p.max_abs_diff(&ramp(*t)) < 1e-12, "t {t}");
    }
}

#[test]
fn sync_holds_a_constant() {
    let t = [0, 7000, 30000, 99000];
    let s = synchronize(&rec(50, &t, |_| pose_of(0.3))).unwrap();
    assert!(s.poses.iter().all(|p| *p == pose_of(0.3)));
}

#[test]
fn sync_drops_samples_outside_the_pose_span() {
    let s = synchronize(&rec(50, &[10_000, 20_000], |t| pose_of(t as f64 * 1e-6))).unwrap();
    assert_eq!(s.emg_t_us.first(), Some(&10_000));
    assert_eq!(s.emg_t_us.last(), Some(&20_000));
    assert_eq!(s.emg.len(), 6);
    assert_eq!(s.meta.truncated_samples, 44);
    assert!(synchronize(&rec(10, &[], |_| pose_of(0.0))).is_err());
}

#[test]
fn sync_is_idempotent() {
    let r = gen_synth(&small_synth(3), &model()).unwrap();
    let once = synchronize(&r).unwrap();
    assert_eq!(synchronize(&once).unwrap(), once);
}

// ---------------------------------------------------------------------------
// windows

#[test]
fn window_count_examples() {
    assert_eq!(window_count(1000, 400, 20), 31);
    assert_eq!(window_count(400, 400, 20), 1);
    assert_eq!(window_count(399, 400, 20), 0);
    assert_eq!(window_count(10, 0, 1), 0);
    assert_eq!(window_count(10, 1, 0), 0);
}

#[test]
fn window_count_matches_enumeration() {
    for n in 0..=50 {
        for w in 1..=n + 1 {
            for e in 1..=12 {
                let brute = (0..n).step_by(e).filter(|s| s + w <= n).count();
                assert_eq!(window_count(n, w, e), brute, "n {n} w {w} e {e}");
            }
        }
    }
}

#[test]
fn windows_slice_the_recording() {
    let t: Vec<u64> = (0..100).map(|i| i * 2000).collect();
    let r = rec(100, &t, |t| pose_of(t as f64 * 1e-6));
    let rest = pose_of(-1.0);
    let ws = make_windows(&r, 40, 15, &rest).unwrap();
    assert_eq!(ws.len(), window_count(100, 40, 15));
    assert_eq!(ws[0].theta0, rest);
    for w in &ws {
        assert_eq!(w.emg.len(), 40);
        assert_eq!(w.theta_gt[..], r.poses[w.start..w.start + 40]);
        assert_eq!(w.emg.frame(0), r.emg[w.start]);
        assert_eq!(w.emg.frame(39), r.emg[w.start + 39]);
        if w.start > 0 {
            assert_eq!(w.theta0, r.poses[w.start - 1]);
        }
    }
    // consecutive windows overlap by W - E samples
    for pair in ws.windows(2) {
        assert_eq!(pair[1].start - pair[0].start, 15);
        assert_eq!(pair[0].theta_gt[15..], pair[1].theta_gt[..25]);
    }
    assert!(make_windows(&r, 101, 1, &rest).is_err());
    let unsynced = rec(100, &[0, 198_000], |_| rest);
    assert!(make_windows(&unsynced, 10, 1, &rest).is_err());
}

#[test]
fn velocity_labels_of_a_ramp_are_constant() {
    let theta0 = pose_of(0.0);
    let gt: Vec<HandPose> = (1..=10).map(|i| pose_of(0.05 * i as f64)).collect();
    for v in velocity_labels(&gt, &theta0) {
        assert!(v.iter().all(|x| (x - 0.05).abs() < 1e-12));
    }
}

proptest! {
    #[test]
    fn velocity_labels_invert(seed in 0u64..10_000, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta0 = HandPose(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        let gt: Vec<HandPose> = (0..n).map(|_| HandPose(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))).collect();
        let back = integrate_velocities(&velocity_labels(&gt, &theta0), &theta0);
        for (a, b) in back.iter().zip(&gt) {
            prop_assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn split_partitions_both_streams(fraction in 0.0f64..=1.0) {
        let t: Vec<u64> = (0..30).map(|i| i * 6000).collect();
        let r = rec(90, &t, |t| pose_of(t as f64 * 1e-6));
        let (a, b) = r.split(fraction).unwrap();
        prop_assert_eq!(a.emg.len() + b.emg.len(), 90);
        prop_assert_eq!(a.poses.len() + b.poses.len(), 30);
        if let (Some(x), Some(y)) = (a.emg_t_us.last(), b.pose_t_us.first()) {
            prop_assert!(x < y);
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic data

#[test]
fn synth_is_deterministic_per_seed() {
    let m = model();
    let a = gen_synth(&small_synth(5), &m).unwrap();
    assert_eq!(a, gen_synth(&small_synth(5), &m).unwrap());
    assert_eq!(a.to_bytes(), gen_synth(&small_synth(5), &m).unwrap().to_bytes());
    assert_ne!(a.emg, gen_synth(&small_synth(6), &m).unwrap().emg);
}

#[test]
fn synth_respects_rates_bounds_and_limits() {
    let m = model();
    let r = gen_synth(&small_synth(7), &m).unwrap();
    assert_eq!(r.emg.len(), 1000);
    assert_eq!(r.poses.len(), 241);
    assert_eq!(r.emg_t_us[1], 2000);
    assert_eq!(*r.pose_t_us.last().unwrap(), 2_000_000);
    r.validate_for(&m).unwrap();
    assert_eq!(r.emg.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())), 1.0);
    assert!(r.poses.iter().all(|p| m.collision_check(p).free));
    let labels: Vec<&str> = r.meta.segments.iter().map(|s| s.label.as_str()).collect();
    assert_eq!(labels, ["power_grasp", "precision_pinch", "in_hand_rotation"]);
    assert_eq!(r.task_at(0), Some("power_grasp"));
    assert_eq!(r.task_at(1_999_999), Some("in_hand_rotation"));
}

#[test]
fn zero_activation_gives_a_still_hand() {
    let m = model();
    let cfg = SynthConfig {
        activation_gain: 0.0,
        ..small_synth(9)
    };
    let r = gen_synth(&cfg, &m).unwrap();
    let mid = m.mid_pose();
    assert!(m.collision_check(&mid).free);
    assert!(r.poses.iter().all(|p| *p == mid));
    // what is left on the channels is sensor noise
    let mean = r.emg.iter().flatten().sum::<f64>() / 8000.0;
    assert!(mean.abs() < 0.05);
}

#[test]
fn synth_config_is_checked() {
    let m = model();
    for bad in [
        SynthConfig { n_synergies: 0, ..small_synth(0) },
        SynthConfig { carrier_band: [300.0, 400.0], ..small_synth(0) },
        SynthConfig { synergy_to_pose: Some(vec![vec![0.0; 3]; 22]), ..small_synth(0) },
        SynthConfig { tasks: vec![], ..small_synth(0) },
        SynthConfig { duration_s: 0.0, ..small_synth(0) },
    ] {
        assert!(matches!(gen_synth(&bad, &m), Err(Error::Validation(_))));
    }
}

// ---------------------------------------------------------------------------
// file formats

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        self.at += n;
        &self.b[self.at - n..self.at]
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
    fn f64(&mut self) -> f64 {
        f64::from_bits(self.u64())
    }
    fn str(&mut self) -> String {
        let n = self.u32() as usize;
        String::from_utf8(self.take(n).to_vec()).unwrap()
    }
}

type Parsed = (f64, f64, Vec<u64>, Vec<EmgFrame>, Vec<u64>, Vec<HandPose>, Vec<String>);

/// Byte-level reader written from the documented layout, independent of the
/// library's codec.
fn parse_eprc(b: &[u8]) -> Parsed {
    let mut c = Cursor { b, at: 0 };
    assert_eq!(c.take(4), b"EPRC");
    assert_eq!(c.u32(), 1);
    let (emg_rate, pose_rate) = (c.f64(), c.f64());
    let (n_emg, n_pose) = (c.u64() as usize, c.u64() as usize);
    let mut strs = vec![c.str(), c.str(), c.str()];
    c.u64();
    for _ in 0..c.u32() {
        strs.push(c.str());
        c.u64();
        c.u64();
    }
    let emg_t = (0..n_emg).map(|_| c.u64()).collect();
    let emg = (0..n_emg).map(|_| std::array::from_fn(|_| c.f64())).collect();
    let pose_t = (0..n_pose).map(|_| c.u64()).collect();
    let poses = (0..n_pose).map(|_| HandPose(std::array::from_fn(|_| c.f64()))).collect();
    assert_eq!(c.at, b.len());
    (emg_rate, pose_rate, emg_t, emg, pose_t, poses, strs)
}

fn labelled(mut r: Recording) -> Recording {
    r.meta = RecordingMeta {
        subject: "s01".into(),
        session: "morning".into(),
        task: "pinch".into(),
        truncated_samples: 4,
        segments: vec![TaskSegment { label: "pinch".into(), start_us: 0, end_us: 40_000 }],
    };
    r
}

#[test]
fn eprc_matches_an_independent_parser() {
    let t: Vec<u64> = (0..7).map(|i| i * 8333).collect();
    let r = labelled(rec(25, &t, |t| pose_of(t as f64 * 1e-6)));
    let bytes = r.to_bytes();
    let (er, pr, et, e, pt, p, strs) = parse_eprc(&bytes);
    assert_eq!((er, pr), (500.0, 120.0));
    assert_eq!((et, e, pt, p), (r.emg_t_us.clone(), r.emg.clone(), r.pose_t_us.clone(), r.poses.clone()));
    assert_eq!(strs, ["s01", "morning", "pinch", "pinch"]);
}

#[test]
fn eprc_round_trips_and_rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.eprc");
    let t: Vec<u64> = (0..7).map(|i| i * 8333).collect();
    let r = labelled(rec(25, &t, |t| pose_of(t as f64 * 1e-6)));
    r.save(&path).unwrap();
    let back = Recording::load(&path).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    let bytes = r.to_bytes();
    for cut in 0..bytes.len() {
        assert!(matches!(Recording::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Recording::from_bytes(&extra).is_err());
    assert!(matches!(Recording::load(dir.path().join("nope.eprc")), Err(Error::Io(_))));
}

#[test]
fn eprc_rejects_out_of_range_emg() {
    let t: Vec<u64> = (0..3).map(|i| i * 8333).collect();
    let mut r = rec(10, &t, |_| pose_of(0.0));
    r.emg[4][2] = 1.5;
    assert!(matches!(Recording::from_bytes(&r.to_bytes()), Err(Error::Validation(_))));
}

#[test]
fn jsonl_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    let r = labelled(gen_synth(&SynthConfig { duration_s: 0.5, ..small_synth(2) }, &model()).unwrap());
    r.save_jsonl(&path).unwrap();
    let back = Recording::load_any(&path).unwrap();
    assert_eq!(back, r);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().next().unwrap().starts_with("{\"meta\""));
}

#[test]
fn jsonl_rejects_bad_rows() {
    let meta = "{\"meta\":{\"emg_rate\":500.0,\"pose_rate\":120.0}}\n";
    for body in [
        "{\"t_us\":0}\n",
        "{\"t_us\":0,\"emg\":[0,0,0]}\n",
        "{\"t_us\":5,\"emg\":[0,0,0,0,0,0,0,0]}\n{\"t_us\":5,\"emg\":[0,0,0,0,0,0,0,0]}\n",
        "{\"t_us\":0,\"emg\":[0,0,0,0,0,0,0,0],\"extra\":1}\n",
        "not json\n",
    ] {
        let text = format!("{meta}{body}");
        assert!(Recording::read_jsonl(text.as_bytes()).is_err(), "{body}");
    }
}
