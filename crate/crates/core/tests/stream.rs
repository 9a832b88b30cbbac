use emgpose::data::{EmgFrame, EmgWindow};
use emgpose::net::{
    decoder_forward_with, encoder_forward, model_forward, resample_linear, DecoderState, ModelConfig, NetworkParams,
};
use emgpose::stream::{
    emitted_count, emitted_sample_index, executed_columns, offline_replay, wrist_increment, StreamConfig, StreamEngine,
    Summary, WristPose,
};
use emgpose::{Error, HandPose, KinematicModel};
use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const W: usize = 32;
const E: usize = 8;

fn params(seed: u64) -> NetworkParams {
    let mut p = NetworkParams::init(ModelConfig::tiny(), &KinematicModel::canonical(), seed).unwrap();
    // a livelier head than the init so poses actually move
    for v in p.segment_mut("mlp2.weight").unwrap() {
        *v *= 30.0;
    }
    p
}

fn cfg() -> StreamConfig {
    StreamConfig {
        window: W,
        execute_n: E,
        ..Default::default()
    }
}

fn samples(n: usize, seed: u64) -> Vec<EmgFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
}

fn engine(seed: u64) -> StreamEngine {
    StreamEngine::with_params(params(seed), cfg()).unwrap()
}

#[test]
fn warm_up_then_fixed_cadence() {
    let mut e = engine(1);
    let xs = samples(W + 3 * E, 1);
    let mut emitted_at = Vec::new();
    for (i, s) in xs.iter().enumerate() {
        let out = e.push_samples(std::slice::from_ref(s)).unwrap();
        if !out.is_empty() {
            assert_eq!(out.len(), E);
            emitted_at.push(i + 1);
        }
    }
    assert_eq!(emitted_at, [W, W + E, W + 2 * E, W + 3 * E]);
    assert_eq!(e.latency_stats().chunks, 4);
}

#[test]
fn matches_offline_replay() {
    let p = params(2);
    let xs = samples(W + 5 * E + 3, 2);
    let mut e = StreamEngine::with_params(p.clone(), cfg()).unwrap();
    let online = e.push_samples(&xs).unwrap();
    let offline = offline_replay(&p, &cfg(), &xs, &p.rest_pose()).unwrap();
    assert_eq!(online, offline);
    assert_eq!(online.len(), emitted_count(xs.len(), W, E));
}

#[test]
fn first_chunk_is_the_training_window() {
    let p = params(3);
    let xs = samples(W, 3);
    let start = p.rest_pose();
    let (chunk, _) = model_forward(&p, &EmgWindow::from_frames(&xs), &DecoderState::starting_at(&p, start)).unwrap();
    let out = engine(3).push_samples(&xs).unwrap();
    assert_eq!(out[..], chunk.poses[executed_columns(W, E)]);
}

#[test]
fn initial_pose_is_honoured_once() {
    let p = params(4);
    let m = KinematicModel::canonical();
    let mid = m.mid_pose();
    let xs = samples(W + E, 4);
    let mut e = engine(4);
    e.set_initial_pose(mid).unwrap();
    let out = e.push_samples(&xs).unwrap();
    assert_eq!(out, offline_replay(&p, &cfg(), &xs, &mid).unwrap());
    assert!(matches!(e.set_initial_pose(mid), Err(Error::State(_))));
}

#[test]
fn emitted_trajectory_is_continuous() {
    // chunk boundaries step no further than any step inside a chunk
    let xs = samples(W + 12 * E, 5);
    let out = engine(5).push_samples(&xs).unwrap();
    let steps: Vec<f64> = out.windows(2).map(|w| w[0].max_abs_diff(&w[1])).collect();
    let inside = (0..steps.len()).filter(|i| (i + 1) % E != 0).map(|i| steps[i]).fold(0.0, f64::max);
    let across = (0..steps.len()).filter(|i| (i + 1) % E == 0).map(|i| steps[i]).fold(0.0, f64::max);
    assert!(inside > 0.0);
    assert!(across <= 3.0 * inside, "boundary step {across} vs inner {inside}");
    let m = KinematicModel::canonical();
    assert!(out.iter().all(|q| m.within_limits(q)));
}

#[test]
fn next_chunk_starts_one_velocity_away() {
    let p = params(13);
    let xs = samples(W + E, 13);
    let mut e = engine(13);
    let first = e.push_samples(&xs[..W]).unwrap();
    let carried = e.state().unwrap().clone();
    let second = e.push_samples(&xs[W..]).unwrap();

    let window = EmgWindow::from_frames(&xs[E..]);
    let feats = resample_linear(&encoder_forward(&p, &window).unwrap(), W).unwrap();
    let free = decoder_forward_with(&p, &feats.columns(executed_columns(W, E)).unwrap(), &carried, false).unwrap();
    let m = KinematicModel::canonical();
    assert!(m.within_limits(&free.chunk.poses[0]), "clamp would engage; pick another seed");
    let last = first.last().unwrap();
    let want = HandPose(std::array::from_fn(|j| last[j] + free.velocities[0][j]));
    assert_eq!(second[0], want);
}

#[test]
fn carried_state_ends_at_the_last_pose() {
    let mut e = engine(6);
    let out = e.push_samples(&samples(W + 2 * E, 6)).unwrap();
    assert_eq!(e.state().unwrap().last_pose, *out.last().unwrap());
}

#[test]
fn emission_is_conserved_for_short_streams() {
    for n in 0..=50 {
        let xs = samples(n, 7);
        let mut e = engine(7);
        let out = e.push_samples(&xs).unwrap();
        let brute = if n < W { 0 } else { E * (1 + (n - W) / E) };
        assert_eq!(out.len(), brute, "n {n}");
        assert_eq!(emitted_count(n, W, E), brute);
    }
}

#[test]
fn alignment_points_at_the_newest_samples() {
    for k in 0..E {
        assert_eq!(emitted_sample_index(k, W, E), W - E + k);
    }
    // chunk c covers samples W - E + c E .. W + c E
    assert_eq!(emitted_sample_index(3 * E + 2, W, E), W + 2 * E + 2);
}

#[test]
fn latency_marks_empty_runs() {
    let rt = StreamConfig { realtime: true, ..cfg() };
    let mut e = StreamEngine::with_params(params(8), rt).unwrap();
    e.push_samples(&samples(W - 1, 8)).unwrap();
    let s = e.latency_stats();
    assert!(s.empty);
    assert_eq!(s.chunks, 0);
    assert!(s.inference_us.is_none() && s.end_to_end_us.is_none());
    assert_eq!(s.deadline_misses, Some(0));
    assert_eq!(s.budget_us, 16_000.0);

    e.push_samples(&samples(1, 9)).unwrap();
    let s = e.latency_stats();
    assert!(!s.empty);
    let inf = s.inference_us.unwrap();
    assert_eq!(s.end_to_end_us.unwrap().max, inf.max + 14_000.0);
    assert!(s.deadline_misses.is_some());
    assert!(engine(8).latency_stats().deadline_misses.is_none());
}

#[test]
fn bad_configs_and_inputs_are_rejected() {
    let p = params(10);
    for bad in [
        StreamConfig { execute_n: 0, ..cfg() },
        StreamConfig { execute_n: W + 1, ..cfg() },
        StreamConfig { window: 400, ..cfg() },
        StreamConfig { rate: 0.0, ..cfg() },
    ] {
        assert!(matches!(StreamEngine::with_params(p.clone(), bad), Err(Error::Validation(_))));
    }
    let mut e = engine(10);
    let mut xs = samples(3, 10);
    xs[1][4] = f64::NAN;
    assert!(e.push_samples(&xs).is_err());
    assert!(matches!(StreamEngine::new().push_samples(&xs), Err(Error::State(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn summary_is_ordered(values in prop::collection::vec(0.0f64..1e4, 1..60)) {
        let s = Summary::of(&values).unwrap();
        // the mean may round one ulp past an extreme
        prop_assert!(s.min - 1e-9 <= s.mean && s.mean <= s.max + 1e-9);
        prop_assert!(s.min <= s.p95 && s.p95 <= s.max);
    }

    #[test]
    fn block_size_does_not_matter(seed in 0u64..1000, n in 0usize..90, blocks in prop::collection::vec(1usize..17, 1..40)) {
        let xs = samples(n, seed);
        let mut whole = engine(11);
        let reference = whole.push_samples(&xs).unwrap();
        let mut e = engine(11);
        let mut out = Vec::new();
        let mut at = 0;
        for b in blocks.iter().cycle() {
            if at >= n {
                break;
            }
            let end = (at + b).min(n);
            out.extend(e.push_samples(&xs[at..end]).unwrap());
            at = end;
        }
        prop_assert_eq!(out, reference);
    }
}

// ---------------------------------------------------------------------------
// wrist increments

fn random_wrist(rng: &mut ChaCha8Rng) -> WristPose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let q = UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..3.0));
    let p = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    WristPose::new(p, q)
}

fn wrist_diff(a: &WristPose, b: &WristPose) -> f64 {
    let dp = (a.translation() - b.translation()).norm();
    let angle = a.rotation().unwrap().angle_to(&b.rotation().unwrap());
    dp.max(angle)
}

#[test]
fn wrist_increments_chain_back_to_the_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let track: Vec<WristPose> = (0..200).map(|_| random_wrist(&mut rng)).collect();
    let mut acc = track[0];
    for pair in track.windows(2) {
        let d = wrist_increment(&pair[0], &pair[1]).unwrap();
        assert!(wrist_diff(&pair[0].compose(&d).unwrap(), &pair[1]) < 1e-12);
        acc = acc.compose(&d).unwrap();
    }
    assert!(wrist_diff(&acc, &track[199]) < 1e-9);
}

#[test]
fn wrist_increment_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let a = random_wrist(&mut rng);
    assert!(wrist_diff(&wrist_increment(&a, &a).unwrap(), &WristPose::identity()) < 1e-12);

    // a quarter turn about z: world +y motion is +x in the turned frame
    let prev = WristPose::new(Vector3::zeros(), UnitQuaternion::from_euler_angles(0.0, 0.0, std::f64::consts::FRAC_PI_2));
    let curr = WristPose::new(Vector3::new(0.0, 1.0, 0.0), UnitQuaternion::from_euler_angles(0.0, 0.0, std::f64::consts::FRAC_PI_2));
    let d = wrist_increment(&prev, &curr).unwrap();
    assert!((d.translation() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    assert!(d.rotation().unwrap().angle() < 1e-12);

    let bad = WristPose { position: [0.0; 3], orientation: [0.9, 0.0, 0.0, 0.0] };
    assert!(wrist_increment(&bad, &a).is_err());
    let nan = WristPose { position: [f64::NAN, 0.0, 0.0], ..WristPose::identity() };
    assert!(wrist_increment(&a, &nan).is_err());
}

#[test]
fn hand_pose_stream_is_finite() {
    let out = engine(12).push_samples(&samples(W + 4 * E, 12)).unwrap();
    assert!(out.iter().all(HandPose::is_finite));
}
