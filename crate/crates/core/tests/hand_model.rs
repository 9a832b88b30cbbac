use emgpose::hand_model::segment_distance;
use emgpose::{HandPose, KinematicModel, NUM_DOF, NUM_KEYPOINTS};
use nalgebra::{Rotation3, Unit, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat4 = [[f64; 4]; 4];

fn random_pose(model: &KinematicModel, rng: &mut ChaCha8Rng) -> HandPose {
    let (lo, hi) = (model.limits_lo(), model.limits_hi());
    HandPose(std::array::from_fn(|j| rng.random_range(lo[j]..hi[j])))
}

fn mat_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Homogeneous transform for a revolute joint: rotate about `axis` by `angle`
/// (Rodrigues), then place the joint frame at `offset`.
fn joint_matrix(axis: [f64; 3], angle: f64, offset: [f64; 3]) -> Mat4 {
    let [x, y, z] = axis;
    let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let (s, c) = angle.sin_cos();
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            let mut k2 = 0.0;
            for l in 0..3 {
                k2 += k[i][l] * k[l][j];
            }
            let eye = if i == j { 1.0 } else { 0.0 };
            m[i][j] = eye + s * k[i][j] + (1.0 - c) * k2;
        }
        m[i][3] = offset[i];
    }
    m[3][3] = 1.0;
    m
}

fn oracle_keypoints(model: &KinematicModel, pose: &HandPose) -> Vec<[f64; 3]> {
    let eye = std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }));
    let mut links: Vec<Mat4> = vec![eye];
    for (j, spec) in model.joints.iter().enumerate() {
        let a = spec.axis;
        let o = spec.origin_offset;
        let local = joint_matrix([a.x, a.y, a.z], pose[j], [o.x, o.y, o.z]);
        links.push(mat_mul(&links[spec.parent_link], &local));
    }
    model
        .keypoint_frames
        .iter()
        .map(|f| {
            let t = &links[f.link];
            let p = [f.offset.x, f.offset.y, f.offset.z, 1.0];
            std::array::from_fn(|i| (0..4).map(|k| t[i][k] * p[k]).sum())
        })
        .collect()
}

/// Links whose placement depends on `joint`.
fn distal_links(model: &KinematicModel, joint: usize) -> Vec<bool> {
    let mut distal = vec![false; model.num_links()];
    distal[joint + 1] = true;
    for (j, spec) in model.joints.iter().enumerate() {
        if distal[spec.parent_link] {
            distal[j + 1] = true;
        }
    }
    distal
}

#[test]
fn zero_pose_is_rest_layout() {
    let m = KinematicModel::canonical();
    let kp = m.fk_keypoints(&HandPose::zeros()).unwrap();
    assert_eq!(kp.len(), NUM_KEYPOINTS);
    // with every angle zero the frames are pure sums of offsets
    let mut origin = vec![Vector3::zeros()];
    for spec in &m.joints {
        origin.push(origin[spec.parent_link] + spec.origin_offset);
    }
    for (p, f) in kp.points.iter().zip(&m.keypoint_frames) {
        assert!((p - (origin[f.link] + f.offset)).norm() < 1e-15);
    }
}

#[test]
fn fk_matches_homogeneous_transform_oracle() {
    let m = KinematicModel::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let q = random_pose(&m, &mut rng);
        let kp = m.fk_keypoints(&q).unwrap();
        for (p, o) in kp.points.iter().zip(oracle_keypoints(&m, &q)) {
            let err = (p - Vector3::from(o)).norm();
            assert!(err < 1e-9, "oracle mismatch {err}");
        }
    }
}

#[test]
fn index_mcp_quarter_turn() {
    let m = KinematicModel::canonical();
    let j = m.joint_index("INDEX MCP FE").unwrap();
    let rest = m.fk_keypoints(&HandPose::zeros()).unwrap();
    let mut q = HandPose::zeros();
    q[j] = std::f64::consts::FRAC_PI_2;
    let bent = m.fk_keypoints(&q).unwrap();

    let links = m.link_transforms(&HandPose::zeros());
    let pivot = links[j + 1].translation.vector;
    let axis = links[m.joints[j].parent_link].rotation * m.joints[j].axis;
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), std::f64::consts::FRAC_PI_2);
    let distal = distal_links(&m, j);
    let mut moved = 0;
    for (k, f) in m.keypoint_frames.iter().enumerate() {
        let expect = if distal[f.link] {
            moved += 1;
            pivot + rot * (rest.points[k] - pivot)
        } else {
            rest.points[k]
        };
        assert!((bent.points[k] - expect).norm() < 1e-12, "{}", f.name);
    }
    for name in ["INDEX_PIP", "INDEX_DIP", "INDEX_TIP"] {
        let k = m.keypoint_index(name).unwrap();
        assert!(distal[m.keypoint_frames[k].link], "{name}");
    }
    assert!(moved >= 3);
}

#[test]
fn joint_changes_move_only_distal_keypoints() {
    let m = KinematicModel::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let q = random_pose(&m, &mut rng);
        let base = m.fk_keypoints(&q).unwrap();
        for j in 0..NUM_DOF {
            let mut q2 = q;
            q2[j] += 0.3;
            let kp = m.fk_keypoints(&q2).unwrap();
            let distal = distal_links(&m, j);
            for (k, f) in m.keypoint_frames.iter().enumerate() {
                if !distal[f.link] {
                    assert!((kp.points[k] - base.points[k]).norm() < 1e-12);
                }
            }
        }
    }
}

fn fd_jacobian(m: &KinematicModel, q: &HandPose, h: f64) -> Vec<Vec<f64>> {
    (0..NUM_DOF)
        .map(|j| {
            let mut qp = *q;
            let mut qm = *q;
            qp[j] += h;
            qm[j] -= h;
            let p = m.fk_keypoints(&qp).unwrap();
            let n = m.fk_keypoints(&qm).unwrap();
            p.points
                .iter()
                .zip(&n.points)
                .flat_map(|(a, b)| ((a - b) / (2.0 * h)).iter().copied().collect::<Vec<_>>())
                .collect()
        })
        .collect()
}

#[test]
fn finite_difference_jacobian_is_stable() {
    let m = KinematicModel::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let q = random_pose(&m, &mut rng);
        let fine = fd_jacobian(&m, &q, 1e-6);
        let coarse = fd_jacobian(&m, &q, 1e-5);
        for (a, b) in fine.iter().zip(&coarse) {
            let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
            assert!(norm > 0.0);
            assert!(diff / norm < 1e-4, "relative {}", diff / norm);
        }
    }
}

#[test]
fn fk_is_bit_deterministic() {
    let m = KinematicModel::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = random_pose(&m, &mut rng);
    let a = m.fk_keypoints(&q).unwrap();
    let b = m.fk_keypoints(&q).unwrap();
    for (x, y) in a.points.iter().zip(&b.points) {
        for i in 0..3 {
            assert_eq!(x[i].to_bits(), y[i].to_bits());
        }
    }
}

/// Dense sampling bound for one capsule pair: the sampled minimum distance
/// over-estimates the exact one by at most half a sample spacing per axis.
fn sampled_clearance(
    (a1, b1, r1): (Vector3<f64>, Vector3<f64>, f64),
    (a2, b2, r2): (Vector3<f64>, Vector3<f64>, f64),
) -> (f64, f64) {
    const N: usize = 50;
    let pts = |a: Vector3<f64>, b: Vector3<f64>| -> Vec<Vector3<f64>> {
        (0..N).map(|i| a + (b - a) * (i as f64 / (N - 1) as f64)).collect()
    };
    let (s1, s2) = (pts(a1, b1), pts(a2, b2));
    let mut best = f64::INFINITY;
    for p in &s1 {
        for q in &s2 {
            best = best.min((p - q).norm());
        }
    }
    let slack = ((b1 - a1).norm() + (b2 - a2).norm()) / (2.0 * (N - 1) as f64);
    let hi = best - r1 - r2;
    (hi - slack, hi)
}

#[test]
fn collision_check_agrees_with_dense_sampling() {
    let m = KinematicModel::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let margin = m.collision_margin;
    let (mut decided, mut undecided, mut collisions) = (0, 0, 0);
    for _ in 0..1000 {
        let q = random_pose(&m, &mut rng);
        let links = m.link_transforms(&q);
        let exact = m.pair_clearances(&q);
        let (mut lo, mut hi) = (f64::INFINITY, f64::INFINITY);
        for (&(i, j), &c) in m.collision_pairs().iter().zip(&exact) {
            let (l, h) = sampled_clearance(m.capsule_world(&links, i), m.capsule_world(&links, j));
            assert!(c >= l - 1e-12 && c <= h + 1e-12, "exact {c} outside [{l}, {h}]");
            lo = lo.min(l);
            hi = hi.min(h);
        }
        let (free, min_clearance) = m.collision_free(&q);
        assert!((lo..=hi + 1e-12).contains(&min_clearance));
        if hi < margin - 1e-6 {
            assert!(!free);
            collisions += 1;
            decided += 1;
        } else if lo >= margin + 1e-6 {
            assert!(free);
            decided += 1;
        } else {
            undecided += 1;
        }
    }
    assert!(decided >= 900, "only {decided} decided, {undecided} straddle the margin");
    assert!(collisions > 100, "sample should exercise both outcomes");
}

#[test]
fn collision_check_is_idempotent_and_pair_symmetric() {
    let m = KinematicModel::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let q = random_pose(&m, &mut rng);
        assert_eq!(m.collision_free(&q), m.collision_free(&q));
        let links = m.link_transforms(&q);
        for &(i, j) in m.collision_pairs() {
            let (a1, b1, _) = m.capsule_world(&links, i);
            let (a2, b2, _) = m.capsule_world(&links, j);
            let d = segment_distance(&a1, &b1, &a2, &b2);
            assert!((d - segment_distance(&a2, &b2, &a1, &b1)).abs() < 1e-15);
        }
    }
}

proptest! {
    #[test]
    fn clamp_limits_is_idempotent(raw in prop::collection::vec(-10.0f64..10.0, NUM_DOF)) {
        let m = KinematicModel::canonical();
        let q = HandPose::from_slice(&raw).unwrap();
        let once = m.clamp_limits(&q);
        prop_assert!(m.within_limits(&once));
        prop_assert_eq!(m.clamp_limits(&once), once);
        if m.within_limits(&q) {
            prop_assert_eq!(once, q);
        }
    }

    #[test]
    fn segment_distance_is_symmetric_and_bounded(
        c in prop::collection::vec(-0.1f64..0.1, 12),
    ) {
        let v = |i: usize| Vector3::new(c[i], c[i + 1], c[i + 2]);
        let (a1, b1, a2, b2) = (v(0), v(3), v(6), v(9));
        let d = segment_distance(&a1, &b1, &a2, &b2);
        prop_assert!(d >= 0.0);
        prop_assert!((d - segment_distance(&b2, &a2, &b1, &a1)).abs() < 1e-12);
        // never more than any endpoint pairing
        for p in [a1, b1] {
            for q in [a2, b2] {
                prop_assert!(d <= (p - q).norm() + 1e-12);
            }
        }
    }
}
