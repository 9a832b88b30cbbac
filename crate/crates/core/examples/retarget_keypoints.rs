//! Retarget tracker-style human keypoints onto the robot hand.
//!
//! The "human" here is the robot's own FK seen through an arbitrary rigid
//! transform and scale, so the recovered keypoints can be compared to the
//! truth. Six keypoints do not pin down 22 joints, so the joint angles
//! themselves may differ.
//!
//!     cargo run --example retarget_keypoints

use emgpose::retarget::{normalize_human_frame, retarget_pose, RetargetConfig};
use emgpose::{HandPose, KeypointSet, KinematicModel};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> emgpose::Result<()> {
    let hand = KinematicModel::canonical();
    let cfg = RetargetConfig::for_model(&hand);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (lo, hi) = (hand.limits_lo(), hand.limits_hi());

    let rot = Rotation3::from_euler_angles(0.4, -0.9, 1.7);
    let shift = Vector3::new(0.3, -0.1, 0.25);
    let mut prev = hand.rest_pose();
    for frame in 0..5 {
        let truth = loop {
            let q = HandPose(std::array::from_fn(|j| rng.random_range(lo[j]..hi[j])));
            if hand.collision_check(&q).free {
                break q;
            }
        };
        let kp = hand.fk_keypoints(&truth)?;
        let mut points: Vec<_> = kp.points.iter().map(|p| rot * p * 1.2 + shift).collect();
        let mut labels = kp.labels.clone();
        points.push(shift);
        labels.push("WRIST".into());
        let human = KeypointSet::new(points, labels)?;

        let targets = hand.select_correspondence(&normalize_human_frame(&hand, &human)?)?;
        let r = retarget_pose(&hand, &targets, &cfg, &prev)?;
        println!(
            "frame {frame}: residual {:.2e} m after {} iterations, clamped {}, worst keypoint off by {:.2e} m",
            r.residual,
            r.iterations,
            r.clamped,
            hand.correspondence_keypoints(&r.pose)?.max_distance(&hand.correspondence_keypoints(&truth)?)
        );
        prev = r.pose;
    }
    Ok(())
}
