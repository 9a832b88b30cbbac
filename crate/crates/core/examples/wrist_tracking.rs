//! Turn absolute wrist poses from an arm tracker into the per-frame
//! increments an arm controller consumes, then integrate them back.
//!
//!     cargo run --example wrist_tracking

use emgpose::stream::{wrist_increment, WristPose};
use nalgebra::{UnitQuaternion, Vector3};

fn main() -> emgpose::Result<()> {
    // a slow circle with a twist about the forearm axis
    let track: Vec<WristPose> = (0..=40)
        .map(|i| {
            let t = i as f64 / 40.0 * std::f64::consts::TAU;
            WristPose::new(
                Vector3::new(0.1 * t.cos(), 0.1 * t.sin(), 0.3),
                UnitQuaternion::from_euler_angles(0.5 * t.sin(), 0.0, t),
            )
        })
        .collect();

    let mut rebuilt = track[0];
    for (i, pair) in track.windows(2).enumerate() {
        let d = wrist_increment(&pair[0], &pair[1])?;
        rebuilt = rebuilt.compose(&d)?;
        if i % 10 == 0 {
            println!(
                "step {i:>2}: move {:.4} m, turn {:.4} rad",
                d.translation().norm(),
                d.rotation()?.angle()
            );
        }
    }
    let end = track.last().unwrap();
    println!(
        "integrated end pose is {:.1e} m and {:.1e} rad from the tracker's",
        (rebuilt.translation() - end.translation()).norm(),
        rebuilt.rotation()?.angle_to(&end.rotation()?)
    );
    Ok(())
}
