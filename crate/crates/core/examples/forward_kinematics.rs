//! Forward kinematics, joint limits and self-collision on the bundled hand.
//!
//!     cargo run --example forward_kinematics

use emgpose::KinematicModel;

fn main() -> emgpose::Result<()> {
    let hand = KinematicModel::canonical();
    println!("{hand}");

    let (lo, hi) = (hand.limits_lo(), hand.limits_hi());
    for (j, name) in hand.joint_names().iter().enumerate() {
        println!("{name:>14}  [{:+.3}, {:+.3}] rad", lo[j], hi[j]);
    }

    for (label, pose) in [("rest", hand.rest_pose()), ("mid", hand.mid_pose())] {
        let kp = hand.fk_keypoints(&pose)?;
        println!("\n{label} pose: {} keypoints", kp.len());
        for tip in ["THUMB_TIP", "INDEX_TIP", "PINKY_TIP"] {
            if let Some(p) = kp.get(tip) {
                println!("  {tip:<10} ({:+.4}, {:+.4}, {:+.4}) m", p.x, p.y, p.z);
            }
        }
        let c = hand.collision_check(&pose);
        println!("  collision-free: {}, min clearance {:.4} m", c.free, c.min_clearance);
    }

    // curl the index finger past its limit; clamp_limits pulls it back
    let mut curled = hand.rest_pose();
    let mcp = hand.joint_index("INDEX_MCP_FE").expect("joint exists");
    curled[mcp] = hi[mcp] + 0.5;
    println!("\nover-curled index within limits: {}", hand.within_limits(&curled));
    let fixed = hand.clamp_limits(&curled);
    println!("after clamp_limits: {} (MCP = {:.3})", hand.within_limits(&fixed), fixed[mcp]);
    Ok(())
}
