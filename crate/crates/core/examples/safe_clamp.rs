//! Pull self-colliding poses back onto the collision-free set.
//!
//!     cargo run --example safe_clamp

use emgpose::retarget::clamp_to_safe_manifold;
use emgpose::{HandPose, KinematicModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> emgpose::Result<()> {
    let hand = KinematicModel::canonical();
    let rest = hand.rest_pose();
    let (lo, hi) = (hand.limits_lo(), hand.limits_hi());
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut shown = 0;
    while shown < 5 {
        let q = HandPose(std::array::from_fn(|j| rng.random_range(lo[j]..hi[j])));
        let before = hand.collision_check(&q);
        if before.free {
            continue;
        }
        let safe = clamp_to_safe_manifold(&hand, &q, &rest)?;
        let after = hand.collision_check(&safe);
        let pair = before.closest_pair.map(|(a, b)| format!("links {a} and {b}")).unwrap_or_default();
        println!(
            "clearance {:+.4} m ({pair}) -> {:+.4} m, largest joint change {:.3} rad",
            before.min_clearance,
            after.min_clearance,
            safe.max_abs_diff(&q)
        );
        shown += 1;
    }
    Ok(())
}
