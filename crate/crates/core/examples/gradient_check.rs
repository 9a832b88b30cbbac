//! Compare the hand-written gradients with central finite differences on the
//! tiny network, segment by segment.
//!
//!     cargo run --release --example gradient_check

use emgpose::data::{EmgWindow, WindowSample};
use emgpose::net::{loss_and_grad, sample_loss, LossConfig, ModelConfig, NetworkParams};
use emgpose::KinematicModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> emgpose::Result<()> {
    let hand = KinematicModel::canonical();
    let params = NetworkParams::init(ModelConfig::tiny(), &hand, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let start = hand.rest_pose();
    let end = hand.mid_pose();
    let sample = WindowSample {
        emg: EmgWindow::from_channel_major((0..8 * 32).map(|_| rng.random_range(-1.0..1.0)).collect(), 32)?,
        theta_gt: (1..=32).map(|t| start.lerp(&end, t as f64 / 32.0)).collect(),
        theta0: start,
        start: 0,
    };
    // the limit clamp has no derivative at the bounds
    let loss = LossConfig {
        clamp_poses: false,
        ..Default::default()
    };
    let (value, grad) = loss_and_grad(&params, std::slice::from_ref(&sample), &loss)?;
    println!("loss {value:.6}");

    let fd = |i: usize, h: f64| -> emgpose::Result<f64> {
        let mut q = params.clone();
        q.values_mut()[i] += h;
        let up = sample_loss(&q, &sample, &loss)?;
        q.values_mut()[i] -= 2.0 * h;
        Ok((up - sample_loss(&q, &sample, &loss)?) / (2.0 * h))
    };
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-7);
    for seg in params.segments().iter().filter(|s| s.trainable) {
        let (mut worst, mut kinks) = (0.0f64, 0);
        for i in seg.range.clone().step_by(seg.range.len().div_ceil(12)) {
            let an = grad.values()[i];
            let e = rel(an, fd(i, 1e-4)?);
            // a ReLU switching inside [-h, h] spoils the quotient; a smaller
            // step that agrees again shows the analytic value is right
            if e > 1e-4 && rel(an, fd(i, 1e-5)?) < 1e-4 {
                kinks += 1;
                continue;
            }
            worst = worst.max(e);
        }
        println!("{:<22} {:>6} values  worst relative error {worst:.1e}  kinks {kinks}", seg.name, seg.range.len());
    }
    Ok(())
}
