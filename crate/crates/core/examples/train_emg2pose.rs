//! Train the EMG-to-pose network on synthetic data and score it on the
//! held-out tail of the recording.
//!
//!     cargo run --release --example train_emg2pose -- [epochs] [seconds]
//!
//! The defaults (4 epochs, 30 s) finish in about a minute on one core; 12
//! epochs on 60 s is the full-size run.

use emgpose::cli::evaluate_model;
use emgpose::data::{gen_synth, make_windows, synchronize, SynthConfig};
use emgpose::net::{train_with, ModelConfig, NetworkParams, TrainConfig};
use emgpose::KinematicModel;

fn main() -> emgpose::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(4);
    let seconds = args.next().and_then(|a| a.parse().ok()).unwrap_or(30.0);

    let hand = KinematicModel::canonical();
    let rec = synchronize(&gen_synth(
        &SynthConfig {
            seed: 1,
            duration_s: seconds,
            ..Default::default()
        },
        &hand,
    )?)?;
    let (train_part, held_out) = rec.split(0.8)?;

    let model = ModelConfig::default();
    let init = NetworkParams::init(model.clone(), &hand, 1)?;
    let windows = make_windows(&train_part, model.window, 20, &init.rest_pose())?;
    println!("{} training windows, {} trainable parameters", windows.len(), init.num_trainable());

    let cfg = TrainConfig {
        epochs,
        seed: 1,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let out = train_with(&init, &windows, &[], &cfg, |e, _| {
        println!("epoch {:>2}  loss {:.6}  ({:.0} s)", e.epoch, e.train, t0.elapsed().as_secs_f64());
    })?;

    let report = evaluate_model(&hand, &out.params, &held_out)?;
    println!(
        "held-out MAE {:.4} rad over {} frames; holding the start pose gives {:.4}",
        report.overall_mae,
        report.frames,
        report.baseline_mae.unwrap_or(f64::NAN)
    );
    for (task, mae) in &report.per_task_mae {
        println!("  {task:<18} {mae:.4}");
    }
    Ok(())
}
