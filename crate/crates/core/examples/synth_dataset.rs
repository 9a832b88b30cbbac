//! Generate a seeded synthetic recording, save it in both formats and cut
//! it into training windows.
//!
//!     cargo run --example synth_dataset -- [out_dir]

use emgpose::data::{gen_synth, make_windows, synchronize, window_count, Recording, SynthConfig};
use emgpose::KinematicModel;

fn main() -> emgpose::Result<()> {
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let hand = KinematicModel::canonical();
    let cfg = SynthConfig {
        seed: 3,
        duration_s: 10.0,
        ..Default::default()
    };
    let rec = gen_synth(&cfg, &hand)?;
    println!(
        "{} EMG samples at {} Hz, {} poses at {} Hz, tasks {:?}",
        rec.emg.len(),
        rec.emg_rate,
        rec.poses.len(),
        rec.pose_rate,
        rec.meta.segments.iter().map(|s| &s.label).collect::<Vec<_>>()
    );

    let eprc = dir.join("synth.eprc");
    let jsonl = dir.join("synth.jsonl");
    rec.save(&eprc)?;
    rec.save_jsonl(&jsonl)?;
    assert_eq!(Recording::load(&eprc)?, rec);
    println!(
        "wrote {} ({} bytes) and {} ({} bytes)",
        eprc.display(),
        std::fs::metadata(&eprc)?.len(),
        jsonl.display(),
        std::fs::metadata(&jsonl)?.len()
    );

    let synced = synchronize(&rec)?;
    let windows = make_windows(&synced, 400, 20, &hand.rest_pose())?;
    assert_eq!(windows.len(), window_count(synced.emg.len(), 400, 20));
    let w = &windows[10];
    println!(
        "{} windows of 400 samples; window 10 starts at sample {} and moves {:.3} rad at most",
        windows.len(),
        w.start,
        w.theta_gt.iter().map(|p| p.max_abs_diff(&w.theta0)).fold(0.0, f64::max)
    );
    Ok(())
}
