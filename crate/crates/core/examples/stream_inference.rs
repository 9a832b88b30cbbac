//! Feed EMG through the streaming engine in 20-sample blocks, the way an
//! armband driver would, and report latency.
//!
//!     cargo run --release --example stream_inference -- [params.bin]

use emgpose::data::{gen_synth, SynthConfig};
use emgpose::net::{ModelConfig, NetworkParams};
use emgpose::stream::{emitted_count, StreamConfig, StreamEngine};
use emgpose::KinematicModel;

fn main() -> emgpose::Result<()> {
    let hand = KinematicModel::canonical();
    let params = match std::env::args().nth(1) {
        Some(path) => NetworkParams::load(path)?,
        None => NetworkParams::init(ModelConfig::default(), &hand, 0)?,
    };
    let cfg = StreamConfig {
        window: params.config().window,
        realtime: true,
        ..Default::default()
    };
    let mut engine = StreamEngine::with_params(params, cfg.clone())?;

    let rec = gen_synth(
        &SynthConfig {
            seed: 2,
            duration_s: 5.0,
            ..Default::default()
        },
        &hand,
    )?;
    let mut emitted = 0;
    for (i, block) in rec.emg.chunks(cfg.execute_n).enumerate() {
        let poses = engine.push_samples(block)?;
        if !poses.is_empty() && i % 25 == 0 {
            let p = poses.last().unwrap();
            println!("block {i:>3}: {} poses, thumb CMC {:+.3} rad", poses.len(), p[0]);
        }
        emitted += poses.len();
    }
    assert_eq!(emitted, emitted_count(rec.emg.len(), cfg.window, cfg.execute_n));

    let stats = engine.latency_stats();
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}
