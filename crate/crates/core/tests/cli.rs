use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emgpose::cli::{
    cmd_eval, cmd_gen_synth, cmd_stream, cmd_train, export_joint_csv, mae_report, EvalReport, PipelineConfig,
    REPORT_SCHEMA,
};
use emgpose::data::{synchronize, write_jsonl_values, KeypointFrame, PoseRecord, Recording};
use emgpose::net::{ModelConfig, NetworkParams};
use emgpose::{HandPose, KinematicModel};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emgpose"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

/// Tiny network, 4 s of data, one epoch.
fn quick_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.set_window(32);
    cfg.stream.execute_n = 8;
    cfg.synth.duration_s = 4.0;
    cfg.train.epochs = 1;
    cfg.train_stride = 16;
    cfg
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_predictions(path: &Path, rec: &Recording, pose: impl Fn(usize) -> HandPose) {
    let records: Vec<PoseRecord> = (0..rec.emg.len())
        .map(|i| PoseRecord {
            t_us: rec.emg_t_us[i],
            pose: pose(i).0.to_vec(),
            residual: None,
            clamped: None,
        })
        .collect();
    let mut f = std::fs::File::create(path).unwrap();
    write_jsonl_values(&mut f, &records).unwrap();
}

#[test]
fn eval_of_ground_truth_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let m = KinematicModel::canonical();
    let rec_path = dir.path().join("r.eprc");
    let rec = synchronize(&cmd_gen_synth(&cfg, &m, &rec_path).unwrap()).unwrap();
    let preds = dir.path().join("p.jsonl");
    write_predictions(&preds, &rec, |i| rec.poses[i]);
    let (report, _, _) = cmd_eval(&cfg, &m, &rec_path, None, Some(&preds)).unwrap();
    assert_eq!(report.overall_mae, 0.0);
    assert!(report.per_joint_mae.iter().all(|j| j.mae == 0.0));
    assert_eq!(report.frames, rec.emg.len());
}

#[test]
fn eval_of_a_constant_pose_is_the_mean_offset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let m = KinematicModel::canonical();
    let rec_path = dir.path().join("r.eprc");
    let rec = synchronize(&cmd_gen_synth(&cfg, &m, &rec_path).unwrap()).unwrap();
    let mid = m.mid_pose();
    let preds = dir.path().join("p.jsonl");
    write_predictions(&preds, &rec, |_| mid);
    let (report, _, _) = cmd_eval(&cfg, &m, &rec_path, None, Some(&preds)).unwrap();

    let mut total = 0.0;
    for p in &rec.poses {
        for j in 0..22 {
            total += (p[j] - mid[j]).abs();
        }
    }
    let want = total / (22 * rec.poses.len()) as f64;
    assert!((report.overall_mae - want).abs() < 1e-12);
    assert_eq!(report.schema, REPORT_SCHEMA);
    assert_eq!(report.protocol, "predictions");
    assert_eq!(report.per_task_mae.len(), 3);
    assert!(report.baseline_mae.is_none());
    assert_eq!(report.not_reproduced.len(), 2);
    let j0: f64 = rec.poses.iter().map(|p| (p[0] - mid[0]).abs()).sum::<f64>() / rec.poses.len() as f64;
    assert!((report.per_joint_mae[0].mae - j0).abs() < 1e-12);
    assert_eq!(report.per_joint_mae[0].joint, m.joint_names()[0]);
}

#[test]
fn mae_report_rejects_mismatched_lengths() {
    let m = KinematicModel::canonical();
    let p = vec![m.mid_pose(); 3];
    assert!(mae_report(&m, &p, &p[..2], None, "x").is_err());
    let empty = mae_report(&m, &[], &[], None, "x").unwrap();
    assert_eq!((empty.frames, empty.overall_mae), (0, 0.0));
}

#[test]
fn joint_csv_round_trips() {
    let m = KinematicModel::canonical();
    let gt: Vec<HandPose> = (0..5).map(|i| m.mid_pose().lerp(&m.rest_pose(), i as f64 / 4.0)).collect();
    let pred: Vec<HandPose> = gt.iter().map(|g| g.lerp(&m.mid_pose(), 1.0 / 3.0)).collect();
    let mut buf = Vec::new();
    export_joint_csv(&m, &pred, &gt, &["thumb cmc fe", "INDEX_MCP_FE"], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "frame,THUMB_CMC_FE_gt,THUMB_CMC_FE_pred,INDEX_MCP_FE_gt,INDEX_MCP_FE_pred"
    );
    let (t, i) = (m.joint_index("THUMB_CMC_FE").unwrap(), m.joint_index("INDEX_MCP_FE").unwrap());
    for (k, line) in lines.enumerate() {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v, [k as f64, gt[k][t], pred[k][t], gt[k][i], pred[k][i]]);
    }

    let err = export_joint_csv(&m, &pred, &gt, &["PINKY_TOE"], &mut Vec::new()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("PINKY_TOE") && msg.contains("THUMB_CMC_FE"), "{msg}");
}

#[test]
fn pipeline_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let m = KinematicModel::canonical();
    let rec_path = dir.path().join("r.jsonl");
    cmd_gen_synth(&cfg, &m, &rec_path).unwrap();
    assert!(std::fs::read_to_string(&rec_path).unwrap().starts_with("{\"meta\""));
    let params_path = dir.path().join("net.bin");
    let mut epochs = 0;
    let out = cmd_train(&cfg, &m, &rec_path, &params_path, |_, _| epochs += 1).unwrap();
    assert_eq!(epochs, 1);
    assert!(out.curve[0].train.is_finite());
    let loaded = NetworkParams::load(&params_path).unwrap();
    assert_eq!(loaded, out.params);

    let (report, pred, gt) = cmd_eval(&cfg, &m, &rec_path, Some(&params_path), None).unwrap();
    assert_eq!(report.protocol, "windowed");
    assert_eq!(pred.len(), gt.len());
    assert!(report.baseline_mae.is_some());

    let stream_out = dir.path().join("s.jsonl");
    let (poses, stats) = cmd_stream(&cfg, &rec_path, &params_path, Some(&stream_out)).unwrap();
    assert_eq!(poses.len(), (2000 - 32) / 8 * 8 + 8);
    assert_eq!(stats.chunks, poses.len() / 8);
    assert_eq!(std::fs::read_to_string(&stream_out).unwrap().lines().count(), poses.len());
    // emitted poses carry the timestamp of the sample they align to
    assert_eq!(poses[0].t_us, 24 * 2000);
}

// ---------------------------------------------------------------------------
// the binary

#[test]
fn every_subcommand_prints_help() {
    for cmd in ["gen-synth", "train", "eval", "retarget", "stream", "bench"] {
        let out = run(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{cmd}");
    }
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen-synth", "--out", s(&dir.path().join("x.eprc")), "--duration=-1"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");
    assert!(err["message"].as_str().unwrap().contains("duration"));

    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--input", "a", "--params", "b", "--predictions", "c"]).status.code(), Some(1));
}

#[test]
fn io_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--input", s(&dir.path().join("missing.eprc")), "--out", s(&dir.path().join("n.bin"))]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn binary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &quick_config());
    let rec = dir.path().join("r.eprc");
    let net = dir.path().join("n.bin");
    let report = dir.path().join("report.json");
    let csv = dir.path().join("joints.csv");
    let c = s(&config);
    assert!(run(&["--config", c, "gen-synth", "--out", s(&rec), "--seed", "4"]).status.success());
    let out = run(&["--config", c, "train", "--input", s(&rec), "--out", s(&net), "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch 0"));
    let out = run(&["--config", c, "eval", "--input", s(&rec), "--params", s(&net), "--out", s(&report), "--csv", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    let saved: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(printed, saved);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), printed.frames + 1);

    let out = run(&["--config", c, "stream", "--input", s(&rec), "--params", s(&net), "--realtime"]);
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(stats["deadline_misses"].is_u64());

    let out = run(&["--config", c, "bench", "--chunks", "3"]);
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["chunks"], 3);
}

#[test]
fn binary_retargets_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = KinematicModel::canonical();
    let frames: Vec<KeypointFrame> = (0..3)
        .map(|i| {
            let q = m.rest_pose().lerp(&m.mid_pose(), i as f64 / 2.0);
            KeypointFrame::from_set(i * 8333, &m.correspondence_keypoints(&q).unwrap())
        })
        .collect();
    let input = dir.path().join("k.jsonl");
    let mut f = std::fs::File::create(&input).unwrap();
    write_jsonl_values(&mut f, &frames).unwrap();
    let output = dir.path().join("q.jsonl");
    let out = run(&["retarget", "--input", s(&input), "--out", s(&output)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&output).unwrap();
    let poses: Vec<PoseRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(poses.len(), 3);
    assert_eq!(poses[2].t_us, 2 * 8333);
    assert!(poses.iter().all(|p| p.residual.unwrap() < 1e-3 && p.pose.len() == 22));
}
