//! End-to-end subcommand checks through the installed binary: generate
//! artifacts, replay them, score the results, and round-trip the offset
//! model tooling.

use std::path::Path;
use std::process::Command;

fn posepipe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_posepipe"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth_into(dir: &Path) {
    run_ok(posepipe()
        .args(["synth", "--people", "2", "--frames", "6", "--crossing", "--seed", "21"])
        .arg("--out-dir")
        .arg(dir));
}

#[test]
fn run_then_eval_scores_the_replay() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path());
    let results = dir.path().join("results.jsonl");
    let tracks = dir.path().join("tracks.jsonl");
    run_ok(posepipe()
        .arg("run")
        .arg("--detections")
        .arg(dir.path().join("detections.jsonl"))
        .arg("--heatmaps")
        .arg(dir.path().join("heatmaps.hmap"))
        .args(["--track"])
        .arg("--out")
        .arg(&results)
        .arg("--track-out")
        .arg(&tracks));

    let map: serde_json::Value = serde_json::from_str(&run_ok(posepipe()
        .arg("eval")
        .arg("--gt")
        .arg(dir.path().join("truth_coco.jsonl"))
        .arg("--pred")
        .arg(&results)))
    .unwrap();
    assert_eq!(map["ap"], 1.0, "replayed decode should match truth: {map}");

    let mot: serde_json::Value = serde_json::from_str(&run_ok(posepipe()
        .arg("eval")
        .arg("--mot")
        .arg("--gt")
        .arg(dir.path().join("truth_tracks.jsonl"))
        .arg("--pred")
        .arg(&tracks)))
    .unwrap();
    assert_eq!(mot["mota"], 1.0, "tracking should be perfect on clean replay: {mot}");
    assert_eq!(mot["switches"], 0);
}

#[test]
fn nms_passes_distinct_poses_through() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path());
    let kept = dir.path().join("kept.jsonl");
    run_ok(posepipe()
        .arg("nms")
        .arg("--input")
        .arg(dir.path().join("truth_coco.jsonl"))
        .arg("--out")
        .arg(&kept));
    let input = std::fs::read_to_string(dir.path().join("truth_coco.jsonl")).unwrap();
    let output = std::fs::read_to_string(&kept).unwrap();
    assert_eq!(input.lines().count(), output.lines().count(), "well-separated poses must all survive");
}

#[test]
fn offset_model_fits_and_samples_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let offsets = dir.path().join("offsets.jsonl");
    let mut lines = String::new();
    for i in 0..60 {
        let d = 1.0 + (i % 7) as f64 * 0.3;
        lines.push_str(&format!(
            "{{\"part\":\"torso\",\"gt\":[10.0,20.0,110.0,220.0],\"det\":[{},{},{},{}]}}\n",
            10.0 + d,
            20.0 - d,
            110.0 + 0.5 * d,
            220.0 + d
        ));
    }
    std::fs::write(&offsets, lines).unwrap();

    let model = dir.path().join("model.json");
    run_ok(posepipe()
        .arg("pgpg")
        .arg("fit")
        .arg("--offsets")
        .arg(&offsets)
        .arg("--out")
        .arg(&model)
        .args(["--components", "1"]));
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(parsed[0]["part"], "torso");

    let boxes = dir.path().join("boxes.jsonl");
    std::fs::write(&boxes, "{\"frame\":0,\"box\":[0.0,0.0,100.0,200.0],\"score\":1.0}\n").unwrap();
    let sample = |path: &Path| {
        run_ok(posepipe()
            .arg("pgpg")
            .arg("sample")
            .arg("--model")
            .arg(&model)
            .arg("--boxes")
            .arg(&boxes)
            .args(["--part", "torso", "--count", "5", "--seed", "3"])
            .arg("--out")
            .arg(path));
        std::fs::read(path).unwrap()
    };
    let a = sample(&dir.path().join("a.jsonl"));
    let b = sample(&dir.path().join("b.jsonl"));
    assert_eq!(String::from_utf8(a.clone()).unwrap().lines().count(), 5);
    assert_eq!(a, b, "same seed must reproduce the same proposals");
}

#[test]
fn bench_reports_both_modes() {
    let stdout = run_ok(posepipe().args(["bench", "--people", "1", "--frames", "4"]));
    let stats: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(stats["concurrent"]["frames"], 4);
    assert_eq!(stats["sequential"]["frames"], 4);
    assert!(stats["concurrent"]["throughput_fps"].as_f64().unwrap() > 0.0);
}
