use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use posecast_core::extract::{render_fixture, ring_cameras, NoiseModel};
use posecast_core::model::{compose, ForecastBundle};
use posecast_core::motion::{decompose, read_scenes, write_scenes, GlobalPoseSequence, Scene, Skeleton};
use posecast_core::numerics::Array;
use posecast_core::synth::{generate, MotionStyle, SynthSpec};
use posecast_core::jsonl;
use serde_json::Value;
use tempfile::TempDir;

fn posecast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posecast"))
        .args(args)
        .env("T2P_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir.path().join("spec.txt"), "count=10\nstyle=turn\nseed=5\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = posecast(&["synth", "--config", s(&spec), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut files: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.iter().filter(|f| f.to_string_lossy().ends_with(".jsonl")).count(), 10);
    for f in files {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{f:?}");
    }
}

#[test]
fn invalid_key_names_the_key() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir.path().join("spec.txt"), "count=2\nagnets=3\n");
    let o = posecast(&["synth", "--config", s(&spec), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("agnets"), "{}", stderr(&o));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    assert_eq!(posecast(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(posecast(&["synth", "--out", s(&out), "--seed", "x"]).status.code(), Some(1));
    let missing = posecast(&["train", "--data", s(&dir.path().join("nope.jsonl")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2), "{}", stderr(&missing));
    let bad = write(&dir.path().join("bad.jsonl"), "{\"scene_id\": 1}\n");
    let o = posecast(&["train", "--data", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":1:"), "line number in {}", stderr(&o));
}

#[test]
fn overflowing_input_is_a_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let scene = generate(&SynthSpec { frames: 30, ..SynthSpec::default() }).unwrap();
    let huge = GlobalPoseSequence::from_fn(scene.poses.agent_ids().to_vec(), 30, 15, 10.0, |n, t, j| {
        let p = scene.poses.get(n, t, j);
        [p[0] * 1e306, p[1] * 1e306, p[2]]
    })
    .unwrap();
    let path = dir.path().join("huge.jsonl");
    write_scenes(&path, &[Scene { poses: huge, ..scene }]).unwrap();
    let cfg = write(&dir.path().join("t.txt"), "preset=compact\nsteps=1\n");
    let o = posecast(&["train", "--config", s(&cfg), "--data", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

/// Three agents standing 2.5 m from the rig for `frames` frames.
fn standing_scene(frames: usize) -> GlobalPoseSequence {
    let spots = [[2.5, 0.0], [0.0, 2.5], [-1.5, -2.0]];
    GlobalPoseSequence::from_fn(vec!["a".into(), "b".into(), "c".into()], frames, 15, 15.0, |n, t, j| {
        let sway = 0.01 * (t as f64 * 0.3).sin();
        [spots[n][0] + 0.03 * (j % 3) as f64 + sway, spots[n][1] + 0.02 * (j % 5) as f64, 0.1 + 0.1 * j as f64]
    })
    .unwrap()
}

fn extract_fixture(dir: &Path, frames: usize) -> PathBuf {
    let cams = ring_cameras(5, 300.0, 640.0, 480.0).unwrap();
    let noise = NoiseModel { rigid_sigma: 0.0, joint_sigma: 0.0 };
    let fx = render_fixture(&[standing_scene(frames)], &cams, [640.0, 480.0], noise, 0, 1).unwrap();
    let input = dir.join("input");
    fx.save(&input).unwrap();
    input
}

#[test]
fn extract_window_yield_and_stage_counts() {
    let dir = TempDir::new().unwrap();
    let input = extract_fixture(dir.path(), 100);
    let cfg = write(&dir.path().join("x.txt"), "window_frames=75\nstride_frames=15\n");
    let out = dir.path().join("o");
    let o = posecast(&["extract", "--input", s(&input), "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&out.join("report.json"));
    let n = |k: &str| r[k].as_u64().unwrap();
    assert_eq!(n("windows"), 2);
    assert_eq!(n("accepted"), n("detections") - n("rejected"));
    assert_eq!(n("registered"), n("accepted") - n("missing_box") - n("duplicates"));
    assert_eq!(n("registered"), 300);
    let scenes = read_scenes(&out.join("scenes.jsonl")).unwrap();
    assert_eq!(scenes.len(), 2);
    assert!(scenes.iter().all(|s| s.poses.frames() == 75 && s.poses.agents() == 3));
    assert!(out.join("config.txt").exists());
}

#[test]
fn zero_tau_accepts_nothing() {
    let dir = TempDir::new().unwrap();
    let input = extract_fixture(dir.path(), 50);
    let cfg = write(&dir.path().join("x.txt"), "tau=0\n");
    let out = dir.path().join("o");
    let o = posecast(&["extract", "--input", s(&input), "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = read_json(&out.join("report.json"));
    assert_eq!(r["accepted"], 0);
    assert_eq!(r["rejected"], r["detections"]);
    assert!(r["detections"].as_u64().unwrap() > 0);
    assert!(read_scenes(&out.join("scenes.jsonl")).unwrap().is_empty());
}

#[test]
fn missing_camera_file_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let input = extract_fixture(dir.path(), 20);
    std::fs::remove_file(input.join("cameras.jsonl")).unwrap();
    let o = posecast(&["extract", "--input", s(&input), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cameras"), "{}", stderr(&o));
}

/// A one-mode forecast equal to the last `t_f` frames of `scene`.
fn truth_as_forecast(scene: &Scene, t_f: usize) -> ForecastBundle {
    let frames = scene.poses.frames();
    let gt = scene.poses.window(frames - t_f, t_f).unwrap();
    let (tr, lo) = decompose(&gt, &Skeleton::default()).unwrap();
    let (n, j) = (gt.agents(), gt.joints());
    let trajectories = Array::from_fn(&[1, n, t_f, 3], |i| tr.get(i[1], i[2])[i[3]]);
    let local = Array::from_fn(&[1, n, t_f, j, 3], |i| lo.get(i[1], i[2], i[3])[i[4]]);
    let mut b = compose(&trajectories, &local).unwrap();
    b.scene_id = scene.scene_id.clone();
    b.agent_ids = gt.agent_ids().to_vec();
    b.frame_rate = gt.frame_rate();
    b
}

#[test]
fn ground_truth_forecast_scores_zero_with_timestamp_keys() {
    let dir = TempDir::new().unwrap();
    let scenes: Vec<Scene> = (0..3)
        .map(|i| generate(&SynthSpec { style: MotionStyle::Turn, seed: i, ..SynthSpec::default() }).unwrap())
        .collect();
    let scene_path = dir.path().join("scenes.jsonl");
    write_scenes(&scene_path, &scenes).unwrap();
    let bundles: Vec<ForecastBundle> = scenes.iter().map(|s| truth_as_forecast(s, 20)).collect();
    let fc = dir.path().join("forecasts.jsonl");
    jsonl::write(&fc, &bundles).unwrap();
    let out = dir.path().join("o");
    let o = posecast(&[
        "eval", "--scenes", s(&scene_path), "--forecasts", s(&fc), "--eval-at", "1.0,2.0", "--out", s(&out), "--plot",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&out.join("report.json"));
    let agg = r["aggregate"].as_object().unwrap();
    assert_eq!(agg.keys().collect::<Vec<_>>(), ["1.0s", "2.0s"]);
    for m in agg.values().chain(r["scenes"].as_array().unwrap().iter().flat_map(|s| s["metrics"].as_object().unwrap().values())) {
        for k in ["jpe", "ape", "fde"] {
            assert_eq!(m[k].as_f64().unwrap(), 0.0, "{k}");
        }
    }
    assert!(std::fs::read_to_string(out.join("metrics.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn eval_without_forecasts_fails_clearly() {
    let dir = TempDir::new().unwrap();
    let scene_path = dir.path().join("scenes.jsonl");
    write_scenes(&scene_path, &[generate(&SynthSpec::default()).unwrap()]).unwrap();
    let o = posecast(&["eval", "--scenes", s(&scene_path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("forecasts"));
    let empty = write(&dir.path().join("empty.jsonl"), "");
    let o = posecast(&["eval", "--scenes", s(&scene_path), "--forecasts", s(&empty), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no forecasts"), "{}", stderr(&o));
}

#[test]
fn smoke_pipeline_under_a_minute() {
    let started = Instant::now();
    let dir = TempDir::new().unwrap();
    let p = |name: &str| dir.path().join(name);
    let spec = write(&p("spec.txt"), "count=4\nstyle=turn\nagents=2\n");
    let o = posecast(&["synth", "--config", s(&spec), "--out", s(&p("data")), "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let train = write(&p("train.txt"), "# small and fast\npreset=compact\nsteps=50\n");
    let o = posecast(&["train", "--config", s(&train), "--data", s(&p("data")), "--out", s(&p("run")), "--modes", "3", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.ckpt", "loss.csv", "loss.svg", "config.txt"] {
        assert!(p("run").join(f).exists(), "{f}");
    }
    let echoed = std::fs::read_to_string(p("run").join("config.txt")).unwrap();
    assert!(echoed.contains("modes=3\n") && echoed.contains("seed=2\n") && echoed.contains("steps=50\n"));
    let csv = std::fs::read_to_string(p("run").join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);

    let mut all = Vec::new();
    for e in std::fs::read_dir(p("data")).unwrap() {
        let path = e.unwrap().path();
        if path.extension().is_some_and(|x| x == "jsonl") {
            all.extend(read_scenes(&path).unwrap());
        }
    }
    all.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    write_scenes(&p("all.jsonl"), &all).unwrap();
    let o = posecast(&["predict", "--checkpoint", s(&p("run/model.ckpt")), "--scenes", s(&p("all.jsonl")), "--holdout", "--out", s(&p("pred"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bundles: Vec<ForecastBundle> = jsonl::read(&p("pred/forecasts.jsonl")).unwrap();
    assert_eq!(bundles.len(), 4);
    assert!(bundles.iter().all(|b| b.modes() == 3 && b.frames() == 20));

    let o = posecast(&["eval", "--scenes", s(&p("all.jsonl")), "--forecasts", s(&p("pred/forecasts.jsonl")), "--out", s(&p("ev"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = posecast(&["eval", "--scenes", s(&p("all.jsonl")), "--checkpoint", s(&p("run/model.ckpt")), "--out", s(&p("ev2"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(p("ev/report.json")).unwrap(),
        std::fs::read(p("ev2/report.json")).unwrap(),
        "file and on-the-fly forecasts score identically"
    );
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "pipeline took {secs:.1}s");
}

#[test]
fn resume_rejects_architecture_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir.path().join("t.txt"), "resume=whatever.ckpt\nd_pose=32\n");
    let o = posecast(&["train", "--config", s(&cfg), "--data", ".", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("d_pose"));
}
