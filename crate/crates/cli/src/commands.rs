//! One function per subcommand.

use std::path::{Path, PathBuf};

use posecast_core::extract::{self, ExtractionConfig, ExtractionScene};
use posecast_core::metrics::{self, MetricReport};
use posecast_core::model::{ForecastBundle, Model, ModelConfig};
use posecast_core::motion::{read_scenes, write_scenes, GlobalPoseSequence, Scene, Skeleton};
use posecast_core::synth::{self, MotionStyle, SynthSpec};
use posecast_core::training::{write_trace, ModeSelection, TrainConfig, Trainer};
use posecast_core::{jsonl, Error};

use crate::config::RunConfig;
use crate::plot::{line_chart, Series};
use crate::{CliError, Common, Scenario};

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn prepare_out(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out).map_err(|e| io_err(&common.out, e))
}

/// Checks for unknown keys, then echoes the effective configuration.
fn finish(cfg: &RunConfig, common: &Common) -> Result<()> {
    cfg.finish()?;
    prepare_out(common)?;
    write_file(&common.out.join("config.txt"), &cfg.echo())
}

/// Scenes from one `.jsonl` file or every `.jsonl` file of a directory
/// (in file-name order).
fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        for f in files {
            scenes.extend(read_scenes(&f)?);
        }
    } else {
        scenes = read_scenes(path)?;
    }
    if scenes.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    Ok(scenes)
}

fn parse_style(raw: &str) -> Result<MotionStyle> {
    raw.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

pub fn synth(common: &Common, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.set("seed", seed);
    let d = SynthSpec::default();
    let count: usize = cfg.get("count", 10)?;
    let style: String = cfg.get("style", "straight".to_string())?;
    let spec = SynthSpec {
        agents: cfg.get("agents", d.agents)?,
        frames: cfg.get("frames", d.frames)?,
        frame_rate: cfg.get("frame_rate", d.frame_rate)?,
        style: parse_style(&style)?,
        avoidance: cfg.get("avoidance", d.avoidance)?,
        fork_frame: cfg.get("fork_frame", d.fork_frame)?,
        seed: cfg.get("seed", d.seed)?,
    };
    finish(&cfg, common)?;
    let scenes = synth::generate_set(&spec, count)?;
    for s in &scenes {
        write_scenes(&common.out.join(format!("{}.jsonl", s.scene_id)), std::slice::from_ref(s))?;
    }
    eprintln!("wrote {} scenes to {}", scenes.len(), common.out.display());
    Ok(())
}

pub fn extract(input: &Path, common: &Common) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let d = ExtractionConfig::default();
    let ec = ExtractionConfig {
        tau: cfg.get("tau", d.tau)?,
        max_range: cfg.get("max_range", d.max_range)?,
        min_agents: cfg.get("min_agents", d.min_agents)?,
        stride_frames: cfg.get("stride_frames", d.stride_frames)?,
        window_frames: cfg.get("window_frames", d.window_frames)?,
        camera_count: cfg.get_opt("camera_count")?,
        frame_rate: cfg.get("frame_rate", d.frame_rate)?,
        hip_index: cfg.get("hip_index", d.hip_index)?,
    };
    let prefix: String = cfg.get("prefix", "window".to_string())?;
    finish(&cfg, common)?;
    let scene = ExtractionScene::load(input)?;
    let (scenes, report) = extract::extract(&scene, &ec, &prefix)?;
    write_scenes(&common.out.join("scenes.jsonl"), &scenes)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&common.out.join("report.json"), &(json + "\n"))?;
    eprintln!(
        "{} detections, {} accepted, {} windows",
        report.detections, report.accepted, report.windows
    );
    Ok(())
}

const MODEL_KEYS: &[&str] = &[
    "preset",
    "t_p",
    "t_f",
    "modes",
    "radius",
    "d_pose",
    "pose_heads",
    "pose_dk",
    "pose_ff",
    "pose_layers",
    "d_traj",
    "traj_heads",
    "traj_dk",
    "traj_ff",
    "temporal_layers",
    "decoder_layers",
    "head_hidden",
    "pose_coeff_scale",
    "dropout",
    "dct_keep",
    "use_pose",
    "skeleton",
];

fn model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    let preset: String = cfg.get("preset", "full".to_string())?;
    let mut m = match preset.as_str() {
        "full" => ModelConfig::default(),
        "compact" => ModelConfig::default().compact(),
        other => return Err(CliError::Usage(format!("unknown preset `{other}` (full, compact)"))),
    };
    if let Some(path) = cfg.get_opt::<String>("skeleton")? {
        m.skeleton = Skeleton::load(Path::new(&path))?;
    }
    m.scenario.t_p = cfg.get("t_p", m.scenario.t_p)?;
    m.scenario.t_f = cfg.get("t_f", m.scenario.t_f)?;
    m.scenario.modes = cfg.get("modes", m.scenario.modes)?;
    m.scenario.radius = cfg.get_opt("radius")?;
    m.d_pose = cfg.get("d_pose", m.d_pose)?;
    m.pose_heads = cfg.get("pose_heads", m.pose_heads)?;
    m.pose_dk = cfg.get("pose_dk", m.pose_dk)?;
    m.pose_ff = cfg.get("pose_ff", m.pose_ff)?;
    m.pose_layers = cfg.get("pose_layers", m.pose_layers)?;
    m.d_traj = cfg.get("d_traj", m.d_traj)?;
    m.traj_heads = cfg.get("traj_heads", m.traj_heads)?;
    m.traj_dk = cfg.get("traj_dk", m.traj_dk)?;
    m.traj_ff = cfg.get("traj_ff", m.traj_ff)?;
    m.temporal_layers = cfg.get("temporal_layers", m.temporal_layers)?;
    m.decoder_layers = cfg.get("decoder_layers", m.decoder_layers)?;
    m.head_hidden = cfg.get("head_hidden", m.head_hidden)?;
    m.pose_coeff_scale = cfg.get("pose_coeff_scale", m.pose_coeff_scale)?;
    m.dropout = cfg.get("dropout", m.dropout)?;
    m.dct_keep = cfg.get_opt("dct_keep")?;
    m.use_pose = cfg.get("use_pose", m.use_pose)?;
    m.validate()?;
    Ok(m)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let selection: String = cfg.get("selection", "joint".to_string())?;
    Ok(TrainConfig {
        lr: cfg.get("lr", d.lr)?,
        weight_decay: cfg.get("weight_decay", d.weight_decay)?,
        batch_size: cfg.get("batch_size", d.batch_size)?,
        steps: cfg.get("steps", d.steps)?,
        seed: cfg.get("seed", d.seed)?,
        window_stride: cfg.get("window_stride", d.window_stride)?,
        checkpoint_every: cfg.get("checkpoint_every", d.checkpoint_every)?,
        selection: match selection.as_str() {
            "joint" => ModeSelection::Joint,
            "independent" => ModeSelection::Independent,
            other => return Err(CliError::Usage(format!("unknown selection `{other}` (joint, independent)"))),
        },
        warmup_steps: cfg.get("warmup_steps", d.warmup_steps)?,
    })
}

fn loss_plot(trainer: &Trainer) -> String {
    let every = trainer.trace.len().div_ceil(1000).max(1);
    let pick = |f: fn(&posecast_core::training::TraceRow) -> f64| -> Vec<(f64, f64)> {
        trainer.trace.iter().step_by(every).map(|r| (r.step as f64, f(r))).collect()
    };
    line_chart(
        "training loss",
        "step",
        "loss (m, summed)",
        &[
            Series { name: "L", points: pick(|r| r.l) },
            Series { name: "L_Tr", points: pick(|r| r.l_tr) },
            Series { name: "L_Po", points: pick(|r| r.l_po) },
        ],
    )
}

/// Trains from scratch, or continues `resume=<checkpoint>` whose stored
/// architecture is then used unchanged.
pub fn train(data: &Path, common: &Common, scenario: &Scenario) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.set("seed", scenario.seed);
    cfg.set("modes", scenario.modes);
    cfg.set("radius", scenario.radius.as_ref());
    cfg.set("t_p", scenario.tp);
    cfg.set("t_f", scenario.tf);
    let resume: Option<String> = cfg.get_opt("resume")?;
    let tc = train_config(&cfg)?;
    let model = match &resume {
        Some(path) => {
            if let Some(k) = MODEL_KEYS.iter().find(|k| cfg.contains(k)) {
                return Err(CliError::Usage(format!(
                    "key `{k}` cannot be set when resuming; the checkpoint fixes the architecture"
                )));
            }
            Model::load(Path::new(path))?
        }
        None => Model::new(model_config(&cfg)?, tc.seed)?,
    };
    finish(&cfg, common)?;
    let scenes = load_scenes(data)?;
    let mut trainer = Trainer::new(tc, model, &scenes)?;
    if trainer.config.checkpoint_every > 0 {
        trainer.checkpoint_dir = Some(common.out.clone());
    }
    let steps = trainer.config.steps;
    let every = (steps / 20).max(1);
    eprintln!("training on {} windows, {} parameters", trainer.samples.len(), trainer.model.store.num_scalars());
    let result = trainer.fit(|r, done| {
        if done % every == 0 || done == steps {
            eprintln!("step {done}/{steps}  L {:.4}  L_Tr {:.4}  L_Po {:.4}", r.l, r.l_tr, r.l_po);
        }
    });
    write_trace(&common.out.join("loss.csv"), &trainer.trace)?;
    write_file(&common.out.join("loss.svg"), &loss_plot(&trainer))?;
    result?;
    trainer.model.save(&common.out.join("model.ckpt"))?;
    Ok(())
}

/// The observed window of `scene`: the last `T_p` frames, or with `holdout`
/// the `T_p` frames before the last `T_f`.
fn observed(scene: &Scene, t_p: usize, t_f: usize, holdout: bool) -> Result<GlobalPoseSequence> {
    let frames = scene.poses.frames();
    let need = if holdout { t_p + t_f } else { t_p };
    if frames < need {
        return Err(Error::Data(format!("scene {} has {frames} frames, needs {need}", scene.scene_id)).into());
    }
    let end = if holdout { frames - t_f } else { frames };
    Ok(scene.poses.window(end - t_p, t_p)?)
}

fn forecast(model: &Model, scenes: &[Scene], holdout: bool) -> Result<Vec<ForecastBundle>> {
    let sc = model.config.scenario;
    let past = scenes
        .iter()
        .map(|s| observed(s, sc.t_p, sc.t_f, holdout))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&GlobalPoseSequence> = past.iter().collect();
    let mut bundles = model.predict_all(&refs)?;
    for (b, s) in bundles.iter_mut().zip(scenes) {
        b.scene_id = s.scene_id.clone();
    }
    Ok(bundles)
}

pub fn predict(checkpoint: &Path, scenes: &Path, holdout: bool, common: &Common) -> Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    finish(&cfg, common)?;
    let model = Model::load(checkpoint)?;
    let scenes = load_scenes(scenes)?;
    let bundles = forecast(&model, &scenes, holdout)?;
    jsonl::write(&common.out.join("forecasts.jsonl"), &bundles)?;
    eprintln!("wrote {} forecasts", bundles.len());
    Ok(())
}

pub enum ForecastSource {
    File(PathBuf),
    Checkpoint(PathBuf),
}

fn parse_timestamps(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| *v > 0.0 && v.is_finite())
                .ok_or_else(|| CliError::Usage(format!("invalid timestamp `{t}` in eval_at")))
        })
        .collect()
}

/// Scores each scene's forecast against its last `T_f` frames.
pub fn eval(scenes: &Path, source: ForecastSource, eval_at: Option<String>, plot: bool, common: &Common) -> Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.set("eval_at", eval_at);
    let timestamps = parse_timestamps(&cfg.get("eval_at", "1.0,2.0".to_string())?)?;
    let hip_default = Skeleton::default().hip_index();
    let scenes = load_scenes(scenes)?;
    let (bundles, hip) = match &source {
        ForecastSource::File(path) => {
            let hip = cfg.get("hip_index", hip_default)?;
            finish(&cfg, common)?;
            let bundles: Vec<ForecastBundle> = jsonl::read(path)?;
            if bundles.is_empty() {
                return Err(Error::Data(format!("{} contains no forecasts", path.display())).into());
            }
            (bundles, hip)
        }
        ForecastSource::Checkpoint(path) => {
            finish(&cfg, common)?;
            let model = Model::load(path)?;
            let hip = model.config.skeleton.hip_index();
            (forecast(&model, &scenes, true)?, hip)
        }
    };
    let mut rows = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let b = bundles
            .iter()
            .find(|b| b.scene_id == s.scene_id)
            .ok_or_else(|| Error::Data(format!("no forecast for scene {}", s.scene_id)))?;
        if b.agent_ids != s.poses.agent_ids() {
            return Err(Error::Data(format!("forecast agents differ from scene {}", s.scene_id)).into());
        }
        let t_f = b.frames();
        let frames = s.poses.frames();
        if frames < t_f {
            return Err(Error::Data(format!("scene {} is shorter than the {t_f}-frame forecast", s.scene_id)).into());
        }
        let gt = s.poses.window(frames - t_f, t_f)?;
        rows.push(metrics::evaluate_scene(b, &gt, hip, &timestamps)?);
    }
    let report = metrics::aggregate(&timestamps, rows);
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&common.out.join("report.json"), &(json + "\n"))?;
    if plot {
        write_file(&common.out.join("metrics.svg"), &metric_plot(&report))?;
    }
    for ts in &timestamps {
        let m = &report.aggregate[&metrics::timestamp_label(*ts)];
        eprintln!("{:>6}  JPE {:8.2}  APE {:8.2}  FDE {:8.2}  (mm)", metrics::timestamp_label(*ts), m.jpe, m.ape, m.fde);
    }
    Ok(())
}

fn metric_plot(report: &MetricReport) -> String {
    let curve = |f: fn(&metrics::MetricTriple) -> f64| -> Vec<(f64, f64)> {
        report
            .timestamps
            .iter()
            .map(|t| (*t, f(&report.aggregate[&metrics::timestamp_label(*t)])))
            .collect()
    };
    line_chart(
        "forecast error",
        "time (s)",
        "error (mm)",
        &[
            Series { name: "JPE", points: curve(|m| m.jpe) },
            Series { name: "APE", points: curve(|m| m.ape) },
            Series { name: "FDE", points: curve(|m| m.fde) },
        ],
    )
}
