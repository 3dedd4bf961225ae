//! Dataset construction from per-camera 3D pose detections: annotation
//! matching, ray refinement, box centering, camera-yaw rotation and
//! registration into fixed-length multi-agent windows.
//!
//! Camera-frame points use the optical convention (x right, y down, z
//! forward). World points are z-up with the robot at the origin; a camera
//! with yaw 0 looks along world +x.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::motion::{GlobalPoseSequence, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    pub cam: usize,
    pub k: [[f64; 3]; 3],
    /// Rotation about world z taking the camera's forward axis to world.
    pub yaw: f64,
    k_inv: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    cam: usize,
    #[serde(rename = "K")]
    k: [f64; 9],
    yaw: f64,
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let k = [[r.k[0], r.k[1], r.k[2]], [r.k[3], r.k[4], r.k[5]], [r.k[6], r.k[7], r.k[8]]];
        CameraModel::new(r.cam, k, r.yaw)
    }
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        let k = c.k;
        CameraRecord {
            cam: c.cam,
            k: [k[0][0], k[0][1], k[0][2], k[1][0], k[1][1], k[1][2], k[2][0], k[2][1], k[2][2]],
            yaw: c.yaw,
        }
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            // Cofactor of (c, r) over det.
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    Some(inv)
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

impl CameraModel {
    pub fn new(cam: usize, k: [[f64; 3]; 3], yaw: f64) -> Result<Self> {
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Data(format!("camera {cam}: focal lengths must be positive")));
        }
        let k_inv = invert3(&k).ok_or_else(|| Error::Data(format!("camera {cam}: intrinsics are singular")))?;
        Ok(Self { cam, k, yaw, k_inv })
    }

    /// Pinhole with square pixels and principal point `(cx, cy)`.
    pub fn pinhole(cam: usize, focal: f64, cx: f64, cy: f64, yaw: f64) -> Result<Self> {
        Self::new(cam, [[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]], yaw)
    }

    pub fn k_inv(&self) -> &[[f64; 3]; 3] {
        &self.k_inv
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        let h = mat_vec(&self.k, p);
        [h[0] / h[2], h[1] / h[2]]
    }

    /// World point to camera optical frame.
    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = rotate_z(p, -self.yaw);
        [-q[1], -q[2], q[0]]
    }
}

/// Optical axes to the camera's z-up axes (forward, left, up).
pub fn optical_to_upright(p: [f64; 3]) -> [f64; 3] {
    [p[2], -p[0], -p[1]]
}

fn rotate_z(p: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub t: usize,
    pub cam: usize,
    pub joints_3d: Vec<[f64; 3]>,
    pub joints_2d: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub t: usize,
    pub cam: usize,
    pub agent_id: String,
    pub joints_2d: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub t: usize,
    pub agent_id: String,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtractionScene {
    pub cameras: Vec<CameraModel>,
    pub detections: Vec<Detection>,
    pub annotations: Vec<Annotation>,
    pub boxes: Vec<BoxAnnotation>,
}

impl ExtractionScene {
    /// Reads `cameras.jsonl`, `detections.jsonl`, `annotations.jsonl` and
    /// `boxes.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let cameras_path = dir.join("cameras.jsonl");
        if !cameras_path.exists() {
            return Err(Error::Data(format!("missing camera file {}", cameras_path.display())));
        }
        Ok(Self {
            cameras: jsonl::read(&cameras_path)?,
            detections: jsonl::read(&dir.join("detections.jsonl"))?,
            annotations: jsonl::read(&dir.join("annotations.jsonl"))?,
            boxes: jsonl::read(&dir.join("boxes.jsonl"))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        jsonl::write(&dir.join("cameras.jsonl"), &self.cameras)?;
        jsonl::write(&dir.join("detections.jsonl"), &self.detections)?;
        jsonl::write(&dir.join("annotations.jsonl"), &self.annotations)?;
        jsonl::write(&dir.join("boxes.jsonl"), &self.boxes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Match threshold in pixels; a mean 2D distance of `tau` or more is rejected.
    pub tau: f64,
    /// Agents farther than this from the robot (xy, meters) are excluded.
    pub max_range: f64,
    pub min_agents: usize,
    pub stride_frames: usize,
    /// Frames per emitted window (past plus future).
    pub window_frames: usize,
    /// Expected number of cameras; `None` accepts any.
    pub camera_count: Option<usize>,
    pub frame_rate: f64,
    pub hip_index: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            tau: 20.0,
            max_range: 4.5,
            min_agents: 3,
            stride_frames: 15,
            window_frames: 45,
            camera_count: None,
            frame_rate: 15.0,
            hip_index: 0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !(self.max_range > 0.0) || !(self.frame_rate > 0.0) {
            return Err(Error::Config("tau must be non-negative, max_range and frame_rate positive".into()));
        }
        if self.stride_frames == 0 || self.window_frames == 0 {
            return Err(Error::Config("stride_frames and window_frames must be at least 1".into()));
        }
        Ok(())
    }
}

fn mean_pixel_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let total: f64 = a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum();
    Some(total / a.len() as f64)
}

/// Greedy one-to-one matching of detections to annotations in ascending
/// mean 2D distance. A pair is accepted only when its distance is below
/// `tau`. Returns the matched annotation index per detection.
pub fn match_filter(detections: &[&[[f64; 2]]], annotations: &[&[[f64; 2]]], tau: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (d, det) in detections.iter().enumerate() {
        for (a, ann) in annotations.iter().enumerate() {
            if let Some(dist) = mean_pixel_distance(det, ann) {
                if dist < tau {
                    pairs.push((dist, d, a));
                }
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out = vec![None; detections.len()];
    let mut taken = vec![false; annotations.len()];
    for (_, d, a) in pairs {
        if out[d].is_none() && !taken[a] {
            out[d] = Some(a);
            taken[a] = true;
        }
    }
    out
}

/// Orthogonal projection of `p` onto the line through `(0, 0, z)` and
/// `z·K⁻¹(X, Y, 1)`, with `z` the depth of `p`. `None` when the two points
/// coincide.
pub fn refine_joint(p: [f64; 3], pixel: [f64; 2], k_inv: &[[f64; 3]; 3]) -> Option<[f64; 3]> {
    let z = p[2];
    let ray = mat_vec(k_inv, [pixel[0], pixel[1], 1.0]);
    let a = [0.0, 0.0, z];
    let b = [z * ray[0], z * ray[1], z * ray[2]];
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if !(dd > 1e-24) {
        return None;
    }
    let s = ((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1] + (p[2] - a[2]) * d[2]) / dd;
    Some([a[0] + s * d[0], a[1] + s * d[1], a[2] + s * d[2]])
}

/// Result of [`refine_pose`]; `degenerate` counts joints left unchanged
/// because their line was undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub joints: Vec<[f64; 3]>,
    pub degenerate: usize,
}

/// Shifts the annotation so its mean x equals the mean x of the detection's
/// own projections, then refines every joint onto its annotation line.
pub fn refine_pose(joints_3d: &[[f64; 3]], det_2d: &[[f64; 2]], ann_2d: &[[f64; 2]], cam: &CameraModel) -> Refined {
    let n = ann_2d.len().max(1) as f64;
    let shift = if det_2d.len() == ann_2d.len() && !det_2d.is_empty() {
        det_2d.iter().map(|p| p[0]).sum::<f64>() / n - ann_2d.iter().map(|p| p[0]).sum::<f64>() / n
    } else {
        0.0
    };
    let mut degenerate = 0;
    let joints = joints_3d
        .iter()
        .zip(ann_2d)
        .map(|(p, q)| {
            refine_joint(*p, [q[0] + shift, q[1]], cam.k_inv()).unwrap_or_else(|| {
                degenerate += 1;
                *p
            })
        })
        .collect();
    Refined { joints, degenerate }
}

/// Rigid xy shift that puts the hip at `center`; z is untouched.
pub fn center(pose: &[[f64; 3]], hip: usize, center: [f64; 2]) -> Vec<[f64; 3]> {
    let d = [center[0] - pose[hip][0], center[1] - pose[hip][1]];
    pose.iter().map(|p| [p[0] + d[0], p[1] + d[1], p[2]]).collect()
}

/// Rotation of every joint about world z by the camera yaw.
pub fn rotate_to_world(pose: &[[f64; 3]], cam: &CameraModel) -> Vec<[f64; 3]> {
    pose.iter().map(|p| rotate_z(*p, cam.yaw)).collect()
}

/// One refined, world-frame pose of one agent at one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisteredPose {
    pub t: usize,
    pub cam: usize,
    pub agent_id: String,
    pub joints: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub detections: usize,
    /// Detections without an annotation closer than `tau`.
    pub rejected: usize,
    pub accepted: usize,
    /// Accepted detections with no box for their agent and timestamp.
    pub missing_box: usize,
    pub degenerate_joints: usize,
    /// Accepted poses dropped because another camera registered the agent first.
    pub duplicates: usize,
    pub registered: usize,
    pub agents: usize,
    /// (agent, window) pairs excluded for leaving `max_range`.
    pub range_exclusions: usize,
    pub windows_considered: usize,
    pub windows: usize,
}

/// Filter, refine, center and rotate every detection. Cameras are visited
/// in index order at each timestamp so the first registration wins.
pub fn process(scene: &ExtractionScene, cfg: &ExtractionConfig) -> Result<(Vec<RegisteredPose>, ExtractionReport)> {
    cfg.validate()?;
    if let Some(c) = cfg.camera_count {
        if c != scene.cameras.len() {
            return Err(Error::Data(format!("expected {c} cameras, found {}", scene.cameras.len())));
        }
    }
    let cams: HashMap<usize, &CameraModel> = scene.cameras.iter().map(|c| (c.cam, c)).collect();
    let boxes: HashMap<(usize, &str), [f64; 2]> =
        scene.boxes.iter().map(|b| ((b.t, b.agent_id.as_str()), [b.cx, b.cy])).collect();
    let mut groups: BTreeMap<(usize, usize), (Vec<&Detection>, Vec<&Annotation>)> = BTreeMap::new();
    for d in &scene.detections {
        groups.entry((d.t, d.cam)).or_default().0.push(d);
    }
    for a in &scene.annotations {
        groups.entry((a.t, a.cam)).or_default().1.push(a);
    }
    let mut report = ExtractionReport { detections: scene.detections.len(), ..Default::default() };
    let mut out = Vec::new();
    let mut seen: std::collections::HashSet<(usize, String)> = Default::default();
    for ((t, cam_id), (dets, anns)) in groups {
        if dets.is_empty() {
            continue;
        }
        let cam = cams
            .get(&cam_id)
            .ok_or_else(|| Error::Data(format!("detection at t={t} references unknown camera {cam_id}")))?;
        let d2: Vec<&[[f64; 2]]> = dets.iter().map(|d| d.joints_2d.as_slice()).collect();
        let a2: Vec<&[[f64; 2]]> = anns.iter().map(|a| a.joints_2d.as_slice()).collect();
        let matches = match_filter(&d2, &a2, cfg.tau);
        for (det, m) in dets.iter().zip(matches) {
            let Some(ai) = m else {
                report.rejected += 1;
                continue;
            };
            report.accepted += 1;
            let ann = anns[ai];
            if det.joints_3d.len() != ann.joints_2d.len() || cfg.hip_index >= det.joints_3d.len() {
                return Err(Error::Data(format!(
                    "t={t} camera {cam_id}: detection has {} joints, annotation {}",
                    det.joints_3d.len(),
                    ann.joints_2d.len()
                )));
            }
            let Some(&bc) = boxes.get(&(t, ann.agent_id.as_str())) else {
                report.missing_box += 1;
                continue;
            };
            let refined = refine_pose(&det.joints_3d, &det.joints_2d, &ann.joints_2d, cam);
            report.degenerate_joints += refined.degenerate;
            let upright: Vec<[f64; 3]> = refined.joints.iter().map(|p| optical_to_upright(*p)).collect();
            let local_center = rotate_z([bc[0], bc[1], 0.0], -cam.yaw);
            let centered = center(&upright, cfg.hip_index, [local_center[0], local_center[1]]);
            let world = rotate_to_world(&centered, cam);
            if !seen.insert((t, ann.agent_id.clone())) {
                report.duplicates += 1;
                continue;
            }
            out.push(RegisteredPose { t, cam: cam_id, agent_id: ann.agent_id.clone(), joints: world });
        }
    }
    report.registered = out.len();
    Ok((out, report))
}

/// Window starts `0, stride, …` that fit in `frames`.
pub fn window_starts(frames: usize, window: usize, stride: usize) -> Vec<usize> {
    if frames < window {
        return Vec::new();
    }
    (0..=frames - window).step_by(stride.max(1)).collect()
}

/// Assembles registered poses into scenes of `window_frames` frames in
/// which at least `min_agents` agents are present and within range at
/// every frame.
pub fn register(poses: &[RegisteredPose], cfg: &ExtractionConfig, report: &mut ExtractionReport, prefix: &str) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut tracks: BTreeMap<&str, BTreeMap<usize, &RegisteredPose>> = BTreeMap::new();
    for p in poses {
        tracks.entry(p.agent_id.as_str()).or_default().entry(p.t).or_insert(p);
    }
    report.agents = tracks.len();
    let Some(t0) = poses.iter().map(|p| p.t).min() else {
        return Ok(Vec::new());
    };
    let t1 = poses.iter().map(|p| p.t).max().unwrap_or(t0);
    let joints = poses[0].joints.len();
    let hip = cfg.hip_index;
    let mut scenes = Vec::new();
    for start in window_starts(t1 - t0 + 1, cfg.window_frames, cfg.stride_frames) {
        report.windows_considered += 1;
        let frames: Vec<usize> = (t0 + start..t0 + start + cfg.window_frames).collect();
        let mut members: Vec<(&str, Vec<&RegisteredPose>)> = Vec::new();
        for (id, track) in &tracks {
            let Some(seq) = frames.iter().map(|t| track.get(t).copied()).collect::<Option<Vec<_>>>() else {
                continue;
            };
            if seq.iter().any(|p| p.joints[hip][0].hypot(p.joints[hip][1]) > cfg.max_range) {
                report.range_exclusions += 1;
                continue;
            }
            members.push((id, seq));
        }
        if members.len() < cfg.min_agents.max(1) {
            continue;
        }
        let poses = GlobalPoseSequence::from_fn(
            members.iter().map(|(id, _)| id.to_string()).collect(),
            cfg.window_frames,
            joints,
            cfg.frame_rate,
            |n, t, j| members[n].1[t].joints[j],
        )?;
        scenes.push(Scene { scene_id: format!("{prefix}{}", t0 + start), poses, label: None });
        report.windows += 1;
    }
    Ok(scenes)
}

/// The whole pipeline.
pub fn extract(scene: &ExtractionScene, cfg: &ExtractionConfig, prefix: &str) -> Result<(Vec<Scene>, ExtractionReport)> {
    let (poses, mut report) = process(scene, cfg)?;
    let scenes = register(&poses, cfg, &mut report, prefix)?;
    Ok((scenes, report))
}

/// Detection noise for [`render_fixture`]: a per-detection rigid offset
/// plus per-joint jitter, both isotropic Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub rigid_sigma: f64,
    pub joint_sigma: f64,
}

impl NoiseModel {
    /// Splits a root-mean-square 3D displacement `rms` evenly (in variance)
    /// between the rigid and per-joint parts.
    pub fn with_rms(rms: f64) -> Self {
        let axis = rms / 3f64.sqrt();
        Self { rigid_sigma: axis * 0.5f64.sqrt(), joint_sigma: axis * 0.5f64.sqrt() }
    }
}

/// `count` cameras with yaws evenly spread around the robot.
pub fn ring_cameras(count: usize, focal: f64, width: f64, height: f64) -> Result<Vec<CameraModel>> {
    (0..count)
        .map(|i| CameraModel::pinhole(i, focal, width / 2.0, height / 2.0, std::f64::consts::TAU * i as f64 / count as f64))
        .collect()
}

/// Renders world-frame scenes into camera observations: exact annotations
/// and boxes, noisy 3D detections (with their own projections). A pose is
/// seen by every camera that has all its joints in front and inside the
/// `width`×`height` image. Timestamps are frame indices.
pub fn render_fixture(
    scenes: &[GlobalPoseSequence],
    cameras: &[CameraModel],
    size: [f64; 2],
    noise: NoiseModel,
    hip: usize,
    seed: u64,
) -> Result<ExtractionScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rigid = Normal::new(0.0, noise.rigid_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let joint = Normal::new(0.0, noise.joint_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = ExtractionScene { cameras: cameras.to_vec(), ..Default::default() };
    let mut t_base = 0;
    for (si, s) in scenes.iter().enumerate() {
        for t in 0..s.frames() {
            let t_abs = t_base + t;
            for n in 0..s.agents() {
                let id = format!("s{si}-{}", s.agent_ids()[n]);
                let truth: Vec<[f64; 3]> = (0..s.joints()).map(|j| s.get(n, t, j)).collect();
                let hp = truth[hip];
                out.boxes.push(BoxAnnotation { t: t_abs, agent_id: id.clone(), cx: hp[0], cy: hp[1] });
                for cam in cameras {
                    let local: Vec<[f64; 3]> = truth.iter().map(|p| cam.world_to_camera(*p)).collect();
                    let visible = local.iter().all(|p| {
                        let px = cam.project(*p);
                        p[2] > 0.1 && (0.0..size[0]).contains(&px[0]) && (0.0..size[1]).contains(&px[1])
                    });
                    if !visible {
                        continue;
                    }
                    let off = [rigid.sample(&mut rng), rigid.sample(&mut rng), rigid.sample(&mut rng)];
                    let noisy: Vec<[f64; 3]> = local
                        .iter()
                        .map(|p| {
                            [
                                p[0] + off[0] + joint.sample(&mut rng),
                                p[1] + off[1] + joint.sample(&mut rng),
                                p[2] + off[2] + joint.sample(&mut rng),
                            ]
                        })
                        .collect();
                    out.annotations.push(Annotation {
                        t: t_abs,
                        cam: cam.cam,
                        agent_id: id.clone(),
                        joints_2d: local.iter().map(|p| cam.project(*p)).collect(),
                    });
                    out.detections.push(Detection {
                        t: t_abs,
                        cam: cam.cam,
                        joints_2d: noisy.iter().map(|p| cam.project(*p)).collect(),
                        joints_3d: noisy,
                    });
                }
            }
        }
        t_base += s.frames() + 1;
    }
    Ok(out)
}
