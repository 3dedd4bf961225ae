//! Scenes, skeletons and the global ↔ (trajectory, local pose) split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const PART_COUNT: usize = 5;

/// Joint layout with a hip joint and a five-way body-part partition
/// (torso, left arm, right arm, left leg, right leg).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonFile", into = "SkeletonFile")]
pub struct Skeleton {
    joint_names: Vec<String>,
    hip_index: usize,
    parts: [Vec<usize>; PART_COUNT],
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    joint_names: Vec<String>,
    hip_index: usize,
    parts: Vec<Vec<usize>>,
}

impl TryFrom<SkeletonFile> for Skeleton {
    type Error = Error;

    fn try_from(f: SkeletonFile) -> Result<Self> {
        let parts: [Vec<usize>; PART_COUNT] = f
            .parts
            .try_into()
            .map_err(|p: Vec<Vec<usize>>| Error::Data(format!("skeleton needs {PART_COUNT} parts, got {}", p.len())))?;
        Skeleton::new(f.joint_names, f.hip_index, parts)
    }
}

impl From<Skeleton> for SkeletonFile {
    fn from(s: Skeleton) -> Self {
        Self {
            joint_names: s.joint_names,
            hip_index: s.hip_index,
            parts: s.parts.to_vec(),
        }
    }
}

impl Default for Skeleton {
    /// Fifteen joints: hip, spine, head; shoulder, elbow, wrist per arm;
    /// hip side, knee, ankle per leg.
    fn default() -> Self {
        let names = [
            "hip", "spine", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
            "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
        ];
        Skeleton::new(
            names.iter().map(|s| s.to_string()).collect(),
            0,
            [vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8], vec![9, 10, 11], vec![12, 13, 14]],
        )
        .expect("default skeleton is valid")
    }
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, hip_index: usize, parts: [Vec<usize>; PART_COUNT]) -> Result<Self> {
        let j = joint_names.len();
        let mut seen = vec![false; j];
        for &idx in parts.iter().flatten() {
            if idx >= j {
                return Err(Error::Data(format!("part joint {idx} out of range for {j} joints")));
            }
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Data(format!("joint {idx} appears in more than one part")));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("joint {missing} is not in any part")));
        }
        if !parts[0].contains(&hip_index) {
            return Err(Error::Data(format!("hip joint {hip_index} must belong to the torso part")));
        }
        Ok(Self { joint_names, hip_index, parts })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: 1,
            source,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn hip_index(&self) -> usize {
        self.hip_index
    }

    pub fn parts(&self) -> &[Vec<usize>; PART_COUNT] {
        &self.parts
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }
}

/// Joint positions `[agent][frame][joint][xyz]` in world meters.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalPoseSequence {
    agents: usize,
    frames: usize,
    joints: usize,
    positions: Vec<f64>,
    agent_ids: Vec<String>,
    frame_rate: f64,
}

impl GlobalPoseSequence {
    pub fn new(
        agent_ids: Vec<String>,
        frames: usize,
        joints: usize,
        positions: Vec<f64>,
        frame_rate: f64,
    ) -> Result<Self> {
        let agents = agent_ids.len();
        if agents == 0 || frames == 0 || joints == 0 {
            return Err(Error::Data(format!(
                "scene needs at least one agent, frame and joint (got {agents}, {frames}, {joints})"
            )));
        }
        if positions.len() != agents * frames * joints * 3 {
            return Err(Error::shape(
                "positions (agents, frames, joints, 3)",
                (agents, frames, joints, 3),
                positions.len(),
            ));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite joint coordinate".into()));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::Data(format!("frame rate {frame_rate} must be positive")));
        }
        Ok(Self { agents, frames, joints, positions, agent_ids, frame_rate })
    }

    /// Builds from a closure `f(agent, frame, joint) -> xyz`.
    pub fn from_fn(
        agent_ids: Vec<String>,
        frames: usize,
        joints: usize,
        frame_rate: f64,
        mut f: impl FnMut(usize, usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut positions = Vec::with_capacity(agent_ids.len() * frames * joints * 3);
        for n in 0..agent_ids.len() {
            for t in 0..frames {
                for j in 0..joints {
                    positions.extend(f(n, t, j));
                }
            }
        }
        Self::new(agent_ids, frames, joints, positions, frame_rate)
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn agent_ids(&self) -> &[String] {
        &self.agent_ids
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    fn offset(&self, n: usize, t: usize, j: usize) -> usize {
        ((n * self.frames + t) * self.joints + j) * 3
    }

    pub fn get(&self, n: usize, t: usize, j: usize) -> [f64; 3] {
        let o = self.offset(n, t, j);
        [self.positions[o], self.positions[o + 1], self.positions[o + 2]]
    }

    /// Frames `start..start + len` of every agent.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::shape("window frames", self.frames, start..start + len));
        }
        Self::from_fn(self.agent_ids.clone(), len, self.joints, self.frame_rate, |n, t, j| {
            self.get(n, start + t, j)
        })
    }

    /// The listed agents, in the given order.
    pub fn select_agents(&self, agents: &[usize]) -> Result<Self> {
        if let Some(&bad) = agents.iter().find(|&&a| a >= self.agents) {
            return Err(Error::shape("agent index", self.agents, bad));
        }
        let ids = agents.iter().map(|&a| self.agent_ids[a].clone()).collect();
        Self::from_fn(ids, self.frames, self.joints, self.frame_rate, |n, t, j| self.get(agents[n], t, j))
    }
}

/// Hip positions `[agent][frame][xyz]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySequence {
    pub agents: usize,
    pub frames: usize,
    pub hips: Vec<f64>,
}

impl TrajectorySequence {
    pub fn get(&self, n: usize, t: usize) -> [f64; 3] {
        let o = (n * self.frames + t) * 3;
        [self.hips[o], self.hips[o + 1], self.hips[o + 2]]
    }
}

/// Hip-relative joint offsets `[agent][frame][joint][xyz]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalPoseSequence {
    pub agents: usize,
    pub frames: usize,
    pub joints: usize,
    pub offsets: Vec<f64>,
    /// Rounding residual per coordinate so that [`recompose`] restores the
    /// source positions bit for bit. Empty means all zero.
    pub residual: Vec<f64>,
}

impl LocalPoseSequence {
    pub fn get(&self, n: usize, t: usize, j: usize) -> [f64; 3] {
        let o = ((n * self.frames + t) * self.joints + j) * 3;
        [self.offsets[o], self.offsets[o + 1], self.offsets[o + 2]]
    }
}

/// Past/future lengths, mode count and interaction radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub t_p: usize,
    pub t_f: usize,
    pub modes: usize,
    /// Hip-distance cutoff in meters; `None` means every agent interacts.
    pub radius: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { t_p: 10, t_f: 20, modes: 6, radius: None }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_p < 2 || self.t_f < 1 || self.modes < 1 {
            return Err(Error::Config(format!(
                "need t_p >= 2, t_f >= 1, modes >= 1 (got {}, {}, {})",
                self.t_p, self.t_f, self.modes
            )));
        }
        if let Some(r) = self.radius {
            if !(r >= 0.0) {
                return Err(Error::Config(format!("radius {r} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.t_p + self.t_f
    }
}

/// `p - h` nudged by a few ulps so that `offset + h == p` where possible,
/// plus the residual `p - (offset + h)` for the cases where no such offset
/// exists (the hip coordinate is much larger in magnitude than `p`).
fn exact_offset(p: f64, h: f64) -> (f64, f64) {
    let mut o = p - h;
    for _ in 0..8 {
        let r = o + h;
        if r == p {
            return (o, 0.0);
        }
        o = if r < p { o.next_up() } else { o.next_down() };
    }
    (o, p - (o + h))
}

pub fn decompose(scene: &GlobalPoseSequence, skel: &Skeleton) -> Result<(TrajectorySequence, LocalPoseSequence)> {
    if scene.joints != skel.joint_count() {
        return Err(Error::shape("joint axis of scene vs skeleton", skel.joint_count(), scene.joints));
    }
    let (n_a, t_n, j_n) = (scene.agents, scene.frames, scene.joints);
    let hip = skel.hip_index();
    let mut hips = Vec::with_capacity(n_a * t_n * 3);
    let mut offsets = Vec::with_capacity(scene.positions.len());
    let mut residual = Vec::with_capacity(scene.positions.len());
    for n in 0..n_a {
        for t in 0..t_n {
            let h = scene.get(n, t, hip);
            hips.extend(h);
            for j in 0..j_n {
                let p = scene.get(n, t, j);
                for c in 0..3 {
                    let (o, r) = exact_offset(p[c], h[c]);
                    offsets.push(o);
                    residual.push(r);
                }
            }
        }
    }
    if residual.iter().all(|&r| r == 0.0) {
        residual.clear();
    }
    Ok((
        TrajectorySequence { agents: n_a, frames: t_n, hips },
        LocalPoseSequence { agents: n_a, frames: t_n, joints: j_n, offsets, residual },
    ))
}

/// Inverse of [`decompose`]. Agent labels are `0..N` and the frame rate is
/// taken from `frame_rate`.
pub fn recompose(
    traj: &TrajectorySequence,
    local: &LocalPoseSequence,
    agent_ids: Vec<String>,
    frame_rate: f64,
) -> Result<GlobalPoseSequence> {
    if traj.agents != local.agents || traj.frames != local.frames {
        return Err(Error::shape(
            "trajectory vs local pose (agents, frames)",
            (traj.agents, traj.frames),
            (local.agents, local.frames),
        ));
    }
    if agent_ids.len() != traj.agents {
        return Err(Error::shape("agent ids", traj.agents, agent_ids.len()));
    }
    if !local.residual.is_empty() && local.residual.len() != local.offsets.len() {
        return Err(Error::shape("local pose residual", local.offsets.len(), local.residual.len()));
    }
    GlobalPoseSequence::from_fn(agent_ids, traj.frames, local.joints, frame_rate, |n, t, j| {
        let h = traj.get(n, t);
        let o = local.get(n, t, j);
        let base = ((n * local.frames + t) * local.joints + j) * 3;
        [0, 1, 2].map(|c| {
            let s = h[c] + o[c];
            match local.residual.get(base + c) {
                Some(&r) if r != 0.0 => s + r,
                _ => s,
            }
        })
    })
}

/// Rotates `p` about the z axis by `yaw`, then shifts it in the plane.
pub fn se2_point(p: [f64; 3], yaw: f64, shift: [f64; 2]) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1], p[2]]
}

pub fn apply_se2(scene: &GlobalPoseSequence, yaw: f64, shift: [f64; 2]) -> GlobalPoseSequence {
    let mut out = scene.clone();
    for p in out.positions.chunks_exact_mut(3) {
        let q = se2_point([p[0], p[1], p[2]], yaw, shift);
        p.copy_from_slice(&q);
    }
    out
}

/// A scene with its identifier and, for generated fork scenes, the hidden
/// intent label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneRecord", into = "SceneRecord")]
pub struct Scene {
    pub scene_id: String,
    pub poses: GlobalPoseSequence,
    pub label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct AgentRecord {
    id: String,
    joints: Vec<Vec<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    frame_rate: f64,
    agents: Vec<AgentRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

impl TryFrom<SceneRecord> for Scene {
    type Error = Error;

    fn try_from(r: SceneRecord) -> Result<Self> {
        let frames = r.agents.first().map_or(0, |a| a.joints.len());
        let joints = r.agents.first().and_then(|a| a.joints.first()).map_or(0, |f| f.len());
        let mut positions = Vec::new();
        for a in &r.agents {
            if a.joints.len() != frames || a.joints.iter().any(|f| f.len() != joints) {
                return Err(Error::Data(format!(
                    "scene {}: agent {} does not have {frames} frames of {joints} joints",
                    r.scene_id, a.id
                )));
            }
            positions.extend(a.joints.iter().flatten().flatten());
        }
        let ids = r.agents.into_iter().map(|a| a.id).collect();
        Ok(Scene {
            poses: GlobalPoseSequence::new(ids, frames, joints, positions, r.frame_rate)?,
            scene_id: r.scene_id,
            label: r.label,
        })
    }
}

impl From<Scene> for SceneRecord {
    fn from(s: Scene) -> Self {
        let p = &s.poses;
        let agents = (0..p.agents)
            .map(|n| AgentRecord {
                id: p.agent_ids[n].clone(),
                joints: (0..p.frames).map(|t| (0..p.joints).map(|j| p.get(n, t, j)).collect()).collect(),
            })
            .collect();
        SceneRecord {
            scene_id: s.scene_id,
            frame_rate: p.frame_rate,
            agents,
            label: s.label,
        }
    }
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    jsonl::read(path)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    jsonl::write(path, scenes)
}
