//! Per-scene constants computed outside the tape: agent frames, rotated
//! motion features, neighbor masks, frequency-domain pose tokens and the
//! packed layout used when several scenes share one forward pass.

use crate::dct::{dct_matrix, replicate_pad};
use crate::error::{Error, Result};
use crate::motion::{decompose, GlobalPoseSequence};
use crate::numerics::Array;

use super::ModelConfig;

/// Below this planar speed (meters per frame) a segment has no direction.
pub const HEADING_EPS: f64 = 1e-6;

/// Agent-centric frame: heading about z and the latest hip position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentFrame {
    pub heading: f64,
    pub cos: f64,
    pub sin: f64,
    pub origin: [f64; 3],
}

impl AgentFrame {
    pub fn new(heading: f64, origin: [f64; 3]) -> Self {
        let (sin, cos) = heading.sin_cos();
        Self { heading, cos, sin, origin }
    }

    /// Heading of the latest segment, else of the earliest segment with a
    /// planar direction, else zero. `hips` are `[x, y, z]` per frame.
    pub fn from_hips(hips: &[[f64; 3]]) -> Self {
        let origin = *hips.last().expect("at least one frame");
        let segs: Vec<[f64; 2]> = hips.windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]]).collect();
        let moving = |s: &&[f64; 2]| s[0].hypot(s[1]) >= HEADING_EPS;
        let heading = segs
            .last()
            .filter(moving)
            .or_else(|| segs.iter().find(moving))
            .map_or(0.0, |s| s[1].atan2(s[0]));
        Self::new(heading, origin)
    }

    /// Rotation that maps the heading direction onto +x.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        [[self.cos, self.sin, 0.0], [-self.sin, self.cos, 0.0], [0.0, 0.0, 1.0]]
    }

    /// World vector expressed in this frame's axes.
    pub fn to_local(&self, v: [f64; 3]) -> [f64; 3] {
        [self.cos * v[0] + self.sin * v[1], -self.sin * v[0] + self.cos * v[1], v[2]]
    }

    /// Inverse of [`AgentFrame::to_local`].
    pub fn to_world(&self, v: [f64; 3]) -> [f64; 3] {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1], v[2]]
    }
}

/// One scene reduced to network inputs (and optionally targets).
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub agents: usize,
    pub frames: Vec<AgentFrame>,
    /// Hip segments in each agent's own frame, `[N, T_p-1, 3]`.
    pub traj_ref: Array,
    /// `[R_i v_j, R_i v_i]` for every ordered pair, `[N, N, T_p-1, 6]`.
    pub pair: Array,
    /// Neighbor sets for the interaction encoder (self included), `[N, N]`.
    pub neighbors: Vec<bool>,
    /// Relative placement of agent `j` seen from `i`:
    /// `[x, y, cos Δθ, sin Δθ]`, `[N, N, 4]`.
    pub relative: Array,
    /// Per body part, flattened DCT of the padded local past in agent
    /// axes, `[N, 3·|part|·K]`.
    pub part_tokens: Vec<Array>,
    /// Local future implied by the truncated coefficients of the padded
    /// past, in agent axes, `[N, T_f, J, 3]`.
    pub base_future: Array,
    pub target: Option<Target>,
}

/// Ground-truth future in world coordinates.
#[derive(Clone, Debug)]
pub struct Target {
    /// `[N, T_f, J, 3]`.
    pub joints: Array,
    /// `[N, T_f, 3]`.
    pub hips: Array,
    /// Hip-relative future, world axes, `[N, T_f, J, 3]`.
    pub local: Array,
}

fn within(radius: Option<f64>, a: [f64; 3], b: [f64; 3]) -> bool {
    radius.is_none_or(|r| (a[0] - b[0]).hypot(a[1] - b[1]) <= r)
}

impl PreparedScene {
    /// `past` must hold exactly `T_p` frames; `future`, when given, `T_f`.
    pub fn new(cfg: &ModelConfig, past: &GlobalPoseSequence, future: Option<&GlobalPoseSequence>) -> Result<Self> {
        let sc = cfg.scenario;
        let skel = &cfg.skeleton;
        let (t_p, t_f) = (sc.t_p, sc.t_f);
        if past.frames() != t_p {
            return Err(Error::shape("past frames", t_p, past.frames()));
        }
        let (traj, local) = decompose(past, skel)?;
        let n = past.agents();
        let j_n = skel.joint_count();
        let hips: Vec<Vec<[f64; 3]>> = (0..n).map(|a| (0..t_p).map(|t| traj.get(a, t)).collect()).collect();
        let frames: Vec<AgentFrame> = hips.iter().map(|h| AgentFrame::from_hips(h)).collect();
        let seg = |a: usize, t: usize| -> [f64; 3] {
            let (p, q) = (hips[a][t], hips[a][t + 1]);
            [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
        };
        let tm = t_p - 1;

        let traj_ref = Array::from_fn(&[n, tm, 3], |i| frames[i[0]].to_local(seg(i[0], i[1]))[i[2]]);
        let pair = Array::from_fn(&[n, n, tm, 6], |i| {
            let f = &frames[i[0]];
            let v = if i[3] < 3 { seg(i[1], i[2]) } else { seg(i[0], i[2]) };
            f.to_local(v)[i[3] % 3]
        });
        let neighbors = (0..n * n)
            .map(|k| within(sc.radius, frames[k / n].origin, frames[k % n].origin))
            .collect();
        let relative = Array::from_fn(&[n, n, 4], |i| {
            let (fi, fj) = (&frames[i[0]], &frames[i[1]]);
            let d = [fj.origin[0] - fi.origin[0], fj.origin[1] - fi.origin[1], 0.0];
            let rel = fi.to_local(d);
            let dh = fj.heading - fi.heading;
            [rel[0], rel[1], dh.cos(), dh.sin()][i[2]]
        });

        // Local past in agent axes, padded and transformed per channel.
        let total = sc.total();
        let k = cfg.coeffs();
        let m = dct_matrix(total);
        let mut coeffs = vec![0.0; n * j_n * 3 * k];
        for a in 0..n {
            for j in 0..j_n {
                let seq: Vec<[f64; 3]> = (0..t_p).map(|t| frames[a].to_local(local.get(a, t, j))).collect();
                for c in 0..3 {
                    let chan: Vec<f64> = seq.iter().map(|p| p[c]).collect();
                    let padded = replicate_pad(&chan, t_f);
                    for q in 0..k {
                        let v = (0..total).map(|t| m[q * total + t] * padded[t]).sum();
                        coeffs[((a * j_n + j) * 3 + c) * k + q] = v;
                    }
                }
            }
        }
        let part_tokens = skel
            .parts()
            .iter()
            .map(|part| {
                let width = part.len() * 3 * k;
                Array::from_fn(&[n, width], |i| {
                    let (jj, rest) = (i[1] / (3 * k), i[1] % (3 * k));
                    coeffs[((i[0] * j_n + part[jj]) * 3) * k + rest]
                })
            })
            .collect();
        let base_future = Array::from_fn(&[n, t_f, j_n, 3], |i| {
            let t = t_p + i[1];
            let base = ((i[0] * j_n + i[2]) * 3 + i[3]) * k;
            (0..k).map(|q| m[q * total + t] * coeffs[base + q]).sum()
        });

        let target = match future {
            None => None,
            Some(fut) => {
                if fut.frames() != t_f || fut.agents() != n || fut.joints() != j_n {
                    return Err(Error::shape(
                        "future (agents, frames, joints)",
                        (n, t_f, j_n),
                        (fut.agents(), fut.frames(), fut.joints()),
                    ));
                }
                let hip = skel.hip_index();
                Some(Target {
                    joints: Array::from_fn(&[n, t_f, j_n, 3], |i| fut.get(i[0], i[1], i[2])[i[3]]),
                    hips: Array::from_fn(&[n, t_f, 3], |i| fut.get(i[0], i[1], hip)[i[2]]),
                    local: Array::from_fn(&[n, t_f, j_n, 3], |i| {
                        fut.get(i[0], i[1], i[2])[i[3]] - fut.get(i[0], i[1], hip)[i[3]]
                    }),
                })
            }
        };

        Ok(Self {
            agents: n,
            frames,
            traj_ref,
            pair,
            neighbors,
            relative,
            part_tokens,
            base_future,
            target,
        })
    }

    /// Splits a scene of at least `T_p + T_f` frames at `start`.
    pub fn from_window(cfg: &ModelConfig, scene: &GlobalPoseSequence, start: usize) -> Result<Self> {
        let sc = cfg.scenario;
        let past = scene.window(start, sc.t_p)?;
        let fut = scene.window(start + sc.t_p, sc.t_f)?;
        Self::new(cfg, &past, Some(&fut))
    }

    /// Uses the last `T_p` frames as the observed past.
    pub fn for_prediction(cfg: &ModelConfig, scene: &GlobalPoseSequence) -> Result<Self> {
        let t_p = cfg.scenario.t_p;
        if scene.frames() < t_p {
            return Err(Error::shape("scene frames (at least T_p)", t_p, scene.frames()));
        }
        Self::new(cfg, &scene.window(scene.frames() - t_p, t_p)?, None)
    }
}

/// Several prepared scenes stacked along the agent axis. Pairwise inputs
/// are laid out per receiver over `slots` = the largest scene's agent count;
/// slots past a scene's own agents are masked out.
#[derive(Clone, Debug)]
pub struct Batch {
    pub agents: usize,
    pub slots: usize,
    /// Scene index of each stacked agent.
    pub scene_of: Vec<usize>,
    /// First stacked agent of each scene.
    pub scene_start: Vec<usize>,
    pub frames: Vec<AgentFrame>,
    pub traj_ref: Array,
    /// `[N, S, T_p-1, 6]`.
    pub pair: Array,
    /// Stacked index of the agent in each `(receiver, slot)`, `[N·S]`.
    pub slot_source: Vec<usize>,
    /// Interaction-encoder keep mask, `[N, S]` (self included).
    pub neighbor_mask: Vec<bool>,
    /// Aggregation keep mask, `[N, S]` (self excluded).
    pub aggregate_mask: Vec<bool>,
    /// `[N, S, 4]`.
    pub relative: Array,
    pub part_tokens: Vec<Array>,
    pub base_future: Array,
    pub targets: Option<Vec<Target>>,
}

impl Batch {
    pub fn pack(scenes: &[&PreparedScene]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n: usize = scenes.iter().map(|s| s.agents).sum();
        let slots = scenes.iter().map(|s| s.agents).max().unwrap_or(0);
        let tm = scenes[0].traj_ref.shape()[1];
        let mut scene_of = Vec::with_capacity(n);
        let mut scene_start = Vec::with_capacity(scenes.len());
        for (si, s) in scenes.iter().enumerate() {
            scene_start.push(scene_of.len());
            scene_of.extend(std::iter::repeat_n(si, s.agents));
        }
        let local = |g: usize| (scenes[scene_of[g]], g - scene_start[scene_of[g]]);
        let mut slot_source = Vec::with_capacity(n * slots);
        let mut neighbor_mask = Vec::with_capacity(n * slots);
        let mut aggregate_mask = Vec::with_capacity(n * slots);
        for g in 0..n {
            let (s, i) = local(g);
            let start = scene_start[scene_of[g]];
            for k in 0..slots {
                let real = k < s.agents;
                slot_source.push(start + k.min(s.agents - 1));
                let nb = real && s.neighbors[i * s.agents + k];
                neighbor_mask.push(nb);
                aggregate_mask.push(nb && k != i);
            }
        }
        let pair = Array::from_fn(&[n, slots, tm, 6], |ix| {
            let (s, i) = local(ix[0]);
            if ix[1] < s.agents {
                s.pair.get(&[i, ix[1], ix[2], ix[3]])
            } else {
                0.0
            }
        });
        let relative = Array::from_fn(&[n, slots, 4], |ix| {
            let (s, i) = local(ix[0]);
            if ix[1] < s.agents {
                s.relative.get(&[i, ix[1], ix[2]])
            } else {
                0.0
            }
        });
        let stack = |f: &dyn Fn(&PreparedScene) -> &Array| -> Result<Array> {
            let first = f(scenes[0]).shape().to_vec();
            let mut data = Vec::new();
            for s in scenes {
                let a = f(s);
                if a.shape()[1..] != first[1..] {
                    return Err(Error::shape("stacked scene arrays", &first[1..], &a.shape()[1..]));
                }
                data.extend_from_slice(a.data());
            }
            let mut shape = first;
            shape[0] = n;
            Ok(Array::from_vec(&shape, data)?)
        };
        let part_tokens = (0..scenes[0].part_tokens.len())
            .map(|p| stack(&|s: &PreparedScene| &s.part_tokens[p]))
            .collect::<Result<Vec<_>>>()?;
        let targets = scenes.iter().map(|s| s.target.clone()).collect::<Option<Vec<_>>>();
        Ok(Self {
            agents: n,
            slots,
            frames: scenes.iter().flat_map(|s| s.frames.iter().copied()).collect(),
            traj_ref: stack(&|s: &PreparedScene| &s.traj_ref)?,
            pair,
            slot_source,
            neighbor_mask,
            aggregate_mask,
            relative,
            part_tokens,
            base_future: stack(&|s: &PreparedScene| &s.base_future)?,
            targets,
            scene_of,
            scene_start,
        })
    }

    pub fn scenes(&self) -> usize {
        self.scene_start.len()
    }

    /// Stacked agent range of scene `s`.
    pub fn scene_agents(&self, s: usize) -> std::ops::Range<usize> {
        let end = self.scene_start.get(s + 1).copied().unwrap_or(self.agents);
        self.scene_start[s]..end
    }
}

/// Count of pairwise attention scores of the holistic formulation that
/// attends over every (frame, agent, joint) triple: `(T·N·J)²`.
pub fn holistic_pair_count(frames: usize, agents: usize, joints: usize) -> u128 {
    let x = (frames * agents * joints) as u128;
    x * x
}
