//! Seeded multi-agent scenes: social-repulsion walkers with a parametric
//! gait, plus fork scenes whose future turns left or right.

use std::f64::consts::{FRAC_PI_4, PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{GlobalPoseSequence, Scene, Skeleton};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionStyle {
    Straight,
    Turn,
    BimodalFork,
    StationaryGesture,
}

impl std::str::FromStr for MotionStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Self::Straight),
            "turn" => Ok(Self::Turn),
            "bimodal-fork" => Ok(Self::BimodalFork),
            "stationary-gesture" => Ok(Self::StationaryGesture),
            other => Err(Error::Config(format!(
                "unknown style `{other}` (straight, turn, bimodal-fork, stationary-gesture)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub agents: usize,
    pub frames: usize,
    pub frame_rate: f64,
    pub style: MotionStyle,
    /// Repulsion gain between agents closer than [`REPULSION_RANGE`].
    pub avoidance: f64,
    /// Frame at which fork scenes switch direction.
    pub fork_frame: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            agents: 3,
            frames: 30,
            frame_rate: 10.0,
            style: MotionStyle::Straight,
            avoidance: 3.0,
            fork_frame: 10,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.frames < 2 || !(self.frame_rate > 0.0) {
            return Err(Error::Config(format!(
                "synth spec needs agents >= 1, frames >= 2 and a positive frame rate (got {}, {}, {})",
                self.agents, self.frames, self.frame_rate
            )));
        }
        if self.style == MotionStyle::BimodalFork && self.fork_frame >= self.frames {
            return Err(Error::Config(format!(
                "fork frame {} must precede the scene end ({})",
                self.fork_frame, self.frames
            )));
        }
        Ok(())
    }
}

/// Agents repel each other only inside this hip distance (meters).
pub const REPULSION_RANGE: f64 = 1.0;
const HIP_HEIGHT: f64 = 0.95;
const RELAXATION: f64 = 0.5;
const SUBSTEPS: usize = 10;

/// Initial state and intent of one simulated walker.
#[derive(Clone, Debug, PartialEq)]
pub struct Walker {
    pub position: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    /// Turn rate of the desired heading (rad/s).
    pub turn_rate: f64,
    /// `(frame, new heading)` switch of the desired heading.
    pub switch: Option<(usize, f64)>,
}

/// Integrates the social-force point model; returns planar hip positions
/// per walker per frame.
pub fn simulate(walkers: &[Walker], frames: usize, frame_rate: f64, avoidance: f64) -> Vec<Vec<[f64; 2]>> {
    let n = walkers.len();
    let dt = 1.0 / (frame_rate * SUBSTEPS as f64);
    let mut pos: Vec<[f64; 2]> = walkers.iter().map(|w| w.position).collect();
    let mut vel: Vec<[f64; 2]> = walkers
        .iter()
        .map(|w| [w.speed * w.heading.cos(), w.speed * w.heading.sin()])
        .collect();
    let mut desired: Vec<f64> = walkers.iter().map(|w| w.heading).collect();
    let mut out = vec![Vec::with_capacity(frames); n];
    for f in 0..frames {
        for (i, p) in pos.iter().enumerate() {
            out[i].push(*p);
        }
        for (i, w) in walkers.iter().enumerate() {
            if let Some((at, h)) = w.switch {
                if f + 1 == at {
                    desired[i] = h;
                }
            }
        }
        for _ in 0..SUBSTEPS {
            let mut acc = vec![[0.0; 2]; n];
            for i in 0..n {
                let w = &walkers[i];
                let goal = [w.speed * desired[i].cos(), w.speed * desired[i].sin()];
                acc[i][0] = (goal[0] - vel[i][0]) / RELAXATION;
                acc[i][1] = (goal[1] - vel[i][1]) / RELAXATION;
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let d = [pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]];
                    let dist = d[0].hypot(d[1]).max(1e-3);
                    if dist < REPULSION_RANGE {
                        let mag = avoidance * ((REPULSION_RANGE / dist).powi(2) - 1.0);
                        acc[i][0] += mag * d[0] / dist;
                        acc[i][1] += mag * d[1] / dist;
                    }
                }
            }
            for i in 0..n {
                vel[i][0] += acc[i][0] * dt;
                vel[i][1] += acc[i][1] * dt;
                pos[i][0] += vel[i][0] * dt;
                pos[i][1] += vel[i][1] * dt;
                desired[i] += walkers[i].turn_rate * dt;
            }
        }
    }
    out
}

/// Articulates planar hip tracks into full skeleton poses with a gait whose
/// swing amplitude and cadence follow walking speed. Stationary agents get
/// smooth random arm gestures instead.
fn articulate<R: Rng>(
    skel: &Skeleton,
    hips: &[[f64; 2]],
    frame_rate: f64,
    facing0: f64,
    gesture: bool,
    rng: &mut R,
) -> Vec<Vec<[f64; 3]>> {
    debug_assert_eq!(skel.joint_count(), 15);
    let dt = 1.0 / frame_rate;
    let mut phase = rng.random_range(0.0..TAU);
    let mut facing = facing0;
    let gest: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.3..1.2), rng.random_range(0.0..TAU), rng.random_range(0.2..0.6)))
        .collect();
    let jitter = Normal::new(0.0, 0.004).expect("valid sigma");
    let mut out = Vec::with_capacity(hips.len());
    for t in 0..hips.len() {
        let v = if t + 1 < hips.len() {
            [(hips[t + 1][0] - hips[t][0]) / dt, (hips[t + 1][1] - hips[t][1]) / dt]
        } else if t > 0 {
            [(hips[t][0] - hips[t - 1][0]) / dt, (hips[t][1] - hips[t - 1][1]) / dt]
        } else {
            [0.0, 0.0]
        };
        let speed = v[0].hypot(v[1]);
        if speed > 0.2 {
            facing = v[1].atan2(v[0]);
        }
        let amp = 0.5 * (speed / 1.3).min(1.0);
        let cadence = 0.9 + 0.5 * speed;
        phase += TAU * cadence * dt;
        let swing = amp * phase.sin();
        let bob = 0.02 * (speed / 1.3).min(1.0) * (2.0 * phase).cos();
        let time = t as f64 * dt;
        let g = |k: usize| {
            let (f, p, a) = gest[k];
            if gesture {
                a * (TAU * f * time + p).sin()
            } else {
                0.0
            }
        };
        // Body frame: x forward, y left, z up; hip at the origin.
        let limb = |start: [f64; 3], len: f64, angle: f64| [start[0] + len * angle.sin(), start[1], start[2] - len * angle.cos()];
        let l_sh = [0.0, 0.18, 0.5];
        let r_sh = [0.0, -0.18, 0.5];
        let l_arm = -0.6 * swing + g(0);
        let r_arm = 0.6 * swing + g(1);
        let l_el = limb(l_sh, 0.28, l_arm);
        let r_el = limb(r_sh, 0.28, r_arm);
        let l_wr = limb(l_el, 0.25, l_arm + 0.3 + g(2));
        let r_wr = limb(r_el, 0.25, r_arm + 0.3 + g(3));
        let l_hp = [0.0, 0.1, 0.0];
        let r_hp = [0.0, -0.1, 0.0];
        let l_kn = limb(l_hp, 0.45, swing);
        let r_kn = limb(r_hp, 0.45, -swing);
        let l_an = limb(l_kn, 0.45, swing - 0.4 * amp * (1.0 + phase.cos()));
        let r_an = limb(r_kn, 0.45, -swing - 0.4 * amp * (1.0 - phase.cos()));
        let local = [
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.25],
            [0.0, 0.0, 0.65],
            l_sh,
            l_el,
            l_wr,
            r_sh,
            r_el,
            r_wr,
            l_hp,
            l_kn,
            l_an,
            r_hp,
            r_kn,
            r_an,
        ];
        let (s, c) = facing.sin_cos();
        let hip = [hips[t][0], hips[t][1], HIP_HEIGHT + bob];
        let frame = local
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let noise = if gesture && j != 0 { [jitter.sample(rng), jitter.sample(rng), jitter.sample(rng)] } else { [0.0; 3] };
                [
                    hip[0] + c * p[0] - s * p[1] + noise[0],
                    hip[1] + s * p[0] + c * p[1] + noise[1],
                    hip[2] + p[2] + noise[2],
                ]
            })
            .collect();
        out.push(frame);
    }
    out
}

fn place<R: Rng>(rng: &mut R, n: usize, half: f64) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(n);
    while pts.len() < n {
        let p = [rng.random_range(-half..half), rng.random_range(-half..half)];
        if pts.iter().all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= 1.5) {
            pts.push(p);
        }
    }
    pts
}

fn build(spec: &SynthSpec, walkers: &[Walker], rng: &mut ChaCha8Rng, id: String, label: Option<String>) -> Result<Scene> {
    let skel = Skeleton::default();
    let hips = simulate(walkers, spec.frames, spec.frame_rate, spec.avoidance);
    let gesture = spec.style == MotionStyle::StationaryGesture;
    let joints: Vec<Vec<Vec<[f64; 3]>>> = hips
        .iter()
        .zip(walkers)
        .map(|(h, w)| articulate(&skel, h, spec.frame_rate, w.heading, gesture, rng))
        .collect();
    let poses = GlobalPoseSequence::from_fn(
        (0..walkers.len()).map(|i| format!("agent{i}")).collect(),
        spec.frames,
        skel.joint_count(),
        spec.frame_rate,
        |n, t, j| joints[n][t][j],
    )?;
    Ok(Scene { scene_id: id, poses, label })
}

/// One scene of the requested style. Fork scenes get a random label; use
/// [`generate_bimodal`] for label-balanced sets.
pub fn generate(spec: &SynthSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let left = rng.random_bool(0.5);
    scene_with(spec, &mut rng, format!("synth-{}", spec.seed), left)
}

fn scene_with(spec: &SynthSpec, rng: &mut ChaCha8Rng, id: String, left: bool) -> Result<Scene> {
    let n = spec.agents;
    let walkers: Vec<Walker> = match spec.style {
        MotionStyle::Straight | MotionStyle::Turn => {
            let half = 2.0 + n as f64;
            place(rng, n, half)
                .into_iter()
                .map(|position| Walker {
                    position,
                    heading: rng.random_range(-PI..PI),
                    speed: rng.random_range(0.8..1.5),
                    turn_rate: if spec.style == MotionStyle::Turn {
                        rng.random_range(0.2..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                    } else {
                        0.0
                    },
                    switch: None,
                })
                .collect()
        }
        MotionStyle::StationaryGesture => place(rng, n, 2.0 + n as f64)
            .into_iter()
            .map(|position| Walker {
                position,
                heading: rng.random_range(-PI..PI),
                speed: 0.0,
                turn_rate: 0.0,
                switch: None,
            })
            .collect(),
        MotionStyle::BimodalFork => {
            // A group walking side by side that takes the same branch.
            let heading = rng.random_range(-PI..PI);
            let speed = rng.random_range(1.1..1.4);
            let origin = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let side = [-heading.sin(), heading.cos()];
            let turn = if left { FRAC_PI_4 } else { -FRAC_PI_4 };
            (0..n)
                .map(|i| {
                    let off = 1.5 * (i as f64 - (n as f64 - 1.0) / 2.0);
                    Walker {
                        position: [origin[0] + off * side[0], origin[1] + off * side[1]],
                        heading,
                        speed,
                        turn_rate: 0.0,
                        switch: Some((spec.fork_frame, heading + turn)),
                    }
                })
                .collect()
        }
    };
    let label = (spec.style == MotionStyle::BimodalFork).then(|| if left { "left" } else { "right" }.to_string());
    build(spec, &walkers, rng, id, label)
}

/// `count` fork scenes with exactly balanced (then shuffled) labels.
pub fn generate_bimodal(spec: &SynthSpec, count: usize) -> Result<Vec<Scene>> {
    let spec = SynthSpec { style: MotionStyle::BimodalFork, ..spec.clone() };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<bool> = (0..count).map(|i| i < count / 2).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, left)| scene_with(&spec, &mut rng, format!("fork-{}-{i}", spec.seed), left))
        .collect()
}

/// `count` scenes of one style with seeds derived from `spec.seed`.
pub fn generate_set(spec: &SynthSpec, count: usize) -> Result<Vec<Scene>> {
    if spec.style == MotionStyle::BimodalFork {
        return generate_bimodal(spec, count);
    }
    (0..count)
        .map(|i| {
            let s = SynthSpec { seed: spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), ..spec.clone() };
            generate(&s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::decompose;

    #[test]
    fn deterministic() {
        let spec = SynthSpec { seed: 9, style: MotionStyle::Turn, ..SynthSpec::default() };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn stationary_hips_fixed_pose_moves() {
        let spec = SynthSpec { style: MotionStyle::StationaryGesture, seed: 2, ..SynthSpec::default() };
        let s = generate(&spec).unwrap().poses;
        for n in 0..s.agents() {
            assert_eq!(s.get(n, 0, 0), s.get(n, s.frames() - 1, 0));
            assert_ne!(s.get(n, 0, 5), s.get(n, s.frames() - 1, 5));
        }
    }

    #[test]
    fn head_on_walkers_keep_distance() {
        let walkers = [
            Walker { position: [-4.0, 0.0], heading: 0.0, speed: 1.3, turn_rate: 0.0, switch: None },
            Walker { position: [4.0, 0.05], heading: PI, speed: 1.3, turn_rate: 0.0, switch: None },
        ];
        let hips = simulate(&walkers, 80, 10.0, 3.0);
        let min = (0..80)
            .map(|t| (hips[0][t][0] - hips[1][t][0]).hypot(hips[0][t][1] - hips[1][t][1]))
            .fold(f64::INFINITY, f64::min);
        assert!(min > 0.3, "{min}");
    }

    #[test]
    fn fork_labels_balanced_and_diverging() {
        let spec = SynthSpec { agents: 2, seed: 4, ..SynthSpec::default() };
        let scenes = generate_bimodal(&spec, 200).unwrap();
        let left = scenes.iter().filter(|s| s.label.as_deref() == Some("left")).count();
        assert_eq!(left, 100);
        // Distance at the last frame between the same scene played both ways.
        let s = SynthSpec { style: MotionStyle::BimodalFork, ..spec };
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = scene_with(&s, &mut r1, "a".into(), true).unwrap().poses;
        let b = scene_with(&s, &mut r2, "b".into(), false).unwrap().poses;
        let t = a.frames() - 1;
        for n in 0..2 {
            let (p, q) = (a.get(n, t, 0), b.get(n, t, 0));
            assert!((p[0] - q[0]).hypot(p[1] - q[1]) >= 1.0);
            for f in 0..s.fork_frame {
                assert_eq!(a.get(n, f, 0)[..2], b.get(n, f, 0)[..2]);
            }
        }
    }

    #[test]
    fn scenes_satisfy_motion_invariants() {
        for style in [MotionStyle::Straight, MotionStyle::Turn, MotionStyle::StationaryGesture, MotionStyle::BimodalFork] {
            let s = generate(&SynthSpec { style, seed: 5, ..SynthSpec::default() }).unwrap();
            let (_, lo) = decompose(&s.poses, &Skeleton::default()).unwrap();
            for n in 0..lo.agents {
                for t in 0..lo.frames {
                    assert_eq!(lo.get(n, t, 0), [0.0; 3]);
                }
            }
        }
    }
}
