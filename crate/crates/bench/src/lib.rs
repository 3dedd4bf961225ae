//! Shared inputs for the benchmarks.

use posecast_core::motion::{GlobalPoseSequence, Scene};
use posecast_core::synth::{generate, MotionStyle, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A walking scene with `agents` agents and `frames` frames at 10 Hz.
pub fn walking_scene(agents: usize, frames: usize, seed: u64) -> Scene {
    generate(&SynthSpec { agents, frames, style: MotionStyle::Turn, seed, ..SynthSpec::default() })
        .expect("valid synth spec")
}

pub fn past(scene: &Scene, t_p: usize) -> GlobalPoseSequence {
    scene.poses.window(0, t_p).expect("scene covers the past window")
}

pub fn uniform(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}
