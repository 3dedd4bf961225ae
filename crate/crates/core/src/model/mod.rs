//! The forecasting network: pose encoder, interaction encoder, trajectory
//! decoder and pose decoder, run over a packed batch of scenes.

mod bundle;
mod config;
pub mod graph;
pub mod interaction;
pub mod pose_decoder;
pub mod pose_encoder;
mod prepare;
pub mod trajectory_decoder;

pub use bundle::{compose, ForecastBundle};
pub use config::ModelConfig;
pub use prepare::{holistic_pair_count, AgentFrame, Batch, PreparedScene, Target, HEADING_EPS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::motion::GlobalPoseSequence;
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::{Array, ParameterStore, Tape, Var};

use interaction::InteractionEncoder;
use pose_decoder::PoseDecoder;
use pose_encoder::{PoseEncoder, PoseEncoding};
use trajectory_decoder::TrajectoryDecoder;

/// Repeats `x` `times` times along a new axis inserted at `axis`.
pub fn repeat_axis(tape: &mut Tape<'_>, x: Var, axis: usize, times: usize) -> Result<Var> {
    let mut sh = tape.shape(x).to_vec();
    sh.insert(axis, 1);
    let x = tape.reshape(x, &sh)?;
    Ok(tape.index_select(x, axis, &vec![0; times])?)
}

/// Rotates agent-frame rows `[N, R, 3]` back to world axes, per agent.
pub fn rotate_to_world(tape: &mut Tape<'_>, x: Var, frames: &[AgentFrame]) -> Result<Var> {
    let n = frames.len();
    // Row vector times [[c, s, 0], [-s, c, 0], [0, 0, 1]] is `to_world`.
    let rot = Array::from_fn(&[n, 3, 3], |i| {
        let f = &frames[i[0]];
        match (i[1], i[2]) {
            (0, 0) | (1, 1) => f.cos,
            (0, 1) => f.sin,
            (1, 0) => -f.sin,
            (2, 2) => 1.0,
            _ => 0.0,
        }
    });
    let rot = tape.constant(rot);
    Ok(tape.batch_matmul(x, rot, false, false)?)
}

#[derive(Clone, Debug)]
pub struct Network {
    pub pose_encoder: PoseEncoder,
    pub interaction: InteractionEncoder,
    pub trajectory: TrajectoryDecoder,
    pub pose_decoder: PoseDecoder,
    use_pose: bool,
}

/// Tape handles of one forward pass over a [`Batch`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub pose: PoseEncoding,
    /// Fused embedding before graph attention, `[N, T_p-1, D]`.
    pub fused: Var,
    /// After graph attention, `[N, T_p-1, D]`.
    pub interacted: Var,
    pub summary: Var,
    pub aggregated: Var,
    /// `[N, F, D]`.
    pub latents: Var,
    /// World hips `[N, F, T_f, 3]`.
    pub trajectories: Var,
    /// Hip-relative joints, world axes, `[N, F, T_f, J, 3]`.
    pub local: Var,
    /// `[N, F, T_f, J, 3]`.
    pub composed: Var,
    pub pair_scores: usize,
}

impl Network {
    pub fn new(store: &mut ParameterStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            pose_encoder: PoseEncoder::new(store, &mut rng, cfg)?,
            interaction: InteractionEncoder::new(store, &mut rng, cfg)?,
            trajectory: TrajectoryDecoder::new(store, &mut rng, cfg)?,
            pose_decoder: PoseDecoder::new(store, &mut rng, cfg)?,
            use_pose: cfg.use_pose,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<Forward> {
        let tokens = self.pose_encoder.tokens(tape, &batch.part_tokens)?;
        let pose = self.pose_encoder.encode(tape, tokens)?;
        let emb = self.interaction.embed_trajectory(tape, batch)?;
        let fused = self
            .interaction
            .fuse(tape, emb.reference, self.use_pose.then_some(pose.pooled))?;
        let (interacted, pair_scores) = self.interaction.graph_attend(tape, fused, emb.pairs, batch)?;
        let summary = self.trajectory.temporal_encode(tape, interacted, None)?;
        let aggregated = self.trajectory.aggregate(tape, summary, batch)?;
        let latents = self.trajectory.span_modes(tape, aggregated, summary)?;
        let trajectories = self.trajectory.trajectory_head(tape, latents, aggregated, batch)?;
        let local = self.pose_decoder.decode(tape, &pose, latents, batch)?;
        let composed = compose_on_tape(tape, trajectories, local)?;
        Ok(Forward {
            pose,
            fused,
            interacted,
            summary,
            aggregated,
            latents,
            trajectories,
            local,
            composed,
            pair_scores,
        })
    }
}

/// `composed[n, f, t, j] = trajectories[n, f, t] + local[n, f, t, j]`.
pub fn compose_on_tape(tape: &mut Tape<'_>, trajectories: Var, local: Var) -> Result<Var> {
    let j = tape.shape(local)[3];
    let tr = repeat_axis(tape, trajectories, 3, j)?;
    Ok(tape.add(tr, local)?)
}

/// Network architecture plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub network: Network,
    pub store: ParameterStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParameterStore::new();
        let network = Network::new(&mut store, &config, seed)?;
        Ok(Self { config, network, store })
    }

    /// Checkpoint carrying the configuration as JSON metadata.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint::capture(&self.store, &meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Config(format!("checkpoint configuration: {e}")))?;
        let mut model = Self::new(config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.checkpoint()?.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Checkpoint::read_from(&mut std::io::BufReader::new(file))?;
        Self::from_checkpoint(&ckpt)
    }

    /// Forecast for the last `T_p` frames of `scene`.
    pub fn predict(&self, scene: &GlobalPoseSequence) -> Result<ForecastBundle> {
        let prepared = PreparedScene::for_prediction(&self.config, scene)?;
        let mut out = self.predict_prepared(&[&prepared])?;
        let mut bundle = out.pop().expect("one scene in, one bundle out");
        bundle.agent_ids = scene.agent_ids().to_vec();
        bundle.frame_rate = scene.frame_rate();
        Ok(bundle)
    }

    /// [`Model::predict`] over many scenes, in parallel on the global rayon pool.
    pub fn predict_all(&self, scenes: &[&GlobalPoseSequence]) -> Result<Vec<ForecastBundle>> {
        use rayon::prelude::*;
        scenes.par_iter().map(|s| self.predict(s)).collect()
    }

    /// Inference over several prepared scenes in one pass.
    pub fn predict_prepared(&self, scenes: &[&PreparedScene]) -> Result<Vec<ForecastBundle>> {
        let batch = Batch::pack(scenes)?;
        let mut tape = Tape::inference(&self.store);
        let fwd = self.network.forward(&mut tape, &batch)?;
        if let Some(bad) = tape.first_non_finite() {
            return Err(Error::NonFinite { step: self.store.step(), op: bad.op, node: bad.node });
        }
        let tr = tape.value(fwd.trajectories);
        let lo = tape.value(fwd.local);
        (0..batch.scenes())
            .map(|s| ForecastBundle::from_stacked(tr, lo, batch.scene_agents(s)))
            .collect()
    }
}
