//! Rotation-invariant trajectory embedding, traj-pose fusion and gated graph
//! attention across agents at every past step.

use rand::Rng;

use crate::error::Result;
use crate::numerics::nn::{Linear, NormMlp};
use crate::numerics::{ParameterStore, Tape, Var};

use super::graph::GatedGraphAttention;
use super::{repeat_axis, Batch, ModelConfig};

#[derive(Clone, Debug)]
pub struct InteractionEncoder {
    /// Reference-agent segment embedding, 3 → D → D.
    pub phi_ref: NormMlp,
    /// Neighbor embedding from `[R_i v_j, R_i v_i]`, 6 → D → D.
    pub phi_nbr: NormMlp,
    pub pose_reduce: Linear,
    pub mix: Linear,
    pub graph: GatedGraphAttention,
    pub dim: usize,
}

/// Per-step embeddings: reference `[N, T, D]` and pairwise `[N, S, T, D]`.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryEmbedding {
    pub reference: Var,
    pub pairs: Var,
}

impl InteractionEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_traj;
        Ok(Self {
            phi_ref: NormMlp::new(store, rng, "inter.phi_ref", 3, d, d)?,
            phi_nbr: NormMlp::new(store, rng, "inter.phi_nbr", 6, d, d)?,
            pose_reduce: Linear::new(store, rng, "inter.pose_reduce", cfg.d_pose, d, true)?,
            mix: Linear::new(store, rng, "inter.mix", 2 * d, d, true)?,
            graph: GatedGraphAttention::new(store, rng, "inter.graph", d, cfg.traj_heads, cfg.traj_dk)?,
            dim: d,
        })
    }

    pub fn embed_trajectory(&self, tape: &mut Tape<'_>, batch: &Batch) -> Result<TrajectoryEmbedding> {
        let r = tape.constant(batch.traj_ref.clone());
        let reference = self.phi_ref.forward(tape, r)?;
        let p = tape.constant(batch.pair.clone());
        let pairs = self.phi_nbr.forward(tape, p)?;
        Ok(TrajectoryEmbedding { reference, pairs })
    }

    /// Reduces the pooled pose embedding `[N, D_pose]` to `D`, repeats it over
    /// time, concatenates with the reference embedding and mixes back to `D`.
    /// Without a pose input the pose half is zero.
    pub fn fuse(&self, tape: &mut Tape<'_>, reference: Var, pooled: Option<Var>) -> Result<Var> {
        let sh = tape.shape(reference).to_vec();
        let (n, t) = (sh[0], sh[1]);
        let pose = match pooled {
            Some(p) => {
                let p = self.pose_reduce.forward(tape, p)?;
                repeat_axis(tape, p, 1, t)?
            }
            None => tape.constant(crate::numerics::Array::zeros(&[n, t, self.dim])),
        };
        let cat = tape.concat(&[reference, pose], 2)?;
        Ok(self.mix.forward(tape, cat)?)
    }

    /// Graph attention per (agent, step) over the agent's neighbor set.
    /// Keys for neighbor `j` are `z_j + φ_nbr(i, j)`. Returns `z̃` and the
    /// number of pairwise scores evaluated.
    pub fn graph_attend(&self, tape: &mut Tape<'_>, z: Var, pairs: Var, batch: &Batch) -> Result<(Var, usize)> {
        let sh = tape.shape(z).to_vec();
        let (n, t, d) = (sh[0], sh[1], sh[2]);
        let s = batch.slots;
        let zj = tape.index_select(z, 0, &batch.slot_source)?;
        let zj = tape.reshape(zj, &[n, s, t, d])?;
        let keys = tape.add(zj, pairs)?;
        let keys = tape.permute(keys, &[0, 2, 1, 3])?;
        let keys = tape.reshape(keys, &[n * t, s, d])?;
        let nodes = tape.reshape(z, &[n * t, d])?;
        let mut mask = Vec::with_capacity(n * t * s);
        for i in 0..n {
            let row = &batch.neighbor_mask[i * s..(i + 1) * s];
            for _ in 0..t {
                mask.extend_from_slice(row);
            }
        }
        let scores = mask.iter().filter(|&&m| m).count();
        let (out, _) = self.graph.forward(tape, nodes, keys, &mask)?;
        Ok((tape.reshape(out, &[n, t, d])?, scores))
    }
}
