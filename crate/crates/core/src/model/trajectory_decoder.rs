//! Temporal encoding, agent aggregation, mode spanning and the trajectory
//! head that emits world-frame hip forecasts.

use rand::Rng;

use crate::error::Result;
use crate::numerics::nn::{LayerDims, NormMlp, TransformerLayer};
use crate::numerics::{Array, Init, ParamId, ParameterStore, Tape, Var};

use super::graph::GatedGraphAttention;
use super::{repeat_axis, rotate_to_world, Batch, ModelConfig};

#[derive(Clone, Debug)]
pub struct TrajectoryDecoder {
    pub token: ParamId,
    pub position: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub edge: NormMlp,
    pub aggregator: GatedGraphAttention,
    pub span: Vec<NormMlp>,
    pub head: NormMlp,
    pub dim: usize,
    pub t_f: usize,
}

impl TrajectoryDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_traj;
        let sc = cfg.scenario;
        let dims = LayerDims {
            d_model: d,
            heads: cfg.traj_heads,
            d_k: cfg.traj_dk,
            d_ff: cfg.traj_ff,
            dropout: cfg.dropout,
        };
        Ok(Self {
            token: store.register("traj.token", &[d], Init::XavierUniform, rng)?,
            position: store.register("traj.position", &[sc.t_p, d], Init::XavierUniform, rng)?,
            layers: (0..cfg.temporal_layers)
                .map(|l| TransformerLayer::new(store, rng, &format!("traj.temporal{l}"), dims))
                .collect::<Result<Vec<_>, _>>()?,
            edge: NormMlp::new(store, rng, "traj.edge", 4, d, d)?,
            aggregator: GatedGraphAttention::new(store, rng, "traj.aggregate", d, cfg.traj_heads, cfg.traj_dk)?,
            span: (0..sc.modes)
                .map(|f| NormMlp::new(store, rng, &format!("traj.span{f}"), d, d, d))
                .collect::<Result<Vec<_>, _>>()?,
            head: NormMlp::new(store, rng, "traj.head", 2 * d, d, sc.t_f * 3)?,
            dim: d,
            t_f: sc.t_f,
        })
    }

    /// Prepends the learnable token to each agent's steps, runs the encoder
    /// layers over time and returns the token slot, `[N, D]`. `visible`
    /// (`[N, T]`) hides steps from attention; the token is always visible.
    pub fn temporal_encode(&self, tape: &mut Tape<'_>, z: Var, visible: Option<&[bool]>) -> Result<Var> {
        let sh = tape.shape(z).to_vec();
        let (n, t, d) = (sh[0], sh[1], sh[2]);
        let tok = tape.param(self.token);
        let tok = tape.reshape(tok, &[1, d])?;
        let tok = repeat_axis(tape, tok, 0, n)?;
        let tok = tape.reshape(tok, &[n, 1, d])?;
        let x = tape.concat(&[tok, z], 1)?;
        let pos = tape.param(self.position);
        let mut x = tape.add_broadcast(x, pos)?;
        let mask = visible.map(|v| {
            let mut m = Vec::with_capacity(n * (t + 1) * (t + 1));
            for a in 0..n {
                for _ in 0..=t {
                    m.push(true);
                    m.extend_from_slice(&v[a * t..(a + 1) * t]);
                }
            }
            m
        });
        for layer in &self.layers {
            x = layer.forward(tape, x, None, mask.as_deref())?;
        }
        let first = tape.slice(x, 1, 0..1)?;
        Ok(tape.reshape(first, &[n, d])?)
    }

    /// One gated message-passing round over neighbors (self excluded) with
    /// edge features from relative position and heading.
    pub fn aggregate(&self, tape: &mut Tape<'_>, summary: Var, batch: &Batch) -> Result<Var> {
        let (n, s, d) = (batch.agents, batch.slots, self.dim);
        let rel = tape.constant(batch.relative.clone());
        let edges = self.edge.forward(tape, rel)?;
        let src = tape.index_select(summary, 0, &batch.slot_source)?;
        let src = tape.reshape(src, &[n, s, d])?;
        let keys = tape.add(src, edges)?;
        let (out, _) = self.aggregator.forward(tape, summary, keys, &batch.aggregate_mask)?;
        Ok(out)
    }

    /// `latent_f = base + span_f(aggregated)`, stacked to `[N, F, D]`.
    pub fn span_modes(&self, tape: &mut Tape<'_>, aggregated: Var, base: Var) -> Result<Var> {
        let n = tape.shape(base)[0];
        let mut modes = Vec::with_capacity(self.span.len());
        for mlp in &self.span {
            let o = mlp.forward(tape, aggregated)?;
            let o = tape.add(o, base)?;
            modes.push(tape.reshape(o, &[n, 1, self.dim])?);
        }
        Ok(tape.concat(&modes, 1)?)
    }

    /// Agent-frame displacements from `[latent, aggregated]`, rotated back
    /// and anchored at each agent's latest hip, `[N, F, T_f, 3]`.
    pub fn trajectory_head(&self, tape: &mut Tape<'_>, latents: Var, aggregated: Var, batch: &Batch) -> Result<Var> {
        let f = tape.shape(latents)[1];
        let n = batch.agents;
        let agg = repeat_axis(tape, aggregated, 1, f)?;
        let x = tape.concat(&[latents, agg], 2)?;
        let y = self.head.forward(tape, x)?;
        let y = tape.reshape(y, &[n, f * self.t_f, 3])?;
        let y = rotate_to_world(tape, y, &batch.frames)?;
        let origin = Array::from_fn(&[n, f * self.t_f, 3], |i| batch.frames[i[0]].origin[i[2]]);
        let origin = tape.constant(origin);
        let y = tape.add(y, origin)?;
        Ok(tape.reshape(y, &[n, f, self.t_f, 3])?)
    }
}
