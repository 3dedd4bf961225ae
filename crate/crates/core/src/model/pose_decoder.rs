//! Trajectory-conditioned local pose decoding in the frequency domain.

use std::rc::Rc;

use rand::Rng;

use crate::dct::dct_matrix;
use crate::error::Result;
use crate::numerics::nn::{LayerDims, Linear, NormMlp, TransformerLayer};
use crate::numerics::{Array, ParameterStore, Tape, Var};

use super::pose_encoder::PoseEncoding;
use super::{repeat_axis, rotate_to_world, Batch, ModelConfig};

#[derive(Clone, Debug)]
pub struct PoseDecoder {
    pub query: NormMlp,
    pub layers: Vec<TransformerLayer>,
    pub fc: [Linear; 3],
    joints: usize,
    hip: usize,
    t_f: usize,
    coeffs: usize,
    coeff_scale: f64,
    /// Basis rows restricted to the future frames, `[K, T_f]`.
    future_basis: Array,
}

impl PoseDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let dp = cfg.d_pose;
        let sc = cfg.scenario;
        let k = cfg.coeffs();
        let j = cfg.joints();
        let dims = LayerDims {
            d_model: dp,
            heads: cfg.pose_heads,
            d_k: cfg.pose_dk,
            d_ff: cfg.pose_ff,
            dropout: cfg.dropout,
        };
        let total = sc.total();
        let m = dct_matrix(total);
        let h = cfg.head_hidden;
        Ok(Self {
            query: NormMlp::new(store, rng, "posedec.query", dp + cfg.d_traj, dp, dp)?,
            layers: (0..cfg.decoder_layers)
                .map(|l| TransformerLayer::new(store, rng, &format!("posedec.layer{l}"), dims))
                .collect::<Result<Vec<_>, _>>()?,
            fc: [
                Linear::new(store, rng, "posedec.fc0", dp, h, true)?,
                Linear::new(store, rng, "posedec.fc1", h, h, true)?,
                Linear::new(store, rng, "posedec.fc2", h, j * 3 * k, true)?,
            ],
            joints: j,
            hip: cfg.skeleton.hip_index(),
            t_f: sc.t_f,
            coeffs: k,
            coeff_scale: cfg.pose_coeff_scale,
            future_basis: Array::from_fn(&[k, sc.t_f], |i| m[i[0] * total + sc.t_p + i[1]]),
        })
    }

    /// Local pose forecasts `[N, F, T_f, J, 3]` in world axes with the hip
    /// channel exactly zero.
    pub fn decode(&self, tape: &mut Tape<'_>, pose: &PoseEncoding, latents: Var, batch: &Batch) -> Result<Var> {
        let n = batch.agents;
        let f = tape.shape(latents)[1];
        let (j, k, t_f) = (self.joints, self.coeffs, self.t_f);
        let qp = repeat_axis(tape, pose.pooled, 1, f)?;
        let q = tape.concat(&[qp, latents], 2)?;
        let mut q = self.query.forward(tape, q)?;
        for layer in &self.layers {
            q = layer.forward(tape, q, Some(pose.per_part), None)?;
        }
        let h = self.fc[0].forward(tape, q)?;
        let h = tape.relu(h);
        let h = self.fc[1].forward(tape, h)?;
        let h = tape.relu(h);
        let c = self.fc[2].forward(tape, h)?;
        let c = tape.scale(c, self.coeff_scale);
        let c = tape.reshape(c, &[n * f * j * 3, k])?;
        let basis = tape.constant(self.future_basis.clone());
        let y = tape.matmul(c, basis)?;
        let y = tape.reshape(y, &[n, f, j, 3, t_f])?;
        let y = tape.permute(y, &[0, 1, 4, 2, 3])?;
        let base = Array::from_fn(&[n, f, t_f, j, 3], |i| batch.base_future.get(&[i[0], i[2], i[3], i[4]]));
        let base = tape.constant(base);
        let y = tape.add(y, base)?;
        let y = tape.reshape(y, &[n, f * t_f * j, 3])?;
        let y = rotate_to_world(tape, y, &batch.frames)?;
        let y = tape.reshape(y, &[n, f, t_f, j, 3])?;
        let hip = self.hip;
        let keep = Array::from_fn(&[n, f, t_f, j, 3], |i| if i[3] == hip { 0.0 } else { 1.0 });
        Ok(tape.mul_const(y, Rc::new(keep))?)
    }
}
