//! Body-part tokens in the frequency domain and intra-agent self-attention.

use rand::Rng;

use crate::error::Result;
use crate::motion::PART_COUNT;
use crate::numerics::nn::{LayerDims, Linear, TransformerLayer};
use crate::numerics::{Array, ParameterStore, Tape, Var};

use super::ModelConfig;

#[derive(Clone, Debug)]
pub struct PoseEncoder {
    pub part_proj: Vec<Linear>,
    pub layers: Vec<TransformerLayer>,
}

/// Per-part embeddings `[N, 5, D]` and their mean over parts `[N, D]`.
#[derive(Clone, Copy, Debug)]
pub struct PoseEncoding {
    pub per_part: Var,
    pub pooled: Var,
}

impl PoseEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let k = cfg.coeffs();
        let part_proj = cfg
            .skeleton
            .parts()
            .iter()
            .enumerate()
            .map(|(p, part)| Linear::new(store, rng, &format!("pose.part{p}"), part.len() * 3 * k, cfg.d_pose, true))
            .collect::<Result<Vec<_>, _>>()?;
        let dims = LayerDims {
            d_model: cfg.d_pose,
            heads: cfg.pose_heads,
            d_k: cfg.pose_dk,
            d_ff: cfg.pose_ff,
            dropout: cfg.dropout,
        };
        let layers = (0..cfg.pose_layers)
            .map(|l| TransformerLayer::new(store, rng, &format!("pose.layer{l}"), dims))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { part_proj, layers })
    }

    /// Projects each part's flattened coefficients to one token, `[N, 5, D]`.
    pub fn tokens(&self, tape: &mut Tape<'_>, part_inputs: &[Array]) -> Result<Var> {
        let mut toks = Vec::with_capacity(PART_COUNT);
        for (proj, input) in self.part_proj.iter().zip(part_inputs) {
            let n = input.shape()[0];
            let x = tape.constant(input.clone());
            let t = proj.forward(tape, x)?;
            toks.push(tape.reshape(t, &[n, 1, proj.d_out])?);
        }
        Ok(tape.concat(&toks, 1)?)
    }

    /// Self-attention over the five tokens of each agent separately.
    pub fn encode(&self, tape: &mut Tape<'_>, tokens: Var) -> Result<PoseEncoding> {
        let mut x = tokens;
        for layer in &self.layers {
            x = layer.forward(tape, x, None, None)?;
        }
        let pooled = tape.mean_axis(x, 1)?;
        Ok(PoseEncoding { per_part: x, pooled })
    }
}
