use rand::Rng;

use crate::error::Result;
use crate::numerics::nn::{Linear, MultiHeadAttention};
use crate::numerics::{ParameterStore, Tape, Var};

/// Gated graph attention: `m = Σ α v` over unmasked keys,
/// `g = σ(W_gate [z, m])`, `z̃ = g ⊙ W_self z + (1 − g) ⊙ m`.
/// A node with no unmasked key gets `m = 0`.
#[derive(Clone, Debug)]
pub struct GatedGraphAttention {
    pub attn: MultiHeadAttention,
    pub gate: Linear,
    pub self_proj: Linear,
    pub dim: usize,
}

impl GatedGraphAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        d_k: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads, d_k)?,
            gate: Linear::new(store, rng, &format!("{name}.gate"), 2 * dim, dim, true)?,
            self_proj: Linear::new(store, rng, &format!("{name}.self"), dim, dim, false)?,
            dim,
        })
    }

    /// `nodes` is `[B, D]`, `keys` is `[B, S, D]`, `mask` has `B·S` entries.
    /// Returns the updated nodes and the attention weights `[B, H, 1, S]`.
    pub fn forward(&self, tape: &mut Tape<'_>, nodes: Var, keys: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let b = tape.shape(nodes)[0];
        let q = tape.reshape(nodes, &[b, 1, self.dim])?;
        let att = self.attn.forward(tape, q, keys, Some(mask))?;
        let m = tape.reshape(att.output, &[b, self.dim])?;
        let zm = tape.concat(&[nodes, m], 1)?;
        let g = self.gate.forward(tape, zm)?;
        let g = tape.sigmoid(g);
        let s = self.self_proj.forward(tape, nodes)?;
        let gs = tape.mul(g, s)?;
        let gm = tape.mul(g, m)?;
        let rest = tape.sub(m, gm)?;
        Ok((tape.add(gs, rest)?, att.weights))
    }
}
