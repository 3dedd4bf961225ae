//! Layers built on the tape: linear, layer norm, multi-head attention,
//! feed-forward and post-norm transformer layers.

use rand::Rng;

use super::{Init, NumericsError, ParamId, ParameterStore, Tape, Var};

/// Layer-norm epsilon used by every transformer block.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self, NumericsError> {
        let weight = store.register(&format!("{name}.weight"), &[d_in, d_out], Init::XavierUniform, rng)?;
        let bias = if bias {
            Some(store.register(&format!("{name}.bias"), &[d_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias, d_in, d_out })
    }

    /// `y = x·W + b` over the last axis.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        eps: f64,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            gamma: store.register(&format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: store.register(&format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
            eps,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Output of an attention call; `weights` is `[B, heads, Sq, Sk]`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// Multi-head scaled dot-product attention with bias-free projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_out: Linear,
    pub heads: usize,
    pub d_k: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
        d_k: usize,
    ) -> Result<Self, NumericsError> {
        let inner = heads * d_k;
        Ok(Self {
            w_q: Linear::new(store, rng, &format!("{name}.q"), d_model, inner, false)?,
            w_k: Linear::new(store, rng, &format!("{name}.k"), d_model, inner, false)?,
            w_v: Linear::new(store, rng, &format!("{name}.v"), d_model, inner, false)?,
            w_out: Linear::new(store, rng, &format!("{name}.out"), inner, d_model, false)?,
            heads,
            d_k,
        })
    }

    /// `query` is `[B, Sq, D]`, `memory` is `[B, Sk, D]`; `mask` is a
    /// `[B, Sq, Sk]` keep-mask. Rows with no kept key attend to nothing.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        query: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<Attention, NumericsError> {
        for v in [query, memory] {
            if !tape.value(v).is_finite() {
                return Err(NumericsError::NonFiniteInput("multi_head_attention"));
            }
        }
        let qs = tape.shape(query).to_vec();
        let ks = tape.shape(memory).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(NumericsError::ShapeMismatch {
                op: "multi_head_attention",
                expected: qs,
                found: ks,
            });
        }
        let (b, sq, sk) = (qs[0], qs[1], ks[1]);
        let (h, dk) = (self.heads, self.d_k);
        let split = |tape: &mut Tape<'_>, x: Var, s: usize| -> Result<Var, NumericsError> {
            let x = tape.reshape(x, &[b, s, h, dk])?;
            tape.permute(x, &[0, 2, 1, 3])
        };
        let q = self.w_q.forward(tape, query)?;
        let q = split(tape, q, sq)?;
        let k = self.w_k.forward(tape, memory)?;
        let k = split(tape, k, sk)?;
        let v = self.w_v.forward(tape, memory)?;
        let v = split(tape, v, sk)?;
        let scores = tape.batch_matmul(q, k, false, true)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let expanded = match mask {
            Some(m) => {
                if m.len() != b * sq * sk {
                    return Err(NumericsError::ShapeMismatch {
                        op: "attention mask",
                        expected: vec![b, sq, sk],
                        found: vec![m.len()],
                    });
                }
                let mut e = Vec::with_capacity(b * h * sq * sk);
                for bi in 0..b {
                    for _ in 0..h {
                        e.extend_from_slice(&m[bi * sq * sk..(bi + 1) * sq * sk]);
                    }
                }
                Some(e)
            }
            None => None,
        };
        let weights = tape.softmax(scores, expanded.as_deref())?;
        let ctx = tape.batch_matmul(weights, v, false, false)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, sq, h * dk])?;
        let output = self.w_out.forward(tape, ctx)?;
        Ok(Attention { output, weights })
    }
}

/// Two-layer perceptron `d → hidden → d_out` with ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        d: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            w1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden, true)?,
            w2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d_out, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
        let h = self.w1.forward(tape, x)?;
        let h = tape.relu(h);
        self.w2.forward(tape, h)
    }
}

/// Post-norm transformer layer: attention → dropout → residual → LN, then
/// FFN → dropout → residual → LN. Used for self- and cross-attention.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        dims: LayerDims,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dims.d_model, dims.heads, dims.d_k)?,
            ln_attn: LayerNorm::new(store, rng, &format!("{name}.ln_attn"), dims.d_model, LN_EPS)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dims.d_model, dims.d_ff, dims.d_model)?,
            ln_ffn: LayerNorm::new(store, rng, &format!("{name}.ln_ffn"), dims.d_model, LN_EPS)?,
            dropout: dims.dropout,
        })
    }

    /// Self-attention when `memory` is `None`, cross-attention otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        memory: Option<Var>,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let a = self.attn.forward(tape, x, memory.unwrap_or(x), mask)?.output;
        let a = tape.dropout(a, self.dropout)?;
        let x = tape.add(x, a)?;
        let x = self.ln_attn.forward(tape, x)?;
        let f = self.ffn.forward(tape, x)?;
        let f = tape.dropout(f, self.dropout)?;
        let x = tape.add(x, f)?;
        self.ln_ffn.forward(tape, x)
    }
}

/// `Linear → LayerNorm → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct NormMlp {
    pub fc1: Linear,
    pub ln: LayerNorm,
    pub fc2: Linear,
}

impl NormMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, hidden, true)?,
            ln: LayerNorm::new(store, rng, &format!("{name}.ln"), hidden, 1e-5)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d_out, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
        let h = self.fc1.forward(tape, x)?;
        let h = self.ln.forward(tape, h)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }
}
