//! Parameterized building blocks on top of the tape.

use rand::Rng;

use super::{ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// Fully connected layer `y = x W^T + b` with `W` stored as `out x in`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Weights uniform in `±1/sqrt(in_dim)`, zero bias.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[out_dim, in_dim], bound, rng);
        let bias = store.zeros(format!("{name}.bias"), &[out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormLayer {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNormLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.filled(format!("{name}.gain"), &[dim], T::one()),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// `Linear -> [LayerNorm] -> GELU -> Dropout`
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub linear: LinearLayer,
    pub norm: Option<LayerNormLayer>,
}

/// Stack of [`MlpBlock`]s of constant width.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub blocks: Vec<MlpBlock>,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
        layer_norm: bool,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                let fan_in = if i == 0 { in_dim } else { width };
                let block_name = format!("{name}.{i}");
                MlpBlock {
                    linear: LinearLayer::new(store, &block_name, fan_in, width, rng),
                    norm: layer_norm
                        .then(|| LayerNormLayer::new(store, &format!("{block_name}.norm"), width)),
                }
            })
            .collect();
        Self { blocks, dropout }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.blocks.last().map(|b| b.linear.out_dim)
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        for block in &self.blocks {
            x = block.linear.forward(tape, store, x)?;
            if let Some(norm) = &block.norm {
                x = norm.forward(tape, store, x)?;
            }
            x = tape.gelu(x);
            x = tape.dropout(x, self.dropout, training, rng)?;
        }
        Ok(x)
    }
}

/// Pre-norm Transformer encoder block:
/// `T' = T + MHSA(LN(T))`, then `T'' = T' + FFN(LN(T'))` with a GELU FFN of width `4D`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_attn: LayerNormLayer,
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
    pub norm_ffn: LayerNormLayer,
    pub ffn_in: LinearLayer,
    pub ffn_out: LinearLayer,
    pub heads: usize,
    pub dim: usize,
}

/// Width multiplier of the feed-forward sub-block.
pub const FFN_EXPANSION: usize = 4;

impl TransformerBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        let hidden = FFN_EXPANSION * dim;
        Ok(Self {
            norm_attn: LayerNormLayer::new(store, &format!("{name}.ln_attn"), dim),
            query: LinearLayer::new(store, &format!("{name}.q"), dim, dim, rng),
            key: LinearLayer::new(store, &format!("{name}.k"), dim, dim, rng),
            value: LinearLayer::new(store, &format!("{name}.v"), dim, dim, rng),
            output: LinearLayer::new(store, &format!("{name}.o"), dim, dim, rng),
            norm_ffn: LayerNormLayer::new(store, &format!("{name}.ln_ffn"), dim),
            ffn_in: LinearLayer::new(store, &format!("{name}.ffn_in"), dim, hidden, rng),
            ffn_out: LinearLayer::new(store, &format!("{name}.ffn_out"), hidden, dim, rng),
            heads,
            dim,
        })
    }

    /// Applies the block to packed sequences of length `seq`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        seq: usize,
    ) -> Result<Var> {
        self.forward_with_attention(tape, store, x, seq)
            .map(|(out, _)| out)
    }

    /// Like [`TransformerBlock::forward`] but also returns the attention node, whose
    /// weights are available through [`Tape::attention_weights`].
    pub fn forward_with_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        seq: usize,
    ) -> Result<(Var, Var)> {
        let h = self.norm_attn.forward(tape, store, x)?;
        let q = self.query.forward(tape, store, h)?;
        let k = self.key.forward(tape, store, h)?;
        let v = self.value.forward(tape, store, h)?;
        let attn = tape.attention(q, k, v, seq, self.heads)?;
        let projected = self.output.forward(tape, store, attn)?;
        let x = tape.add(x, projected)?;

        let h = self.norm_ffn.forward(tape, store, x)?;
        let h = self.ffn_in.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.ffn_out.forward(tape, store, h)?;
        Ok((tape.add(x, h)?, attn))
    }
}
