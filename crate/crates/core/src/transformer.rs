//! Pre-norm transformer encoder over a padded batch of token sequences.

use mmfuse_numcore::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// `x ← x + Attn(LN(x)); x ← x + FF(LN(x))` per block, then a final LN.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    d: usize,
    heads: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        group: &str,
        d: usize,
        layers: usize,
        heads: usize,
        ff_width: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
        }
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("{prefix}.layer{l}");
            blocks.push(Block {
                ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), group, d)?,
                q: Linear::new(store, rng, &format!("{p}.q"), group, d, d)?,
                k: Linear::new(store, rng, &format!("{p}.k"), group, d, d)?,
                v: Linear::new(store, rng, &format!("{p}.v"), group, d, d)?,
                o: Linear::new(store, rng, &format!("{p}.o"), group, d, d)?,
                ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), group, d)?,
                ff_in: Linear::new(store, rng, &format!("{p}.ff_in"), group, d, ff_width)?,
                ff_out: Linear::new(store, rng, &format!("{p}.ff_out"), group, ff_width, d)?,
            });
        }
        Ok(Self {
            blocks,
            final_ln: LayerNorm::new(store, &format!("{prefix}.final_ln"), group, d)?,
            d,
            heads,
        })
    }

    /// `x` is `[batch·len, d]`; `key_mask` holds `batch·len` flags
    /// (`true` = real token). Padded positions never influence real ones.
    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, len: usize, key_mask: &[bool]) -> Result<Var> {
        let mut x = x;
        for b in &self.blocks {
            let h = b.ln_attn.forward(g, x)?;
            let a = self.attention(g, b, h, batch, len, key_mask)?;
            x = g.add(x, a)?;
            let h = b.ln_ff.forward(g, x)?;
            let h = b.ff_in.forward(g, h)?;
            let h = g.gelu(h)?;
            let h = b.ff_out.forward(g, h)?;
            x = g.add(x, h)?;
        }
        Ok(self.final_ln.forward(g, x)?)
    }

    fn split_heads(&self, g: &mut Graph, x: Var, batch: usize, len: usize) -> Result<Var> {
        let dh = self.d / self.heads;
        let x = g.reshape(x, &[batch, len, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[batch * self.heads, len, dh])?)
    }

    fn attention(
        &self,
        g: &mut Graph,
        b: &Block,
        h: Var,
        batch: usize,
        len: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let dh = self.d / self.heads;
        let q = b.q.forward(g, h)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt())?;
        let q = self.split_heads(g, q, batch, len)?;
        let k = b.k.forward(g, h)?;
        let k = self.split_heads(g, k, batch, len)?;
        let v = b.v.forward(g, h)?;
        let v = self.split_heads(g, v, batch, len)?;
        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let attn = g.masked_softmax(scores, key_mask, self.heads * len)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[batch, self.heads, len, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch * len, self.d])?;
        Ok(b.o.forward(g, ctx)?)
    }
}
