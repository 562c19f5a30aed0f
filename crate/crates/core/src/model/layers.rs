//! Parameter builder and the frozen transformer pieces shared by both towers.

use m2clip_autograd::{multi_head_attention, AttentionWeights, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Registers parameters with initial values derived from `(seed, name)`.
///
/// Seeding per name keeps every tensor's initial value independent of which
/// other modules exist, so variants that differ only in adapters or heads
/// share an identical backbone.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
    pub std: f64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Builder<'_> {
    pub fn gaussian(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
        let t = Tensor::randn(shape.to_vec(), self.std, &mut rng);
        Ok(self.store.insert(name, t, trainable)?)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::full(shape.to_vec(), value), trainable)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<ParamId> {
        self.full(name, shape, 0.0, trainable)
    }

    /// A new parameter holding an exact copy of `from`.
    pub fn copy(&mut self, name: &str, from: ParamId, trainable: bool) -> Result<ParamId> {
        let t = self.store.get(from).tensor.clone();
        Ok(self.store.insert(name, t, trainable)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn build(bld: &mut Builder, name: &str, din: usize, dout: usize, bias: bool, trainable: bool) -> Result<Self> {
        let w = bld.gaussian(&format!("{name}.w"), &[din, dout], trainable)?;
        let b = if bias {
            Some(bld.zeros(&format!("{name}.b"), &[dout], trainable)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        Ok(tape.linear(x, w, b)?)
    }

    pub fn copy(&self, bld: &mut Builder, name: &str, trainable: bool) -> Result<Self> {
        Ok(Self {
            w: bld.copy(&format!("{name}.w"), self.w, trainable)?,
            b: match self.b {
                Some(b) => Some(bld.copy(&format!("{name}.b"), b, trainable)?),
                None => None,
            },
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn build(bld: &mut Builder, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            g: bld.full(&format!("{name}.g"), &[d], 1.0, false)?,
            b: bld.zeros(&format!("{name}.b"), &[d], false)?,
        })
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.g);
        let b = tape.param(store, self.b);
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }

    pub fn copy(&self, bld: &mut Builder, name: &str) -> Result<Self> {
        Ok(Self {
            g: bld.copy(&format!("{name}.g"), self.g, false)?,
            b: bld.copy(&format!("{name}.b"), self.b, false)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.g, self.b]
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn build(bld: &mut Builder, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::build(bld, &format!("{name}.q"), d, d, true, false)?,
            k: Linear::build(bld, &format!("{name}.k"), d, d, true, false)?,
            v: Linear::build(bld, &format!("{name}.v"), d, d, true, false)?,
            o: Linear::build(bld, &format!("{name}.o"), d, d, true, false)?,
            heads,
        })
    }

    pub fn copy(&self, bld: &mut Builder, name: &str) -> Result<Self> {
        Ok(Self {
            q: self.q.copy(bld, &format!("{name}.q"), false)?,
            k: self.k.copy(bld, &format!("{name}.k"), false)?,
            v: self.v.copy(bld, &format!("{name}.v"), false)?,
            o: self.o.copy(bld, &format!("{name}.o"), false)?,
            heads: self.heads,
        })
    }

    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        q_in: Var,
        kv_in: Var,
        causal: bool,
    ) -> Result<Var> {
        let mut p = |id: Option<ParamId>| tape.param(store, id.expect("attention projections have biases"));
        let w = AttentionWeights {
            wq: p(Some(self.q.w)),
            bq: p(self.q.b),
            wk: p(Some(self.k.w)),
            bk: p(self.k.b),
            wv: p(Some(self.v.w)),
            bv: p(self.v.b),
            wo: p(Some(self.o.w)),
            bo: p(self.o.b),
        };
        Ok(multi_head_attention(tape, q_in, kv_in, &w, self.heads, causal)?)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.ids()).collect()
    }
}

/// Pre-norm transformer layer: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn build(bld: &mut Builder, name: &str, d: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::build(bld, &format!("{name}.ln1"), d)?,
            attn: Attention::build(bld, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::build(bld, &format!("{name}.ln2"), d)?,
            fc1: Linear::build(bld, &format!("{name}.fc1"), d, d * mlp_ratio, true, false)?,
            fc2: Linear::build(bld, &format!("{name}.fc2"), d * mlp_ratio, d, true, false)?,
        })
    }

    /// Self-attention sub-layer with its residual.
    pub fn attention_residual<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        x: Var,
        causal: bool,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, causal)?;
        Ok(tape.add(x, a)?)
    }

    /// Feed-forward sub-layer with its residual.
    pub fn ffn_residual<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        Ok(tape.add(x, h)?)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.ln1.ids();
        v.extend(self.attn.ids());
        v.extend(self.ln2.ids());
        v.extend(self.fc1.ids());
        v.extend(self.fc2.ids());
        v
    }
}
