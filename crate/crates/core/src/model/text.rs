//! Frozen causal text tower with optional adapters before each FFN.

use m2clip_autograd::{ParamId, ParamStore, Tape, Var};

use super::adapters::TextAdapter;
use super::layers::{Block, Builder, LayerNorm, Linear};
use crate::error::{contract, Result};
use crate::vocab::TokenSequence;

#[derive(Debug, Clone)]
pub struct TextTower {
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<Block>,
    pub adapters: Vec<Option<TextAdapter>>,
    pub ln_final: LayerNorm,
    /// `h_l`.
    pub proj: Linear,
    pub max_len: usize,
}

pub struct TextSpec {
    pub layers: usize,
    pub width: usize,
    pub joint: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub adapter_layers: Vec<usize>,
    pub rank: usize,
}

impl TextTower {
    pub fn build(bld: &mut Builder, s: &TextSpec) -> Result<Self> {
        let token_embed = bld.gaussian("text.token_embed", &[s.vocab, s.width], false)?;
        let pos = bld.gaussian("text.pos", &[s.max_len, s.width], false)?;
        let mut layers = Vec::with_capacity(s.layers);
        let mut adapters = Vec::with_capacity(s.layers);
        for i in 1..=s.layers {
            layers.push(Block::build(bld, &format!("text.layer{i}"), s.width, s.heads, s.mlp_ratio)?);
            adapters.push(if s.adapter_layers.contains(&i) {
                Some(TextAdapter::build(bld, &format!("text.layer{i}.adapter"), s.width, s.rank)?)
            } else {
                None
            });
        }
        let ln_final = LayerNorm::build(bld, "text.ln_final", s.width)?;
        let proj = Linear::build(bld, "text.proj", s.width, s.joint, false, false)?;
        Ok(Self {
            token_embed,
            pos,
            layers,
            adapters,
            ln_final,
            proj,
            max_len: s.max_len,
        })
    }

    /// Final-layer features `[S, N, d_l]` for `S` padded sequences of equal
    /// length `N`.
    pub fn encode<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, ids: &[&[usize]]) -> Result<Var> {
        let n = ids.first().map_or(0, |s| s.len());
        if n == 0 || n > self.max_len || ids.iter().any(|s| s.len() != n) {
            return Err(contract(format!(
                "token sequences must share a length in 1..={}",
                self.max_len
            )));
        }
        let flat: Vec<usize> = ids.iter().flat_map(|s| s.iter().copied()).collect();
        let emb = tape.param(store, self.token_embed);
        let x = tape.index_select(emb, &flat)?;
        let d = tape.shape(x)[1];
        let x = tape.reshape(x, [ids.len(), n, d])?;
        let pos = tape.param(store, self.pos);
        let pos = tape.slice(pos, 0, 0, n)?;
        let mut x = tape.add(x, pos)?;
        for (block, adapter) in self.layers.iter().zip(&self.adapters) {
            x = block.attention_residual(tape, store, x, true)?;
            if let Some(a) = adapter {
                x = a.forward(tape, store, x)?;
            }
            x = block.ffn_residual(tape, store, x)?;
        }
        Ok(x)
    }

    /// `h_l` applied to the normalized feature at each sequence's EOS position.
    pub fn project<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, z: Var, eos: &[usize]) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        let (s, n, d) = (shape[0], shape[1], shape[2]);
        if eos.len() != s || eos.iter().any(|&e| e >= n) {
            return Err(contract("EOS position outside the token sequence"));
        }
        let rows: Vec<usize> = eos.iter().enumerate().map(|(i, &e)| i * n + e).collect();
        let flat = tape.reshape(z, [s * n, d])?;
        let picked = tape.index_select(flat, &rows)?;
        let picked = self.ln_final.forward(tape, store, picked)?;
        self.proj.forward(tape, store, picked)
    }

    /// Joint embeddings `[S, d_vl]` of tokenized texts.
    pub fn embed<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, seqs: &[TokenSequence]) -> Result<Var> {
        let ids: Vec<&[usize]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
        let eos: Vec<usize> = seqs.iter().map(|s| s.eos).collect();
        let z = self.encode(tape, store, &ids)?;
        self.project(tape, store, z, &eos)
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters.iter().flatten().flat_map(TextAdapter::ids).collect()
    }
}
