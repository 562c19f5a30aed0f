//! Frozen video tower: patch embedding, per-frame transformer layers with
//! optional TED-Adapters, class-token projection and temporal pooling.

use m2clip_autograd::{ParamId, ParamStore, Tape, Tensor, Var};

use super::adapters::TedAdapter;
use super::layers::{Block, Builder, LayerNorm, Linear};
use crate::config::{SequentialOrder, TedMode};
use crate::data::VideoClip;
use crate::error::{config, Result};

/// Splits each frame into row-major `P×P` patches, each flattened in
/// `(row, column, channel)` order. Returns `[T, M, P·P·3]` data.
pub fn patchify(clip: &VideoClip, p: usize) -> Result<Vec<f64>> {
    if p == 0 || !clip.height.is_multiple_of(p) || !clip.width.is_multiple_of(p) {
        return Err(config(format!(
            "frame {}x{} is not divisible by patch size {p}",
            clip.height, clip.width
        )));
    }
    let (gh, gw) = (clip.height / p, clip.width / p);
    let mut out = Vec::with_capacity(clip.data.len());
    for t in 0..clip.frames {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let row = ((t * clip.height + py * p + y) * clip.width + px * p) * 3;
                    out.extend(clip.data[row..row + p * 3].iter().map(|&v| v as f64));
                }
            }
        }
    }
    Ok(out)
}

/// Stacks patchified clips into `[B, T, M, P·P·3]`.
pub fn patch_batch(clips: &[&VideoClip], p: usize) -> Result<Tensor> {
    let first = clips.first().ok_or_else(|| config("empty clip batch"))?;
    let (t, h, w) = (first.frames, first.height, first.width);
    let mut data = Vec::new();
    for c in clips {
        if (c.frames, c.height, c.width) != (t, h, w) {
            return Err(config("clips in a batch must share dimensions"));
        }
        data.extend(patchify(c, p)?);
    }
    let m = (h / p) * (w / p);
    Ok(Tensor::new([clips.len(), t, m, p * p * 3], data)?)
}

#[derive(Debug, Clone)]
pub struct VideoTower {
    pub patch_embed: Linear,
    pub class_token: ParamId,
    pub pos: ParamId,
    pub layers: Vec<Block>,
    pub adapters: Vec<Option<TedAdapter>>,
    pub ln_post: LayerNorm,
    /// `h_v`, shared across frames.
    pub proj: Linear,
    pub grid: (usize, usize),
    pub mode: TedMode,
    pub order: SequentialOrder,
}

pub struct VideoSpec {
    pub layers: usize,
    pub width: usize,
    pub joint: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub grid: (usize, usize),
    /// 1-based layers receiving an adapter.
    pub adapter_layers: Vec<usize>,
    pub rank: usize,
    pub kernels: (usize, usize),
    pub mode: TedMode,
    pub order: SequentialOrder,
}

impl VideoTower {
    pub fn build(bld: &mut Builder, s: &VideoSpec) -> Result<Self> {
        let m = s.grid.0 * s.grid.1;
        let patch_embed = Linear::build(bld, "video.patch_embed", s.patch * s.patch * 3, s.width, true, false)?;
        let class_token = bld.gaussian("video.class_token", &[s.width], false)?;
        let pos = bld.gaussian("video.pos", &[1 + m, s.width], false)?;
        let mut layers = Vec::with_capacity(s.layers);
        let mut adapters = Vec::with_capacity(s.layers);
        for i in 1..=s.layers {
            layers.push(Block::build(bld, &format!("video.layer{i}"), s.width, s.heads, s.mlp_ratio)?);
            adapters.push(if s.adapter_layers.contains(&i) {
                Some(TedAdapter::build(
                    bld,
                    &format!("video.layer{i}.ted"),
                    s.width,
                    s.rank,
                    s.kernels.0,
                    s.kernels.1,
                )?)
            } else {
                None
            });
        }
        let ln_post = LayerNorm::build(bld, "video.ln_post", s.width)?;
        let proj = Linear::build(bld, "video.proj", s.width, s.joint, false, false)?;
        Ok(Self {
            patch_embed,
            class_token,
            pos,
            layers,
            adapters,
            ln_post,
            proj,
            grid: s.grid,
            mode: s.mode,
            order: s.order,
        })
    }

    /// `[C, X·W_p + b] + e_v` per frame: `patches[B, T, M, P·P·3]` to
    /// `[B, T, 1+M, d]`.
    pub fn embed<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, patches: Var) -> Result<Var> {
        let x = self.patch_embed.forward(tape, store, patches)?;
        let mut shape = tape.shape(x).to_vec();
        let r = shape.len();
        let d = shape[r - 1];
        let m = shape[r - 2];
        shape[r - 2] = 1;
        let zero = tape.constant(Tensor::zeros(shape));
        let x = tape.concat(&[zero, x], r - 2)?;
        let cls = tape.param(store, self.class_token);
        let cls = tape.reshape(cls, [1, d])?;
        let rest = tape.constant(Tensor::zeros([m, d]));
        let cls_rows = tape.concat(&[cls, rest], 0)?;
        let pos = tape.param(store, self.pos);
        let offset = tape.add(cls_rows, pos)?;
        Ok(tape.add(x, offset)?)
    }

    /// Adapter then frozen layer, for each layer. Frames never mix inside a
    /// frozen layer.
    pub fn encode<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, mut x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let r = shape.len();
        let frames_flat: usize = shape[..r - 2].iter().product();
        for (block, adapter) in self.layers.iter().zip(&self.adapters) {
            if let Some(a) = adapter {
                x = a.forward(tape, store, x, self.mode, self.order, self.grid)?;
            }
            let h = tape.reshape(x, [frames_flat, shape[r - 2], shape[r - 1]])?;
            let h = block.attention_residual(tape, store, h, false)?;
            let h = block.ffn_residual(tape, store, h)?;
            x = tape.reshape(h, shape.clone())?;
        }
        Ok(x)
    }

    /// Per-frame joint embeddings `[B, T, d_vl]` from the normalized class
    /// tokens, and their temporal mean `[B, d_vl]`.
    pub fn project<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let r = shape.len();
        let cls = tape.slice(x, r - 2, 0, 1)?;
        let mut cshape = shape[..r - 2].to_vec();
        cshape.push(shape[r - 1]);
        let cls = tape.reshape(cls, cshape)?;
        let cls = self.ln_post.forward(tape, store, cls)?;
        let frames = self.proj.forward(tape, store, cls)?;
        let pooled = tape.mean_axis(frames, r - 3)?;
        Ok((frames, pooled))
    }

    /// Full tower on `patches[B, T, M, P·P·3]`.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, patches: Var) -> Result<(Var, Var)> {
        let x = self.embed(tape, store, patches)?;
        let x = self.encode(tape, store, x)?;
        self.project(tape, store, x)
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters.iter().flatten().flat_map(TedAdapter::ids).collect()
    }
}
