//! TED-Adapter (temporal enhancement + temporal difference) and the text
//! bottleneck adapter.

use m2clip_autograd::{ParamId, ParamStore, Tape, Var};

use super::layers::Builder;
use crate::config::{SequentialOrder, TedMode};
use crate::error::{config, Result};

/// Bottleneck width for a token width and ratio, never below 1.
pub fn bottleneck(width: usize, ratio: f64) -> usize {
    ((width as f64 * ratio).round() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct TedAdapter {
    pub w_dn: ParamId,
    pub b_dn: ParamId,
    pub conv_t_k: ParamId,
    pub conv_t_b: ParamId,
    pub conv_s_k: ParamId,
    pub conv_s_b: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
    pub width: usize,
    pub rank: usize,
}

impl TedAdapter {
    pub fn build(bld: &mut Builder, name: &str, width: usize, rank: usize, kt: usize, ks: usize) -> Result<Self> {
        if kt.is_multiple_of(2) || ks.is_multiple_of(2) {
            return Err(config(format!("adapter kernel sizes must be odd, got {kt} and {ks}")));
        }
        Ok(Self {
            w_dn: bld.gaussian(&format!("{name}.w_dn"), &[width, rank], true)?,
            b_dn: bld.zeros(&format!("{name}.b_dn"), &[rank], true)?,
            conv_t_k: bld.gaussian(&format!("{name}.conv_t.k"), &[kt, rank, rank], true)?,
            conv_t_b: bld.zeros(&format!("{name}.conv_t.b"), &[rank], true)?,
            conv_s_k: bld.gaussian(&format!("{name}.conv_s.k"), &[ks, ks, rank, rank], true)?,
            conv_s_b: bld.zeros(&format!("{name}.conv_s.b"), &[rank], true)?,
            w_up: bld.zeros(&format!("{name}.w_up"), &[rank, width], true)?,
            b_up: bld.zeros(&format!("{name}.b_up"), &[width], true)?,
            width,
            rank,
        })
    }

    /// Closed-form parameter count.
    pub fn count(width: usize, rank: usize, kt: usize, ks: usize) -> usize {
        width * rank + rank + rank * width + width + kt * rank * rank + rank + ks * ks * rank * rank + rank
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.w_dn, self.b_dn, self.conv_t_k, self.conv_t_b, self.conv_s_k, self.conv_s_b, self.w_up, self.b_up,
        ]
    }

    fn down<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, z: Var) -> Result<Var> {
        let w = tape.param(store, self.w_dn);
        Ok(tape.linear(z, w, None)?)
    }

    fn enhance_from_down<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, down: Var) -> Result<Var> {
        let b_dn = tape.param(store, self.b_dn);
        let h = tape.add(down, b_dn)?;
        let k = tape.param(store, self.conv_t_k);
        let kb = tape.param(store, self.conv_t_b);
        let h = tape.conv1d_temporal(h, k, kb)?;
        let w_up = tape.param(store, self.w_up);
        let b_up = tape.param(store, self.b_up);
        Ok(tape.linear(h, w_up, Some(b_up))?)
    }

    /// Difference branch on already down-projected tokens `[..., T, 1+M, r]`.
    /// Returns `[..., T, 1+M, d]` with a zero class-token row.
    fn difference_from_down<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        down: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let shape = tape.shape(down).to_vec();
        let r = shape.len();
        let patches = tape.slice(down, r - 2, 1, shape[r - 2] - 1)?;
        let out = self.difference_patches(tape, store, patches, grid)?;
        let mut zshape = tape.shape(out).to_vec();
        zshape[r - 2] = 1;
        let zero = tape.constant(m2clip_autograd::Tensor::zeros(zshape));
        Ok(tape.concat(&[zero, out], r - 2)?)
    }

    /// `Conv2D(diff(down)) · W_up` on patch tokens `[..., T, M, r]`.
    fn difference_patches<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        down: Var,
        (gh, gw): (usize, usize),
    ) -> Result<Var> {
        let shape = tape.shape(down).to_vec();
        let r = shape.len();
        if r < 3 || gh * gw != shape[r - 2] {
            return Err(config(format!(
                "patch grid {gh}x{gw} does not match {} patch tokens",
                shape.get(r.wrapping_sub(2)).copied().unwrap_or(0)
            )));
        }
        let diff = tape.temporal_diff(down, r - 3)?;
        let mut grid_shape = shape[..r - 2].to_vec();
        grid_shape.extend([gh, gw, self.rank]);
        let g = tape.reshape(diff, grid_shape)?;
        let k = tape.param(store, self.conv_s_k);
        let kb = tape.param(store, self.conv_s_b);
        let c = tape.conv2d_spatial(g, k, kb)?;
        let c = tape.reshape(c, shape)?;
        let w_up = tape.param(store, self.w_up);
        Ok(tape.linear(c, w_up, None)?)
    }

    /// Temporal enhancement `Z_E` over all tokens of `z[..., T, 1+M, d]`.
    pub fn temporal_enhance<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, z: Var) -> Result<Var> {
        let d = self.down(tape, store, z)?;
        self.enhance_from_down(tape, store, d)
    }

    /// Temporal difference `Z_D` over patch tokens `z[..., T, M, d]` laid out
    /// row-major on a `grid` of patches. The first frame sees a zero
    /// difference.
    pub fn temporal_difference<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        z_patches: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let d = self.down(tape, store, z_patches)?;
        self.difference_patches(tape, store, d, grid)
    }

    /// Adapter with residual on `z[..., T, 1+M, d]` (class token at index 0).
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        z: Var,
        mode: TedMode,
        order: SequentialOrder,
        grid: (usize, usize),
    ) -> Result<Var> {
        match mode {
            TedMode::Parallel => {
                let d = self.down(tape, store, z)?;
                let ze = self.enhance_from_down(tape, store, d)?;
                let zd = self.difference_from_down(tape, store, d, grid)?;
                let out = tape.add(z, ze)?;
                Ok(tape.add(out, zd)?)
            }
            TedMode::TeOnly => self.enhance_residual(tape, store, z),
            TedMode::TdOnly => self.difference_residual(tape, store, z, grid),
            TedMode::Sequential => match order {
                SequentialOrder::TeTd => {
                    let z = self.enhance_residual(tape, store, z)?;
                    self.difference_residual(tape, store, z, grid)
                }
                SequentialOrder::TdTe => {
                    let z = self.difference_residual(tape, store, z, grid)?;
                    self.enhance_residual(tape, store, z)
                }
            },
        }
    }

    fn enhance_residual<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, z: Var) -> Result<Var> {
        let ze = self.temporal_enhance(tape, store, z)?;
        Ok(tape.add(z, ze)?)
    }

    fn difference_residual<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        z: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let d = self.down(tape, store, z)?;
        let zd = self.difference_from_down(tape, store, d, grid)?;
        Ok(tape.add(z, zd)?)
    }
}

/// `z + GELU(z W_dn + b_dn) W_up + b_up`.
#[derive(Debug, Clone)]
pub struct TextAdapter {
    pub w_dn: ParamId,
    pub b_dn: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
}

impl TextAdapter {
    pub fn build(bld: &mut Builder, name: &str, width: usize, rank: usize) -> Result<Self> {
        Ok(Self {
            w_dn: bld.gaussian(&format!("{name}.w_dn"), &[width, rank], true)?,
            b_dn: bld.zeros(&format!("{name}.b_dn"), &[rank], true)?,
            w_up: bld.zeros(&format!("{name}.w_up"), &[rank, width], true)?,
            b_up: bld.zeros(&format!("{name}.b_up"), &[width], true)?,
        })
    }

    pub fn count(width: usize, rank: usize) -> usize {
        width * rank + rank + rank * width + width
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w_dn, self.b_dn, self.w_up, self.b_up]
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, z: Var) -> Result<Var> {
        let w_dn = tape.param(store, self.w_dn);
        let b_dn = tape.param(store, self.b_dn);
        let h = tape.linear(z, w_dn, Some(b_dn))?;
        let h = tape.gelu(h);
        let w_up = tape.param(store, self.w_up);
        let b_up = tape.param(store, self.b_up);
        let h = tape.linear(h, w_up, Some(b_up))?;
        Ok(tape.add(z, h)?)
    }
}
