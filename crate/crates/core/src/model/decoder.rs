//! Multi-task decoder: contrastive alignment, cross-modal classification,
//! cross-modal masked language modeling and visual classification.

use m2clip_autograd::{cosine_matrix, ParamId, ParamStore, Tape, Tensor, Var};

use super::adapters::TextAdapter;
use super::layers::{Attention, Block, Builder, LayerNorm, Linear};
use crate::config::Heads;
use crate::error::{config, contract, Result};

/// Cross-attention block initialized from the final text layer.
#[derive(Debug, Clone)]
pub struct CmlmBlock {
    /// Frozen random map from joint width to text width for frame embeddings.
    pub in_map: Linear,
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub adapter: TextAdapter,
    pub mlm: Linear,
}

impl CmlmBlock {
    pub fn build(bld: &mut Builder, last: &Block, joint: usize, width: usize, rank: usize, vocab: usize) -> Result<Self> {
        Ok(Self {
            in_map: Linear::build(bld, "decoder.cmlm.in_map", joint, width, false, false)?,
            ln1: last.ln1.copy(bld, "decoder.cmlm.ln1")?,
            attn: last.attn.copy(bld, "decoder.cmlm.attn")?,
            ln2: last.ln2.copy(bld, "decoder.cmlm.ln2")?,
            fc1: last.fc1.copy(bld, "decoder.cmlm.fc1", false)?,
            fc2: last.fc2.copy(bld, "decoder.cmlm.fc2", false)?,
            adapter: TextAdapter::build(bld, "decoder.cmlm.adapter", width, rank)?,
            mlm: Linear::build(bld, "decoder.cmlm.mlm", width, vocab, true, true)?,
        })
    }

    /// Parameters that mirror the final text layer, paired with their source.
    pub fn copied_from<'a>(&'a self, last: &'a Block) -> Vec<(ParamId, ParamId)> {
        let mine = [self.ln1.ids(), self.attn.ids(), self.ln2.ids(), self.fc1.ids(), self.fc2.ids()].concat();
        let theirs = [last.ln1.ids(), last.attn.ids(), last.ln2.ids(), last.fc1.ids(), last.fc2.ids()].concat();
        mine.into_iter().zip(theirs).collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut v = self.adapter.ids();
        v.extend(self.mlm.ids());
        v
    }

    /// Vocabulary logits `[B, N, V]` for text features `z[B, N, d_l]` cross
    /// attending to per-frame embeddings `frames[B, T, d_vl]`.
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, z: Var, frames: Var) -> Result<Var> {
        let kv = self.in_map.forward(tape, store, frames)?;
        let q = self.ln1.forward(tape, store, z)?;
        let kv = self.ln1.forward(tape, store, kv)?;
        let a = self.attn.forward(tape, store, q, kv, false)?;
        let w_star = tape.add(z, a)?;
        let w_hat = self.adapter.forward(tape, store, w_star)?;
        let h = self.ln2.forward(tape, store, w_hat)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        let w_m = tape.add(w_hat, h)?;
        self.mlm.forward(tape, store, w_m)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub log_tau: ParamId,
    pub min_tau: f64,
    pub vc: Linear,
    pub cmlm: CmlmBlock,
}

impl Decoder {
    /// `τ = max(exp(log_tau), min_tau)` as a scalar node.
    pub fn temperature<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore) -> Var {
        let lt = tape.param(store, self.log_tau);
        let t = tape.exp(lt);
        tape.clamp_min(t, self.min_tau)
    }

    /// `1/τ` as a scalar node.
    pub fn inverse_temperature<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore) -> Var {
        let t = self.temperature(tape, store);
        tape.recip(t)
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).tensor.data()[0].exp().max(self.min_tau)
    }
}

/// Cosine similarities `[n, m]` scaled by `inv_tau`.
pub fn scaled_similarity(tape: &mut Tape<'_>, a: Var, b: Var, inv_tau: Var) -> Result<Var> {
    let c = cosine_matrix(tape, a, b)?;
    Ok(tape.mul_scalar(c, inv_tau)?)
}

/// Video-to-text and text-to-video probability matrices, each `[B, B]`.
pub fn contrastive_similarities(tape: &mut Tape<'_>, videos: Var, texts: Var, inv_tau: Var) -> Result<(Var, Var)> {
    let s = scaled_similarity(tape, videos, texts, inv_tau)?;
    let v2y = tape.softmax(s)?;
    let st = tape.permute(s, &[1, 0])?;
    let y2v = tape.softmax(st)?;
    Ok((v2y, y2v))
}

/// Label-aware targets: row `i` spreads mass `1/k` over the `k` batch
/// entries sharing label `i`'s class.
pub fn ground_truth(labels: &[usize]) -> Vec<f64> {
    let b = labels.len();
    let mut gt = vec![0.0; b * b];
    for i in 0..b {
        let k = labels.iter().filter(|&&l| l == labels[i]).count() as f64;
        for j in 0..b {
            if labels[j] == labels[i] {
                gt[i * b + j] = 1.0 / k;
            }
        }
    }
    gt
}

fn check_distribution_rows(gt: &[f64], b: usize) -> Result<()> {
    if gt.len() != b * b {
        return Err(contract(format!("ground truth has {} entries, expected {}", gt.len(), b * b)));
    }
    for (i, row) in gt.chunks(b).enumerate() {
        if row.iter().sum::<f64>() <= 0.0 {
            return Err(contract(format!("ground-truth row {i} has no positives")));
        }
    }
    Ok(())
}

fn plogp(row: &[f64]) -> f64 {
    row.iter().filter(|&&g| g > 0.0).map(|g| g * g.ln()).sum()
}

/// `½·(mean_i KL(gt_i ‖ p^{V2y}_i) + mean_j KL(gtᵀ_j ‖ p^{y2V}_j))` on
/// plain probability matrices.
pub fn contrastive_kl(p_v2y: &[f64], p_y2v: &[f64], gt: &[f64], b: usize) -> Result<f64> {
    check_distribution_rows(gt, b)?;
    let kl = |p: &[f64], transpose: bool| -> f64 {
        let mut total = 0.0;
        for i in 0..b {
            for j in 0..b {
                let g = if transpose { gt[j * b + i] } else { gt[i * b + j] };
                if g > 0.0 {
                    total += g * (g.ln() - p[i * b + j].ln());
                }
            }
        }
        total / b as f64
    };
    Ok(0.5 * (kl(p_v2y, false) + kl(p_y2v, true)))
}

/// Symmetric KL contrastive loss from scaled similarity logits `[B, B]`.
pub fn contrastive_loss(tape: &mut Tape<'_>, logits: Var, gt: &[f64]) -> Result<Var> {
    let b = tape.shape(logits)[0];
    check_distribution_rows(gt, b)?;
    let gt_t: Vec<f64> = (0..b * b).map(|k| gt[(k % b) * b + k / b]).collect();
    let entropy = (gt.chunks(b).map(plogp).sum::<f64>() + gt_t.chunks(b).map(plogp).sum::<f64>()) / (2 * b) as f64;
    let lr = tape.log_softmax(logits)?;
    let lt = tape.permute(logits, &[1, 0])?;
    let lc = tape.log_softmax(lt)?;
    let w = -0.5 / b as f64;
    let r = tape.dot_const(lr, gt.iter().map(|g| g * w).collect())?;
    let c = tape.dot_const(lc, gt_t.iter().map(|g| g * w).collect())?;
    let s = tape.add(r, c)?;
    let e = tape.constant(Tensor::scalar(entropy));
    Ok(tape.add(s, e)?)
}

/// Mean cross-entropy of `logits[B, C]` against class indices.
pub fn cross_entropy(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (b, c) = (shape[0], shape[1]);
    if targets.len() != b {
        return Err(contract(format!("{} targets for {b} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(contract(format!("target class {t} out of range for {c} classes")));
    }
    let lsm = tape.log_softmax(logits)?;
    let mut w = vec![0.0; b * c];
    for (i, &t) in targets.iter().enumerate() {
        w[i * c + t] = -1.0 / b as f64;
    }
    Ok(tape.dot_const(lsm, w)?)
}

/// Cross-entropy over cosine similarities of `videos[B, d]` to every label
/// embedding `labels[C, d]`.
pub fn cmc_loss(tape: &mut Tape<'_>, videos: Var, labels: Var, targets: &[usize], inv_tau: Var) -> Result<Var> {
    let logits = scaled_similarity(tape, videos, labels, inv_tau)?;
    cross_entropy(tape, logits, targets)
}

/// A masked position: sequence row, token position, original token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedToken {
    pub row: usize,
    pub pos: usize,
    pub target: usize,
}

/// Mean cross-entropy over masked positions of `logits[B, N, V]`; `None`
/// when nothing was masked.
pub fn cmlm_loss(tape: &mut Tape<'_>, logits: Var, masked: &[MaskedToken]) -> Result<Option<Var>> {
    if masked.is_empty() {
        return Ok(None);
    }
    let shape = tape.shape(logits).to_vec();
    let (b, n, v) = (shape[0], shape[1], shape[2]);
    if masked.iter().any(|m| m.row >= b || m.pos >= n) {
        return Err(contract("masked position outside the token batch"));
    }
    let flat = tape.reshape(logits, [b * n, v])?;
    let rows: Vec<usize> = masked.iter().map(|m| m.row * n + m.pos).collect();
    let picked = tape.index_select(flat, &rows)?;
    let targets: Vec<usize> = masked.iter().map(|m| m.target).collect();
    cross_entropy(tape, picked, &targets).map(Some)
}

/// Softmax over `cos(v, w_c)/τ` and the argmax class (lowest index on ties).
pub fn zero_shot_predict(v: &[f64], labels: &[Vec<f64>], tau: f64) -> (usize, Vec<f64>) {
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt().max(m2clip_autograd::COSINE_EPS);
    let nv = norm(v);
    let logits: Vec<f64> = labels
        .iter()
        .map(|w| v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (nv * norm(w)) / tau)
        .collect();
    (argmax(&logits), softmax(&logits))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, ties by lowest index.
pub fn top_k(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Weighted sum of the enabled heads that produced a loss.
pub fn aggregate_losses(
    tape: &mut Tape<'_>,
    parts: &Heads<Option<Var>>,
    weights: &Heads<f64>,
    enabled: &Heads<bool>,
) -> Result<Var> {
    if !(enabled.contrastive || enabled.cmc || enabled.cmlm || enabled.vc) {
        return Err(config("at least one decoder head must be enabled"));
    }
    let terms = [
        (enabled.contrastive, parts.contrastive, weights.contrastive),
        (enabled.cmc, parts.cmc, weights.cmc),
        (enabled.cmlm, parts.cmlm, weights.cmlm),
        (enabled.vc, parts.vc, weights.vc),
    ];
    let mut total: Option<Var> = None;
    for (on, part, w) in terms {
        let Some(v) = part.filter(|_| on) else { continue };
        let t = if w == 1.0 { v } else { tape.scale(v, w) };
        total = Some(match total {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}
