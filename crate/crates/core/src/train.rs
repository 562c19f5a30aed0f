//! Frozen-backbone training loop and per-epoch metrics.

use m2clip_autograd::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Heads;
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::eval::{supervised_scores, zero_shot_scores, Path};
use crate::model::video::patchify;
use crate::model::Model;
use crate::optim::Optimizer;

/// Metrics logged at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean per-head losses over the epoch's steps.
    pub losses: Heads<Option<f64>>,
    pub total: f64,
    pub vc_top1: Option<f64>,
    pub cmc_top1: Option<f64>,
    pub zeroshot_top1: Option<f64>,
    pub trainable: usize,
    pub params: usize,
}

/// Column order of the tab-separated metrics report.
pub const METRIC_COLUMNS: [&str; 12] = [
    "epoch",
    "step",
    "loss_total",
    "loss_contrastive",
    "loss_cmc",
    "loss_cmlm",
    "loss_vc",
    "vc_top1",
    "cmc_top1",
    "zeroshot_top1",
    "trainable_params",
    "total_params",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<EpochRecord>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// Header line then one tab-separated line per record.
    pub fn to_tsv(&self) -> String {
        let mut out = METRIC_COLUMNS.join("\t");
        out.push('\n');
        for r in &self.records {
            let fields = [
                r.epoch.to_string(),
                r.step.to_string(),
                format!("{:.6}", r.total),
                cell(r.losses.contrastive),
                cell(r.losses.cmc),
                cell(r.losses.cmlm),
                cell(r.losses.vc),
                cell(r.vc_top1),
                cell(r.cmc_top1),
                cell(r.zeroshot_top1),
                r.trainable.to_string(),
                r.params.to_string(),
            ];
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn mask_seed(seed: u64, step: u64) -> u64 {
    (seed ^ 0x6d61_736b).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x0000_0100_0000_01b3) ^ (epoch as u64 + 1).rotate_left(32))
}

/// Runs one optimizer step per batch. Stateful so callers can interleave
/// their own checks between steps.
pub struct Trainer {
    pub optimizer: Optimizer,
    patches: Vec<Vec<f64>>,
    patch_shape: [usize; 3],
}

impl Trainer {
    pub fn new(model: &Model, data: &SyntheticDataset) -> Result<Self> {
        let p = model.arch.patch;
        let patches = data
            .train
            .clips
            .iter()
            .map(|c| patchify(c, p))
            .collect::<Result<Vec<_>>>()?;
        let c = &data.train.clips[0];
        let patch_shape = [c.frames, (c.height / p) * (c.width / p), p * p * 3];
        Ok(Self {
            optimizer: Optimizer::new(&model.config.train, &model.params),
            patches,
            patch_shape,
        })
    }

    /// One forward/backward/update on the given training-clip indices.
    /// Returns per-head and total loss values.
    pub fn step(&mut self, model: &mut Model, data: &SyntheticDataset, idx: &[usize]) -> Result<(Heads<Option<f64>>, f64)> {
        let mut buf = Vec::with_capacity(idx.len() * self.patches[0].len());
        for &i in idx {
            buf.extend_from_slice(&self.patches[i]);
        }
        let [t, m, f] = self.patch_shape;
        let patches = Tensor::new([idx.len(), t, m, f], buf)?;
        let labels = idx.iter().map(|&i| data.train.labels[i]).collect();
        let step = self.optimizer.steps();
        let batch = model.arch.batch(patches, labels, mask_seed(model.config.seed, step));

        let (values, total, grads) = {
            let mut tape = Tape::new();
            let parts = model.arch.loss(&mut tape, &model.params, &batch)?;
            let h = parts.heads;
            let get = |v: Option<m2clip_autograd::Var>| v.map(|v| tape.scalar(v));
            let values = Heads {
                contrastive: get(h.contrastive),
                cmc: get(h.cmc),
                cmlm: get(h.cmlm),
                vc: get(h.vc),
            };
            let total = tape.scalar(parts.total);
            for (name, v) in [
                ("contrastive", values.contrastive),
                ("cmc", values.cmc),
                ("cmlm", values.cmlm),
                ("vc", values.vc),
            ] {
                if v.is_some_and(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("{name} loss at step {step}")));
                }
            }
            (values, total, tape.backward(parts.total)?)
        };
        model.params.zero_grad();
        grads.accumulate_into(&mut model.params)?;
        for id in model.params.trainable_ids() {
            let p = model.params.get(id);
            if p.tensor.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of {} at step {step}", p.name)));
            }
        }
        self.optimizer.step(&mut model.params);
        for id in model.params.trainable_ids() {
            let p = model.params.get(id);
            if !p.tensor.all_finite() {
                return Err(Error::NonFinite(format!("parameter {} after step {step}", p.name)));
            }
        }
        Ok((values, total))
    }
}

/// Shuffled index batches for one epoch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Options that affect only reporting, not the trained weights.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub evaluate: bool,
    pub zero_shot: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            evaluate: true,
            zero_shot: true,
        }
    }
}

/// Trains for `config.train.epochs` epochs (or until `max_steps`).
pub fn train(model: &mut Model, data: &SyntheticDataset, opts: TrainOptions) -> Result<MetricsReport> {
    let cfg = model.config.train.clone();
    let mut report = MetricsReport::default();
    if cfg.epochs == 0 || data.train.is_empty() {
        return Ok(report);
    }
    let mut trainer = Trainer::new(model, data)?;
    let (trainable, frozen) = model.params.counts();
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 4];
        let mut seen = [0usize; 4];
        let mut total = 0.0;
        let mut steps = 0usize;
        let capped = |t: &Trainer| cfg.max_steps > 0 && t.optimizer.steps() as usize >= cfg.max_steps;
        for idx in epoch_batches(data.train.len(), cfg.batch_size, model.config.seed, epoch) {
            if capped(&trainer) {
                break;
            }
            let (h, t) = trainer.step(model, data, &idx)?;
            for (k, v) in [h.contrastive, h.cmc, h.cmlm, h.vc].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    seen[k] += 1;
                }
            }
            total += t;
            steps += 1;
            report.step_losses.push(t);
        }
        let last = epoch == cfg.epochs || capped(&trainer);
        if epoch % cfg.eval_every == 0 || last {
            let mean = |k: usize| (seen[k] > 0).then(|| sums[k] / seen[k] as f64);
            let mut rec = EpochRecord {
                epoch,
                step: trainer.optimizer.steps(),
                losses: Heads {
                    contrastive: mean(0),
                    cmc: mean(1),
                    cmlm: mean(2),
                    vc: mean(3),
                },
                total: total / steps.max(1) as f64,
                vc_top1: None,
                cmc_top1: None,
                zeroshot_top1: None,
                trainable,
                params: trainable + frozen,
            };
            if opts.evaluate {
                if model.arch.heads.vc {
                    rec.vc_top1 = Some(supervised_scores(model, &data.val, Path::Vc)?.top1());
                }
                rec.cmc_top1 = Some(supervised_scores(model, &data.val, Path::Cmc)?.top1());
                if opts.zero_shot && !data.holdout.is_empty() {
                    rec.zeroshot_top1 = Some(zero_shot_scores(model, data)?.top1());
                }
            }
            report.records.push(rec);
        }
        if last {
            break;
        }
    }
    Ok(report)
}
