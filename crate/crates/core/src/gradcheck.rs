//! Finite-difference verification of the full model's gradients.

use m2clip_autograd::{finite_difference_check, CheckOptions, CheckReport, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::generate;
use crate::error::Result;
use crate::model::video::patch_batch;
use crate::model::{Batch, Model};

/// Adds Gaussian noise of scale `std` to every trainable parameter so that
/// paths gated by zero-initialized weights carry gradient.
pub fn perturb_trainable(model: &mut Model, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.trainable_ids() {
        let p = model.params.get_mut(id);
        let noise = Tensor::randn(p.tensor.shape().to_vec(), std, &mut rng);
        for (x, n) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *x = (*x + n) as f32 as f64;
        }
    }
}

/// A batch of `n` training clips taken from distinct classes where possible.
pub fn probe_batch(model: &Model, n: usize) -> Result<Batch> {
    let cfg = &model.config;
    let mut data_cfg = cfg.data.clone();
    data_cfg.per_class_train = 1;
    data_cfg.per_class_val = 1;
    data_cfg.per_class_holdout = 1;
    let ds = generate(&data_cfg, cfg.model.patch_size, cfg.seed)?;
    let idx: Vec<usize> = (0..n).map(|i| i % ds.train.len()).collect();
    let clips: Vec<_> = idx.iter().map(|&i| &ds.train.clips[i]).collect();
    let labels = idx.iter().map(|&i| ds.train.labels[i]).collect();
    let patches = patch_batch(&clips, cfg.model.patch_size)?;
    Ok(model.arch.batch(patches, labels, cfg.seed))
}

/// Compares analytic and central-difference gradients of the total loss for
/// every trainable parameter, on a batch of `batch` clips.
pub fn check_model(cfg: &Config, batch: usize, opts: &CheckOptions) -> Result<CheckReport> {
    let mut model = Model::new(cfg)?;
    perturb_trainable(&mut model, 0.05, cfg.seed ^ 0x6772_6164);
    let b = probe_batch(&model, batch)?;
    let arch = model.arch.clone();
    let report = finite_difference_check(
        &mut model.params,
        |tape, store| {
            let parts = arch.loss(tape, store, &b).map_err(|e| match e {
                crate::Error::Tensor(t) => t,
                other => m2clip_autograd::TensorError::Contract(other.to_string()),
            })?;
            Ok(parts.total)
        },
        opts,
    )?;
    Ok(report)
}
