//! First-order optimizers over the trainable entries of a [`ParamStore`].

use m2clip_autograd::ParamStore;

use crate::config::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros = |store: &ParamStore| -> Vec<Vec<f64>> {
            store.iter().map(|(_, p)| vec![0.0; if p.trainable { p.tensor.numel() } else { 0 }]).collect()
        };
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies accumulated gradients to trainable parameters, then rounds
    /// them to `f32` so checkpoints reproduce them exactly. Frozen
    /// parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.trainable_ids() {
            let i = id.index();
            let p = store.get_mut(id);
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            if self.lr == 0.0 {
                continue;
            }
            let data = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in data.iter_mut().zip(&g) {
                        *x -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..data.len() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
            for x in data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}
