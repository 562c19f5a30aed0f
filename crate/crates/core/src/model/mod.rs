//! The dual-encoder model: frozen towers, installed adapters and decoder
//! heads over one parameter registry.

pub mod adapters;
pub mod decoder;
pub mod layers;
pub mod text;
pub mod video;

use m2clip_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Heads};
use crate::data::{prompt, ClassSpec, TRAIN_CATALOGUE};
use crate::error::{config, Result};
use crate::vocab::{TokenSequence, Vocab, MASK};

use adapters::{bottleneck, TedAdapter, TextAdapter};
use decoder::{CmlmBlock, Decoder, MaskedToken};
use layers::{Builder, Linear};
use text::{TextSpec, TextTower};
use video::{VideoSpec, VideoTower};

/// Module structure and wiring; all tensors live in the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Architecture {
    pub video: VideoTower,
    pub text: TextTower,
    pub decoder: Decoder,
    pub heads: Heads<bool>,
    pub weights: Heads<f64>,
    pub patch: usize,
    pub mask_ratio: f64,
    /// Tokenized `"a video of <name>"` prompts for the training classes.
    pub train_prompts: Vec<TokenSequence>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub vocab: Vocab,
    pub arch: Architecture,
    pub params: ParamStore,
}

/// One training batch, already converted to tensors and token ids.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, T, M, P·P·3]`.
    pub patches: Tensor,
    pub labels: Vec<usize>,
    /// Label prompts with masked positions replaced by MASK.
    pub masked_ids: Vec<Vec<usize>>,
    pub masked: Vec<MaskedToken>,
}

/// Per-head loss nodes and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub heads: Heads<Option<Var>>,
    pub total: Var,
}

pub fn train_classes(cfg: &Config) -> &'static [ClassSpec] {
    &TRAIN_CATALOGUE[..cfg.data.train_classes.min(TRAIN_CATALOGUE.len())]
}

pub fn tokenize_prompts(vocab: &Vocab, names: &[String], max_len: usize) -> Vec<TokenSequence> {
    names.iter().map(|n| vocab.tokenize(&prompt(n), max_len)).collect()
}

impl Model {
    /// Builds a freshly initialized model. Initial values depend only on the
    /// seed and each parameter's name.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let vocab = crate::data::vocabulary();
        let m = &cfg.model;
        let mut params = ParamStore::new();
        let mut bld = Builder {
            store: &mut params,
            seed: cfg.seed,
            std: m.init_std,
        };
        let grid = (cfg.data.height / m.patch_size, cfg.data.width / m.patch_size);
        let video = VideoTower::build(
            &mut bld,
            &VideoSpec {
                layers: m.video_layers,
                width: m.video_width,
                joint: m.joint_width,
                heads: m.video_heads,
                mlp_ratio: m.mlp_ratio,
                patch: m.patch_size,
                grid,
                adapter_layers: cfg.placement.video_layers.resolve(m.video_layers)?,
                rank: bottleneck(m.video_width, cfg.adapter.bottleneck_ratio),
                kernels: (cfg.adapter.temporal_kernel, cfg.adapter.spatial_kernel),
                mode: cfg.placement.ted_mode,
                order: cfg.placement.sequential_order,
            },
        )?;
        let text_rank = bottleneck(m.text_width, cfg.adapter.text_bottleneck_ratio);
        let text = TextTower::build(
            &mut bld,
            &TextSpec {
                layers: m.text_layers,
                width: m.text_width,
                joint: m.joint_width,
                heads: m.text_heads,
                mlp_ratio: m.mlp_ratio,
                vocab: vocab.len(),
                max_len: m.max_text_len,
                adapter_layers: cfg.placement.text_layers.resolve(m.text_layers)?,
                rank: text_rank,
            },
        )?;

        let classes = train_classes(cfg);
        let tau0 = cfg.decoder.temperature.ln();
        let log_tau = bld.full("decoder.log_tau", &[], tau0 as f32 as f64, cfg.decoder.train_temperature)?;
        let vc = Linear {
            w: bld.zeros("decoder.vc.w", &[m.joint_width, classes.len().max(1)], true)?,
            b: Some(bld.zeros("decoder.vc.b", &[classes.len().max(1)], true)?),
        };
        let last = text.layers.last().ok_or_else(|| config("text tower needs a layer"))?;
        let cmlm = CmlmBlock::build(&mut bld, last, m.joint_width, m.text_width, text_rank, vocab.len())?;
        let decoder = Decoder {
            log_tau,
            min_tau: cfg.decoder.min_temperature,
            vc,
            cmlm,
        };

        // Heads that are switched off keep their tensors (so checkpoints and
        // counts stay comparable) but are never trained.
        let h = cfg.heads;
        let mut frozen: Vec<ParamId> = Vec::new();
        if !h.vc {
            frozen.extend(decoder.vc.ids());
        }
        if !h.cmlm {
            frozen.extend(decoder.cmlm.trainable_ids());
        }
        if !(h.contrastive || h.cmc) {
            frozen.push(decoder.log_tau);
        }
        for id in frozen {
            params.set_trainable(id, false);
        }

        let names: Vec<String> = classes.iter().map(ClassSpec::name).collect();
        let train_prompts = tokenize_prompts(&vocab, &names, m.max_text_len);
        Ok(Self {
            config: cfg.clone(),
            vocab,
            arch: Architecture {
                video,
                text,
                decoder,
                heads: h,
                weights: cfg.weights,
                patch: m.patch_size,
                mask_ratio: cfg.decoder.mask_ratio,
                train_prompts,
            },
            params,
        })
    }

    /// Trainable count predicted from the configuration alone.
    pub fn expected_trainable(cfg: &Config) -> Result<usize> {
        let m = &cfg.model;
        let r = bottleneck(m.video_width, cfg.adapter.bottleneck_ratio);
        let rl = bottleneck(m.text_width, cfg.adapter.text_bottleneck_ratio);
        let (kt, ks) = (cfg.adapter.temporal_kernel, cfg.adapter.spatial_kernel);
        let nv = cfg.placement.video_layers.resolve(m.video_layers)?.len();
        let nl = cfg.placement.text_layers.resolve(m.text_layers)?.len();
        let c = cfg.data.train_classes.max(1);
        let v = crate::data::vocabulary().len();
        let mut n = nv * TedAdapter::count(m.video_width, r, kt, ks) + nl * TextAdapter::count(m.text_width, rl);
        if cfg.heads.vc {
            n += m.joint_width * c + c;
        }
        if cfg.heads.cmlm {
            n += TextAdapter::count(m.text_width, rl) + m.text_width * v + v;
        }
        if cfg.decoder.train_temperature && (cfg.heads.contrastive || cfg.heads.cmc) {
            n += 1;
        }
        Ok(n)
    }
}

impl Architecture {
    /// Per-frame `[B, T, d_vl]` and pooled `[B, d_vl]` video embeddings.
    pub fn video_embed<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, patches: Var) -> Result<(Var, Var)> {
        self.video.forward(tape, store, patches)
    }

    /// Joint embeddings `[C, d_vl]` of tokenized prompts.
    pub fn text_embed<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, seqs: &[TokenSequence]) -> Result<Var> {
        self.text.embed(tape, store, seqs)
    }

    /// Masks `max(1, round(ratio·n))` content tokens of each label prompt.
    /// A ratio of 0 masks nothing.
    pub fn mask_prompts(&self, labels: &[usize], rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<MaskedToken>) {
        let mut ids = Vec::with_capacity(labels.len());
        let mut masked = Vec::new();
        for (row, &l) in labels.iter().enumerate() {
            let seq = &self.train_prompts[l];
            let mut s = seq.ids.clone();
            let content = seq.content_positions();
            let n = content.len();
            if self.mask_ratio > 0.0 && n > 0 {
                let k = ((self.mask_ratio * n as f64).round() as usize).clamp(1, n);
                let mut chosen = sample(rng, n, k).into_vec();
                chosen.sort_unstable();
                for c in chosen {
                    let pos = content.start + c;
                    masked.push(MaskedToken { row, pos, target: s[pos] });
                    s[pos] = MASK;
                }
            }
            ids.push(s);
        }
        (ids, masked)
    }

    /// Builds a batch from patch data and labels, masking with a step seed.
    pub fn batch(&self, patches: Tensor, labels: Vec<usize>, mask_seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let (masked_ids, masked) = if self.heads.cmlm {
            self.mask_prompts(&labels, &mut rng)
        } else {
            (Vec::new(), Vec::new())
        };
        Batch {
            patches,
            labels,
            masked_ids,
            masked,
        }
    }

    /// Forward pass through both towers and every enabled head.
    pub fn loss<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, batch: &Batch) -> Result<LossParts> {
        let h = self.heads;
        let patches = tape.constant(batch.patches.clone());
        let (frames, v) = self.video_embed(tape, store, patches)?;
        let mut parts: Heads<Option<Var>> = Heads {
            contrastive: None,
            cmc: None,
            cmlm: None,
            vc: None,
        };
        if h.contrastive || h.cmc {
            let inv_tau = self.decoder.inverse_temperature(tape, store);
            let labels = self.text_embed(tape, store, &self.train_prompts)?;
            if h.contrastive {
                let texts = tape.index_select(labels, &batch.labels)?;
                let logits = decoder::scaled_similarity(tape, v, texts, inv_tau)?;
                let gt = decoder::ground_truth(&batch.labels);
                parts.contrastive = Some(decoder::contrastive_loss(tape, logits, &gt)?);
            }
            if h.cmc {
                parts.cmc = Some(decoder::cmc_loss(tape, v, labels, &batch.labels, inv_tau)?);
            }
        }
        if h.cmlm && !batch.masked.is_empty() {
            let ids: Vec<&[usize]> = batch.masked_ids.iter().map(Vec::as_slice).collect();
            let z = self.text.encode(tape, store, &ids)?;
            let logits = self.decoder.cmlm.forward(tape, store, z, frames)?;
            parts.cmlm = decoder::cmlm_loss(tape, logits, &batch.masked)?;
        }
        if h.vc {
            let logits = self.decoder.vc.forward(tape, store, v)?;
            parts.vc = Some(decoder::cross_entropy(tape, logits, &batch.labels)?);
        }
        let total = decoder::aggregate_losses(tape, &parts, &self.weights, &h)?;
        Ok(LossParts { heads: parts, total })
    }
}
