//! Supervised, zero-shot and masked-token evaluation.

use m2clip_autograd::{Tape, Tensor};

use crate::data::{check_disjoint, Family, SplitData, SyntheticDataset, VideoClip};
use crate::error::{contract, Result};
use crate::model::decoder::{argmax, top_k, zero_shot_predict};
use crate::model::video::patch_batch;
use crate::model::{tokenize_prompts, Model};
use crate::vocab::{Vocab, MASK};

const EVAL_CHUNK: usize = 32;

/// Which head produces supervised predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    /// Linear visual classifier.
    Vc,
    /// Cosine similarity to the training label embeddings.
    Cmc,
}

impl Path {
    pub fn as_str(self) -> &'static str {
        match self {
            Path::Vc => "vc",
            Path::Cmc => "cmc",
        }
    }
}

/// Class scores per sample alongside the true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Scores {
    pub fn predictions(&self) -> Vec<usize> {
        self.scores.iter().map(|s| argmax(s)).collect()
    }

    pub fn top_k(&self, k: usize) -> f64 {
        self.accuracy_where(k, |_| true)
    }

    pub fn top1(&self) -> f64 {
        self.top_k(1)
    }

    /// Top-`k` accuracy restricted to samples whose label satisfies `keep`.
    /// Returns 0 when no sample qualifies.
    pub fn accuracy_where(&self, k: usize, keep: impl Fn(usize) -> bool) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for (s, &l) in self.scores.iter().zip(&self.labels) {
            if keep(l) {
                n += 1;
                hit += usize::from(top_k(s, k).contains(&l));
            }
        }
        if n == 0 {
            0.0
        } else {
            hit as f64 / n as f64
        }
    }
}

/// Pooled `[d_vl]` and per-frame `[T·d_vl]` joint embeddings of each clip.
pub fn video_embeddings(model: &Model, clips: &[&VideoClip]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut pooled = Vec::with_capacity(clips.len());
    let mut frames = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let p = tape.constant(patch_batch(chunk, model.arch.patch)?);
        let (f, v) = model.arch.video_embed(&mut tape, &model.params, p)?;
        let d = tape.shape(v)[1];
        pooled.extend(tape.value(v).chunks(d).map(<[f64]>::to_vec));
        let per = tape.value(f).len() / chunk.len();
        frames.extend(tape.value(f).chunks(per).map(<[f64]>::to_vec));
    }
    Ok((pooled, frames))
}

/// Prompt embeddings for class names.
pub fn label_embeddings(model: &Model, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let seqs = tokenize_prompts(&model.vocab, names, model.config.model.max_text_len);
    let mut tape = Tape::new();
    let w = model.arch.text_embed(&mut tape, &model.params, &seqs)?;
    let d = tape.shape(w)[1];
    Ok(tape.value(w).chunks(d).map(<[f64]>::to_vec).collect())
}

fn cosine_scores(videos: &[Vec<f64>], labels: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    videos.iter().map(|v| zero_shot_predict(v, labels, tau).1).collect()
}

fn clip_refs(split: &SplitData) -> Vec<&VideoClip> {
    split.clips.iter().collect()
}

/// Class scores on a split of training classes via `path`.
pub fn supervised_scores(model: &Model, split: &SplitData, path: Path) -> Result<Scores> {
    let (pooled, _) = video_embeddings(model, &clip_refs(split))?;
    let scores = match path {
        Path::Vc => {
            let vc = &model.arch.decoder.vc;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new([pooled.len(), pooled[0].len()], pooled.concat())?);
            let logits = vc.forward(&mut tape, &model.params, x)?;
            let c = tape.shape(logits)[1];
            tape.value(logits).chunks(c).map(<[f64]>::to_vec).collect()
        }
        Path::Cmc => {
            let labels = label_embeddings(model, &split.class_names())?;
            cosine_scores(&pooled, &labels, model.arch.decoder.tau(&model.params))
        }
    };
    Ok(Scores {
        scores,
        labels: split.labels.clone(),
    })
}

/// The supervised path used in summaries: the VC head when it is enabled,
/// otherwise cosine similarity to the label embeddings.
pub fn primary_path(model: &Model) -> Path {
    if model.arch.heads.vc {
        Path::Vc
    } else {
        Path::Cmc
    }
}

/// Zero-shot scores on the holdout split using holdout prompts only.
pub fn zero_shot_scores(model: &Model, data: &SyntheticDataset) -> Result<Scores> {
    check_disjoint(&data.train.classes, &data.holdout.classes)?;
    let (pooled, _) = video_embeddings(model, &clip_refs(&data.holdout))?;
    let labels = label_embeddings(model, &data.holdout.class_names())?;
    Ok(Scores {
        scores: cosine_scores(&pooled, &labels, model.arch.decoder.tau(&model.params)),
        labels: data.holdout.labels.clone(),
    })
}

/// Accuracy over samples of one class family.
pub fn family_accuracy(scores: &Scores, split: &SplitData, family: Family) -> f64 {
    scores.accuracy_where(1, |l| split.classes[l].family() == family)
}

/// Masked-word accuracy of the CMLM head: every content word of each clip's
/// label prompt is masked in turn and predicted from the clip's frames.
pub fn cmlm_accuracy(model: &Model, split: &SplitData) -> Result<f64> {
    let arch = &model.arch;
    let prompts = tokenize_prompts(&model.vocab, &split.class_names(), model.config.model.max_text_len);
    let (_, frames) = video_embeddings(model, &clip_refs(split))?;
    let t = model.config.data.frames;
    let d = frames.first().map_or(0, |f| f.len() / t);
    let (mut hit, mut n) = (0usize, 0usize);
    for (clip_idx, &label) in split.labels.iter().enumerate() {
        let seq = &prompts[label];
        let positions: Vec<usize> = seq.content_positions().collect();
        if positions.is_empty() {
            continue;
        }
        let ids: Vec<Vec<usize>> = positions
            .iter()
            .map(|&p| {
                let mut s = seq.ids.clone();
                s[p] = MASK;
                s
            })
            .collect();
        let refs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        let k = positions.len();
        let mut tape = Tape::new();
        let z = arch.text.encode(&mut tape, &model.params, &refs)?;
        let fr = tape.constant(Tensor::new([k, t, d], frames[clip_idx].repeat(k))?);
        let logits = arch.decoder.cmlm.forward(&mut tape, &model.params, z, fr)?;
        let shape = tape.shape(logits).to_vec();
        let (nl, v) = (shape[1], shape[2]);
        let vals = tape.value(logits);
        for (row, &p) in positions.iter().enumerate() {
            let o = (row * nl + p) * v;
            hit += usize::from(argmax(&vals[o..o + v]) == seq.ids[p]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(contract("no content tokens to evaluate"));
    }
    Ok(hit as f64 / n as f64)
}

/// Chance level of masked-word prediction.
pub fn cmlm_chance(vocab: &Vocab) -> f64 {
    1.0 / vocab.len() as f64
}
