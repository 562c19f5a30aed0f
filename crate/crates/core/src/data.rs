//! Synthetic video classes: a colored square on per-frame noise, moving,
//! changing size, flashing, or standing still.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::DataConfig;
use crate::error::{config, contract, Result};
use crate::vocab::Vocab;

/// Prompt wrapped around every label name.
pub const PROMPT_PREFIX: &str = "a video of";

pub fn prompt(name: &str) -> String {
    format!("{PROMPT_PREFIX} {name}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -0.5, -0.5],
            Color::Green => [-0.5, 1.0, -0.5],
            Color::Blue => [-0.5, -0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Growing,
    Shrinking,
    Flashing,
    Still,
}

impl Motion {
    pub fn phrase(self) -> &'static str {
        match self {
            Motion::Left => "moving left",
            Motion::Right => "moving right",
            Motion::Up => "moving up",
            Motion::Down => "moving down",
            Motion::Growing => "growing",
            Motion::Shrinking => "shrinking",
            Motion::Flashing => "flashing",
            Motion::Still => "still",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Motion::Left | Motion::Right | Motion::Up | Motion::Down => Family::Direction,
            Motion::Growing | Motion::Shrinking | Motion::Flashing => Family::Rate,
            Motion::Still => Family::Appearance,
        }
    }
}

/// What a classifier must look at to tell classes of a family apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Static squares told apart by color; solvable from one frame.
    Appearance,
    /// Direction of travel; needs frame differences.
    Direction,
    /// Size or visibility changing over time; needs temporal context.
    Rate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClassSpec {
    pub color: Color,
    pub motion: Motion,
}

impl ClassSpec {
    pub const fn new(color: Color, motion: Motion) -> Self {
        Self { color, motion }
    }

    pub fn name(&self) -> String {
        format!("{} square {}", self.color.name(), self.motion.phrase())
    }

    pub fn family(&self) -> Family {
        self.motion.family()
    }
}

use Color::*;
use Motion::*;

/// Training classes; a run takes the first `data.train_classes`.
pub const TRAIN_CATALOGUE: [ClassSpec; 12] = [
    ClassSpec::new(Red, Left),
    ClassSpec::new(Red, Right),
    ClassSpec::new(Blue, Up),
    ClassSpec::new(Blue, Down),
    ClassSpec::new(Green, Growing),
    ClassSpec::new(Green, Shrinking),
    ClassSpec::new(Red, Still),
    ClassSpec::new(Green, Still),
    ClassSpec::new(Blue, Flashing),
    ClassSpec::new(Green, Left),
    ClassSpec::new(Red, Flashing),
    ClassSpec::new(Blue, Right),
];

/// Zero-shot classes: words seen in training, recombined.
pub const HOLDOUT_CATALOGUE: [ClassSpec; 6] = [
    ClassSpec::new(Blue, Left),
    ClassSpec::new(Red, Up),
    ClassSpec::new(Red, Shrinking),
    ClassSpec::new(Blue, Still),
    ClassSpec::new(Green, Down),
    ClassSpec::new(Blue, Growing),
];

/// Prompt template and every catalogue name, the corpus behind the vocabulary.
pub fn corpus() -> Vec<String> {
    let mut c = vec![PROMPT_PREFIX.to_string()];
    c.extend(TRAIN_CATALOGUE.iter().chain(&HOLDOUT_CATALOGUE).map(|s| s.name()));
    c
}

pub fn vocabulary() -> Vocab {
    let c = corpus();
    Vocab::from_corpus(c.iter().map(String::as_str))
}

/// Frames `[T, H, W, 3]`, row-major, zero-centered.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * 3],
        }
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * 3 + c]
    }

    fn pixel_mut(&mut self, t: usize, y: usize, x: usize) -> &mut [f32] {
        let o = ((t * self.height + y) * self.width + x) * 3;
        &mut self.data[o..o + 3]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 3;
        &self.data[t * n..(t + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Holdout,
}

/// Clips of one split with class indices into `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub clips: Vec<VideoClip>,
    pub labels: Vec<usize>,
    pub classes: Vec<ClassSpec>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(ClassSpec::name).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub train: SplitData,
    pub val: SplitData,
    pub holdout: SplitData,
}

impl SyntheticDataset {
    pub fn split(&self, s: Split) -> &SplitData {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Holdout => &self.holdout,
        }
    }

    /// Little-endian dump of every split: labels then pixels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in [&self.train, &self.val, &self.holdout] {
            out.extend((s.len() as u64).to_le_bytes());
            for (clip, &label) in s.clips.iter().zip(&s.labels) {
                out.extend((label as u32).to_le_bytes());
                for v in &clip.data {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        out
    }
}

fn clip_rng(seed: u64, split: Split, class: usize, index: usize) -> ChaCha8Rng {
    let tag = match split {
        Split::Train => 1u64,
        Split::Val => 2,
        Split::Holdout => 3,
    };
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [tag, class as u64, index as u64] {
        h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(23);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Renders one clip of `spec`.
pub fn render(spec: ClassSpec, cfg: &DataConfig, patch: usize, rng: &mut ChaCha8Rng) -> VideoClip {
    let (t_n, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut clip = VideoClip::zeros(t_n, h, w);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    for v in clip.data.iter_mut() {
        *v = noise.sample(rng) as f32;
    }
    let gain: f32 = rng.random_range(0.8..1.2);
    let rgb = spec.color.rgb().map(|c| c * gain);
    let paint = |clip: &mut VideoClip, t: usize, y0: usize, x0: usize, side_y: usize, side_x: usize| {
        for y in y0..(y0 + side_y).min(h) {
            for x in x0..(x0 + side_x).min(w) {
                let px = clip.pixel_mut(t, y, x);
                for c in 0..3 {
                    px[c] += rgb[c];
                }
            }
        }
    };
    let side = patch.min(h).min(w);
    let (gh, gw) = (h / patch, w / patch);
    match spec.motion {
        Left | Right | Up | Down => {
            // Steps of one patch cell per frame, wrapping around the frame.
            let (gy0, gx0) = (rng.random_range(0..gh), rng.random_range(0..gw));
            for t in 0..t_n {
                let (gy, gx) = match spec.motion {
                    Left => (gy0, (gx0 + gw * t_n - t) % gw),
                    Right => (gy0, (gx0 + t) % gw),
                    Up => ((gy0 + gh * t_n - t) % gh, gx0),
                    _ => ((gy0 + t) % gh, gx0),
                };
                paint(&mut clip, t, gy * patch, gx * patch, side, side);
            }
        }
        Growing | Shrinking => {
            let max_half = (h.min(w) / 4).max(1);
            let min_half = (max_half / 4).max(1);
            let cy = rng.random_range(max_half..=h - max_half);
            let cx = rng.random_range(max_half..=w - max_half);
            for t in 0..t_n {
                let frac = if t_n > 1 { t as f64 / (t_n - 1) as f64 } else { 0.0 };
                let frac = if spec.motion == Growing { frac } else { 1.0 - frac };
                let half = min_half + ((max_half - min_half) as f64 * frac).round() as usize;
                paint(&mut clip, t, cy - half, cx - half, 2 * half, 2 * half);
            }
        }
        Flashing | Still => {
            let y0 = rng.random_range(0..=h - side);
            let x0 = rng.random_range(0..=w - side);
            let phase = rng.random_range(0..2);
            for t in 0..t_n {
                if spec.motion == Still || (t + phase) % 2 == 0 {
                    paint(&mut clip, t, y0, x0, side, side);
                }
            }
        }
    }
    clip
}

fn build_split(
    classes: &[ClassSpec],
    per_class: usize,
    split: Split,
    cfg: &DataConfig,
    patch: usize,
    seed: u64,
) -> SplitData {
    let mut clips = Vec::with_capacity(classes.len() * per_class);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for i in 0..per_class {
        for (c, &spec) in classes.iter().enumerate() {
            let mut rng = clip_rng(seed, split, c, i);
            clips.push(render(spec, cfg, patch, &mut rng));
            labels.push(c);
        }
    }
    SplitData {
        clips,
        labels,
        classes: classes.to_vec(),
    }
}

/// Renders train, validation and zero-shot holdout splits. Clip contents
/// depend only on `(seed, split, class, index)`.
pub fn generate(cfg: &DataConfig, patch: usize, seed: u64) -> Result<SyntheticDataset> {
    if cfg.per_class_train < 1 || cfg.per_class_val < 1 || cfg.per_class_holdout < 1 {
        return Err(config("per-class clip counts must be at least 1"));
    }
    if cfg.train_classes > TRAIN_CATALOGUE.len() || cfg.holdout_classes > HOLDOUT_CATALOGUE.len() {
        return Err(config(format!(
            "catalogue holds {} training and {} holdout classes",
            TRAIN_CATALOGUE.len(),
            HOLDOUT_CATALOGUE.len()
        )));
    }
    if cfg.frames == 0 || patch == 0 || cfg.height < patch || cfg.width < patch {
        return Err(config("frames must be at least one patch in each dimension"));
    }
    let train_classes = &TRAIN_CATALOGUE[..cfg.train_classes];
    let holdout_classes = &HOLDOUT_CATALOGUE[..cfg.holdout_classes];
    check_disjoint(train_classes, holdout_classes)?;
    Ok(SyntheticDataset {
        seed,
        train: build_split(train_classes, cfg.per_class_train, Split::Train, cfg, patch, seed),
        val: build_split(train_classes, cfg.per_class_val, Split::Val, cfg, patch, seed),
        holdout: build_split(holdout_classes, cfg.per_class_holdout, Split::Holdout, cfg, patch, seed),
    })
}

/// Zero-shot evaluation is meaningless if a holdout name was trained on.
pub fn check_disjoint(train: &[ClassSpec], holdout: &[ClassSpec]) -> Result<()> {
    if let Some(c) = holdout.iter().find(|c| train.iter().any(|t| t.name() == c.name())) {
        return Err(contract(format!("holdout class {:?} is also a training class", c.name())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn catalogues_are_disjoint_and_in_vocabulary() {
        check_disjoint(&TRAIN_CATALOGUE, &HOLDOUT_CATALOGUE).unwrap();
        let v = vocabulary();
        for name in corpus() {
            let t = v.tokenize(&name, 12);
            assert!(!t.ids.contains(&crate::vocab::UNK));
            assert_eq!(v.detokenize(&t.ids), name);
        }
    }

    #[test]
    fn split_sizes() {
        let mut cfg = Config::default().data;
        cfg.per_class_train = 2;
        cfg.per_class_val = 1;
        cfg.per_class_holdout = 1;
        let d = generate(&cfg, 8, 1).unwrap();
        assert_eq!(d.train.len(), 16);
        assert_eq!(d.val.len(), 8);
        assert_eq!(d.holdout.len(), 4);
    }

    #[test]
    fn zero_per_class_is_config_error() {
        let mut cfg = Config::default().data;
        cfg.per_class_train = 0;
        assert!(generate(&cfg, 8, 1).is_err());
    }
}
