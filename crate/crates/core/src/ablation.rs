//! Ablation suites: each variant is a config derived from a base config,
//! trained on the same data from the same seed.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::config::{Config, Heads, LayerSet, TedMode};
use crate::data::{generate, Family, SyntheticDataset};
use crate::error::Result;
use crate::eval::{family_accuracy, primary_path, supervised_scores, zero_shot_scores, Path};
use crate::model::Model;
use crate::train::{train, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    /// Branch combination × layer range.
    TedVariants,
    /// 0..=L text adapters, deepest first.
    TextAdapterCount,
    /// Cumulative head sets.
    HeadSubsets,
    /// Untrained baseline, then adapters and heads added in turn.
    ComponentStack,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::TedVariants,
        Suite::TextAdapterCount,
        Suite::HeadSubsets,
        Suite::ComponentStack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::TedVariants => "ted_variants",
            Suite::TextAdapterCount => "text_adapter_count",
            Suite::HeadSubsets => "head_subsets",
            Suite::ComponentStack => "component_stack",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                crate::error::config(format!(
                    "unknown suite {s:?}, expected ted_variants|text_adapter_count|head_subsets|component_stack"
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: Config,
}

fn only_heads(cfg: &mut Config, heads: Heads<bool>) {
    cfg.heads = heads;
}

const CONTRASTIVE: Heads<bool> = Heads {
    contrastive: true,
    cmc: false,
    cmlm: false,
    vc: false,
};

/// The variants of `suite`, derived from `base`.
pub fn variants(suite: Suite, base: &Config) -> Vec<Variant> {
    let v = |name: String, f: &dyn Fn(&mut Config)| {
        let mut config = base.clone();
        f(&mut config);
        Variant { name, config }
    };
    match suite {
        Suite::TedVariants => {
            let mut out = Vec::new();
            for range in [LayerSet::Front, LayerSet::Back, LayerSet::All] {
                for mode in TedMode::ALL {
                    let name = format!("{}/{range}", mode.as_str());
                    out.push(v(name, &|c| {
                        c.placement.ted_mode = mode;
                        c.placement.video_layers = range.clone();
                    }));
                }
            }
            out
        }
        Suite::TextAdapterCount => (0..=base.model.text_layers)
            .map(|k| {
                v(format!("text_adapters={k}"), &|c| {
                    c.placement.text_layers = if k == 0 { LayerSet::None } else { LayerSet::Last(k) };
                })
            })
            .collect(),
        Suite::HeadSubsets => {
            let rows = [
                ("contrastive", CONTRASTIVE),
                ("+cmc", Heads { cmc: true, ..CONTRASTIVE }),
                ("+cmlm", Heads { cmc: true, cmlm: true, ..CONTRASTIVE }),
                ("+vc", Heads { cmc: true, cmlm: true, vc: true, ..CONTRASTIVE }),
            ];
            rows.into_iter()
                .map(|(name, heads)| v(name.to_string(), &|c| only_heads(c, heads)))
                .collect()
        }
        Suite::ComponentStack => vec![
            v("zero-shot baseline".into(), &|c| {
                c.placement.video_layers = LayerSet::None;
                c.placement.text_layers = LayerSet::None;
                only_heads(c, CONTRASTIVE);
                c.train.epochs = 0;
            }),
            v("+ted".into(), &|c| {
                c.placement.text_layers = LayerSet::None;
                only_heads(c, CONTRASTIVE);
            }),
            v("+text adapters".into(), &|c| only_heads(c, CONTRASTIVE)),
            v("+multi-task decoder".into(), &|_| {}),
        ],
    }
}

/// Outcome of one trained variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub name: String,
    /// Top-1 on the val split via [`primary_path`].
    pub supervised_top1: f64,
    pub path: Path,
    /// Per-family top-1 on the val split via the same path.
    pub appearance_top1: f64,
    pub direction_top1: f64,
    pub rate_top1: f64,
    pub zeroshot_top1: f64,
    pub trainable: usize,
}

/// Scores a trained model on the val and holdout splits of `ds`.
pub fn summarize(name: &str, model: &Model, ds: &SyntheticDataset) -> Result<VariantResult> {
    let path = primary_path(model);
    let s = supervised_scores(model, &ds.val, path)?;
    let zs = if ds.holdout.is_empty() {
        0.0
    } else {
        zero_shot_scores(model, ds)?.top1()
    };
    Ok(VariantResult {
        name: name.to_string(),
        supervised_top1: s.top1(),
        path,
        appearance_top1: family_accuracy(&s, &ds.val, Family::Appearance),
        direction_top1: family_accuracy(&s, &ds.val, Family::Direction),
        rate_top1: family_accuracy(&s, &ds.val, Family::Rate),
        zeroshot_top1: zs,
        trainable: model.params.counts().0,
    })
}

/// Trains variants, reusing results for configs already run and data for
/// identical data settings.
#[derive(Default)]
pub struct Runner {
    results: HashMap<String, VariantResult>,
    data: HashMap<String, SyntheticDataset>,
    /// Number of variants actually trained.
    pub trained: usize,
}

impl Runner {
    pub fn new() -> Self {
        Self::default()
    }

    fn dataset(&mut self, cfg: &Config) -> Result<&SyntheticDataset> {
        let key = format!("{:?}|{}|{}", cfg.data, cfg.model.patch_size, cfg.seed);
        if !self.data.contains_key(&key) {
            let ds = generate(&cfg.data, cfg.model.patch_size, cfg.seed)?;
            self.data.insert(key.clone(), ds);
        }
        Ok(&self.data[&key])
    }

    pub fn run(&mut self, v: &Variant) -> Result<VariantResult> {
        let key = v.config.to_text();
        if let Some(r) = self.results.get(&key) {
            return Ok(VariantResult {
                name: v.name.clone(),
                ..r.clone()
            });
        }
        let mut model = Model::new(&v.config)?;
        let ds = self.dataset(&v.config)?.clone();
        train(
            &mut model,
            &ds,
            TrainOptions {
                evaluate: false,
                zero_shot: false,
            },
        )?;
        let r = summarize(&v.name, &model, &ds)?;
        self.trained += 1;
        self.results.insert(key, r.clone());
        Ok(r)
    }

    /// Records the result of a model trained elsewhere under `config`.
    pub fn remember(&mut self, config: &Config, result: VariantResult) {
        self.results.insert(config.to_text(), result);
    }

    pub fn run_suite(&mut self, suite: Suite, base: &Config) -> Result<AblationTable> {
        let rows = variants(suite, base)
            .iter()
            .map(|v| self.run(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(AblationTable { suite, rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub suite: Suite,
    pub rows: Vec<VariantResult>,
}

pub const ABLATION_COLUMNS: [&str; 9] = [
    "variant",
    "supervised_top1",
    "path",
    "appearance_top1",
    "direction_top1",
    "rate_top1",
    "zeroshot_top1",
    "trainable_params",
    "suite",
];

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    fn cells(&self) -> Vec<[String; 9]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    format!("{:.4}", r.supervised_top1),
                    r.path.as_str().to_string(),
                    format!("{:.4}", r.appearance_top1),
                    format!("{:.4}", r.direction_top1),
                    format!("{:.4}", r.rate_top1),
                    format!("{:.4}", r.zeroshot_top1),
                    r.trainable.to_string(),
                    self.suite.as_str().to_string(),
                ]
            })
            .collect()
    }

    /// Tab-separated header and rows.
    pub fn to_tsv(&self) -> String {
        let mut out = ABLATION_COLUMNS.join("\t");
        out.push('\n');
        for c in self.cells() {
            out.push_str(&c.join("\t"));
            out.push('\n');
        }
        out
    }

    /// The same records as an aligned plain-text table, without the suite column.
    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let cols = ABLATION_COLUMNS.len() - 1;
        let mut widths: Vec<usize> = ABLATION_COLUMNS[..cols].iter().map(|h| h.len()).collect();
        for c in &cells {
            for (w, s) in widths.iter_mut().zip(c.iter()) {
                *w = (*w).max(s.len());
            }
        }
        let line = |fields: Vec<&str>| {
            let mut s = String::new();
            for (i, (f, w)) in fields.iter().zip(&widths).enumerate() {
                if i == 0 {
                    s.push_str(&format!("{f:<w$}"));
                } else {
                    s.push_str(&format!("  {f:>w$}"));
                }
            }
            s.push('\n');
            s
        };
        let mut out = format!("# {}\n", self.suite);
        out.push_str(&line(ABLATION_COLUMNS[..cols].to_vec()));
        for c in &cells {
            out.push_str(&line(c[..cols].iter().map(String::as_str).collect()));
        }
        out
    }
}
