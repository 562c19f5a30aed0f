use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use m2clip::ablation::{Runner, Suite};
use m2clip::checkpoint::{load_checkpoint, save_checkpoint};
use m2clip::config::KEYS;
use m2clip::eval::{self, Path as EvalPath};
use m2clip::params::count_parameters;
use m2clip::train::{train, TrainOptions};
use m2clip::{data, gradcheck, Config, Model};
use m2clip_autograd::CheckOptions;

fn key_help() -> &'static str {
    static HELP: OnceLock<String> = OnceLock::new();
    HELP.get_or_init(|| {
        let d = Config::default();
        let w = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::from("Config keys (set with --set KEY=VALUE or in a --config file):\n");
        for (k, desc) in KEYS {
            let v = d.get(k).unwrap_or_default();
            s.push_str(&format!("  {k:<w$}  {desc} [default: {v}]\n"));
        }
        s
    })
}

#[derive(Parser, Debug)]
#[command(name = "m2clip", version, about = "Train, evaluate and ablate adapted video/text models on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for reports and checkpoints.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train adapters and heads, writing metrics.tsv, config.txt and final.ckpt.
    #[command(after_help = key_help())]
    Train(Common),
    /// Supervised top-1/top-5 on the val split via the VC head and CMC path.
    #[command(after_help = key_help())]
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Zero-shot top-1 on the held-out classes.
    #[command(after_help = key_help())]
    Zeroshot {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every trainable parameter.
    #[command(after_help = key_help())]
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Clips in the probe batch.
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Entries sampled per parameter; 0 checks every entry.
        #[arg(long, default_value_t = 6)]
        entries: usize,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Run an ablation suite and write aligned and tab-separated tables.
    #[command(after_help = key_help())]
    Ablate {
        #[command(flatten)]
        common: Common,
        /// ted_variants | text_adapter_count | head_subsets | component_stack | all
        #[arg(long)]
        suite: String,
    },
    /// Trainable and frozen parameter counts per module.
    #[command(after_help = key_help())]
    Params(Common),
    /// Generate the synthetic dataset and write it to dataset.bin.
    #[command(name = "gen-data", after_help = key_help())]
    GenData(Common),
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: m2clip::Error) -> anyhow::Error {
    if e.is_usage() {
        Usage(e.to_string()).into()
    } else {
        e.into()
    }
}

fn warn_duplicates(dups: &[String], source: &str) {
    for k in dups {
        eprintln!("warning: {k} set more than once in {source}; the last value wins");
    }
}

fn load_config(c: &Common, base: Option<Config>) -> Result<Config> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let dups = cfg
            .apply_str(&text)
            .map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        warn_duplicates(&dups, &path.display().to_string());
    }
    let mut seen = std::collections::HashSet::new();
    let mut dups = Vec::new();
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        let k = k.trim();
        cfg.set(k, v).map_err(usage)?;
        if !seen.insert(k.to_string()) {
            dups.push(k.to_string());
        }
    }
    warn_duplicates(&dups, "--set");
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<&Path> {
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

/// Model from a checkpoint when given, otherwise freshly initialized.
fn model_for(c: &Common, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => {
            let (model, _) = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            let cfg = load_config(c, Some(model.config.clone()))?;
            if cfg.to_text() == model.config.to_text() {
                return Ok(model);
            }
            let mut fresh = Model::new(&cfg).map_err(usage)?;
            m2clip::checkpoint::Checkpoint::from_model(&model, 0)
                .apply(&mut fresh)
                .with_context(|| format!("loading {} into the overridden config", p.display()))?;
            Ok(fresh)
        }
        None => Model::new(&load_config(c, None)?).map_err(usage),
    }
}

fn dataset(model: &Model) -> Result<data::SyntheticDataset> {
    let cfg = &model.config;
    data::generate(&cfg.data, cfg.model.patch_size, cfg.seed).map_err(usage)
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = load_config(c, None)?;
    let dir = out_dir(c)?;
    let start = Instant::now();
    let mut model = Model::new(&cfg).map_err(usage)?;
    let ds = dataset(&model)?;
    let report = train(&mut model, &ds, TrainOptions::default())?;
    let steps = report.step_losses.len() as u64;
    write(dir, "config.txt", &cfg.to_text())?;
    write(dir, "metrics.tsv", &report.to_tsv())?;
    save_checkpoint(&model, steps, dir.join("final.ckpt"))?;
    print!("{}", report.to_tsv());
    println!(
        "trained {steps} steps in {:.1}s; wrote {}",
        start.elapsed().as_secs_f64(),
        dir.join("final.ckpt").display()
    );
    Ok(())
}

fn cmd_eval(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let model = model_for(c, checkpoint)?;
    let dir = out_dir(c)?;
    let ds = dataset(&model)?;
    let mut tsv = String::from("path\ttop1\ttop5\tappearance_top1\tdirection_top1\trate_top1\n");
    let mut paths = vec![EvalPath::Cmc];
    if model.arch.heads.vc {
        paths.insert(0, EvalPath::Vc);
    }
    for path in paths {
        let s = eval::supervised_scores(&model, &ds.val, path)?;
        let fam = [data::Family::Appearance, data::Family::Direction, data::Family::Rate]
            .map(|f| eval::family_accuracy(&s, &ds.val, f));
        println!("{:<4} top1 {:.4}  top5 {:.4}", path.as_str(), s.top1(), s.top_k(5));
        tsv.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            path.as_str(),
            s.top1(),
            s.top_k(5),
            fam[0],
            fam[1],
            fam[2]
        ));
    }
    write(dir, "eval.tsv", &tsv)
}

fn cmd_zeroshot(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let model = model_for(c, checkpoint)?;
    let dir = out_dir(c)?;
    let ds = dataset(&model)?;
    if ds.holdout.is_empty() {
        return Err(Usage("no holdout classes configured (data.holdout_classes = 0)".into()).into());
    }
    let s = eval::zero_shot_scores(&model, &ds)?;
    let n = s.labels.len();
    let chance = 1.0 / ds.holdout.classes.len() as f64;
    println!("zeroshot top1 {:.4} over {n} clips of {} classes (chance {chance:.4})", s.top1(), ds.holdout.classes.len());
    write(
        dir,
        "zeroshot.tsv",
        &format!("top1\tsamples\tclasses\tchance\n{:.6}\t{n}\t{}\t{chance:.6}\n", s.top1(), ds.holdout.classes.len()),
    )
}

fn cmd_gradcheck(c: &Common, batch: usize, entries: usize, tol: f64) -> Result<bool> {
    let cfg = load_config(c, None)?;
    let dir = out_dir(c)?;
    let opts = CheckOptions {
        tol,
        max_entries: (entries > 0).then_some(entries),
        seed: cfg.seed,
        ..CheckOptions::default()
    };
    let report = gradcheck::check_model(&cfg, batch, &opts).map_err(usage)?;
    let table = report.table();
    print!("{table}");
    println!(
        "max relative error {:.3e} (tolerance {tol:.1e}): {}",
        report.max_error(),
        if report.passed() { "pass" } else { "FAIL" }
    );
    write(dir, "gradcheck.txt", &table)?;
    Ok(report.passed())
}

fn cmd_ablate(c: &Common, suite: &str) -> Result<()> {
    let cfg = load_config(c, None)?;
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(usage)?]
    };
    let dir = out_dir(c)?;
    let mut runner = Runner::new();
    for s in suites {
        let table = runner.run_suite(s, &cfg)?;
        print!("{}", table.to_text());
        write(dir, &format!("ablation_{s}.txt"), &table.to_text())?;
        write(dir, &format!("ablation_{s}.tsv"), &table.to_tsv())?;
    }
    Ok(())
}

fn cmd_params(c: &Common) -> Result<()> {
    let cfg = load_config(c, None)?;
    let dir = out_dir(c)?;
    let model = Model::new(&cfg).map_err(usage)?;
    let counts = count_parameters(&model.params);
    let table = counts.to_table();
    print!("{table}");
    let expected = Model::expected_trainable(&cfg).map_err(usage)?;
    if expected != counts.trainable {
        bail!("enumerated {} trainable parameters, closed form gives {expected}", counts.trainable);
    }
    write(dir, "params.txt", &table)
}

fn cmd_gen_data(c: &Common) -> Result<()> {
    let cfg = load_config(c, None)?;
    let dir = out_dir(c)?;
    let ds = data::generate(&cfg.data, cfg.model.patch_size, cfg.seed).map_err(usage)?;
    let path = dir.join("dataset.bin");
    std::fs::write(&path, ds.to_bytes()).with_context(|| format!("writing {}", path.display()))?;
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("holdout", &ds.holdout)] {
        println!("{name:<8} {:>5} clips  {}", split.len(), split.class_names().join(", "));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(c) => cmd_train(c)?,
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint.as_deref())?,
        Command::Zeroshot { common, checkpoint } => cmd_zeroshot(common, checkpoint.as_deref())?,
        Command::Gradcheck {
            common,
            batch,
            entries,
            tol,
        } => return cmd_gradcheck(common, *batch, *entries, *tol),
        Command::Ablate { common, suite } => cmd_ablate(common, suite)?,
        Command::Params(c) => cmd_params(c)?,
        Command::GenData(c) => cmd_gen_data(c)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
