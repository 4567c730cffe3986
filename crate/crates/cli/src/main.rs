use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use eamat_core::dataset::{read_dataset, write_dataset};
use eamat_core::experiments::{ablate, prepare_data, run_variant, sweep, SweepParam};
use eamat_core::gradcheck::{run_suite, TOLERANCE};
use eamat_core::metrics::{evaluate, format_prediction_dump, format_relevance_dump, random_baseline};
use eamat_core::synth::generate_split;
use eamat_core::{load_checkpoint, save_checkpoint, Error, Preset, Result, RunConfig, Split, TrainOptions, DEFAULT_THRESHOLDS};

#[derive(Parser, Debug)]
#[command(name = "eamat", version, about = "Language-driven temporal action localization on synthetic data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file of `key = value` lines, applied on top of the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting point for every setting
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied last
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Suppress per-epoch progress on stderr
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test dataset files
    Generate,
    /// Train a model; writes report.csv, model.ckpt and periodic checkpoints
    Train,
    /// Score a checkpoint; writes metrics, relevance scores and predictions
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; defaults to the test split regenerated from the checkpoint config
        #[arg(long)]
        data: Option<PathBuf>,
        /// Include the boundary distributions in predictions.tsv
        #[arg(long)]
        probs: bool,
    },
    /// Compare the motion-branch block variants
    Ablate,
    /// Train one model per value of a hyperparameter
    Sweep {
        /// scales, lambda1 or lambda2
        #[arg(long)]
        param: String,
        /// Comma-separated grid; defaults to 1..6 for scales and 1..10 for the loss weights
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Finite-difference gradient checks of every kernel and block
    Gradcheck,
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(common.preset.parse::<Preset>()?);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text, path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<bool> {
    let common = &cli.common;
    let opts = TrainOptions {
        checkpoint_dir: Some(common.out.join("checkpoints")),
        verbose: !common.quiet,
    };
    match cli.command {
        Command::Gradcheck => {
            let cfg = resolve_config(common)?;
            let results = run_suite(cfg.seed)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!(
                "{} cases, {failed} failed (tolerance {TOLERANCE:e})",
                results.len()
            );
            Ok(failed == 0)
        }
        Command::Generate => {
            let cfg = resolve_config(common)?;
            create_out(&common.out)?;
            let gen = cfg.gen_config();
            let lexicon = eamat_core::model::load_lexicon(&cfg)?;
            for (split, count, name) in [
                (Split::Train, cfg.train_samples, "train.tsv"),
                (Split::Val, cfg.val_samples, "val.tsv"),
                (Split::Test, cfg.test_samples, "test.tsv"),
            ] {
                let samples = generate_split(&gen, &lexicon, split, count)?;
                let path = common.out.join(name);
                write_dataset(&path, &samples, Some(&gen))?;
                println!("wrote {} samples to {}", samples.len(), path.display());
            }
            Ok(true)
        }
        Command::Train => {
            let cfg = resolve_config(common)?;
            create_out(&common.out)?;
            if cfg.checkpoint_every > 0 {
                create_out(&common.out.join("checkpoints"))?;
            }
            let data = prepare_data(&cfg)?;
            let outcome = run_variant(&cfg, &data, &opts)?;
            outcome.training.write_csv(&common.out.join("report.csv"))?;
            save_checkpoint(&common.out.join("model.ckpt"), &outcome.model)?;
            write(&common.out.join("config.txt"), &cfg.to_text())?;
            let baseline = random_baseline(&data.test, 100, cfg.seed, &DEFAULT_THRESHOLDS)?;
            println!("test:     {}", outcome.test);
            println!("baseline: {baseline}");
            Ok(true)
        }
        Command::Eval { checkpoint, data, probs } => {
            let model = load_checkpoint(&checkpoint)?.into_model()?;
            let samples = match &data {
                Some(path) => read_dataset(path)?,
                None => {
                    let cfg = &model.config;
                    let lexicon = eamat_core::model::load_lexicon(cfg)?;
                    generate_split(&cfg.gen_config(), &lexicon, Split::Test, cfg.test_samples)?
                }
            };
            create_out(&common.out)?;
            let eval = evaluate(&model, &samples, &DEFAULT_THRESHOLDS)?;
            write(&common.out.join("metrics.txt"), &format!("{}\n", eval.report))?;
            write(&common.out.join("relevance.txt"), &format_relevance_dump(&eval.predictions))?;
            write(&common.out.join("predictions.tsv"), &format_prediction_dump(&eval.predictions, probs))?;
            println!("{}", eval.report);
            Ok(true)
        }
        Command::Ablate => {
            let cfg = resolve_config(common)?;
            create_out(&common.out)?;
            let data = prepare_data(&cfg)?;
            let table = ablate(&cfg, &data, &TrainOptions { checkpoint_dir: None, ..opts })?;
            write(&common.out.join("ablation.tsv"), &table.to_tsv())?;
            print!("{}", table.to_aligned());
            if let (Some(full), Some(fc)) = (table.get("Ours"), table.get("FC Trans")) {
                if full.miou < fc.miou {
                    println!("note: full model mIoU is below the FC Trans variant");
                }
            }
            Ok(true)
        }
        Command::Sweep { param, values } => {
            let cfg = resolve_config(common)?;
            let param: SweepParam = param.parse()?;
            let values = if values.is_empty() { param.default_values() } else { values };
            create_out(&common.out)?;
            let data = prepare_data(&cfg)?;
            let table = sweep(&cfg, &data, param, &values, &TrainOptions { checkpoint_dir: None, ..opts })?;
            write(&common.out.join(format!("sweep_{}.tsv", param.key())), &table.to_tsv())?;
            print!("{}", table.to_aligned());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
