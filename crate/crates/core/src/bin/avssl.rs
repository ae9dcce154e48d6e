use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use avssl::config::{load_config, ExperimentConfig};
use avssl::data::{generate_dataset, read_dataset, write_dataset, SyntheticSpec};
use avssl::eval::{cumulative_rows, evaluate, run_ablation, variant_rows, AblationBudget};
use avssl::finetune::{run_finetune, self_train, AsrModel, EncoderInit, Task};
use avssl::nets::{backbone_params, count_params, reference_count, Component};
use avssl::pretrain::run_pretraining;
use clap::{Args, Parser, Subcommand};

/// Default data directory when `--data` is not given.
const DATA_ROOT_VAR: &str = "AVSSL_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "avssl",
    version,
    about = "Audio-visual self-supervised speech pipeline"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; unspecified keys take the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides the data, pre-training and fine-tuning seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the epoch count of the command's training stage.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    ctc_weight: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic paired dataset.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        /// Index of the first generated sample.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    Finetune {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Pre-training checkpoint; random encoders without it.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Prints one `id<TAB>transcript` line per sample.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with = "beam")]
        greedy: bool,
    },
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    SelfTrain {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        /// Fine-tuned model producing the pseudo-labels.
        #[arg(long)]
        labeller: PathBuf,
        /// Pre-training checkpoint the new model starts from.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        unlabelled: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    Ablate {
        /// Also run the mask-0.6 and last-6-blocks variants.
        #[arg(long)]
        variants: bool,
        #[arg(long)]
        train_samples: Option<usize>,
    },
    CountParams,
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::parse(s).ok_or_else(|| format!("unknown task `{s}` (video, audio, av)"))
}

impl Common {
    fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), preset) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let cfg = load_config(&text)?;
                if let Some(p) = preset {
                    if *p != cfg.model.preset {
                        bail!(
                            "--preset {p} contradicts the config's preset `{}`",
                            cfg.model.preset
                        );
                    }
                }
                cfg
            }
            (None, preset) => ExperimentConfig::for_preset(preset.as_deref().unwrap_or("tiny"))?,
        };
        if let Some(seed) = self.seed {
            cfg.data.seed = seed;
            cfg.pretrain.seed = seed;
            cfg.finetune.seed = seed;
        }
        if let Some(w) = self.ctc_weight {
            cfg.finetune.ctc_weight = w;
        }
        if let Some(b) = self.beam {
            cfg.finetune.beam_size = b;
        }
        cfg.validate().into_result()?;
        Ok(cfg)
    }
}

fn data_dir(given: &Option<PathBuf>) -> PathBuf {
    given
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn load_data(given: &Option<PathBuf>) -> anyhow::Result<Vec<avssl::data::AVSample>> {
    let dir = data_dir(given);
    read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))
}

/// Epoch override with the warmup pulled below it if needed.
fn with_epochs(epochs: &mut usize, warmup: &mut usize, over: Option<usize>) {
    if let Some(e) = over {
        *epochs = e;
        *warmup = (*warmup).min(e.saturating_sub(1));
    }
}

fn write_config(out: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.render())?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData { count, start } => {
            let cfg = c.experiment()?;
            let n = count.unwrap_or(cfg.data.num_samples);
            let samples = generate_dataset(&SyntheticSpec::from(&cfg.data), *start, n);
            let dir = data_dir(&Some(c.out.clone()));
            write_dataset(&dir, &samples)?;
            println!("wrote {n} samples to {}", dir.display());
        }
        Command::Pretrain { data } => {
            let mut cfg = c.experiment()?;
            with_epochs(
                &mut cfg.pretrain.epochs,
                &mut cfg.pretrain.warmup_epochs,
                c.epochs,
            );
            cfg.validate().into_result()?;
            let samples = load_data(data)?;
            write_config(&c.out, &cfg)?;
            let run = run_pretraining(&cfg, &samples, Some(&c.out))?;
            if let Some(last) = run.log.last() {
                println!(
                    "{} steps, final v2a {:.4} a2v {:.4} a2a {:.4}",
                    run.log.len(),
                    last.losses.v2a,
                    last.losses.a2v,
                    last.losses.a2a
                );
            }
            for p in &run.checkpoints {
                println!("{}", p.display());
            }
        }
        Command::Finetune {
            task,
            data,
            valid,
            init,
        } => {
            let mut cfg = c.experiment()?;
            with_epochs(
                &mut cfg.finetune.epochs,
                &mut cfg.finetune.warmup_epochs,
                c.epochs,
            );
            cfg.validate().into_result()?;
            let train = load_data(data)?;
            let valid = match valid {
                Some(v) => read_dataset(v)?,
                None => Vec::new(),
            };
            let init = match init {
                Some(p) => EncoderInit::load(p)?,
                None => EncoderInit::Random,
            };
            write_config(&c.out, &cfg)?;
            let run = run_finetune(&cfg, *task, &init, &train, &valid, Some(&c.out))?;
            if let Some(r) = run.log.last() {
                println!(
                    "{} epochs, final train loss {:.4}",
                    run.log.len(),
                    r.train_loss
                );
            }
            println!(
                "{}",
                c.out
                    .join(format!("finetune-{}.ckpt", task.name()))
                    .display()
            );
        }
        Command::Decode { ckpt, data, greedy } => {
            let model = AsrModel::load(ckpt)?;
            let samples = load_data(data)?;
            let beam = if *greedy {
                1
            } else {
                c.beam.unwrap_or(model.config.finetune.beam_size)
            };
            let w = c.ctc_weight.unwrap_or(model.config.finetune.ctc_weight);
            for s in &samples {
                println!("{}\t{}", s.sample_id, model.transcribe(s, beam, w)?);
            }
        }
        Command::Eval { ckpt, data } => {
            let model = AsrModel::load(ckpt)?;
            let samples = load_data(data)?;
            let beam = c.beam.unwrap_or(model.config.finetune.beam_size);
            let w = c.ctc_weight.unwrap_or(model.config.finetune.ctc_weight);
            let report = evaluate(&model, &samples, beam, w)?;
            fs::create_dir_all(&c.out)?;
            let path = c.out.join("eval.json");
            fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            println!(
                "WER {:.4} ({} sub, {} ins, {} del over {} words); report in {}",
                report.corpus_wer,
                report.counts.substitutions,
                report.counts.insertions,
                report.counts.deletions,
                report.reference_words,
                path.display()
            );
        }
        Command::SelfTrain {
            task,
            labeller,
            init,
            unlabelled,
            data,
            valid,
        } => {
            let mut cfg = c.experiment()?;
            with_epochs(
                &mut cfg.finetune.epochs,
                &mut cfg.finetune.warmup_epochs,
                c.epochs,
            );
            cfg.validate().into_result()?;
            let labeller = AsrModel::load(labeller)?;
            let init = EncoderInit::load(init)?;
            let unlabelled = read_dataset(unlabelled)?;
            let labelled = load_data(data)?;
            let valid = match valid {
                Some(v) => read_dataset(v)?,
                None => Vec::new(),
            };
            write_config(&c.out, &cfg)?;
            let run = self_train(
                &cfg,
                *task,
                &labeller,
                &init,
                &unlabelled,
                &labelled,
                &valid,
                Some(&c.out),
            )?;
            println!("{} pseudo-labelled samples", run.pseudo.len());
            println!(
                "{}",
                c.out
                    .join(format!("finetune-{}.ckpt", task.name()))
                    .display()
            );
        }
        Command::Ablate {
            variants,
            train_samples,
        } => {
            let cfg = c.experiment()?;
            let mut budget = AblationBudget::default();
            if let Some(e) = c.epochs {
                budget.pretrain_epochs = e;
                budget.finetune_epochs = e;
            }
            if let Some(n) = train_samples {
                budget.train_samples = *n;
            }
            if let Some(b) = c.beam {
                budget.beam = b;
            }
            let mut rows = cumulative_rows();
            if *variants {
                rows.extend(variant_rows());
            }
            let report = run_ablation(&cfg, &rows, &budget)?;
            fs::create_dir_all(&c.out)?;
            let table = report.to_table();
            fs::write(c.out.join("ablation.txt"), &table)?;
            fs::write(
                c.out.join("ablation.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            print!("{table}");
        }
        Command::CountParams => {
            let cfg = c.experiment()?;
            let m = &cfg.model;
            let audio = backbone_params(m, false);
            let video = backbone_params(m, true);
            println!("preset {}", m.preset);
            println!(
                "audio frontend + encoder: {audio} ({:.1}M)",
                audio as f64 / 1e6
            );
            println!(
                "video frontend + encoder: {video} ({:.1}M)",
                video as f64 / 1e6
            );
            let predictors =
                count_params(m, &[Component::VideoPredictor, Component::AudioPredictors]);
            println!("predictors: {predictors}");
            match reference_count(&m.preset) {
                Some(r) => println!("reference: {}M", r / 1_000_000),
                None => println!("reference: none for this preset"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
