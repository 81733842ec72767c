use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::warn;

use clips::checkpoint::Checkpoint;
use clips::eval::{evaluate_retrieval, inverse_effect_sweep, read_sweep_csv, write_sweep_csv, RetrievalReport};
use clips::plot::plot_sweep;
use clips::text::Vocab;
use clips::toy_data::{generate_with, load_records, save_records, CaptionRecord, GeneratorConfig};
use clips::training::{run_stage, Stage, TrainConfig};
use clips::ClipsError;

/// Toy-scale image-text pretraining with sub-caption sampling and a caption decoder.
#[derive(Debug, Parser)]
#[command(name = "clips", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Master seed; for train and sweep it replaces the config's seed key.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 is the strictly reproducible single-worker mode.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a toy corpus (records.jsonl plus PNG images).
    GenData {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Probability that a web caption names a wrong attribute.
        #[arg(long, default_value_t = 0.3)]
        noise_rate: f64,
        /// Minimum sentences per synthetic caption.
        #[arg(long, default_value_t = 3)]
        min_sentences: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage.
    Train {
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the stage key of the config.
        #[arg(long)]
        stage: Option<Stage>,
        /// Training records (JSONL).
        #[arg(long)]
        data: PathBuf,
        /// Records for the closing retrieval summary; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Checkpoint to start from; required for finetune.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Vocabulary file; defaults to the toy grammar.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output directory for checkpoint.ckpt and metrics.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// key=value config overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Zero-shot retrieval evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate one contrastive model per (strategy, length, seed).
    Sweep {
        /// Comma-separated: truncate, random_mask, block_mask, subcaption.
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation records; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Directory for the per-strategy charts; defaults to the CSV's directory.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render one chart per strategy from a sweep CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn init_jobs(jobs: usize) -> anyhow::Result<()> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    // ignore repeated initialisation
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    Ok(())
}

fn read_records(path: &Path) -> anyhow::Result<Vec<CaptionRecord>> {
    require_file(path, "data file")?;
    let loaded = load_records(path)?;
    if loaded.rejected > 0 {
        warn!("{}: rejected {} records with missing fields", path.display(), loaded.rejected);
    }
    Ok(loaded.records)
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            require_file(p, "config file")?;
            TrainConfig::from_kv(&fs::read_to_string(p)?)?
        }
        None => TrainConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn print_report(r: &RetrievalReport) {
    println!("            R@1     R@5    R@10");
    println!("i2t     {:>7.2} {:>7.2} {:>7.2}", r.i2t_r1, r.i2t_r5, r.i2t_r10);
    println!("t2i     {:>7.2} {:>7.2} {:>7.2}", r.t2i_r1, r.t2i_r5, r.t2i_r10);
    println!("images {}  texts {}  checkpoint {}", r.n_images, r.n_texts, r.checkpoint_id);
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { n, noise_rate, min_sentences, out, common } => {
            init_jobs(common.jobs)?;
            if n == 0 {
                return Err(usage("--n must be at least 1"));
            }
            let cfg = GeneratorConfig { seed: common.seed.unwrap_or(0), noise_rate, min_sentences, ..GeneratorConfig::default() };
            let records = generate_with(n, &cfg)?;
            let path = save_records(&records, &out)?;
            let sentences: usize = records.iter().map(|r| r.synthetic_caption.matches('.').count()).sum();
            println!("wrote {} records to {}", records.len(), path.display());
            println!("mean synthetic sentences {:.2}", sentences as f64 / records.len() as f64);
        }
        Command::Train { config, stage, data, eval_data, init, vocab, out, overrides, common } => {
            init_jobs(common.jobs)?;
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            if let Some(s) = stage {
                cfg.stage = s;
            }
            cfg.validate()?;
            if cfg.stage == Stage::Finetune && init.is_none() {
                return Err(usage("--stage finetune requires --init"));
            }
            let vocab = match vocab {
                Some(p) => {
                    require_file(&p, "vocabulary file")?;
                    Vocab::load(&p)?
                }
                None => Vocab::toy(),
            };
            let records = read_records(&data)?;
            let init = match init {
                Some(p) => {
                    require_file(&p, "init checkpoint")?;
                    Some(Checkpoint::load(&p)?)
                }
                None => None,
            };
            fs::create_dir_all(&out)?;
            let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
            let result = run_stage::<f32>(&cfg, &records, &vocab, init.as_ref(), |m| {
                serde_json::to_writer(&mut log, m)?;
                log.write_all(b"\n")?;
                Ok(())
            })?;
            log.flush()?;
            let ck = Checkpoint::from_model(&result.model, &vocab, cfg.stage);
            let ck_path = out.join("checkpoint.ckpt");
            ck.save(&ck_path)?;
            fs::write(out.join("config.txt"), cfg.to_kv())?;
            if let Some(last) = result.metrics.last() {
                println!(
                    "{} done: {} steps, final total loss {:.4}, temperature {:.4}",
                    cfg.stage,
                    result.metrics.len(),
                    last.total_loss,
                    last.temperature
                );
            }
            println!("checkpoint {} ({})", ck_path.display(), ck.id());
            let eval_records = match eval_data {
                Some(p) => read_records(&p)?,
                None => records,
            };
            let mut report = evaluate_retrieval(&result.model, &eval_records, &vocab)?;
            report.checkpoint_id = ck.id().to_owned();
            print_report(&report);
        }
        Command::Eval { checkpoint, data, report, common } => {
            init_jobs(common.jobs)?;
            require_file(&checkpoint, "checkpoint")?;
            let records = read_records(&data)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let vocab = ck.vocab()?;
            let model = ck.to_model::<f32>()?;
            let mut r = evaluate_retrieval(&model, &records, &vocab)?;
            r.checkpoint_id = ck.id().to_owned();
            if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&report, serde_json::to_string_pretty(&r)? + "\n")?;
            print_report(&r);
        }
        Command::Sweep { strategies, lengths, seeds, config, data, eval_data, overrides, out, plot_dir, common } => {
            if lengths.contains(&0) {
                return Err(usage("sweep lengths must be positive"));
            }
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let train = read_records(&data)?;
            let eval = match eval_data {
                Some(p) => read_records(&p)?,
                None => train.clone(),
            };
            let rows =
                inverse_effect_sweep(&cfg, &train, &eval, &Vocab::toy(), &strategies, &lengths, &seeds, common.jobs)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_sweep_csv(&rows, File::create(&out)?)?;
            let failed = rows.iter().filter(|r| r.failed()).count();
            if failed > 0 {
                warn!("{failed} of {} sweep cells failed", rows.len());
                eprintln!("warning: {failed} of {} sweep cells failed", rows.len());
            }
            let dir = plot_dir.unwrap_or_else(|| out.parent().map(Path::to_path_buf).unwrap_or_default());
            match plot_sweep(&rows, &dir) {
                Ok(paths) => paths.iter().for_each(|p| println!("chart {}", p.display())),
                Err(e) => eprintln!("warning: no charts written: {e}"),
            }
            println!("wrote {} cells to {}", rows.len(), out.display());
        }
        Command::Plot { csv, out, common } => {
            init_jobs(common.jobs)?;
            require_file(&csv, "csv file")?;
            let rows = read_sweep_csv(File::open(&csv)?)?;
            for p in plot_sweep(&rows, &out).context("plotting")? {
                println!("chart {}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(c) = cause.downcast_ref::<ClipsError>() {
            return if c.is_usage() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<ClipsError>(), Some(ClipsError::NonFinite { .. })) {
                eprintln!("rerun with the same --seed to reproduce; the batch seed is in the message above");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
