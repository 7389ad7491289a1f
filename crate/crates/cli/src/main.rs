//! `olora`: data generation, training, evaluation and reporting for online
//! LoRA continual learning on synthetic image streams.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use olora::harness::{self, ExperimentConfig, Method};
use olora::importance::PenaltyMode;
use olora::plateau::{self, LossWindow};
use olora::stream::{self, Scenario};
use olora::tensor::kernels::configure_threads_from_env;
use olora::{Error, Result};

#[derive(Parser)]
#[command(name = "olora", version, about = "Online LoRA continual learning on synthetic streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stream and export it to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method over every configured seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Read an exported stream instead of generating one.
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long, value_parser = parse_penalty)]
        penalty_mode: Option<PenaltyMode>,
        #[arg(long)]
        mean_threshold: Option<f64>,
        #[arg(long)]
        var_threshold: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Evaluate a trained run on each task's held-out data.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Exported stream to evaluate on; regenerated from the run config
        /// when omitted.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Aggregate run directories into metrics CSV, curves and SVG plots.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the loss-window detector over a loss CSV and emit its events.
    ReplayDetector {
        #[arg(long)]
        input: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = plateau::DEFAULT_CAPACITY)]
        window: usize,
        #[arg(long)]
        mean_threshold: Option<f64>,
        #[arg(long)]
        var_threshold: Option<f64>,
        /// Named threshold preset (e.g. cifar100).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Grid-search detector thresholds on a validation seed.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        means: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        vars: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        validation_seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    /// Repeatable; replaces the configured seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    num_tasks: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn parse_method(s: &str) -> Result<Method> {
    s.parse()
}

fn parse_penalty(s: &str) -> Result<PenaltyMode> {
    s.parse()
}

fn parse_scenario(s: &str) -> Result<Scenario> {
    s.parse()
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.scenario {
            cfg.stream.scenario = s;
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(t) = self.num_tasks {
            cfg.stream.num_tasks = t;
        }
        if let Some(b) = self.batch_size {
            cfg.stream.batch_size = b;
        }
        Ok(cfg)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            cfg.validate()?;
            let ds = stream::gen_synthetic(&cfg.data)?;
            let s = harness::stream_for_seed(&cfg, &ds, cfg.seeds[0])?;
            stream::export_stream(&s, &out)?;
            eprintln!(
                "wrote {} batches ({} samples, {} tasks) to {}",
                s.batches.len(),
                s.num_samples(),
                s.num_tasks(),
                out.display()
            );
        }
        Command::Train {
            common,
            method,
            out,
            stream,
            penalty_mode,
            mean_threshold,
            var_threshold,
            lambda,
            lr,
            rank,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(p) = penalty_mode {
                cfg.penalty_mode = p;
            }
            cfg.mean_threshold = mean_threshold.unwrap_or(cfg.mean_threshold);
            cfg.var_threshold = var_threshold.unwrap_or(cfg.var_threshold);
            cfg.lambda = lambda.unwrap_or(cfg.lambda);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.rank = rank.unwrap_or(cfg.rank);
            let records = harness::run_experiment(&cfg, stream.as_deref())?;
            harness::report(&records, &cfg.out_dir)?;
            for r in &records {
                let m = &r.metrics;
                eprintln!(
                    "{}: a_final {:.4} a_auc {:.4} forgetting {} plateaus {}",
                    r.run_id,
                    m.a_final,
                    m.a_auc_norm,
                    m.forgetting.map_or("-".into(), |f| format!("{f:.4}")),
                    r.merges.len()
                );
            }
        }
        Command::Eval { run, stream } => {
            let (cfg, model, stack) = harness::load_checkpoint(&run)?;
            let s = match stream {
                Some(dir) => stream::import_stream(&dir)?,
                None => {
                    let ds = stream::gen_synthetic(&cfg.data)?;
                    harness::stream_for_seed(&cfg, &ds, cfg.seeds[0])?
                }
            };
            let sets: Vec<_> = s.eval_sets.iter().collect();
            let accs = harness::evaluate(&model, &stack, &sets)?;
            let mut text = String::from("task,accuracy\n");
            for (i, a) in accs.iter().enumerate() {
                text.push_str(&format!("{i},{a:.6}\n"));
            }
            text.push_str(&format!("mean,{:.6}\n", accs.iter().sum::<f64>() / accs.len() as f64));
            if let Some(h) = &s.holdout {
                let acc = harness::evaluate(&model, &stack, &[h])?[0];
                text.push_str(&format!("holdout,{acc:.6}\n"));
            }
            print!("{text}");
        }
        Command::Report { runs, out } => {
            let records = runs.iter().map(|d| harness::load_record(d)).collect::<Result<Vec<_>>>()?;
            harness::report(&records, &out)?;
        }
        Command::ReplayDetector {
            input,
            out,
            window,
            mean_threshold,
            var_threshold,
            preset,
        } => {
            let (pm, pv) = match &preset {
                Some(name) => plateau::preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?,
                None => {
                    let d = ExperimentConfig::default();
                    (d.mean_threshold, d.var_threshold)
                }
            };
            let detector = LossWindow::new(window, mean_threshold.unwrap_or(pm), var_threshold.unwrap_or(pv))?;
            let losses = plateau::parse_loss_csv(&fs::read_to_string(&input)?)?;
            let rows = plateau::replay(&detector, &losses)?;
            write_or_print(out.as_deref(), &plateau::format_event_csv(&rows))?;
        }
        Command::Tune {
            common,
            means,
            vars,
            validation_seed,
        } => {
            let cfg = common.load()?;
            let (m, v) = harness::tune_thresholds(&cfg, &means, &vars, validation_seed)?;
            println!("mean_threshold = {m}\nvar_threshold = {v}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_threads_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
