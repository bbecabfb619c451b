use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use d3pmlab::harness::{
    self, evaluate, load_cell_model, prepare, run_experiment, sample_texts, train_cell, write_report, ConfigError,
    ExperimentConfig, HarnessError, OUT_ENV,
};
use d3pmlab::metrics::ModelKind;

#[derive(Parser)]
#[command(name = "d3pmlab", version, about = "Train and compare absorbing diffusion and autoregressive language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (key=value lines)
    #[arg(long)]
    config: PathBuf,
    /// Override a config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the tokenizer on the train split and save vocab.json
    TokenizerTrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the autoregressive model (all configured seeds unless --seed)
    TrainAr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the diffusion model (all configured seeds unless --seed)
    TrainD3pm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained checkpoint and write report.json
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print samples from a trained checkpoint
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Seed for the sampler itself
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
    },
    /// Run the brute-force oracle and invariant suites
    Verify {
        /// Print the report as JSON
        #[arg(long)]
        json: bool,
    },
    /// Run the whole experiment and write comparison.md
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Verify,
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|source| ConfigError::Io { path: common.config.display().to_string(), source })?;
    let mut config = ExperimentConfig::parse(&text)?;
    if let Some(out) = std::env::var_os(OUT_ENV) {
        config.out_dir = PathBuf::from(out);
    }
    config.apply_overrides(&common.overrides)?;
    config.validate()?;
    Ok(config)
}

fn pick_seed(config: &ExperimentConfig, kind: ModelKind, seed: Option<u64>) -> u64 {
    seed.unwrap_or(config.seeds_for(kind)[0])
}

fn train(common: &Common, kind: ModelKind, seed: Option<u64>) -> Result<(), Failure> {
    let config = load_config(common)?;
    let prep = prepare(&config)?;
    let seeds = match seed {
        Some(s) => vec![s],
        None => config.seeds_for(kind).to_vec(),
    };
    for seed in seeds {
        let cell = train_cell(&prep, &config, kind, seed)?;
        let last = cell.log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
        println!(
            "{kind} seed {seed}: {} updates (resumed from {}), final loss {last:.6}, checkpoint in {}",
            cell.log.len(),
            cell.resumed_from,
            config.cell_dir(kind, seed).display()
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::TokenizerTrain { common } => {
            let config = load_config(&common)?;
            let prep = prepare(&config)?;
            println!(
                "vocabulary of {} tokens written to {}",
                prep.tokenizer.vocab_size(),
                config.experiment_dir().join(harness::VOCAB_FILE).display()
            );
            if let Some(w) = prep.warning {
                eprintln!("warning: {w:?}");
            }
        }
        Command::TrainAr { common, seed } => train(&common, ModelKind::Ar, seed)?,
        Command::TrainD3pm { common, seed } => train(&common, ModelKind::D3pm, seed)?,
        Command::Eval { common, model, seed } => {
            let config = load_config(&common)?;
            let seed = pick_seed(&config, model, seed);
            let prep = prepare(&config)?;
            let loaded = load_cell_model(&config, &prep.tokenizer, model, seed)?;
            let report = evaluate(&prep, &config, &loaded, seed)?;
            write_report(&config, model, seed, &report)?;
            println!(
                "{model} seed {seed}: nll {:.6} bpt {:.6} ppl {:.6} over {} tokens, {:.2} batches/s",
                report.nll, report.bpt, report.ppl, report.token_count, report.batches_per_sec
            );
        }
        Command::Sample { common, model, seed, count, sample_seed } => {
            let config = load_config(&common)?;
            let seed = pick_seed(&config, model, seed);
            let prep = prepare(&config)?;
            let loaded = load_cell_model(&config, &prep.tokenizer, model, seed)?;
            for text in sample_texts(&loaded, &prep.tokenizer, &config, count, sample_seed)? {
                println!("{text}");
            }
        }
        Command::Verify { json } => {
            let report = harness::verify();
            if json {
                let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
                println!("{text}");
            } else {
                print!("{}", report.render());
            }
            if !report.passed() {
                return Err(Failure::Verify);
            }
        }
        Command::Compare { common } => {
            let config = load_config(&common)?;
            let table = run_experiment(&config)?;
            print!("{}", table.to_markdown());
            for c in &table.cells {
                if let Err(e) = &c.outcome {
                    eprintln!("{} seed {} failed: {e}", c.model, c.seed);
                }
            }
            if table.failures() > 0 {
                return Err(Failure::Runtime(format!("{} cell(s) failed", table.failures())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
