//! `fate`: pretrain toy encoders and run two-stage prompt-tuning experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fate_core::experiment::{
    export_features, pretrain_encoders, run_ablation_suite, run_dp_placement, run_experiment, run_k_sweep,
    run_noisy_dp_control, suite_seeds, ExperimentConfig, FeatureSplit, StageSelect,
};
use fate_core::FateError;

#[derive(Parser)]
#[command(name = "fate", version, about = "Two-stage prompt tuning for one-label-per-class SSL")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the frozen encoder(s) on the auxiliary task into `backbone_dir`.
    PretrainBackbone {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the adaptation and/or classification stage.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "all")]
        stage: StageSelect,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// DP x CP ablation grid over three seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Zero-shot, DP-only and DP+CP accuracy for several k.
    Ksweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        ks: Vec<usize>,
    },
    /// DP on vs off the strong branch.
    Placement {
        #[arg(long)]
        config: PathBuf,
    },
    /// Classifier fine-tuning with trained, random, and no DP.
    NoisyDp {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write per-sample classification features of a finished run.
    ExportFeatures {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: FeatureSplit,
    },
}

fn execute(cli: Cli) -> Result<String, FateError> {
    let out = match cli.command {
        Command::PretrainBackbone { config } => {
            serde_json::to_string_pretty(&pretrain_encoders(&ExperimentConfig::from_file(&config)?)?)?
        }
        Command::Run { config, stage, seed } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            serde_json::to_string_pretty(&run_experiment(&cfg, stage)?)?
        }
        Command::Ablate { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            run_ablation_suite(&cfg, &suite_seeds(&cfg))?.to_csv()
        }
        Command::Ksweep { config, ks } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            run_k_sweep(&cfg, &ks, &suite_seeds(&cfg))?.to_csv()
        }
        Command::Placement { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            run_dp_placement(&cfg, &suite_seeds(&cfg))?.to_csv()
        }
        Command::NoisyDp { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            run_noisy_dp_control(&cfg, &suite_seeds(&cfg))?.to_csv()
        }
        Command::ExportFeatures { run, split } => export_features(&run, split)?.display().to_string(),
    };
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match execute(cli) {
        Ok(out) => {
            println!("{}", out.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
