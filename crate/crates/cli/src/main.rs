use std::path::PathBuf;

use anyhow::{bail, Context};
use bvib_core::attack::{AttackConfig, TargetPolicy};
use bvib_core::consensus::TermConfig;
use bvib_core::data::SyntheticSpec;
use bvib_core::orchestrator::{
    run_experiment, DatasetSource, EarlyStop, ExperimentConfig, MiRecording, Mode, TestSchedule,
};
use bvib_core::vib::ReparamMode;
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Bvib,
    VibMonolithic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    UniformAny,
    LeaderFocused,
    DevicesOnly,
    ServersOnly,
}

/// Split VIB training across simulated devices and servers with a
/// consensus ledger and DoS fault injection.
#[derive(Debug, Parser)]
#[command(name = "bvib", version)]
struct Args {
    #[arg(long, value_enum, default_value = "bvib")]
    mode: ModeArg,
    #[arg(long, default_value_t = 300)]
    epochs: u64,
    /// Batches per epoch on each shard.
    #[arg(long, default_value_t = 200)]
    batches: usize,
    /// Fixed batch size instead of shard size / batches.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pairs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    #[arg(long, default_value_t = 512)]
    latent_dim: usize,
    #[arg(long, default_value_t = 1024)]
    trunk_dim: usize,
    #[arg(long, default_value_t = 784)]
    decoder_dim: usize,
    /// Sample z = mu + eps * sigma^2 instead of mu + eps * sigma.
    #[arg(long)]
    literal_variance_reparam: bool,
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: DatasetArg,
    /// Directory holding the four standard MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    mnist_dir: PathBuf,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long, default_value_t = 500)]
    synthetic_train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    synthetic_test_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    synthetic_noise: f64,
    #[arg(long, default_value_t = 0)]
    malicious: usize,
    #[arg(long, value_enum, default_value = "uniform-any")]
    target_policy: PolicyArg,
    /// Epochs each attack keeps its target paralyzed.
    #[arg(long, default_value_t = 1)]
    paralysis_epochs: u64,
    /// Keep attacking the first target instead of re-picking each time.
    #[arg(long)]
    sticky_targets: bool,
    #[arg(long, default_value_t = 600)]
    term_rounds: u64,
    #[arg(long, default_value_t = 1)]
    heartbeat_interval: u64,
    #[arg(long, default_value_t = 3)]
    missed_heartbeats: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable early stopping on a flat training objective.
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long, default_value_t = 1e-4)]
    early_stop_tolerance: f64,
    /// Average MI over all test batches instead of recording the last one.
    #[arg(long)]
    mi_all_batches: bool,
    /// Test only after the final epoch.
    #[arg(long)]
    test_final_only: bool,
    #[arg(long, default_value_t = 2)]
    max_batch_retries: u32,
    /// Restart training from scratch when an aborted batch runs out of retries.
    #[arg(long)]
    restart_on_abort: bool,
    #[arg(long, default_value_t = 3)]
    max_restarts: u32,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Args {
    fn into_config(self) -> ExperimentConfig {
        let dataset = match self.dataset {
            DatasetArg::Mnist => DatasetSource::Mnist {
                dir: self.mnist_dir,
                train_limit: self.train_limit,
                test_limit: self.test_limit,
            },
            DatasetArg::Synthetic => DatasetSource::Synthetic {
                spec: SyntheticSpec {
                    noise: self.synthetic_noise,
                    ..SyntheticSpec::default()
                },
                train_per_class: self.synthetic_train_per_class,
                test_per_class: self.synthetic_test_per_class,
            },
        };
        let target_policy = match self.target_policy {
            PolicyArg::UniformAny => TargetPolicy::UniformAny,
            PolicyArg::LeaderFocused => TargetPolicy::LeaderFocused,
            PolicyArg::DevicesOnly => TargetPolicy::DevicesOnly,
            PolicyArg::ServersOnly => TargetPolicy::ServersOnly,
        };
        ExperimentConfig {
            mode: match self.mode {
                ModeArg::Bvib => Mode::Bvib,
                ModeArg::VibMonolithic => Mode::VibMonolithic,
            },
            epochs: self.epochs,
            batches: self.batches,
            batch_size: self.batch_size,
            pairs: self.pairs,
            lr: self.lr,
            beta: self.beta,
            latent_dim: self.latent_dim,
            trunk_dim: self.trunk_dim,
            decoder_hidden: self.decoder_dim,
            reparam: if self.literal_variance_reparam {
                ReparamMode::Variance
            } else {
                ReparamMode::StdDev
            },
            dataset,
            attack: AttackConfig {
                num_malicious: self.malicious,
                target_policy,
                paralysis_duration: self.paralysis_epochs,
                reselect_each_epoch: !self.sticky_targets,
            },
            term: TermConfig {
                term_rounds: self.term_rounds,
                heartbeat_interval: self.heartbeat_interval,
                missed_heartbeat_threshold: self.missed_heartbeats,
            },
            seed: self.seed,
            early_stop: (!self.no_early_stop).then_some(EarlyStop {
                tolerance: self.early_stop_tolerance,
                ..EarlyStop::default()
            }),
            mi_recording: if self.mi_all_batches {
                MiRecording::AllBatches
            } else {
                MiRecording::LastBatch
            },
            test_schedule: if self.test_final_only {
                TestSchedule::FinalOnly
            } else {
                TestSchedule::EveryEpoch
            },
            max_batch_retries: self.max_batch_retries,
            restart_on_abort: self.restart_on_abort,
            max_full_restarts: self.max_restarts,
            out_dir: Some(self.out),
        }
    }
}

fn main() -> anyhow::Result<()> {
    let cfg = Args::parse().into_config();
    let out = cfg.out_dir.clone().unwrap_or_default();
    let report = run_experiment(&cfg).context("experiment failed")?;

    println!("epochs run:        {}", report.epochs.len());
    println!("average accuracy:  {:.2}%", report.average_accuracy_pct);
    println!("final accuracy:    {:.2}%", report.final_accuracy_pct);
    if let Some(last) = report.epochs.last() {
        println!(
            "final MI bounds:   I(Z;X) <= {:.4} bits, I(Z;Y) >= {:.4} bits",
            last.mi_upper_bits, last.mi_lower_bits
        );
    }
    println!(
        "training MACs:     device {:.1}% / server {:.1}% of {}",
        report.flops.device_share_pct, report.flops.server_share_pct, report.flops.total
    );
    println!("chain height:      {}", report.chain_height);
    println!("elections/aborts:  {}/{}", report.elections, report.aborts);
    println!("outputs:           {}", out.display());
    if report.failed {
        bail!(
            "run flagged as failed: {}",
            report.failure.unwrap_or_default()
        );
    }
    Ok(())
}
