use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use micacl_core::data::{gen_dataset, read_dataset, write_dataset, DatasetSpec};
use micacl_core::gradsuite::{self, Module};
use micacl_core::mccl::ClassStats;
use micacl_core::train::{
    dataset_losses, evaluate, format_report, history_csv, train_to_dir, EpochRecord,
    CHECKPOINT_FILE, METRICS_FILE,
};
use micacl_core::{Checkpoint, LossMode, TrainConfig};

#[derive(Parser)]
#[command(
    name = "micacl",
    version,
    about = "Train and evaluate the multi-instance contrastive model on synthetic long-tailed bags"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        classes: usize,
        /// bags in the largest class
        #[arg(long, default_value_t = DatasetSpec::default().head_count)]
        bags_head: usize,
        /// head-to-tail count ratio
        #[arg(long, default_value_t = DatasetSpec::default().imbalance_ratio)]
        ratio: f64,
        #[arg(long, default_value_t = 16)]
        instances: usize,
        #[arg(long, default_value_t = 12)]
        feat_dim: usize,
        #[arg(long, default_value_t = DatasetSpec::default().key_instances)]
        key_instances: usize,
        #[arg(long, default_value_t = DatasetSpec::default().noise_sigma)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset; writes metrics.csv, checkpoint.mick, heldout.mibg and a report.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key = value configuration; defaults are used when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// full, cet-only or mccl-only (overrides the config file)
        #[arg(long)]
        loss: Option<LossMode>,
        /// use -w·log(ratio) per anchor instead of the ratio itself
        #[arg(long)]
        log_form: bool,
    },
    /// Evaluate a checkpoint; writes one CSV row in the training metrics format.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: Module,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData {
            out,
            classes,
            bags_head,
            ratio,
            instances,
            feat_dim,
            key_instances,
            noise,
            seed,
        } => {
            let spec = DatasetSpec {
                num_classes: classes,
                instances,
                feat_dim,
                head_count: bags_head,
                imbalance_ratio: ratio,
                key_instances,
                noise_sigma: noise,
                seed,
            };
            let ds = gen_dataset(&spec)?;
            write_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
            let counts = spec.class_counts()?;
            println!(
                "wrote {} bags to {} (class counts {counts:?})",
                ds.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out_dir,
            seed,
            loss,
            log_form,
        } => {
            let ds = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let text = match &config {
                Some(p) => std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?,
                None => String::new(),
            };
            let mut cfg =
                TrainConfig::for_dataset(&text, ds.num_classes, ds.instances, ds.feat_dim)?;
            if let Some(mode) = loss {
                cfg.loss = mode;
            }
            if log_form {
                cfg.model.log_form = true;
            }
            let started = Instant::now();
            let outcome = train_to_dir(&cfg, &data, &out_dir, seed)?;
            print!("{}", history_csv(&outcome.history));
            println!(
                "held-out ({} bags, {:.1} s):",
                outcome.test_set.len(),
                started.elapsed().as_secs_f64()
            );
            print!("{}", format_report(&outcome.test_metrics));
            println!(
                "wrote {} and {} to {}",
                METRICS_FILE,
                CHECKPOINT_FILE,
                out_dir.display()
            );
        }
        Command::Eval {
            data,
            checkpoint,
            out,
        } => {
            let ck = Checkpoint::read(&checkpoint)
                .with_context(|| format!("reading {}", checkpoint.display()))?;
            let ds = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let m = &ck.config.model;
            if (ds.num_classes, ds.instances, ds.feat_dim) != (m.k, m.t, m.c_in) {
                bail!(
                    "dataset has K={}, T={}, C_in={} but the checkpoint expects K={}, T={}, C_in={}",
                    ds.num_classes,
                    ds.instances,
                    ds.feat_dim,
                    m.k,
                    m.t,
                    m.c_in
                );
            }
            if ds.len() < 2 {
                bail!("evaluation needs at least 2 bags, got {}", ds.len());
            }
            let report = evaluate(&ck.params, m, &ds)?;
            let stats = ClassStats::new(ck.class_counts.clone(), m.tau0)?;
            let losses = dataset_losses(&ck.params, m, &stats, &ds, ck.config.loss)?;
            let record = EpochRecord {
                epoch: ck.config.epochs,
                lr: ck.config.optim.lr_min,
                loss_mc: losses.loss_mc,
                loss_cet: losses.loss_cet,
                loss_all: losses.loss_all,
                war: report.war,
                uar: report.uar,
            };
            std::fs::write(&out, history_csv(&[record]))
                .with_context(|| format!("writing {}", out.display()))?;
            print!("{}", format_report(&report));
        }
        Command::Gradcheck { module, eps } => {
            let started = Instant::now();
            let results = gradsuite::run(module, eps)?;
            let mut ok = true;
            for r in &results {
                let pass = r.report.max_rel_error < GRADCHECK_TOLERANCE;
                ok &= pass;
                println!(
                    "{:<11} max_rel_error = {:.3e} over {} coordinates  {}",
                    r.name,
                    r.report.max_rel_error,
                    r.report.coordinates,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            println!("elapsed {:.2} s", started.elapsed().as_secs_f64());
            return Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            });
        }
    }
    Ok(ExitCode::SUCCESS)
}
