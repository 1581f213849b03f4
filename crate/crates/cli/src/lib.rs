//! Command-line front end: configuration, pipeline stages and the
//! acceptance evaluation shared by `siamex eval` and the test suite.

pub mod commands;
pub mod config;
pub mod eval;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::commands::ExplainArgs;
use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "siamex",
    version,
    about = "Prototype-and-perturbation explanations for Siamese networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Global seed; replaces `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; replaces `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace outputs that already exist.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the Siamese subnet; writes snn.ckpt.
    TrainSnn {
        #[command(flatten)]
        common: Common,
    },
    /// Train the autoencoder against SNN embeddings; writes autoencoder.ckpt.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snn: Option<PathBuf>,
    },
    /// Retrain the decoder on SNN embeddings; writes autoencoder-ft.ckpt.
    FinetuneDecoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snn: Option<PathBuf>,
        #[arg(long)]
        ae: Option<PathBuf>,
    },
    /// Compute class prototypes on the training split; writes prototypes.json.
    Prototypes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snn: Option<PathBuf>,
    },
    /// Explain dataset examples or a PGM image; writes explain/report.jsonl and images.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snn: Option<PathBuf>,
        /// Autoencoder checkpoint (default: autoencoder-ft.ckpt in the output directory).
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        protos: Option<PathBuf>,
        /// Dataset index to explain; repeatable.
        #[arg(long = "index")]
        indices: Vec<usize>,
        /// PGM image to explain.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        s: Option<usize>,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long = "n-samples")]
        n_samples: Option<usize>,
    },
    /// Run the acceptance criteria and print one line per criterion.
    Eval {
        /// Directory holding toy.toml, planted.toml and mnist.toml.
        #[arg(long, default_value = "configs")]
        configs: PathBuf,
        /// Run only these criteria (1-10); repeatable.
        #[arg(long = "criterion")]
        criteria: Vec<u8>,
    },
}

fn load(common: &Common, extra: Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply(&Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        ..extra
    })?;
    Ok(cfg)
}

/// Executes one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainSnn { common } => {
            let cfg = load(&common, Overrides::default())?;
            let s = commands::train_snn(&cfg, common.overwrite)?;
            println!(
                "snn: final loss {:.6}, train intra/inter distance {:.4}/{:.4} -> {}",
                s.epoch_losses.last().unwrap(),
                s.train_intra_distance,
                s.train_inter_distance,
                commands::Artifacts::new(&cfg.out_dir).snn().display()
            );
        }
        Command::TrainAe { common, snn } => {
            let cfg = load(&common, Overrides::default())?;
            let r = commands::train_ae(&cfg, snn.as_deref(), common.overwrite)?;
            println!(
                "autoencoder: alignment {:.6} -> {:.6} ({:.1}%) -> {}",
                r.alignment_initial,
                r.alignment_final,
                100.0 * r.alignment_final / r.alignment_initial,
                commands::Artifacts::new(&cfg.out_dir).ae().display()
            );
        }
        Command::FinetuneDecoder { common, snn, ae } => {
            let cfg = load(&common, Overrides::default())?;
            let r = commands::finetune(&cfg, snn.as_deref(), ae.as_deref(), common.overwrite)?;
            println!(
                "decoder: objective {:.6} -> {:.6} (epoch {}) -> {}",
                r.objective[0],
                r.objective[r.best],
                r.best,
                commands::Artifacts::new(&cfg.out_dir)
                    .ae_finetuned()
                    .display()
            );
        }
        Command::Prototypes { common, snn } => {
            let cfg = load(&common, Overrides::default())?;
            let p = commands::prototypes(&cfg, snn.as_deref(), common.overwrite)?;
            println!(
                "prototypes: {} classes -> {}",
                p.len(),
                commands::Artifacts::new(&cfg.out_dir)
                    .prototypes()
                    .display()
            );
        }
        Command::Explain {
            common,
            snn,
            ae,
            protos,
            indices,
            input,
            s,
            q,
            n_samples,
        } => {
            let cfg = load(
                &common,
                Overrides {
                    s,
                    q,
                    n_samples,
                    ..Overrides::default()
                },
            )?;
            let args = ExplainArgs {
                snn,
                ae,
                protos,
                indices,
                input,
            };
            let records = commands::run_explain(&cfg, &args, common.overwrite)?;
            for r in &records {
                let what = r
                    .index
                    .map_or_else(|| r.input.clone().unwrap_or_default(), |i| format!("#{i}"));
                println!("{what}: class {} mask {:?}", r.target_class, r.mask_indices);
            }
            println!(
                "report -> {}",
                commands::Artifacts::new(&cfg.out_dir).report().display()
            );
        }
        Command::Eval { configs, criteria } => {
            let ctx = eval::EvalContext::new(configs)?;
            let ids: Vec<u8> = if criteria.is_empty() {
                (1..=10).collect()
            } else {
                criteria
            };
            let mut failed = 0;
            for id in ids {
                let outcome = ctx.run(id);
                println!("{outcome}");
                failed += usize::from(!outcome.passed);
            }
            anyhow::ensure!(failed == 0, "{failed} criteria failed");
        }
    }
    Ok(())
}
