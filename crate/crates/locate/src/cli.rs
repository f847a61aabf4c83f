//! Command-line surface. Flags override config-file values; the resolved
//! config is echoed into the output directory of every run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::{Config, Mode, Setting};
use crate::error::Result;
use crate::fixture::{generate, FixtureSpec};
use crate::pipeline;

/// Overrides the output directory when `--out` is not given.
pub const OUTPUT_DIR_ENV: &str = "LOCATE_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "locate", version, about = "Weakly supervised affordance grounding")]
pub struct Cli {
    /// TOML config file; for eval, predict and inspect the checkpoint's own
    /// config is used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the CAM head and write checkpoints and a step log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split and write CSV/JSON reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a heatmap array and an overlay image for one image.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        affordance: String,
    },
    /// Generate the synthetic fixture dataset.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "seen")]
        setting: Setting,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// For the unseen setting, reuse a training object at test time
        /// (produces a tree that fails validation).
        #[arg(long)]
        unseen_overlap: bool,
    },
    /// Dump PartSelect internals for one training sample.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the training split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

/// Paths and config overrides shared by the dataset subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (default: $LOCATE_OUTPUT_DIR, then output.dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub setting: Option<Setting>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "N")]
    pub n: Option<usize>,
    #[arg(long)]
    pub lambda_cos: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub transfer_mode: Option<Mode>,
    /// Disable PartSelect (regional transfer then uses the exocentric CAM).
    #[arg(long)]
    pub no_selector: bool,
    /// Disable the cosine transfer loss.
    #[arg(long)]
    pub no_cos: bool,
    /// Disable the concentration loss.
    #[arg(long)]
    pub no_lc: bool,
    /// Apply the concentration loss to the ground-truth channel only.
    #[arg(long)]
    pub lc_gt_only: bool,
    /// Separate CAM heads for the two branches.
    #[arg(long)]
    pub unshared_head: bool,
}

impl Common {
    pub fn apply(&self, c: &mut Config) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        if self.data.is_some() {
            c.data.root = self.data.clone();
        }
        set(&mut c.data.setting, &self.setting);
        if self.epochs.is_some() {
            c.train.epochs = self.epochs;
        }
        if self.max_steps.is_some() {
            c.train.max_steps = self.max_steps;
        }
        set(&mut c.seed, &self.seed);
        set(&mut c.train.lr, &self.lr);
        set(&mut c.data.batch_size, &self.batch_size);
        set(&mut c.extract.tau, &self.tau);
        set(&mut c.select.mu, &self.mu);
        set(&mut c.select.k, &self.k);
        set(&mut c.data.n, &self.n);
        set(&mut c.loss.lambda_cos, &self.lambda_cos);
        set(&mut c.loss.lambda_c, &self.lambda_c);
        set(&mut c.loss.alpha, &self.alpha);
        set(&mut c.transfer.mode, &self.transfer_mode);
        c.select.enabled &= !self.no_selector;
        c.loss.use_cos &= !self.no_cos;
        c.loss.use_lc &= !self.no_lc;
        c.loss.lc_gt_only |= self.lc_gt_only;
        c.cam.shared &= !self.unshared_head;
    }

    /// `--out`, then the environment variable, then the config value.
    pub fn resolve_output(&self, c: &mut Config) {
        if let Some(out) = &self.out {
            c.output.dir = out.clone();
        } else if let Some(env) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            c.output.dir = PathBuf::from(env);
        }
    }
}

fn base_config(file: Option<&Path>, checkpoint: Option<&Checkpoint>) -> Result<Config> {
    match (file, checkpoint) {
        (Some(path), _) => Config::load(path),
        (None, Some(ck)) => Ok(ck.config.clone()),
        (None, None) => Ok(Config::default()),
    }
}

fn resolve(file: Option<&Path>, checkpoint: Option<&Checkpoint>, common: &Common) -> Result<Config> {
    let mut c = base_config(file, checkpoint)?;
    common.apply(&mut c);
    common.resolve_output(&mut c);
    Ok(c)
}

/// Runs a parsed invocation, printing a short summary to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let file = cli.config.as_deref();
    match &cli.command {
        Command::Train { common, resume } => {
            let resume = resume.as_deref().map(load_checkpoint).transpose()?;
            let config = resolve(file, None, common)?;
            let out = pipeline::train(&config, &config.output.dir, resume)?;
            let last = out.reports.last().map(|r| r.loss.total);
            println!("steps: {}", out.checkpoint.steps);
            if let Some(loss) = last {
                println!("final loss: {loss:.6}");
            }
            println!("checkpoint: {}", out.checkpoint_path.display());
        }
        Command::Eval { common, checkpoint } => {
            let ck = load_checkpoint(checkpoint)?;
            let config = resolve(file, Some(&ck), common)?;
            let report = pipeline::evaluate_checkpoint(&config, &ck, &config.output.dir)?;
            println!("images: {} (skipped {})", report.rows.len(), report.skipped.len());
            println!("KLD: {:.4}", report.mean.kld);
            println!("SIM: {:.4}", report.mean.sim);
            println!("NSS: {:.4}", report.mean.nss);
            println!("reports: {}", config.output.dir.display());
        }
        Command::Predict { common, checkpoint, image, affordance } => {
            let ck = load_checkpoint(checkpoint)?;
            let config = resolve(file, Some(&ck), common)?;
            let p = pipeline::predict(&config, &ck, image, affordance, &config.output.dir)?;
            pipeline::echo_config(&config, &config.output.dir)?;
            println!("heatmap: {}", p.heatmap_path.display());
            println!("overlay: {}", p.overlay_path.display());
        }
        Command::Fixture { out, setting, seed, unseen_overlap } => {
            let mut spec = FixtureSpec { seed: *seed, ..FixtureSpec::default() };
            if *unseen_overlap {
                spec.unseen_test_objects = vec![spec.objects[0].clone()];
            }
            let config_path = generate(out, &spec, *setting)?;
            println!("fixture: {}", out.join(setting.as_str()).display());
            println!("config: {}", config_path.display());
        }
        Command::Inspect { common, checkpoint, sample } => {
            let ck = load_checkpoint(checkpoint)?;
            let config = resolve(file, Some(&ck), common)?;
            let i = pipeline::inspect(&config, &ck, *sample, &config.output.dir)?;
            pipeline::echo_config(&config, &config.output.dir)?;
            println!("embeddings: {}", i.embeddings);
            println!("gamma: {:?}", i.gamma);
            match i.chosen_index {
                Some(k) => println!("chosen: {k}"),
                None => println!("chosen: none"),
            }
        }
    }
    Ok(())
}
