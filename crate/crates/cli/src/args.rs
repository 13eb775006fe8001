use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "orthocare", version, about = "Domain adaptation with orthogonal residuals on synthetic EHR data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file, or `default` for the built-in defaults.
    #[arg(long, default_value = "default")]
    pub config: PathBuf,
    /// Overrides the data and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source and target splits as JSONL.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides data.shift_strength.
        #[arg(long)]
        shift: Option<f64>,
    },
    /// Train one variant; writes model.ckpt, train_log.jsonl, config.toml.
    Train {
        #[command(flatten)]
        common: Common,
        /// full, no_rec_no_dcl, no_orth_no_dcl, euclidean_metric, no_dcl, base, or oracle.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        shift: Option<f64>,
        /// Seed sweep such as `0..5` or `1,4,9`; each seed writes to seed_N/.
        #[arg(long, conflicts_with = "seed")]
        seeds: Option<String>,
        /// Directory written by gen-data; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Target test metrics of the trained model(s) under --out; writes metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Recall cutoff.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Ablation report and plots for the trained model under --out.
    Interpret {
        #[command(flatten)]
        common: Common,
        /// Sparse dimensions ablated per patient.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Linear-probe diagnostics against a freshly trained unadapted model.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference checks of every training objective term.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Randomized property suites for the projection, metric, MMD, and gradients.
    VerifyMath {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `a..b` (half open) or a comma-separated list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("invalid --seeds {text:?}: expected `a..b` or `a,b,c`");
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(format!("--seeds {text:?} selects no seeds"));
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(format!("--seeds {text:?} repeats a seed"));
    }
    Ok(seeds)
}
