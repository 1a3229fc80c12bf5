//! Command-line flags. Every flag is optional so that a config file can
//! supply it; unset flags leave the file or default value in place.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{set, set_list, OutputFormat, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dcpl", version, about = "Numerical checks of small cap decoupling and wave envelope estimates on the parabola")]
pub struct Cli {
    /// JSON config file; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output path (stdout when absent).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Output format [default: json].
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
    /// Seed of every random family and sampler [default: 7].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid oversampling: M = sigma * R nodes per side [default: 4].
    #[arg(long, global = true)]
    pub sigma: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scale ladder for R.
    Ladder(Scale),
    /// Caps of one ladder level, or the small caps for beta.
    Caps(CapsArgs),
    /// Bump decay fit and tile partition-of-unity checks.
    CutoffSelftest(Scale),
    /// Synthesizes a family on the grid.
    Synth(SynthArgs),
    /// Runs the pruning cascade and its invariant checks.
    Prune(PruneArgs),
    /// Lemma checks at one pruning.
    Verify(VerifyArgs),
    /// Both sides of the wave envelope estimate over an amplitude grid.
    Envelope(EnvelopeArgs),
    /// Empirical small cap decoupling constants.
    Decouple(DecoupleArgs),
    /// The full acceptance battery; writes a summary JSON.
    Suite(SuiteArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ladder(_) => "ladder",
            Command::Caps(_) => "caps",
            Command::CutoffSelftest(_) => "cutoff-selftest",
            Command::Synth(_) => "synth",
            Command::Prune(_) => "prune",
            Command::Verify(_) => "verify",
            Command::Envelope(_) => "envelope",
            Command::Decouple(_) => "decouple",
            Command::Suite(_) => "suite",
        }
    }
}

#[derive(Debug, Args)]
pub struct Scale {
    /// Frequency scale R, a power of two >= 256 [default: 256].
    #[arg(long = "R")]
    pub r: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ScaleList {
    /// Comma-separated list of R.
    #[arg(long = "R-list", value_delimiter = ',')]
    pub r_list: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct Family {
    /// Family name(s): flat, random_phase, single_cap, block, gaussian [default: random_phase].
    #[arg(long, value_delimiter = ',')]
    pub family: Vec<String>,
    /// Small cap exponent in [1/2, 1] [default: 0.5].
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Amplitude {
    /// Amplitude(s) alpha.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    /// Picks alpha at this quantile of the finest gauge ratios when no alpha is given [default: 0.5].
    #[arg(long)]
    pub alpha_quantile: Option<f64>,
    /// Pruning constant C_p [default: 1e4].
    #[arg(long)]
    pub cp: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CapsArgs {
    #[command(flatten)]
    pub scale: Scale,
    /// Ladder level [default: 1].
    #[arg(long)]
    pub level: Option<usize>,
    /// List the small caps for this beta instead of a ladder level.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scale: Scale,
    #[command(flatten)]
    pub family: Family,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub scale: Scale,
    #[command(flatten)]
    pub family: Family,
    #[command(flatten)]
    pub amplitude: Amplitude,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub prune: PruneArgs,
    /// Near-relation constant [default: 1].
    #[arg(long)]
    pub kappa_near: Option<f64>,
    /// Near constant of the broad/narrow dichotomy [default: 1].
    #[arg(long)]
    pub kappa_dichotomy: Option<f64>,
    /// Constants of the weak high-domination checks [default: 10].
    #[arg(long)]
    pub kappa_domination: Option<f64>,
    /// Sampled grid nodes for the dichotomy scan [default: 10000].
    #[arg(long)]
    pub nodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EnvelopeArgs {
    #[command(flatten)]
    pub scales: ScaleList,
    #[command(flatten)]
    pub family: Family,
    #[command(flatten)]
    pub amplitude: Amplitude,
    /// Random phase redraws at each alpha, keeping the largest ratio.
    #[arg(long)]
    pub perturb: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecoupleArgs {
    #[command(flatten)]
    pub scales: ScaleList,
    #[command(flatten)]
    pub family: Family,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    /// Largest R of the scans [default: 256].
    #[arg(long = "R")]
    pub r: Option<u64>,
}

impl Scale {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.r, self.r);
    }
}

impl Family {
    fn apply(&self, cfg: &mut RunConfig) {
        set_list(&mut cfg.families, &self.family);
        set(&mut cfg.beta, self.beta);
    }
}

impl Amplitude {
    fn apply(&self, cfg: &mut RunConfig) {
        set_list(&mut cfg.alpha, &self.alpha);
        set(&mut cfg.alpha_quantile, self.alpha_quantile);
        set(&mut cfg.cp, self.cp);
    }
}

impl PruneArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        self.scale.apply(cfg);
        self.family.apply(cfg);
        self.amplitude.apply(cfg);
    }
}

impl Cli {
    /// Defaults, then the config file, then the flags.
    pub fn resolve(&self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.subcommand = self.command.name().to_string();
        if self.output.is_some() {
            cfg.output = self.output.clone();
        }
        set(&mut cfg.format, self.format);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.sigma, self.sigma);
        match &self.command {
            Command::Ladder(s) | Command::CutoffSelftest(s) => s.apply(&mut cfg),
            Command::Caps(a) => {
                a.scale.apply(&mut cfg);
                set(&mut cfg.level, a.level);
                if a.beta.is_some() {
                    cfg.small_caps = true;
                }
                set(&mut cfg.beta, a.beta);
            }
            Command::Synth(a) => {
                a.scale.apply(&mut cfg);
                a.family.apply(&mut cfg);
            }
            Command::Prune(a) => a.apply(&mut cfg),
            Command::Verify(a) => {
                a.prune.apply(&mut cfg);
                set(&mut cfg.kappa_near, a.kappa_near);
                set(&mut cfg.kappa_dichotomy, a.kappa_dichotomy);
                set(&mut cfg.kappa_domination, a.kappa_domination);
                set(&mut cfg.nodes, a.nodes);
            }
            Command::Envelope(a) => {
                set_list(&mut cfg.r_list, &a.scales.r_list);
                a.family.apply(&mut cfg);
                a.amplitude.apply(&mut cfg);
                set(&mut cfg.perturb, a.perturb);
            }
            Command::Decouple(a) => {
                set_list(&mut cfg.r_list, &a.scales.r_list);
                a.family.apply(&mut cfg);
                set(&mut cfg.p, a.p);
                set(&mut cfg.q, a.q);
            }
            Command::Suite(a) => set(&mut cfg.r, a.r),
        }
        Ok(cfg)
    }
}
