//! Command-line front end: argument parsing, config merging and exit codes.
//!
//! Exit status is 0 on success, 1 for invalid input (bad arguments, config,
//! containers or parameters) and 2 when the filesystem fails.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::apps::concepts::PercentileMode;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(
    name = "neuronscope",
    version,
    about = "Second-order effects of ViT MLP neurons"
)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a random toy model with images, classes, a phrase pool and masks.
    GenToy,
    /// Run the model over the images and record activations.
    Trace,
    /// Compute second-order effects for the configured layers.
    Effects,
    /// Mean-ablate effects and report zero-shot accuracy per layer.
    Ablate,
    /// Fit one direction per neuron.
    Rank1,
    /// Sparse text decomposition of each direction.
    Decompose,
    /// Rank phrases that move predictions from `class_a` toward `class_b`.
    Spurious,
    /// Rank phrases describing each image.
    Discover,
    /// Heatmaps and masks from class-aligned neurons.
    Segment,
    /// Score segmentation masks against ground truth.
    Metrics,
}

/// Flags that override the config file.
#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true)]
    pub images: Option<PathBuf>,
    #[arg(long, global = true)]
    pub traces: Option<PathBuf>,
    #[arg(long, global = true)]
    pub effects: Option<PathBuf>,
    #[arg(long, global = true)]
    pub directions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub codes: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pool: Option<PathBuf>,
    #[arg(long, global = true)]
    pub classes: Option<PathBuf>,
    #[arg(long, global = true)]
    pub masks: Option<PathBuf>,

    /// Comma-separated layer indices.
    #[arg(long, global = true, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub m: Option<usize>,
    #[arg(long, global = true)]
    pub support_size: Option<usize>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub q: Option<usize>,
    #[arg(long, global = true)]
    pub threshold: Option<f32>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true)]
    pub top_q_storage: Option<usize>,
    /// Leave out the layer-norm offset shares of the effects.
    #[arg(long, global = true)]
    pub no_bias_shares: bool,
    /// Ablation mode: all, small_norm, large_norm_topQ, pc1_reconstruction,
    /// indirect or first_order_msa.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub percentile: Option<f64>,
    /// Share one activation threshold across the neurons of a layer.
    #[arg(long, global = true)]
    pub global_percentile: bool,
    #[arg(long, global = true)]
    pub discover_top: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub discover_images: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub spurious_top: Option<usize>,
    #[arg(long, global = true)]
    pub class_a: Option<String>,
    #[arg(long, global = true)]
    pub class_b: Option<String>,
    #[arg(long, global = true)]
    pub segment_k: Option<usize>,
    #[arg(long, global = true)]
    pub segment_class: Option<String>,
    #[arg(long, global = true)]
    pub toy_images: Option<usize>,
    #[arg(long, global = true)]
    pub toy_classes: Option<usize>,
    #[arg(long, global = true)]
    pub toy_pool: Option<usize>,
}

impl Overrides {
    pub fn apply(self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        macro_rules! set_opt {
            ($($f:ident),*) => { $( if self.$f.is_some() { cfg.$f = self.$f; } )* };
        }
        set!(
            out,
            layers,
            m,
            support_size,
            k,
            q,
            threshold,
            seed,
            percentile
        );
        set!(
            discover_top,
            discover_images,
            spurious_top,
            segment_k,
            toy_images,
            toy_classes,
            toy_pool
        );
        set_opt!(weights, images, traces, effects, directions, codes, pool, classes, masks);
        set_opt!(top_q_storage, class_a, class_b, segment_class);
        if let Some(mode) = self.mode {
            cfg.ablation_mode = mode;
        }
        if self.no_bias_shares {
            cfg.bias_shares = false;
        }
        if self.global_percentile {
            cfg.percentile_mode = PercentileMode::Global;
        }
    }
}

/// Config file (if any) with flag overrides applied, range-checked.
pub fn resolve_config(path: Option<&std::path::Path>, overrides: Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one stage with a resolved config.
pub fn run(command: Command, cfg: &RunConfig, force: bool) -> Result<()> {
    match command {
        Command::GenToy => pipeline::gen_toy(cfg, force),
        Command::Trace => pipeline::trace(cfg, force),
        Command::Effects => pipeline::effects(cfg, force),
        Command::Ablate => pipeline::ablate(cfg, force),
        Command::Rank1 => pipeline::rank1(cfg, force),
        Command::Decompose => pipeline::decompose(cfg, force),
        Command::Spurious => pipeline::spurious(cfg, force),
        Command::Discover => pipeline::discover(cfg, force),
        Command::Segment => pipeline::segment(cfg, force),
        Command::Metrics => pipeline::metrics(cfg, force),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        2
    } else {
        1
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code. Diagnostics go to standard error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve_config(cli.config.as_deref(), cli.overrides).and_then(|cfg| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(j) = cli.jobs {
            if j == 0 {
                return Err(Error::Config("--jobs must be positive".into()));
            }
            pool = pool.num_threads(j);
        }
        let pool = pool
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run(cli.command, &cfg, cli.force))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
