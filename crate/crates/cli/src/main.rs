//! `metaprompter` binary: thin clap front-end over the runner.
//!
//! Exit codes: 0 success, 1 user error (bad flags, bad config, missing
//! files), 2 numeric failure (non-finite values, degenerate vectors).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use metaprompter_cli::config::resolve_config;
use metaprompter_cli::runner::{self, AnalysisOp, SweepAxis, ALL_ANALYSIS_OPS};

#[derive(Parser)]
#[command(
    name = "metaprompter",
    version,
    about = "Meta-learned prompt pools over a frozen toy encoder: corpus generation, pretraining, meta-training, sweeps and analysis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config file; a manifest.json from a previous run also works.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for artifacts (relative paths live under
    /// $METAPROMPTER_RUN_ROOT, default ".").
    #[arg(long)]
    out: PathBuf,
    /// Dotted-path config overrides, e.g. --pool.k=16 --adapt.lambda=0.5
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic topic corpus as JSONL.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the masked-token encoder on a corpus and freeze it.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Meta-train a prompt pool with episodic inner/outer loops.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Evaluate a pool checkpoint on unseen-class test episodes.
    MetaTest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        pool: PathBuf,
    },
    /// Train and test across an axis of pool sizes or prompt lengths.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values, e.g. 1,2,4,8
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Comma-separated meta-training seeds shared by every value.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Read-only analysis exports from a pool checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Subset of exports to produce (default: all).
        #[arg(long, value_enum, value_delimiter = ',')]
        ops: Vec<OpArg>,
        /// Episodes to average for class attention.
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Tokens per prompt in the nearest-token table.
        #[arg(long, default_value_t = 10)]
        top_m: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    K,
    PromptLen,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> SweepAxis {
        match a {
            AxisArg::K => SweepAxis::K,
            AxisArg::PromptLen => SweepAxis::PromptLen,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OpArg {
    ClassAttention,
    NearestTokens,
    TopicSimilarity,
    Embeddings,
}

impl From<OpArg> for AnalysisOp {
    fn from(o: OpArg) -> AnalysisOp {
        match o {
            OpArg::ClassAttention => AnalysisOp::ClassAttention,
            OpArg::NearestTokens => AnalysisOp::NearestTokens,
            OpArg::TopicSimilarity => AnalysisOp::TopicSimilarity,
            OpArg::Embeddings => AnalysisOp::Embeddings,
        }
    }
}

fn run(cli: Cli) -> metaprompter_core::Result<()> {
    match cli.cmd {
        Cmd::GenCorpus { common } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides)?;
            runner::cmd_gen_corpus(&cfg, &runner::resolve_run_dir(&common.out))
        }
        Cmd::Pretrain { common, corpus } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides)?;
            runner::cmd_pretrain(&cfg, &corpus, &runner::resolve_run_dir(&common.out))
        }
        Cmd::MetaTrain { common, corpus, encoder } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides)?;
            runner::cmd_meta_train(&cfg, &corpus, &encoder, &runner::resolve_run_dir(&common.out))
        }
        Cmd::MetaTest { common, corpus, encoder, pool } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides)?;
            runner::cmd_meta_test(
                &cfg,
                &corpus,
                &encoder,
                &pool,
                &runner::resolve_run_dir(&common.out),
            )
        }
        Cmd::Sweep { common, corpus, encoder, axis, values, seeds } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides)?;
            runner::cmd_sweep(
                &cfg,
                &corpus,
                &encoder,
                axis.into(),
                &values,
                &seeds,
                &runner::resolve_run_dir(&common.out),
            )
        }
        Cmd::Analyze { common, corpus, encoder, pool, ops, episodes, top_m } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides)?;
            let ops: Vec<AnalysisOp> = if ops.is_empty() {
                ALL_ANALYSIS_OPS.to_vec()
            } else {
                ops.into_iter().map(Into::into).collect()
            };
            runner::cmd_analyze(
                &cfg,
                &corpus,
                &encoder,
                &pool,
                &ops,
                episodes,
                top_m,
                &runner::resolve_run_dir(&common.out),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
