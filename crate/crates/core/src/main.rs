use std::io::BufRead;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qralign::config::{RunConfig, Stage, CONFIG_ENV};
use qralign::pipeline;
use qralign::Result;

#[derive(Parser)]
#[command(name = "qralign", version, about = "Query rewriting with relevance tagging over a synthetic search engine")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Dotted override such as `sft.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set run_dir=PATH`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the catalog, click logs and all datasets.
    GenData,
    /// Train the configured stages, or only the one named.
    Train {
        #[arg(value_parser = parse_stage)]
        stage: Option<Stage>,
    },
    /// Evaluate every trained checkpoint.
    Eval,
    /// Sweep beam size or rewrite number.
    Sweep {
        /// `beam-size` or `rewrite-number`; overrides `sweep.axis`.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; overrides `sweep.values`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Serve rewrites for the given queries, or one per stdin line.
    Serve { queries: Vec<String> },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    [Stage::Sft, Stage::SftSingle, Stage::Grpo, Stage::Dpo]
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| format!("unknown stage {s:?}; expected sft, sft-single, grpo or dpo"))
}

fn load_config(common: &Common, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(dir) = &common.run_dir {
        overrides.push(format!("run_dir={:?}", dir.to_string_lossy()));
    }
    overrides.extend(extra);
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    let verbose = cli.common.verbose;
    match cli.command {
        Command::GenData => pipeline::cmd_gen_data(load_config(&cli.common, vec![])?, verbose).map(drop),
        Command::Train { stage } => {
            let stages: Vec<Stage> = stage.into_iter().collect();
            pipeline::cmd_train(load_config(&cli.common, vec![])?, &stages, verbose)
        }
        Command::Eval => pipeline::cmd_eval(load_config(&cli.common, vec![])?, verbose).map(drop),
        Command::Sweep { axis, values } => {
            let mut extra = Vec::new();
            if let Some(a) = axis {
                extra.push(format!("sweep.axis={:?}", a.replace('_', "-")));
            }
            if !values.is_empty() {
                extra.push(format!("sweep.values={values:?}"));
            }
            pipeline::cmd_sweep(load_config(&cli.common, extra)?, verbose).map(drop)
        }
        Command::Serve { queries } => {
            let config = load_config(&cli.common, vec![])?;
            let queries = if queries.is_empty() {
                std::io::stdin()
                    .lock()
                    .lines()
                    .map(|l| l.map_err(|e| qralign::Error::InvalidArgument(format!("stdin: {e}"))))
                    .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
                    .collect::<Result<Vec<_>>>()?
            } else {
                queries
            };
            pipeline::cmd_serve(config, &queries, verbose).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qralign: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
