//! The `dfl` pipeline: argument handling, run directories and the
//! subcommands behind the binary.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::config::{RunConfig, KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] dfl_core::Error),
    #[error("{}: {}", .0.display(), .1)]
    Io(PathBuf, std::io::Error),
}

/// What a command printed and where it wrote.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub run_dir: Option<PathBuf>,
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn cli() -> Command {
    let mut cmd = Command::new("dfl")
        .about("Discriminative filter learning pipeline")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key = value configuration file; flags override it"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .global(true)
                .value_name("DIR")
                .default_value("runs")
                .help("parent directory for run directories"),
        )
        .arg(
            Arg::new("workers")
                .long("workers")
                .global(true)
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .help("worker threads (results do not depend on it)"),
        )
        .arg(
            Arg::new("no-init")
                .long("no-init")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("same as --init false"),
        )
        .arg(
            Arg::new("no-supervision")
                .long("no-supervision")
                .global(true)
                .action(ArgAction::SetTrue)
                .help("same as --supervision false"),
        );
    for (key, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .global(true)
                .value_name("VALUE")
                .help(*help),
        );
    }
    let checkpoint = || {
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("DIR")
            .required(true)
            .help("checkpoint directory (e.g. <run>/model)")
    };
    cmd.subcommand(Command::new("gen-data").about("Render the synthetic dataset to PPM files"))
        .subcommand(Command::new("init-filters").about("Initialize the filter bank by patch clustering"))
        .subcommand(Command::new("train").about("Initialize and train a model"))
        .subcommand(
            Command::new("eval")
                .about("Test accuracy per fusion setting")
                .arg(checkpoint()),
        )
        .subcommand(Command::new("ablate").about("Train and score the ablation grid"))
        .subcommand(
            Command::new("rf")
                .about("Receptive field of a tap point")
                .arg(
                    Arg::new("spec")
                        .long("spec")
                        .value_name("FILE")
                        .required(true)
                        .help("model spec file, or `tinynet` / `vgg16`"),
                )
                .arg(Arg::new("tap").long("tap").value_name("NAME").required(true).help("layer name in the spec, e.g. block3 or conv4_3")),
        )
        .subcommand(
            Command::new("viz")
                .about("Top patches, class profiles, energy shift and filter heatmaps")
                .arg(checkpoint())
                .arg(
                    Arg::new("before")
                        .long("before")
                        .value_name("DIR")
                        .help("checkpoint to compare energy against (default: sibling `initial`)"),
                ),
        )
}

/// Effective configuration: defaults, then `--config`, then flags.
pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        config.merge_file(&PathBuf::from(path))?;
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            config.set(key, v)?;
        }
    }
    if m.get_flag("no-init") {
        config.set("init", "false")?;
    }
    if m.get_flag("no-supervision") {
        config.set("supervision", "false")?;
    }
    Ok(config)
}

/// Parses `args` (without the program name) and runs the command.
pub fn run<I, S>(args: I) -> Result<Outcome, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let matches = match cli().try_get_matches_from(std::iter::once("dfl".to_string()).chain(args.iter().cloned())) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return Ok(Outcome {
                stdout: e.to_string(),
                run_dir: None,
            })
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("bad arguments").to_string();
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let workers = matches
        .subcommand()
        .and_then(|(_, sub)| sub.get_one::<usize>("workers").copied())
        .or_else(|| matches.get_one::<usize>("workers").copied())
        .unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| commands::dispatch(&matches, &args))
}
