//! `protocap` command-line interface.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use protocap::Error;

use commands::TreeFormat;
use config::{default_keys, keys_help, RunConfig};

#[derive(Parser)]
#[command(name = "protocap", version, about = "Prototype-tree image captioning experiments")]
struct Cli {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the word vocabulary from the training captions.
    BuildVocab,
    /// Cluster concept embeddings into the prototype tree.
    BuildTree,
    /// Cross-entropy training stage.
    TrainXe,
    /// Self-critical training stage, starting from the XE checkpoint.
    TrainRl,
    /// Decode the validation split and score it.
    Eval,
    /// Decode the validation split and write the captions.
    Generate {
        /// Also write head-averaged cross-attention grids for every word.
        #[arg(long)]
        attention_dump: bool,
    },
    /// Print or export the prototype tree.
    InspectTree {
        #[arg(long, value_enum, default_value = "text")]
        format: TreeFormat,
        /// Write here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the toy captioning dataset, concept list and embeddings.
    GenSynthetic,
}

/// Pulls `--<config key> <value>` and `--<config key>=<value>` out of
/// `args`, leaving everything else for clap.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Error> {
    let keys = default_keys();
    let is_key = |k: &str| keys.iter().any(|(key, _)| key == k);
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !is_key(&key) {
            if key.contains('.') {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), Error> {
    let cfg = RunConfig::load(cli.config.as_deref(), overrides)?;
    let m = match cli.command {
        Command::BuildVocab => commands::build_vocab(&cfg)?,
        Command::BuildTree => commands::build_tree_cmd(&cfg)?,
        Command::TrainXe => commands::train_xe(&cfg)?,
        Command::TrainRl => commands::train_rl(&cfg)?,
        Command::Eval => commands::eval(&cfg)?,
        Command::Generate { attention_dump } => commands::generate(&cfg, attention_dump)?,
        Command::InspectTree { format, output } => commands::inspect_tree(&cfg, format, output.as_deref())?,
        Command::GenSynthetic => commands::gen_synthetic(&cfg)?,
    };
    let path = m.write(&cfg.out_dir)?;
    eprintln!("manifest: {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let help = keys_help();
    let mut cmd = Cli::command().after_help(help.clone());
    for name in cmd.get_subcommands().map(|s| s.get_name().to_string()).collect::<Vec<_>>() {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, |s| s.after_help(h));
    }
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
