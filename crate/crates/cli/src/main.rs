//! `hds`: generate data, train, evaluate, predict and self-verify.

mod eval;
mod gen;
mod manifest;
mod train;
mod verify;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "hds", version, about = "Hybrid deep supervision for mass classification and segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG pairs plus manifest.csv).
    GenData(gen::GenArgs),
    /// Train a model and write a checkpoint directory.
    Train(train::TrainArgs),
    /// Whole-image evaluation of a checkpoint on one split.
    Eval(eval::EvalArgs),
    /// Mask and mass probability for one image.
    Predict(eval::PredictArgs),
    /// Gradient, shape, loss and metric self-checks.
    Verify(verify::VerifyArgs),
}

/// A problem with the user's input, as opposed to a failure while running.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Exit status: 1 for bad input, 2 for runtime failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    use hds_core::Error as E;
    if e.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match e.downcast_ref::<E>() {
        Some(E::Config { .. } | E::Data(_) | E::Fingerprint { .. } | E::Toml(_) | E::Shape { .. } | E::Format(_)) => 1,
        _ => 2,
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Weights {
    Best,
    Last,
}

/// Output directory flags shared by every writing command.
#[derive(Args, Debug)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

impl OutArgs {
    pub fn prepare(&self) -> anyhow::Result<&Path> {
        if self.out.is_file() {
            return Err(invalid(format!("{} is a file", self.out.display())));
        }
        if !self.force && self.out.is_dir() && fs::read_dir(&self.out)?.next().is_some() {
            return Err(invalid(format!("{} is not empty (pass --force to write into it)", self.out.display())));
        }
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Eval(a) => eval::run_eval(&a),
        Command::Predict(a) => eval::run_predict(&a),
        Command::Verify(a) => verify::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&invalid("x")), 1);
        assert_eq!(exit_code(&hds_core::Error::Data("x".into()).into()), 1);
        let cfg: anyhow::Error = hds_core::Error::Config { field: "lr0".into(), reason: "x".into() }.into();
        assert_eq!(exit_code(&cfg.context("loading config")), 1);
        assert_eq!(exit_code(&hds_core::Error::NonFinite("x".into()).into()), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 2);
    }
}
