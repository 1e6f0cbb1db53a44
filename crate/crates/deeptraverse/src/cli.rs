//! Argument parsing and dispatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deeptraverse_core::autograd::OpKind;

use crate::config::Overrides;
use crate::error::{AppError, Result};
use crate::run::{cmd_count, cmd_eval, cmd_gradcheck, cmd_train, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "deeptraverse", version, about = "Train, evaluate, measure and verify DeepTraverse networks")]
pub struct Cli {
    /// Worker threads; only 1 (the deterministic mode) is implemented.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train into a fresh run directory.
    Train(TrainCmd),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalCmd),
    /// Print parameter and FLOP counts.
    Count(CountCmd),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckCmd),
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; defaults to the config file's, then $DT_DATA_DIR.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory; must not exist yet.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub recursion: Option<usize>,
    /// Train on the first N training images only.
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Continue from a checkpoint; only --epochs and --data apply.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub test_subset: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CountCmd {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input size, `N` or `HxW`.
    #[arg(long, default_value = "32", value_parser = parse_resolution)]
    pub resolution: (usize, usize),
    #[arg(long)]
    pub recursion: Option<usize>,
    /// Also write the CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    Fp64,
    Fp32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    Relu,
    Conv,
    Norm,
    Sigmoid,
}

#[derive(Debug, Args)]
pub struct GradcheckCmd {
    /// Network checked end to end after the blocks and the tiny network (default DT-Tiny).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = deeptraverse_core::gradcheck::suite::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::Fp64)]
    pub precision: Precision,
    /// Break one backward rule on purpose.
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

pub fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().ok().filter(|&v| v > 0);
    let parsed = match s.split_once(['x', 'X']) {
        Some((h, w)) => parse(h).zip(parse(w)),
        None => parse(s).map(|v| (v, v)),
    };
    parsed.ok_or_else(|| format!("expected a positive size like 32 or 32x24, got {s:?}"))
}

fn execute(cli: Cli) -> Result<bool> {
    if cli.threads != 1 {
        return Err(AppError::Config(format!("--threads {}: only single-threaded execution is implemented", cli.threads)));
    }
    match cli.command {
        Command::Train(t) => {
            let args = TrainArgs {
                config: t.config,
                out: t.out,
                resume: t.resume,
                overrides: Overrides {
                    seed: t.seed,
                    epochs: t.epochs,
                    lr: t.lr,
                    batch_size: t.batch_size,
                    recursion: t.recursion,
                    data_dir: t.data,
                    train_subset: t.train_subset,
                },
            };
            let out = cmd_train(&args)?;
            println!("run directory: {}", out.run_dir.display());
            Ok(true)
        }
        Command::Eval(e) => {
            let r = cmd_eval(&e.checkpoint, e.data, e.test_subset)?;
            println!("images: {}", r.count);
            println!("top-1: {:.2}%", 100.0 * r.top1);
            println!("top-5: {:.2}%", 100.0 * r.top5);
            println!("loss: {:.6}", r.loss);
            println!("{}", r.result_line());
            Ok(true)
        }
        Command::Count(c) => {
            let overrides = Overrides { recursion: c.recursion, ..Default::default() };
            let table = cmd_count(c.config.as_deref(), &overrides, c.resolution)?;
            print!("{}\n{}", table.text, table.csv);
            if let Some(path) = c.csv {
                std::fs::write(&path, &table.csv).map_err(|e| AppError::io(&path, e))?;
            }
            Ok(true)
        }
        Command::Gradcheck(g) => {
            if g.precision == Precision::Fp32 {
                return Err(AppError::Config("gradient checks run in fp64 only; fp32 is refused".into()));
            }
            let fault = g.inject_fault.map(|f| match f {
                Fault::Relu => OpKind::Relu,
                Fault::Conv => OpKind::Conv,
                Fault::Norm => OpKind::NormInference,
                Fault::Sigmoid => OpKind::Sigmoid,
            });
            let out = cmd_gradcheck(g.config.as_deref(), g.seed, fault)?;
            for line in &out.lines {
                println!("{line}");
            }
            println!("{}", if out.passed { "all components within 1e-4" } else { "gradient check FAILED" });
            Ok(out.passed)
        }
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code:
/// 0 success, 1 failure, 2 usage or configuration error, 3 numerical abort.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolutions() {
        assert_eq!(parse_resolution("32"), Ok((32, 32)));
        assert_eq!(parse_resolution("28x24"), Ok((28, 24)));
        assert!(parse_resolution("0").is_err());
        assert!(parse_resolution("a").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
