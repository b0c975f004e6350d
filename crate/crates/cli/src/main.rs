use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use dqsgd::config::{defaults_table, parse_config, render_errors, ExperimentSpec, Format, Mode, SeedRange, VerifyTarget};
use dqsgd::experiment::{emit_summary, entry_dir, run_experiment, Outcome};
use dqsgd::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_VERIFY_FAILED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dqsgd", version, about = "Dynamically quantized distributed SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Experiment config; every key is optional.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long, value_name = "DIR", default_value = "dqsgd-out")]
    out: PathBuf,
    /// Single master seed (same as --seeds N..N+1).
    #[arg(long, value_name = "N", conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Half-open seed range.
    #[arg(long, value_name = "N..M", value_parser = parse_seeds)]
    seeds: Option<SeedRange>,
    /// Trace formats to write.
    #[arg(long, value_delimiter = ',', value_name = "csv,json")]
    format: Option<Vec<FormatArg>>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum TargetArg {
    Lemma1,
    Theorem1,
    Theorem3,
    Theorem2,
    Schedule,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured schedule once per seed.
    Run(Common),
    /// Paired comparison of the dynamic schedule against a fixed width.
    Compare(Common),
    /// One run per swept width or schedule kind.
    Sweep(Common),
    /// Run a self-contained verification suite.
    Verify {
        #[arg(value_enum)]
        target: TargetArg,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_seeds(s: &str) -> Result<SeedRange, String> {
    SeedRange::parse(s).ok_or_else(|| format!("expected N..M with N < M, got `{s}`"))
}

fn build_spec(mode: Mode, target: Option<TargetArg>, common: &Common) -> Result<(ExperimentSpec, String), String> {
    let text = match &common.config {
        Some(path) => fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?,
        None => String::new(),
    };
    let mut spec = parse_config(&text).map_err(|errs| {
        let origin = common.config.as_deref().map_or("<defaults>".into(), |p| p.display().to_string());
        render_errors(&errs).lines().map(|l| format!("{origin}:{l}\n")).collect::<String>()
    })?;
    spec.mode = mode;
    if let Some(t) = target {
        spec.verify.target = match t {
            TargetArg::Lemma1 => VerifyTarget::Lemma1,
            TargetArg::Theorem1 => VerifyTarget::Theorem1,
            TargetArg::Theorem3 => VerifyTarget::Theorem3,
            TargetArg::Theorem2 => VerifyTarget::Theorem2,
            TargetArg::Schedule => VerifyTarget::Schedule,
        };
    }
    if let Some(seed) = common.seed {
        spec.seeds = SeedRange::single(seed);
    }
    if let Some(seeds) = common.seeds {
        spec.seeds = seeds;
    }
    spec.run.seed = spec.seeds.start;
    if let Some(f) = &common.format {
        spec.formats = f
            .iter()
            .map(|f| match f {
                FormatArg::Csv => Format::Csv,
                FormatArg::Json => Format::Json,
            })
            .collect();
        spec.formats.dedup();
    }
    Ok((spec, text))
}

fn execute(spec: &ExperimentSpec, text: &str, out: &Path) -> ExitCode {
    match run_experiment(spec, text, out) {
        Ok(Outcome::Verified(report)) => {
            print!("{}", report.render());
            println!("{} in {:.1} s", if report.passed() { "passed" } else { "FAILED" }, report.elapsed_secs);
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY_FAILED)
            }
        }
        Ok(Outcome::Runs { summary, comparison }) => {
            print!("{}", emit_summary(&summary));
            if let Some(c) = comparison {
                println!(
                    "dynamic vs {}: loss {:.6e} vs {:.6e}, bits {:.0} vs {:.0} ({:.1}% saved), reaches loss: {}, fewer bits: {}",
                    c.baseline.schedule,
                    c.dynamic.final_loss.mean,
                    c.baseline.final_loss.mean,
                    c.dynamic.cum_bits.mean,
                    c.baseline.cum_bits.mean,
                    100.0 * c.bit_saving,
                    c.reaches_baseline_loss,
                    c.fewer_bits
                );
            }
            ExitCode::SUCCESS
        }
        Err(Error::Diverged { iteration, loss, trace }) => {
            let seed = spec.seeds.iter().next().unwrap_or(0);
            eprintln!("error: {} diverged at iteration {iteration} (loss {loss:e})", trace.schedule);
            eprintln!("diagnostic trace under {}", entry_dir(out, &trace.schedule, seed).parent().unwrap().display());
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_long_help(format!("Config keys and defaults:\n{}", defaults_table()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (mode, target, common) = match &cli.command {
        Command::Run(c) => (Mode::Run, None, c),
        Command::Compare(c) => (Mode::Compare, None, c),
        Command::Sweep(c) => (Mode::Sweep, None, c),
        Command::Verify { target, common } => (Mode::Verify, Some(*target), common),
    };
    match build_spec(mode, target, common) {
        Ok((spec, text)) => execute(&spec, &text, &common.out),
        Err(msg) => {
            eprint!("{msg}");
            if !msg.ends_with('\n') {
                eprintln!();
            }
            ExitCode::from(EXIT_USAGE)
        }
    }
}
