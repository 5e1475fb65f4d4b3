use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stsl_cli::commands::{self, RunOptions};
use stsl_cli::config::{load_config, ConfigError};
use stsl_cli::verify;
use stsl_core::samplers::Variant;
use stsl_core::synthetic::TaskFamily;

#[derive(Parser)]
#[command(name = "stsl", version, about = "Second-order Tweedie posterior sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run oracle property suites and print a pass/fail table.
    Verify {
        /// Comma-separated suite names (default: all).
        #[arg(long)]
        suite: Option<String>,
    },
    /// Reconstruct the configured task once per seed.
    Invert(RunArgs),
    /// Compare stsl, stsl-biased and first-order over seeds and task families.
    BiasStudy {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated task families (inpaint, blur, downsample, salt-pepper).
        #[arg(long, value_delimiter = ',', value_parser = parse_task)]
        tasks: Option<Vec<TaskFamily>>,
    },
    /// Invert, then edit towards the configured target embedding.
    Edit(RunArgs),
    /// Draw unconditional samples from the prior.
    Sample(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (default: the bundled configuration).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds overriding the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Sampler variant (stsl, stsl-biased, first-order, unconditional).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Output directory overriding `[output] dir`.
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Record wall-clock times in reports (also enabled by STSL_TIMING=1).
    #[arg(long)]
    timing: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant '{s}'"))
}

fn parse_task(s: &str) -> Result<TaskFamily, String> {
    TaskFamily::parse(s).ok_or_else(|| format!("unknown task family '{s}'"))
}

impl RunArgs {
    fn options(&self, tasks: Option<Vec<TaskFamily>>) -> RunOptions {
        let env_timing = std::env::var("STSL_TIMING").is_ok_and(|v| !v.is_empty() && v != "0");
        RunOptions {
            seeds: self.seed.clone(),
            variant: self.variant,
            tasks,
            outdir: self.outdir.clone(),
            timing: self.timing || env_timing,
        }
    }
}

fn configure_threads() {
    let Ok(value) = std::env::var("STSL_THREADS") else {
        return;
    };
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size the worker pool: {e}");
            }
        }
        _ => log::warn!("ignoring STSL_THREADS={value:?}; expected a positive integer"),
    }
}

fn run_command(args: &RunArgs, tasks: Option<Vec<TaskFamily>>, which: &Command) -> anyhow::Result<()> {
    let loaded = load_config(args.config.as_deref())?;
    let opts = args.options(tasks);
    match which {
        Command::Invert(_) => {
            for row in commands::invert(&loaded, &opts)? {
                println!("{} seed {} mse {:.6e} psnr {:.3}", row.run_id, row.seed, row.mse.unwrap_or(f64::NAN), row.psnr.unwrap_or(f64::NAN));
            }
        }
        Command::BiasStudy { .. } => {
            let summary = commands::bias_study(&loaded, &opts)?;
            for c in &summary.comparisons {
                println!(
                    "{:<12} {} - {}: mean {:+.4e} CI [{:+.4e}, {:+.4e}] ordering {}",
                    c.task.name(),
                    c.worse.name(),
                    c.better.name(),
                    c.interval.mean,
                    c.interval.low,
                    c.interval.high,
                    if c.ordering_holds { "holds" } else { "not established" }
                );
            }
        }
        Command::Edit(_) => {
            for row in commands::edit(&loaded, &opts)? {
                println!("{} seed {} mse {:.6e}", row.run_id, row.seed, row.mse.unwrap_or(f64::NAN));
            }
        }
        Command::Sample(_) => {
            for (row, check) in commands::sample(&loaded, &opts)? {
                match check {
                    Some(c) => println!(
                        "{} seed {} moment check {} (max mean z {:.2})",
                        row.run_id,
                        row.seed,
                        if c.pass { "pass" } else { "fail" },
                        c.max_mean_z
                    ),
                    None => println!("{} seed {}", row.run_id, row.seed),
                }
            }
        }
        Command::Verify { .. } => unreachable!("verify is handled separately"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    configure_threads();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Verify { suite } => {
            let suites = match verify::parse_suites(suite.as_deref()) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let checks = verify::run_suites(&suites);
            print!("{}", verify::render_table(&checks));
            return if verify::all_passed(&checks) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
        Command::Invert(args) | Command::Edit(args) | Command::Sample(args) => run_command(args, None, &cli.command),
        Command::BiasStudy { run, tasks } => run_command(run, tasks.clone(), &cli.command),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
