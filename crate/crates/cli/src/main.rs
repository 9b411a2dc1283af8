use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dbc::bridge::EvalRule;
use dbc::props::Suite;
use dbc_cli::drift::DriftConfig;
use dbc_cli::manifest::{read_config, resolve_out};
use dbc_cli::mdp::{MdpChoice, MdpConfig};
use dbc_cli::{bias, drift, mdp, props, CliError, Result};

#[derive(Parser)]
#[command(name = "dbc", version, about = "Diffusion bridge critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory [default: $DBC_OUT_ROOT/<command> or runs/<command>]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Endpoint error of plain Euler stepping against the reference table.
    BiasTable {
        #[arg(long, default_value = "right", value_parser = parse_rule)]
        eval_rule: EvalRule,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Repeated Bellman drift of a bimodal law: bridge critic vs flow matching.
    ToyDrift {
        #[command(flatten)]
        common: Common,
        /// JSON config; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the initial fitting steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train on tabular MDPs against return oracles.
    TrainMdp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// bandit, chain, loop, suite, or a path to an MDP JSON file.
        #[arg(long, default_value = "suite")]
        mdp: String,
    },
    /// Run the invariant suites.
    Props {
        #[command(flatten)]
        common: Common,
        /// bridge, quantile, nn, critic or envs [default: all]
        #[arg(long, value_parser = parse_suite)]
        suite: Option<Suite>,
    },
}

fn parse_rule(s: &str) -> std::result::Result<EvalRule, String> {
    s.parse().map_err(|e: dbc::Error| e.to_string())
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: dbc::Error| e.to_string())
}

fn mismatch(what: &str, passed: bool) -> Result<()> {
    if passed {
        Ok(())
    } else {
        Err(CliError::Mismatch(format!("{what} did not meet its targets")))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BiasTable { eval_rule, out } => {
            let dir = resolve_out(out, "bias-table");
            let report = bias::run(eval_rule, &dir)?;
            let w = &report.worst;
            match report.matched {
                Some(m) => println!(
                    "bias-table ({}): {} — worst cell M={} {}: {:.4}% vs {:.2}%",
                    report.rule,
                    if m { "match" } else { "MISMATCH" },
                    w.steps,
                    w.schedule,
                    w.error,
                    w.reference
                ),
                None => println!("bias-table ({}): written without comparison", report.rule),
            }
            println!("output: {}", dir.display());
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Mismatch(format!(
                    "cell M={} {} deviates by {:.4} pp",
                    w.steps,
                    w.schedule,
                    w.deviation()
                )))
            }
        }
        Command::ToyDrift {
            common,
            config,
            steps,
        } => {
            let mut cfg: DriftConfig = read_config(config.as_deref())?;
            if let Some(n) = steps {
                cfg.task.initial_steps = n;
            }
            let dir = resolve_out(common.out, "toy-drift");
            let report = drift::run(&cfg, &common.seeds, &dir)?;
            for v in &report.seeds {
                println!(
                    "seed {}: dbc gap retention {:.3}, final gap dbc {:.4} vs flow {:.4}",
                    v.seed, v.dbc_retention, v.dbc_final_gap, v.flow_final_gap
                );
            }
            println!(
                "initial fit {}, retention {}, dbc wins {}/{}",
                report.initial_fit,
                report.retention_held,
                report.dbc_wins,
                report.seeds.len()
            );
            println!("output: {}", dir.display());
            mismatch("toy-drift", report.passed)
        }
        Command::TrainMdp {
            common,
            config,
            steps,
            mdp: which,
        } => {
            let mut cfg: MdpConfig = read_config(config.as_deref())?;
            if let Some(n) = steps {
                cfg.steps = n;
            }
            let choice = match which.parse::<MdpChoice>() {
                Ok(c) => c,
                Err(never) => match never {},
            };
            let dir = resolve_out(common.out, "train-mdp");
            let report = mdp::run(&choice, &cfg, &common.seeds, &dir)?;
            for p in &report.pairs {
                println!(
                    "{} (s={}, a={}): {}/{} seeds pass, W1/IQR {:?}, mean error {:?}",
                    p.mdp,
                    p.state,
                    p.action,
                    p.seeds_passed,
                    p.w1_ratio.len(),
                    p.w1_ratio.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
                    p.mean_error_ratio.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
                );
            }
            println!("output: {}", dir.display());
            mismatch("train-mdp", report.passed)
        }
        Command::Props { common, suite } => {
            let dir = resolve_out(common.out, "props");
            let report = props::run(suite, &common.seeds, &dir)?;
            let total: usize = report.runs.iter().map(|r| r.checks.len()).sum();
            println!("{} of {total} checks passed", total - report.failed.len());
            for f in &report.failed {
                println!("FAILED {f}");
            }
            println!("output: {}", dir.display());
            mismatch("props", report.passed)
        }
    }
}

/// Exit code for unusable command lines; 2 is reserved for mismatches.
const USAGE_EXIT: u8 = 4;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE_EXIT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
