use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cbdc_sim::harness::{self, config, report, script};

/// Environment variable that overrides the output directory.
const OUT_ENV: &str = "CBDC_SIM_OUT";

#[derive(Parser)]
#[command(name = "cbdc-sim", version, about = "Deterministic retail CBDC ecosystem simulator and invariant auditor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, audit it and write the log and report.
    Run {
        /// Config file, or `preset:<option1|option2|option3|option4|mixed>`.
        #[arg(long)]
        config: String,
        /// Scenario file, or `builtin:<laura|bob|limits>`.
        #[arg(long)]
        scenario: String,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory. `CBDC_SIM_OUT` takes precedence.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-audit a stored event log.
    Audit {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        config: String,
        #[arg(long, default_value = "text")]
        format: report::Format,
    },
    /// Render a stored JSON report.
    Report {
        #[arg(long, default_value = "text")]
        format: report::Format,
        /// Defaults to `report.json` in the output directory.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn verdict(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn out_dir(flag: PathBuf) -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or(flag)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            scenario,
            seed,
            out,
        } => {
            let mut cfg = match config::load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    for f in e.fields() {
                        eprintln!("  {f}");
                    }
                    return config_error(e);
                }
            };
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let scenario = match script::load_scenario(&scenario) {
                Ok(s) => s,
                Err(e) => return config_error(e),
            };
            let output = harness::run(&cfg, &scenario);
            let dir = out_dir(out);
            if let Err(e) = output.write(&dir) {
                return config_error(format!("cannot write {}: {e}", dir.display()));
            }
            print!("{}", report::text(&output.report));
            println!("wrote {}", dir.display());
            verdict(output.report.passed)
        }
        Command::Audit { log, config, format } => {
            let cfg = match config::load_config(&config) {
                Ok(c) => c,
                Err(e) => return config_error(e),
            };
            let text = match std::fs::read_to_string(&log) {
                Ok(t) => t,
                Err(e) => return config_error(format!("cannot read {}: {e}", log.display())),
            };
            match harness::audit_stored(&text, &cfg) {
                Ok(r) => {
                    print!("{}", report::emit(&r, format));
                    verdict(r.passed)
                }
                Err(e) => config_error(e),
            }
        }
        Command::Report { format, input } => {
            let path = input.unwrap_or_else(|| out_dir(PathBuf::from("out")).join("report.json"));
            let text = match std::fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) => return config_error(format!("cannot read {}: {e}", path.display())),
            };
            match report::parse_json(&text) {
                Ok(r) => {
                    print!("{}", report::emit(&r, format));
                    verdict(r.passed)
                }
                Err(e) => config_error(format!("invalid report {}: {e}", path.display())),
            }
        }
    }
}
