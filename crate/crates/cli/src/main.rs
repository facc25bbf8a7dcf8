use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use compete_cli::{run, RunError, RunOptions, ScenarioConfig};

/// Exit status when `--strict` is set and a verdict failed.
const EXIT_VERDICT: u8 = 3;

#[derive(Parser)]
#[command(name = "compete", version, about = "Equilibria of competitive portfolio games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the analyses described by a scenario file.
    Run {
        config: PathBuf,
        /// Output directory for the reports.
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        /// Overrides the seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Exit with a nonzero status when any verdict fails.
        #[arg(long)]
        strict: bool,
        /// Also write sample market paths and BSDE summaries.
        #[arg(long)]
        dump_paths: bool,
    },
}

fn execute(config: PathBuf, out: PathBuf, seed: Option<u64>, dump_paths: bool) -> Result<compete_cli::Bundle, RunError> {
    let cfg = ScenarioConfig::from_path(&config)?;
    let bundle = run(&cfg, &RunOptions { seed, dump_paths })?;
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    for path in bundle.write(&out, now)? {
        println!("wrote {}", path.display());
    }
    Ok(bundle)
}

fn main() -> ExitCode {
    let Command::Run { config, out, seed, strict, dump_paths } = Cli::parse().command;
    match execute(config, out, seed, dump_paths) {
        Ok(bundle) => {
            for v in &bundle.verdicts {
                println!("{} {}", if v.passed { "PASS" } else { "FAIL" }, v.name);
            }
            if strict && !bundle.all_passed() {
                ExitCode::from(EXIT_VERDICT)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
