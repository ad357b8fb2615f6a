//! `headkv` command-line driver.

/// `println!` that ignores a closed stdout (e.g. piping into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::ProfileArgs;
use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

const EXIT_CODES: &str = "Exit codes: 0 success, 1 output failure, 2 config error, \
3 input-format error, 4 infeasible budget. Errors are printed to standard error as one JSON \
line with keys error, exit_code and message.";

const COMPARE_COLUMNS: &str = "Outputs in --out:
  comparison.json  full table (rows and pairwise deltas)
  comparison.csv   policy,budget_ceiling,mean_recall,min_recall,mean_decode_recall,
                   peak_gpu_entries,total_bytes,retrieval_events,exposed_transfer_steps
  deltas.csv       a,b,mean_recall_delta,mean_decode_recall_delta,min_recall_delta,
                   peak_gpu_entries_delta,total_bytes_delta   (each delta is a - b)

Recall is the fraction of recorded top-K attention mass that is cache-resident, an
accuracy proxy. Rows are sorted by policy name; all reports must come from the same
trace and, except full_oracle, carry the same budget ceiling.";

const SIMULATE_OUTPUTS: &str = "Outputs in --out:
  taxonomy.json, budget_plan.json
  report_<policy>.json  full report: per-step records, retrieval events, summary
  steps_<policy>.csv    step,policy,recall,gpu_entries,bytes_in_flight,retrieval_flag,
                        protected_entries,decode_entries,cumulative_bytes
  events_<policy>.csv   trigger_step,pivot_layer,pivot_head,cluster_id,satellites,
                        fetched_entries,bytes,completion_step,exposed_steps

Without --trace the config's synthetic spec is generated in memory. Without --taxonomy
heads are profiled on calibration_traces from the config, or on the simulated trace.";

#[derive(Parser, Debug)]
#[command(name = "headkv", version, about = "Head-level KV-cache profiling and simulation over attention traces", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trace plus a ground-truth role file from the config's spec.
    #[command(after_help = "Writes <out> (or <out>/trace.hctr) and <stem>.truth.json beside it.")]
    GenTrace {
        #[command(flatten)]
        flags: Overrides,
    },
    /// Profile heads and assign roles.
    #[command(
        after_help = "Outputs in --out: taxonomy.json, role_counts.csv (role,heads), \
        and with --layer-similarity, layer_similarity.csv (layer,to_layer_0,...)."
    )]
    Profile {
        #[command(flatten)]
        flags: Overrides,
        /// Also write the layer-by-layer similarity matrix at this step of the first trace.
        #[arg(long, value_name = "STEP")]
        layer_similarity: Option<usize>,
        /// Ground-truth file from gen-trace; prints how many roles agree.
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
    },
    /// Size each compressed head's cache from a taxonomy.
    #[command(after_help = "Outputs in --out: budget_plan.json.")]
    Plan {
        #[command(flatten)]
        flags: Overrides,
        #[arg(long, value_name = "PATH")]
        taxonomy: PathBuf,
        /// Prefill length; read from the first --trace when omitted.
        #[arg(long)]
        prefill_len: Option<usize>,
    },
    /// Run the cache engine and baselines over one trace.
    #[command(after_help = SIMULATE_OUTPUTS)]
    Simulate {
        #[command(flatten)]
        flags: Overrides,
        #[arg(long, value_name = "PATH")]
        taxonomy: Option<PathBuf>,
    },
    /// Compare simulation reports of the same trace.
    #[command(after_help = COMPARE_COLUMNS)]
    Compare {
        #[command(flatten)]
        flags: Overrides,
        /// report_<policy>.json files written by simulate.
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let done = match cli.command {
        Command::GenTrace { flags } => commands::gen_trace(&RunConfig::load(&flags)?),
        Command::Profile {
            flags,
            layer_similarity,
            truth,
        } => commands::profile(
            &RunConfig::load(&flags)?,
            &ProfileArgs {
                layer_similarity_step: layer_similarity,
                truth,
            },
        ),
        Command::Plan {
            flags,
            taxonomy,
            prefill_len,
        } => commands::plan(&RunConfig::load(&flags)?, &taxonomy, prefill_len),
        Command::Simulate { flags, taxonomy } => {
            commands::simulate(&RunConfig::load(&flags)?, taxonomy.as_deref())
        }
        Command::Compare { flags, reports } => {
            commands::compare_reports(&RunConfig::load(&flags)?, &reports)
        }
    };
    Ok(done?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let classified = match e.downcast::<CliError>() {
                Ok(cli) => cli,
                Err(other) => CliError::Output(format!("{:#}", other)),
            };
            eprintln!("{}", classified.to_json());
            ExitCode::from(classified.exit_code())
        }
    }
}
