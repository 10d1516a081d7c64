use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use dds_core::pipeline::{self, load_snapshot, ErrorCategory, PipelineConfig, PipelineError, RunOptions};
use dds_core::report::{domain_shift, plot_jsonl, plot_rows, summarize};
use dds_core::scorer::{serve, MockBackend, MockConfig};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_UNREACHABLE: u8 = 3;
const EXIT_EMPTY: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "dds", version, about = "Model-driven data selection: quality filter, difficulty band, k-center coverage")]
struct Cli {
    /// TOML config file; unset fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config field, e.g. `--set selection.k=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,

    /// Same as `--set cache_dir=PATH`.
    #[arg(long, global = true, value_name = "PATH")]
    cache_dir: Option<String>,

    /// Same as `--set concurrency=N`.
    #[arg(long, global = true, value_name = "N")]
    concurrency: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full selection and write the manifest.
    Run,
    /// Re-select for each sigma window [sigma-25, sigma+25], scoring once.
    Sweep {
        #[arg(value_name = "SIGMA", value_delimiter = ',')]
        sigmas: Vec<f64>,
    },
    /// Compute and cache difficulties without selecting.
    Score {
        /// Score this file as-is instead of the Stage-1 survivors of the corpus.
        #[arg(long, value_name = "PATH")]
        probe: Option<PathBuf>,
        #[arg(long, default_value = "snapshot")]
        label: String,
    },
    /// Compare two difficulty snapshots of the same samples.
    Report {
        before: PathBuf,
        after: PathBuf,
        /// Write plot rows (x = d1, y = d3, one line per sample and snapshot).
        #[arg(long, value_name = "PATH")]
        plot: Option<PathBuf>,
    },
    /// Serve a mock backend over the scoring protocol until killed.
    MockServe {
        mock: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8731")]
        addr: String,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match e.category() {
            ErrorCategory::Config => EXIT_CONFIG,
            ErrorCategory::BackendUnreachable => EXIT_UNREACHABLE,
            ErrorCategory::EmptySelection => EXIT_EMPTY,
            ErrorCategory::Other => EXIT_OTHER,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure { code, message: message.to_string() }
}

fn config_help() -> String {
    let docs = PipelineConfig::field_docs();
    let width = docs.iter().map(|d| d.path.len()).max().unwrap_or(0);
    let mut out = String::from("Config fields (set in --config or with --set PATH=VALUE):\n");
    for d in docs {
        out.push_str(&format!("  {:width$}  {}  [default: {}]\n", d.path, d.help, d.default));
    }
    out.push_str(
        "\nDDS_BACKEND_URL overrides `backend`; --set wins over everything.\n\
         Exit codes: 0 ok, 1 other failure, 2 config, 3 backend unreachable, 4 empty selection.",
    );
    out
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut overrides = Vec::new();
    if let Ok(url) = std::env::var("DDS_BACKEND_URL") {
        overrides.push(format!("backend={url}"));
    }
    if let Some(dir) = &cli.cache_dir {
        overrides.push(format!("cache_dir={dir}"));
    }
    if let Some(n) = cli.concurrency {
        overrides.push(format!("concurrency={n}"));
    }
    overrides.extend(cli.overrides.iter().cloned());
    PipelineConfig::load(cli.config.as_deref(), &overrides).map_err(|e| fail(EXIT_CONFIG, e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| fail(EXIT_OTHER, format!("cannot write {}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let options = RunOptions::default();
    match &cli.command {
        Command::Run => {
            let config = load_config(&cli)?;
            let report = pipeline::run(&config, &options)?;
            println!("{}", report.manifest_path.display());
        }
        Command::Sweep { sigmas } => {
            let config = load_config(&cli)?;
            let report = pipeline::sweep(&config, sigmas, &options)?;
            println!("{:>7} {:>6} {:>6} {:>8} {:>8}  manifest", "sigma", "p_low", "p_high", "s_mid", "final");
            for row in &report.table {
                println!(
                    "{:>7} {:>6} {:>6} {:>8} {:>8}  {}",
                    row.sigma, row.p_low, row.p_high, row.s_mid, row.final_count, row.manifest_hash
                );
            }
            println!("{}", Path::new(&config.output_dir).join(pipeline::SWEEP_FILE).display());
        }
        Command::Score { probe, label } => {
            let config = load_config(&cli)?;
            let report = pipeline::score(&config, probe.as_deref(), label, &options)?;
            println!("{}", report.snapshot_path.display());
        }
        Command::Report { before, after, plot } => {
            let b = load_snapshot(before)?;
            let a = load_snapshot(after)?;
            let shift = domain_shift(&b, &a).map_err(|e| fail(EXIT_CONFIG, e))?;
            let out = serde_json::json!({
                "shift": shift,
                "before_summary": summarize(&b).map_err(|e| fail(EXIT_CONFIG, e))?,
                "after_summary": summarize(&a).map_err(|e| fail(EXIT_CONFIG, e))?,
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
            if let Some(path) = plot {
                write(path, &plot_jsonl(&plot_rows(&b, &a)))?;
            }
        }
        Command::MockServe { mock, addr } => {
            let config = MockConfig::load(mock).map_err(|e| fail(EXIT_CONFIG, e))?;
            let backend = MockBackend::new(config).map_err(|e| fail(EXIT_CONFIG, e))?;
            let server = serve(Arc::new(backend), addr).map_err(|e| fail(EXIT_OTHER, format!("cannot bind {addr}: {e}")))?;
            println!("{}", server.base_url());
            server.join().map_err(|e| fail(EXIT_OTHER, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let help = config_help();
    let matches = Cli::command().after_long_help(help.clone()).after_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
