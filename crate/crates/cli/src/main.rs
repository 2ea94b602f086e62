//! `shiftdiag`: command-line front end.
//!
//! Inputs are UTF-8 CSV files with a header row and an analysis spec in JSON:
//!
//! ```json
//! {
//!   "outcome_columns": ["y"],
//!   "treatment_column": "t",
//!   "regression_template": "ancova",
//!   "regressors": ["age"],
//!   "covariate_moments": [{"column": "age", "moment": "mean_and_second_moment"}],
//!   "mediator_moments": [{"column": "m", "moment": "one_hot", "levels": ["0", "1"]}],
//!   "selection": {"alpha0": 0.05, "se": "jackknife"},
//!   "ci_level": 0.9
//! }
//! ```
//!
//! `fixtures/example_spec.json` is a complete instance. The result document
//! holds `metadata`, `observed`, `effects`, `decomposition` (rows of `name`,
//! `estimate`, `se`, `ci_lo`, `ci_hi`), `adjusted` when a selection threshold
//! is set, `balance` diagnostics and `warnings`.
//!
//! Exit codes: 0 success, 2 invalid input, 3 infeasible or singular
//! numerics, 4 selection adjustment failed (including an absent selection
//! event). `SHIFTDIAG_THREADS` caps the worker threads.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use shiftdiag_core::report::weights_csv;
use shiftdiag_core::simulate::coverage::run_coverage_methods;
use shiftdiag_core::simulate::oracle::{TruthTable, ORACLE_SEED, ORACLE_SIZE};
use shiftdiag_core::simulate::{DgpConfig, Family, Method, Setting};
use shiftdiag_core::stylized::{example_pair, example_spec, Example};
use shiftdiag_core::{
    analyze, load_dataset, parallel, AnalysisSpec, AnalyzeOptions, Error, ErrorKind, ResultDocument, Role,
};
use shiftdiag_service::ServiceConfig;

#[derive(Parser)]
#[command(
    name = "shiftdiag",
    version,
    about = "Decompose replication discrepancies into sampling variability, covariate shift, mediation shift and residual"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose the discrepancy between an original study and its replication.
    Decompose {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        replication: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Significance level at which the original was selected.
        #[arg(long)]
        selection_alpha0: Option<f64>,
        /// Confidence level; overrides the spec.
        #[arg(long)]
        level: Option<f64>,
        /// Recorded in the metadata.
        #[arg(long)]
        seed: Option<u64>,
        /// Result document path; standard output if absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Balancing weights on the replication units as CSV.
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Run a coverage experiment.
    Simulate(SimulateArgs),
    /// Bar-chart data of a result document as CSV.
    Plotdata {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the stylized example fixtures and their golden documents.
    Fixture {
        #[arg(long, default_value = "fixtures")]
        dir: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Recompute the large-sample truth table of the simulation settings.
    Oracle {
        #[arg(long, default_value_t = ORACLE_SIZE)]
        n: usize,
        #[arg(long, default_value_t = ORACLE_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API (and the console bundle, if given).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
        #[arg(long, default_value_t = 3600)]
        idle_secs: u64,
        #[arg(long, default_value_t = 50)]
        max_upload_mb: usize,
    },
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    setting: Setting,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Signal scale of the selection settings.
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    /// standard, power, selected_unadjusted, selected_adjusted, or a
    /// comma-separated list sharing the same replicates.
    #[arg(long, value_delimiter = ',', default_value = "standard")]
    method: Vec<Method>,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.9)]
    level: f64,
    /// Report path; `.csv` selects CSV, anything else JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Numerical | ErrorKind::Simulation => 3,
        ErrorKind::SelectionAbsent | ErrorKind::Adjustment => 4,
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| Error::Io { path: p.to_path_buf(), source }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| Error::Io { path: PathBuf::from("<stdout>"), source }),
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn read_spec(path: &Path) -> Result<AnalysisSpec, Error> {
    AnalysisSpec::from_json(&read_text(path)?)
}

fn decompose_files(
    original: &Path,
    replication: &Path,
    spec: &AnalysisSpec,
    options: &AnalyzeOptions,
) -> Result<ResultDocument, Error> {
    let d1 = load_dataset(original, spec, Role::Original)?;
    let d2 = load_dataset(replication, spec, Role::Replication)?;
    analyze(&d1, &d2, spec, options)
}

fn simulate(args: SimulateArgs) -> Result<(), Error> {
    let SimulateArgs { setting, sigma, nu, method: methods, reps, seed, level, out } = args;
    let out = out.as_deref();
    if methods.is_empty() || reps == 0 {
        return Err(Error::InvalidArgument("need at least one method and one replicate".into()));
    }
    let selected = methods.iter().any(|m| matches!(m, Method::SelectedUnadjusted | Method::SelectedAdjusted));
    let mut config = if selected {
        if setting.family != Family::Sel {
            return Err(Error::InvalidArgument(format!("selected methods need a sel_* setting, got `{setting}`")));
        }
        DgpConfig::selected(setting.variant, nu, seed)
    } else if methods.contains(&Method::PowerCalculated) {
        DgpConfig::power_calculated(setting, sigma, seed)
    } else {
        DgpConfig::standard(setting, sigma, seed)
    };
    if setting.family == Family::Sel {
        config.nu = nu;
    } else {
        config.sigma = sigma;
    }
    config.validate()?;
    let reports = run_coverage_methods(&config, &methods, reps, level)?;
    let csv = out.is_some_and(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")));
    let text = if csv {
        let mut s = String::from(shiftdiag_core::simulate::CoverageReport::CSV_HEADER);
        s.push('\n');
        for r in &reports {
            for row in r.csv_rows() {
                s.push_str(&row);
                s.push('\n');
            }
        }
        s
    } else if let [single] = reports.as_slice() {
        single.to_json()
    } else {
        let docs: Vec<String> = reports.iter().map(|r| r.to_json().trim_end().to_string()).collect();
        format!("[\n{}\n]\n", docs.join(",\n"))
    };
    write_output(out, &text)
}

/// Write the fixture CSVs, the spec and golden documents produced from the
/// written files.
fn fixture(dir: &Path, n: usize, seed: u64) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let spec = example_spec();
    let spec_path = dir.join("example_spec.json");
    write_output(Some(&spec_path), &(spec.to_json() + "\n"))?;
    for (tag, example) in [("example1", Example::ObservedShift), ("example2", Example::HiddenModerator)] {
        let (d1, d2) = example_pair(example, n, seed)?;
        let p1 = dir.join(format!("{tag}_original.csv"));
        let p2 = dir.join(format!("{tag}_replication.csv"));
        write_output(Some(&p1), &d1.to_csv(&spec))?;
        write_output(Some(&p2), &d2.to_csv(&spec))?;
        let doc = decompose_files(&p1, &p2, &read_spec(&spec_path)?, &AnalyzeOptions::default())?;
        write_output(Some(&dir.join(format!("{tag}_result.json"))), &doc.to_json())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    parallel::init_from_env()?;
    match cli.command {
        Command::Decompose { original, replication, spec, selection_alpha0, level, seed, out, weights_out } => {
            let spec = read_spec(&spec)?;
            let options = AnalyzeOptions { level, selection_alpha0, seed };
            let d1 = load_dataset(&original, &spec, Role::Original)?;
            let d2 = load_dataset(&replication, &spec, Role::Replication)?;
            let doc = analyze(&d1, &d2, &spec, &options)?;
            for w in &doc.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(path) = weights_out {
                write_output(Some(&path), &weights_csv(&d1, &d2, &spec)?)?;
            }
            write_output(out.as_deref(), &doc.to_json())
        }
        Command::Simulate(args) => simulate(args),
        Command::Plotdata { input, out } => {
            let doc = ResultDocument::from_json(&read_text(&input)?)?;
            write_output(out.as_deref(), &doc.plot_csv())
        }
        Command::Fixture { dir, n, seed } => fixture(&dir, n, seed),
        Command::Oracle { n, seed, out } => write_output(out.as_deref(), &TruthTable::compute(n, seed).to_json()),
        Command::Serve { addr, static_dir, timeout_secs, idle_secs, max_upload_mb } => {
            let mut config = ServiceConfig { static_dir, ..ServiceConfig::default() };
            config.request_timeout = Duration::from_secs(timeout_secs);
            config.store.idle_timeout = Duration::from_secs(idle_secs);
            config.max_upload_bytes = max_upload_mb * 1024 * 1024;
            let runtime = tokio::runtime::Runtime::new()
                .map_err(|source| Error::Io { path: PathBuf::from("<runtime>"), source })?;
            runtime
                .block_on(shiftdiag_service::serve(addr, config))
                .map_err(|source| Error::Io { path: PathBuf::from(addr.to_string()), source })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
