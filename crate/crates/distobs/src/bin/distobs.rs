use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use distobs::cli::{self, DesignOutput, Scenario, Scheme};
use distobs::{Error, Result, ToleranceConfig};

#[derive(Parser)]
#[command(name = "distobs", version, about = "Distributed observer design for LTI plants over sensor networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TolArgs {
    /// Relative singular-value cutoff for rank decisions.
    #[arg(long)]
    tol_rank: Option<f64>,
    /// Eigenvalue clustering distance and unstable-boundary slack.
    #[arg(long)]
    tol_eig: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    C1,
    C2,
    Auto,
}

#[derive(Subcommand)]
enum Command {
    /// Report detectability, root nodes and the Condition 1 / Condition 2 verdicts.
    Check {
        scenario: PathBuf,
        #[command(flatten)]
        tol: TolArgs,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize and certify an observer bank.
    Design {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        scheme: SchemeArg,
        /// Sensor order for the decomposition, e.g. 2,1,3.
        #[arg(long, value_delimiter = ',')]
        order: Option<Vec<usize>>,
        #[command(flatten)]
        tol: TolArgs,
        /// Bank file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a designed bank on the scenario's plant.
    Simulate {
        scenario: PathBuf,
        bank: PathBuf,
        /// Trace CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Convergence summary JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Overrides the switching seed of the scenario.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn tolerances(sc: &Scenario, t: &TolArgs) -> Result<ToleranceConfig> {
    let mut tol = sc.options.tol;
    if let Some(v) = t.tol_rank {
        tol.rank_tol = v;
    }
    if let Some(v) = t.tol_eig {
        tol.eig_cluster_tol = v;
    }
    tol.validate().map_err(|e| Error::Schema(e.to_string()))?;
    Ok(tol)
}

fn write_file(path: &PathBuf, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Check { scenario, tol, out } => {
            let sc = Scenario::load(&scenario)?;
            let tol = tolerances(&sc, &tol)?;
            let rep = cli::check(&sc, &tol)?;
            print!("{rep}");
            if let Some(path) = out {
                write_file(&path, &serde_json::to_string_pretty(&rep).expect("report serializes"))?;
            }
            Ok(0)
        }
        Command::Design { scenario, scheme, order, tol, out } => {
            let mut sc = Scenario::load(&scenario)?;
            let tol = tolerances(&sc, &tol)?;
            if order.is_some() {
                sc.options.order = order;
            }
            let scheme = match scheme {
                SchemeArg::C1 => Scheme::C1,
                SchemeArg::C2 => Scheme::C2,
                SchemeArg::Auto => Scheme::Auto,
            };
            let d = cli::design(&sc, scheme, &tol)?;
            eprintln!(
                "scheme {}, max spectral radius {:.3e}, certified {}",
                d.observer.scheme(),
                d.stability.max_rho(),
                d.certified
            );
            match out {
                Some(path) => write_file(&path, &d.to_json())?,
                None => println!("{}", d.to_json()),
            }
            Ok(if d.certified { 0 } else { 4 })
        }
        Command::Simulate { scenario, bank, out, summary, seed } => {
            let sc = Scenario::load(&scenario)?;
            let d = DesignOutput::load(&bank)?;
            let trace = cli::run_simulation(&sc, &d, seed)?;
            match out {
                Some(path) => {
                    let f = File::create(&path).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
                    cli::write_trace_csv(&trace, BufWriter::new(f))?;
                }
                None => cli::write_trace_csv(&trace, io::stdout().lock())?,
            }
            let s = cli::summarize(&trace, d.observer.scheme());
            for m in &s.nodes {
                eprintln!(
                    "node {}: final relative error {:.3e}, below {:e} from step {}",
                    m.node,
                    m.final_rel_error,
                    s.eps,
                    m.first_step_below.map(|k| k.to_string()).unwrap_or_else(|| "never".into())
                );
            }
            if let Some(path) = summary {
                write_file(&path, &serde_json::to_string_pretty(&s).expect("summary serializes"))?;
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DISTOBS_LOG")).init();
    let args = Cli::parse();
    match run(args.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
