//! The scenario-file workflow behind the command-line tool: check, design with
//! automatic scheme choice, serialize the bank, reload it, simulate and write
//! the trace as CSV.

use std::path::Path;

use distobs::cli::{check, design, run_simulation, summarize, write_trace_csv, DesignOutput, Scenario, Scheme};
use distobs::ToleranceConfig;

fn main() -> distobs::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/sec8_switching.json");
    let sc = Scenario::load(&path)?;
    let tol = ToleranceConfig::default();
    println!("scenario hash {}", sc.hash());
    print!("{}", check(&sc, &tol)?);

    let out = design(&sc, Scheme::Auto, &tol)?;
    println!("scheme {}, certified {}", out.observer.scheme(), out.certified);
    let reloaded = DesignOutput::from_json(&out.to_json())?;

    let trace = run_simulation(&sc, &reloaded, None)?;
    let summary = summarize(&trace, reloaded.observer.scheme());
    for m in &summary.nodes {
        println!("node {}: final relative error {:.2e}", m.node, m.final_rel_error);
    }

    let mut csv = Vec::new();
    write_trace_csv(&trace, &mut csv)?;
    let text = String::from_utf8_lossy(&csv);
    println!("trace: {} rows, header {}", text.lines().count() - 1, text.lines().next().unwrap_or(""));
    Ok(())
}
