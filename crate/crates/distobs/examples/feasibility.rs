//! Feasibility analysis of the two-sensor-group network with A = 2I.
//!
//! Nodes 1 and 2 each measure one coordinate and talk to each other; node 3
//! measures both but is isolated. Every source component can detect the
//! unstable mode collectively, but {1,2} has no single node that detects it,
//! so only the decomposition-based scheme is feasible.

use std::path::Path;

use distobs::cli::Scenario;
use distobs::conditions::{detectable_set, feasibility_report};
use distobs::ToleranceConfig;

fn main() -> distobs::Result<()> {
    let sc = Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/remark1.json"))?;
    let (p, g) = (sc.plant()?, sc.graph()?);
    let tol = ToleranceConfig::default();

    for i in 1..=p.n_nodes() {
        let det = detectable_set(&p.a, p.c_of(i), &tol)?;
        println!("node {i} detects {det:?}");
    }

    let rep = feasibility_report(&p, &g, &tol)?;
    println!("source components: {:?}", rep.source_comps);
    for rs in &rep.root_sets {
        println!("root nodes of {:?}: {:?}", rs.lambda, rs.nodes);
    }
    println!("condition 1 holds: {}", rep.cond1.holds);
    println!("condition 2 holds: {}", rep.cond2.holds);
    for d in rep.diagnostics() {
        println!("  {d}");
    }
    Ok(())
}
