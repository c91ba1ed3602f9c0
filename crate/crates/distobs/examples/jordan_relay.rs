//! Condition-2 design on the scalar three-node example: node 1 measures the
//! state, nodes 2 and 3 only relay. The bank reaches the exact state at node 1
//! after one step and at the relays after two.

use std::path::Path;

use distobs::cli::Scenario;
use distobs::simkit::{simulate, Bank};
use distobs::synth_c1::PolesPolicy;
use distobs::synth_c2::design_c2;
use distobs::ToleranceConfig;
use nalgebra::DVector;

fn main() -> distobs::Result<()> {
    let sc = Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/illustrative.json"))?;
    let (p, g) = (sc.plant()?, sc.graph()?);
    let (bank, report) = design_c2(&p, &g, PolesPolicy::Deadbeat, 1, &ToleranceConfig::default())?;
    println!("observer dimensions {:?}, certified {}", bank.observer_dims(), report.certified);

    let est0 = vec![DVector::from_element(1, 3.0), DVector::from_element(1, -2.0), DVector::from_element(1, 0.5)];
    let trace = simulate(&p, &Bank::C2(bank), &DVector::from_element(1, 1.0), &est0, 4, None)?;
    for s in &trace.steps {
        println!("k={} x={:+.4} estimates {:?}", s.k, s.x[0], s.xhat.iter().map(|e| e[0]).collect::<Vec<_>>());
    }
    Ok(())
}
