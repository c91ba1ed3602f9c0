//! Link failures that respect the recurring-parent assumption: every node
//! hears from some parent in every window of T steps. Generates such a
//! signal, validates it, breaks it by hand and simulates the valid one.

use std::collections::BTreeSet;
use std::path::Path;

use distobs::cli::Scenario;
use distobs::simkit::{make_assumption2_signal, simulate, validate_assumption2, Bank, SwitchingSignal};
use distobs::synth_c1::{design_c1, C1Options};
use distobs::ToleranceConfig;

fn main() -> distobs::Result<()> {
    let sc = Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/sec8.json"))?;
    let (p, g) = (sc.plant()?, sc.graph()?);
    let opts = C1Options { max_parents: 2, ..C1Options::default() };
    let (bank, _) = design_c1(&p, &g, &opts, &ToleranceConfig::default())?;
    let bank = Bank::C1(bank);
    let layers = bank.parent_layers();

    let (t, k) = (4, 200);
    let signal = make_assumption2_signal(&layers, &g, t, k, 0.5, 2024)?;
    let dropped = (0..k).filter(|&s| signal.active(s).map(|e| e.len() < g.edges().len()).unwrap_or(false)).count();
    println!("{dropped}/{k} steps with failed links, violation: {:?}", validate_assumption2(&signal, &layers, t)?);

    // Cut every link into node 3 for two whole windows.
    let full = g.edges().clone();
    let cut: BTreeSet<(usize, usize)> = full.iter().copied().filter(|e| e.1 != 3).collect();
    let schedule: Vec<usize> = (0..40).map(|s| usize::from((8..16).contains(&s))).collect();
    let bad = SwitchingSignal::new(&g, vec![full, cut], schedule, t)?;
    println!("hand-built signal violation: {:?}", validate_assumption2(&bad, &layers, t)?);

    let trace = simulate(&p, &bank, &sc.x0()?, &sc.est0()?, k, Some(&signal))?;
    for s in trace.steps.iter().step_by(25) {
        println!("k={:>3}  max relative error {:.2e}", s.k, s.relerr.iter().copied().fold(0.0, f64::max));
    }
    Ok(())
}
