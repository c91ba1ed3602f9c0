//! Scenario files, the check/design/simulate pipeline behind the `distobs`
//! binary, and the JSON/CSV output formats.
//!
//! Scenario and bank files are JSON with a top-level `format_version`.
//! Matrices inside scenarios are row-major nested arrays; a sensor with no
//! outputs is written as `[]`. Matrices inside bank files are objects
//! `{"shape": [rows, cols], "rows": [[...], ...]}`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditions::{feasibility_report, FeasibilityReport};
use crate::decomp::Plant;
use crate::error::{Error, Result};
use crate::netgraph::Digraph;
use crate::numkit::{from_rows, Mat, ToleranceConfig};
use crate::simkit::{convergence_metrics, make_assumption2_signal, simulate, Bank, NodeMetrics, SimulationTrace, SwitchingSignal};
use crate::synth_c1::{design_c1, C1Options, GivenDesign, PolesPolicy, StabilityReport, StackedWeight};
use crate::synth_c2::{design_c2, C2StabilityReport};

pub const FORMAT_VERSION: u32 = 1;

/// Relative-error threshold used by the summary's `first_step_below`.
pub const SUMMARY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub a: Vec<Vec<f64>>,
    /// One matrix per node.
    pub c: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GivenSpec {
    pub order: Vec<usize>,
    pub t: Vec<Vec<f64>>,
    pub o: Vec<usize>,
    pub gains: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<StackedWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptionsSpec {
    pub order: Option<Vec<usize>>,
    pub poles: PolesPolicy,
    pub max_parents: usize,
    pub tol: ToleranceConfig,
    pub given: Option<GivenSpec>,
}

impl Default for OptionsSpec {
    fn default() -> Self {
        Self { order: None, poles: PolesPolicy::Deadbeat, max_parents: 1, tol: ToleranceConfig::default(), given: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SwitchingSpec {
    Random { window: usize, drop_prob: f64, seed: u64 },
    Explicit { window: usize, modes: Vec<Vec<(usize, usize)>>, schedule: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub x0: Vec<f64>,
    /// Initial estimate per node; zeros when absent.
    #[serde(default)]
    pub est0: Option<Vec<Vec<f64>>>,
    pub steps: usize,
    #[serde(default)]
    pub switching: Option<SwitchingSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub plant: PlantSpec,
    pub graph: GraphSpec,
    #[serde(default)]
    pub options: OptionsSpec,
    #[serde(default)]
    pub simulation: Option<SimulationSpec>,
}

fn mat(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<Mat> {
    from_rows(rows, ncols).map_err(|e| Error::Schema(format!("{what}: {e}")))
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Schema(format!("format_version {v} is not supported (expected {FORMAT_VERSION})")));
    }
    Ok(())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        check_version(sc.format_version)?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("scenario serializes");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }

    pub fn n(&self) -> usize {
        self.plant.a.len()
    }

    pub fn plant(&self) -> Result<Plant> {
        let n = self.n();
        let a = mat(&self.plant.a, n, "plant.a")?;
        let c = self
            .plant
            .c
            .iter()
            .enumerate()
            .map(|(i, rows)| mat(rows, n, &format!("plant.c[{}]", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        Plant::new(a, c).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn graph(&self) -> Result<Digraph> {
        if self.graph.nodes != self.plant.c.len() {
            return Err(Error::Schema(format!(
                "graph has {} nodes but the plant lists {} sensors",
                self.graph.nodes,
                self.plant.c.len()
            )));
        }
        Digraph::new(self.graph.nodes, self.graph.edges.iter().copied()).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn given_design(&self) -> Result<Option<GivenDesign>> {
        let Some(gs) = &self.options.given else { return Ok(None) };
        let n = self.n();
        let gains = gs
            .gains
            .iter()
            .enumerate()
            .map(|(k, rows)| {
                let ncols = rows.first().map(|r| r.len()).unwrap_or_else(|| {
                    gs.order.get(k).and_then(|&i| self.plant.c.get(i - 1)).map(|c| c.len()).unwrap_or(0)
                });
                mat(rows, ncols, "options.given.gains")
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(GivenDesign {
            order: gs.order.clone(),
            t: mat(&gs.t, n, "options.given.t")?,
            o: gs.o.clone(),
            gains,
            weights: gs.weights.clone(),
        }))
    }

    pub fn c1_options(&self) -> Result<C1Options> {
        Ok(C1Options {
            order: self.options.order.clone(),
            poles: self.options.poles,
            max_parents: self.options.max_parents,
            given: self.given_design()?,
        })
    }

    pub fn simulation(&self) -> Result<&SimulationSpec> {
        self.simulation.as_ref().ok_or_else(|| Error::Schema("scenario has no simulation section".into()))
    }

    pub fn x0(&self) -> Result<DVector<f64>> {
        let s = self.simulation()?;
        if s.x0.len() != self.n() {
            return Err(Error::Schema(format!("x0 has {} entries, expected {}", s.x0.len(), self.n())));
        }
        Ok(DVector::from_vec(s.x0.clone()))
    }

    pub fn est0(&self) -> Result<Vec<DVector<f64>>> {
        let s = self.simulation()?;
        let n = self.n();
        match &s.est0 {
            None => Ok(vec![DVector::zeros(n); self.graph.nodes]),
            Some(e) => {
                if e.len() != self.graph.nodes || e.iter().any(|v| v.len() != n) {
                    return Err(Error::Schema(format!("est0 must list {} vectors of length {n}", self.graph.nodes)));
                }
                Ok(e.iter().map(|v| DVector::from_vec(v.clone())).collect())
            }
        }
    }

    /// Switching signal for the given bank; `seed` overrides the scenario's.
    pub fn signal(&self, bank: &Bank, seed: Option<u64>) -> Result<Option<SwitchingSignal>> {
        let s = self.simulation()?;
        let g = self.graph()?;
        match &s.switching {
            None => Ok(None),
            Some(SwitchingSpec::Random { window, drop_prob, seed: s0 }) => Ok(Some(make_assumption2_signal(
                &bank.parent_layers(),
                &g,
                *window,
                s.steps,
                *drop_prob,
                seed.unwrap_or(*s0),
            )?)),
            Some(SwitchingSpec::Explicit { window, modes, schedule }) => {
                let modes = modes.iter().map(|m| m.iter().copied().collect::<BTreeSet<_>>()).collect();
                Ok(Some(SwitchingSignal::new(&g, modes, schedule.clone(), *window)?))
            }
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self.simulation.as_ref()?.switching.as_ref()? {
            SwitchingSpec::Random { seed, .. } => Some(*seed),
            SwitchingSpec::Explicit { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    C1,
    C2,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", content = "report", rename_all = "snake_case")]
pub enum DesignReport {
    C1(StabilityReport),
    C2(C2StabilityReport),
}

impl DesignReport {
    pub fn certified(&self) -> bool {
        match self {
            DesignReport::C1(r) => r.certified,
            DesignReport::C2(r) => r.certified,
        }
    }

    pub fn max_rho(&self) -> f64 {
        match self {
            DesignReport::C1(r) => r.max_rho(),
            DesignReport::C2(r) => r.max_rho(),
        }
    }
}

/// Contents of a bank file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutput {
    pub format_version: u32,
    pub scenario_hash: String,
    pub certified: bool,
    pub observer: Bank,
    pub stability: DesignReport,
}

impl DesignOutput {
    pub fn from_json(text: &str) -> Result<Self> {
        let d: DesignOutput = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        check_version(d.format_version)?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }
}

/// Feasibility analysis of a scenario.
pub fn check(sc: &Scenario, tol: &ToleranceConfig) -> Result<FeasibilityReport> {
    feasibility_report(&sc.plant()?, &sc.graph()?, tol)
}

/// Designs a bank. `Auto` picks the Jordan-form scheme when Condition 2 holds
/// and the decomposition scheme when only Condition 1 holds.
pub fn design(sc: &Scenario, scheme: Scheme, tol: &ToleranceConfig) -> Result<DesignOutput> {
    let p = sc.plant()?;
    let g = sc.graph()?;
    let scheme = match scheme {
        Scheme::Auto => {
            let rep = feasibility_report(&p, &g, tol)?;
            if rep.cond2.holds && sc.options.given.is_none() {
                Scheme::C2
            } else if rep.cond1.holds {
                Scheme::C1
            } else {
                return Err(Error::Condition1Infeasible(rep.diagnostics().cloned().collect::<Vec<_>>().join("; ")));
            }
        }
        s => s,
    };
    let (observer, stability) = match scheme {
        Scheme::C2 => {
            let (b, r) = design_c2(&p, &g, sc.options.poles, sc.options.max_parents, tol)?;
            (Bank::C2(b), DesignReport::C2(r))
        }
        _ => {
            let (b, r) = design_c1(&p, &g, &sc.c1_options()?, tol)?;
            (Bank::C1(b), DesignReport::C1(r))
        }
    };
    log::info!("{} design, max spectral radius {:e}", observer.scheme(), stability.max_rho());
    Ok(DesignOutput {
        format_version: FORMAT_VERSION,
        scenario_hash: sc.hash(),
        certified: stability.certified(),
        observer,
        stability,
    })
}

/// Simulates the scenario with a designed bank.
pub fn run_simulation(sc: &Scenario, out: &DesignOutput, seed: Option<u64>) -> Result<SimulationTrace> {
    let p = sc.plant()?;
    let s = sc.simulation()?;
    let signal = sc.signal(&out.observer, seed)?;
    let mut trace = simulate(&p, &out.observer, &sc.x0()?, &sc.est0()?, s.steps, signal.as_ref())?;
    trace.seed = seed.or_else(|| sc.seed());
    trace.scenario_hash = Some(sc.hash());
    Ok(trace)
}

/// Writes the trace as CSV: step, mode, x_1..x_n, then per node
/// xhat_i_1..xhat_i_n, err_i, relerr_i. `mode` is empty for static runs.
pub fn write_trace_csv<W: Write>(trace: &SimulationTrace, w: W) -> Result<()> {
    let io = |e: csv::Error| Error::Schema(format!("writing trace: {e}"));
    let mut wr = csv::Writer::from_writer(w);
    let Some(first) = trace.steps.first() else { return Ok(()) };
    let n = first.x.len();
    let mut header = vec!["step".to_string(), "mode".to_string()];
    header.extend((1..=n).map(|j| format!("x_{j}")));
    for i in 1..=first.xhat.len() {
        header.extend((1..=n).map(|j| format!("xhat_{i}_{j}")));
        header.push(format!("err_{i}"));
        header.push(format!("relerr_{i}"));
    }
    wr.write_record(&header).map_err(io)?;
    for s in &trace.steps {
        let mut row = vec![s.k.to_string(), s.mode.map(|m| m.to_string()).unwrap_or_default()];
        row.extend(s.x.iter().map(|v| format!("{v:e}")));
        for (i, xh) in s.xhat.iter().enumerate() {
            row.extend(xh.iter().map(|v| format!("{v:e}")));
            row.push(format!("{:e}", s.err[i]));
            row.push(format!("{:e}", s.relerr[i]));
        }
        wr.write_record(&row).map_err(io)?;
    }
    wr.flush().map_err(|e| Error::Schema(format!("writing trace: {e}")))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub scheme: String,
    pub steps: usize,
    pub seed: Option<u64>,
    pub scenario_hash: Option<String>,
    pub eps: f64,
    pub nodes: Vec<NodeMetrics>,
}

pub fn summarize(trace: &SimulationTrace, scheme: &str) -> Summary {
    Summary {
        format_version: FORMAT_VERSION,
        scheme: scheme.to_string(),
        steps: trace.steps.len().saturating_sub(1),
        seed: trace.seed,
        scenario_hash: trace.scenario_hash.clone(),
        eps: SUMMARY_EPS,
        nodes: convergence_metrics(trace, SUMMARY_EPS),
    }
}

/// Process exit status for an error: 2 infeasible, 3 schema, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Condition1Infeasible(_)
        | Error::Condition2Infeasible(_)
        | Error::NotSpanning(_)
        | Error::NotDetectable(_) => 2,
        Error::Schema(_)
        | Error::ShapeError(_)
        | Error::InvalidMatrix(_)
        | Error::InvalidWeights(_)
        | Error::InvalidSignal(_)
        | Error::InvalidTransform(_) => 3,
        Error::NumericalError(_) | Error::IllConditionedJordan { .. } | Error::NotObservable(_) | Error::Internal(_) => 4,
    }
}
