//! Synchronous simulation of the plant and every node observer under a fixed
//! graph or an edge-failure schedule, plus convergence metrics.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomp::Plant;
use crate::error::{Error, Result};
use crate::netgraph::Digraph;
use crate::synth_c1::CompactObserverBank;
use crate::synth_c2::{C2NodeState, C2ObserverBank};

/// Either observer bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", content = "bank", rename_all = "snake_case")]
pub enum Bank {
    C1(CompactObserverBank),
    C2(C2ObserverBank),
}

impl Bank {
    pub fn n(&self) -> usize {
        match self {
            Bank::C1(b) => b.n(),
            Bank::C2(b) => b.n(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        match self {
            Bank::C1(b) => b.n_nodes(),
            Bank::C2(b) => b.nodes.len(),
        }
    }

    /// Parent sets of every consensus layer.
    pub fn parent_layers(&self) -> Vec<BTreeMap<usize, Vec<usize>>> {
        match self {
            Bank::C1(b) => b.parent_layers(),
            Bank::C2(b) => b.parent_layers(),
        }
    }

    pub fn scheme(&self) -> &'static str {
        match self {
            Bank::C1(_) => "c1",
            Bank::C2(_) => "c2",
        }
    }
}

/// Edge subsets and the step-by-step choice among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingSignal {
    pub modes: Vec<BTreeSet<(usize, usize)>>,
    /// Mode used for the transition from step k to k + 1.
    pub schedule: Vec<usize>,
    /// Dwell window T the signal was built for.
    pub window: usize,
}

impl SwitchingSignal {
    pub fn new(
        baseline: &Digraph,
        modes: Vec<BTreeSet<(usize, usize)>>,
        schedule: Vec<usize>,
        window: usize,
    ) -> Result<Self> {
        let s = Self { modes, schedule, window };
        s.check(baseline)?;
        Ok(s)
    }

    pub fn check(&self, baseline: &Digraph) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidSignal("window must be at least 1".into()));
        }
        for (m, edges) in self.modes.iter().enumerate() {
            if let Some(e) = edges.iter().find(|e| !baseline.edges().contains(e)) {
                return Err(Error::InvalidSignal(format!("mode {m} uses edge {e:?} outside the graph")));
            }
        }
        if let Some((k, &m)) = self.schedule.iter().enumerate().find(|(_, &m)| m >= self.modes.len()) {
            return Err(Error::InvalidSignal(format!("step {k} selects mode {m}, only {} modes exist", self.modes.len())));
        }
        Ok(())
    }

    pub fn active(&self, k: usize) -> Result<&BTreeSet<(usize, usize)>> {
        let m = *self
            .schedule
            .get(k)
            .ok_or_else(|| Error::InvalidSignal(format!("schedule has no entry for step {k}")))?;
        self.modes
            .get(m)
            .ok_or_else(|| Error::InvalidSignal(format!("step {k} selects mode {m}, only {} modes exist", self.modes.len())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    /// Mode used from this step to the next; `None` for static runs and the last step.
    pub mode: Option<usize>,
    pub x: Vec<f64>,
    pub xhat: Vec<Vec<f64>>,
    pub err: Vec<f64>,
    pub relerr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub steps: Vec<StepRecord>,
    pub seed: Option<u64>,
    pub scenario_hash: Option<String>,
}

impl SimulationTrace {
    /// Relative error of `node` (1-based) at every step.
    pub fn relerr_series(&self, node: usize) -> Vec<f64> {
        self.steps.iter().map(|s| s.relerr[node - 1]).collect()
    }

    /// Largest relative error over all nodes at step k.
    pub fn max_relerr(&self, k: usize) -> f64 {
        self.steps[k].relerr.iter().copied().fold(0.0, f64::max)
    }
}

fn record(k: usize, mode: Option<usize>, x: &DVector<f64>, xhat: &[DVector<f64>]) -> StepRecord {
    let xn = x.norm();
    let err: Vec<f64> = xhat.iter().map(|e| (e - x).norm()).collect();
    StepRecord {
        k,
        mode,
        x: x.iter().copied().collect(),
        xhat: xhat.iter().map(|e| e.iter().copied().collect()).collect(),
        relerr: err.iter().map(|e| e / (1.0 + xn)).collect(),
        err,
    }
}

/// Runs K steps of x+ = Ax together with every node observer. All nodes read
/// the step-k estimates of their neighbors, then advance together.
pub fn simulate(
    p: &Plant,
    bank: &Bank,
    x0: &DVector<f64>,
    est0: &[DVector<f64>],
    k_steps: usize,
    signal: Option<&SwitchingSignal>,
) -> Result<SimulationTrace> {
    let n = p.n();
    if k_steps == 0 {
        return Err(Error::ShapeError("K must be at least 1".into()));
    }
    if x0.len() != n || bank.n() != n {
        return Err(Error::ShapeError(format!("state dimension mismatch: plant {n}, x0 {}, bank {}", x0.len(), bank.n())));
    }
    if est0.len() != p.n_nodes() || bank.n_nodes() != p.n_nodes() {
        return Err(Error::ShapeError(format!(
            "{} initial estimates and a bank of {} nodes for a plant with {} nodes",
            est0.len(),
            bank.n_nodes(),
            p.n_nodes()
        )));
    }
    if let Some(e) = est0.iter().find(|e| e.len() != n) {
        return Err(Error::ShapeError(format!("initial estimate of length {}, expected {n}", e.len())));
    }
    if let Some(sig) = signal {
        for k in 0..k_steps {
            sig.active(k)?;
        }
    }
    let outputs = |x: &DVector<f64>| -> Vec<DVector<f64>> { p.c.iter().map(|c| c * x).collect() };
    let mode_at = |k: usize| signal.map(|s| s.schedule[k]);
    let mut x = x0.clone();
    let mut steps = Vec::with_capacity(k_steps + 1);
    match bank {
        Bank::C1(b) => {
            let mut xhat = est0.to_vec();
            for k in 0..k_steps {
                steps.push(record(k, mode_at(k), &x, &xhat));
                let active = signal.map(|s| s.active(k)).transpose()?;
                xhat = b.step(&xhat, &outputs(&x), active);
                x = &p.a * x;
            }
            steps.push(record(k_steps, None, &x, &xhat));
        }
        Bank::C2(b) => {
            let mut st: Vec<C2NodeState> = est0.iter().enumerate().map(|(i, e)| b.init_state(i + 1, e)).collect();
            for k in 0..k_steps {
                let xhat: Vec<DVector<f64>> = st.iter().map(|s| s.xhat.clone()).collect();
                steps.push(record(k, mode_at(k), &x, &xhat));
                let active = signal.map(|s| s.active(k)).transpose()?;
                st = b.step(&st, &outputs(&x), active);
                x = &p.a * x;
            }
            let xhat: Vec<DVector<f64>> = st.iter().map(|s| s.xhat.clone()).collect();
            steps.push(record(k_steps, None, &x, &xhat));
        }
    }
    Ok(SimulationTrace { steps, seed: None, scenario_hash: None })
}

fn windows(k_steps: usize, t: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..k_steps.div_ceil(t)).map(move |w| w * t..((w + 1) * t).min(k_steps))
}

fn has_live_parent(edges: &BTreeSet<(usize, usize)>, i: usize, parents: &[usize]) -> bool {
    parents.iter().any(|&l| edges.contains(&(l, i)))
}

/// Random edge drops repaired so that in every block of T steps each node
/// hears from at least one of its parents in every consensus layer at least
/// once. Repairs restore one parent edge at the block's last step.
pub fn make_assumption2_signal(
    layers: &[BTreeMap<usize, Vec<usize>>],
    baseline: &Digraph,
    t: usize,
    k_steps: usize,
    drop_prob: f64,
    seed: u64,
) -> Result<SwitchingSignal> {
    if t == 0 {
        return Err(Error::InvalidSignal("window must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidSignal(format!("drop probability {drop_prob} is outside [0, 1)")));
    }
    for layer in layers {
        for (&i, ps) in layer {
            if let Some(&l) = ps.iter().find(|&&l| !baseline.has_edge(l, i)) {
                return Err(Error::InvalidSignal(format!("parent {l} of node {i} has no edge to it")));
            }
        }
    }
    let all = baseline.edges().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_step: Vec<BTreeSet<(usize, usize)>> = (0..k_steps)
        .map(|_| {
            if drop_prob == 0.0 {
                all.clone()
            } else {
                all.iter().copied().filter(|_| rng.random::<f64>() >= drop_prob).collect()
            }
        })
        .collect();
    for win in windows(k_steps, t) {
        let last = win.end - 1;
        for layer in layers {
            for (&i, ps) in layer {
                if ps.is_empty() || win.clone().any(|k| has_live_parent(&per_step[k], i, ps)) {
                    continue;
                }
                per_step[last].insert((ps[0], i));
            }
        }
    }
    let mut modes: Vec<BTreeSet<(usize, usize)>> = Vec::new();
    let mut index: BTreeMap<BTreeSet<(usize, usize)>, usize> = BTreeMap::new();
    let mut schedule = Vec::with_capacity(k_steps);
    if k_steps == 0 {
        modes.push(all);
    }
    for edges in per_step {
        let m = *index.entry(edges.clone()).or_insert_with(|| {
            modes.push(edges);
            modes.len() - 1
        });
        schedule.push(m);
    }
    SwitchingSignal::new(baseline, modes, schedule, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assumption2Violation {
    pub window: usize,
    pub node: usize,
    /// Index into the consensus layers.
    pub layer: usize,
}

/// Scans every block of T steps (the last one may be shorter) for a node that
/// never hears from any of its parents in some layer.
pub fn validate_assumption2(
    signal: &SwitchingSignal,
    layers: &[BTreeMap<usize, Vec<usize>>],
    t: usize,
) -> Result<Option<Assumption2Violation>> {
    if t == 0 {
        return Err(Error::InvalidSignal("window must be at least 1".into()));
    }
    let steps: Vec<&BTreeSet<(usize, usize)>> =
        (0..signal.schedule.len()).map(|k| signal.active(k)).collect::<Result<_>>()?;
    for (w, win) in windows(steps.len(), t).enumerate() {
        for (li, layer) in layers.iter().enumerate() {
            for (&i, ps) in layer {
                if !ps.is_empty() && !win.clone().any(|k| has_live_parent(steps[k], i, ps)) {
                    return Ok(Some(Assumption2Violation { window: w, node: i, layer: li }));
                }
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: usize,
    pub final_rel_error: f64,
    pub max_rel_error: f64,
    /// First step from which the relative error stays at or below the threshold.
    pub first_step_below: Option<usize>,
    /// The relative error never grows over the second half of the run.
    pub monotone_tail: bool,
}

/// Per-node summary of the relative errors ‖x̂_i - x‖ / (1 + ‖x‖).
pub fn convergence_metrics(trace: &SimulationTrace, eps: f64) -> Vec<NodeMetrics> {
    let n_nodes = trace.steps.first().map(|s| s.relerr.len()).unwrap_or(0);
    (1..=n_nodes)
        .map(|i| {
            let e = trace.relerr_series(i);
            let first_step_below = match e.iter().rposition(|&v| !(v <= eps)) {
                None => Some(0),
                Some(k) if k + 1 < e.len() => Some(k + 1),
                Some(_) => None,
            };
            let tail = &e[e.len() / 2..];
            let monotone_tail = tail.windows(2).all(|w| w[1] <= w[0] + 1e-12);
            NodeMetrics {
                node: i,
                final_rel_error: *e.last().unwrap_or(&0.0),
                max_rel_error: e.iter().copied().fold(0.0, f64::max),
                first_step_below,
                monotone_tail,
            }
        })
        .collect()
}
