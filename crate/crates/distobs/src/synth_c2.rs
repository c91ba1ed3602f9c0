//! Observer synthesis under Condition 2: each node runs a Luenberger observer
//! on the Jordan classes it can detect and obtains every other class by
//! consensus over a spanning forest rooted at the nodes that detect it.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::decomp::{jordan_system, JordanSystem, NodeSplit, Plant};
use crate::error::{Error, Result};
use crate::netgraph::{spanning_dag, Digraph};
use crate::numkit::{kron, obs_canon_decomp, place_observer_gain, spectral_radius, spectral_radius_block_lower, sub, Mat, ToleranceConfig};
use crate::synth_c1::{switched_weights, PolesPolicy};

/// Gain 𝕃_i of the local observer ŝ+ = 𝕁ŝ + 𝕃(y - 𝔽ŝ). Only the observable
/// part of (𝕁, 𝔽) is placed; the remaining directions get zero gain and must
/// be stable.
pub fn local_observer(split: &NodeSplit, policy: PolesPolicy, tol: &ToleranceConfig) -> Result<Mat> {
    let (jj, ff) = (&split.jj, &split.ff);
    let s = jj.nrows();
    let r = ff.nrows();
    if s == 0 {
        return Ok(Mat::zeros(0, r));
    }
    let (q, obs) = obs_canon_decomp(jj, ff, tol)?;
    let rotated = q.transpose() * jj * &q;
    if obs < s {
        let rest = sub(&rotated, obs, obs, s - obs, s - obs);
        let rho = spectral_radius(&rest)?;
        if tol.is_unstable(num_complex::Complex64::new(rho, 0.0)) {
            return Err(Error::Internal(format!(
                "local observer of node {} has an undetectable mode of modulus {rho}",
                split.node
            )));
        }
    }
    if obs == 0 {
        return Ok(Mat::zeros(s, r));
    }
    let a_o = sub(&rotated, 0, 0, obs, obs);
    let c_o = ff * q.columns(0, obs);
    let l_o = place_observer_gain(&a_o, &c_o, &policy.poles(obs), tol)?;
    Ok(q.columns(0, obs) * l_o)
}

/// Consensus weights of one Jordan class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub class: usize,
    pub lambda: (f64, f64),
    /// Nodes that detect the class.
    pub roots: Vec<usize>,
    /// Nodes outside the roots: (neighbor, weight) pairs.
    pub weights: BTreeMap<usize, Vec<(usize, f64)>>,
    pub parents: BTreeMap<usize, Vec<usize>>,
    /// Roots first; parents precede children.
    pub topo_order: Vec<usize>,
}

/// Nodes detecting each class that some node cannot detect.
pub fn root_sets(jsys: &JordanSystem) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for sp in &jsys.per_node {
        for &k in &sp.undetectable {
            out.entry(k).or_default();
        }
    }
    for sp in &jsys.per_node {
        for &k in &sp.detectable {
            if let Some(s) = out.get_mut(&k) {
                s.insert(sp.node);
            }
        }
    }
    out
}

/// Weight 1 on the forest parent for every node outside the root set of each
/// class some node cannot detect.
pub fn eig_consensus_weights(g: &Digraph, jsys: &JordanSystem, max_parents: usize) -> Result<Vec<ClassWeights>> {
    let mut out = Vec::new();
    for (k, roots) in root_sets(jsys) {
        let cl = &jsys.form.classes[k];
        let dag = spanning_dag(g, &roots, max_parents.max(1)).map_err(|e| match e {
            Error::NotSpanning(_) => Error::Condition2Infeasible(cl.lambda()),
            other => other,
        })?;
        let weights = dag.parents.iter().map(|(&i, ps)| (i, vec![(ps[0], 1.0)])).collect();
        out.push(ClassWeights {
            class: k,
            lambda: cl.lambda,
            roots: roots.into_iter().collect(),
            weights,
            parents: dag.parents,
            topo_order: dag.topo_order,
        });
    }
    Ok(out)
}

/// Checks row-stochasticity and neighbor support of every class weight map.
pub fn validate_class_weights(g: &Digraph, cw: &ClassWeights, jsys: &JordanSystem) -> Result<()> {
    for sp in &jsys.per_node {
        if !sp.undetectable.contains(&cw.class) {
            continue;
        }
        let i = sp.node;
        let Some(ws) = cw.weights.get(&i) else {
            return Err(Error::InvalidWeights(format!("node {i} has no weights for class {}", cw.class)));
        };
        let mut sum = 0.0;
        for &(l, w) in ws {
            if !(w >= 0.0) || !w.is_finite() || (l != i && !g.has_edge(l, i)) {
                return Err(Error::InvalidWeights(format!("weight w({i},{l}) = {w} for class {} is invalid", cw.class)));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!("weights of node {i} for class {} sum to {sum}", cw.class)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2Node {
    pub split: NodeSplit,
    #[serde(with = "crate::numkit::row_major")]
    pub gain: Mat,
    /// Undetectable classes in the order their coordinates appear in z_UO.
    pub uo_classes: Vec<usize>,
}

impl C2Node {
    pub fn observer_dim(&self) -> usize {
        self.split.observer_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2ObserverBank {
    pub jsys: JordanSystem,
    #[serde(with = "crate::numkit::row_major")]
    pub c: Vec<Mat>,
    pub nodes: Vec<C2Node>,
    /// Keyed by class index.
    pub class_weights: BTreeMap<usize, ClassWeights>,
}

/// Internal state of one node: the local observer and the full estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct C2NodeState {
    pub s: DVector<f64>,
    pub xhat: DVector<f64>,
}

impl C2ObserverBank {
    pub fn n(&self) -> usize {
        self.jsys.form.t.nrows()
    }

    pub fn observer_dims(&self) -> Vec<usize> {
        self.nodes.iter().map(C2Node::observer_dim).collect()
    }

    pub fn parent_layers(&self) -> Vec<BTreeMap<usize, Vec<usize>>> {
        self.class_weights.values().map(|cw| cw.parents.clone()).collect()
    }

    /// Initial node state from an initial estimate in original coordinates.
    pub fn init_state(&self, node: usize, est0: &DVector<f64>) -> C2NodeState {
        let sp = &self.nodes[node - 1].split;
        let zbar = sp.perm.transpose() * (&self.jsys.form.t_inv * est0);
        let full = sp.t_i.transpose() * zbar;
        C2NodeState { s: full.rows(0, sp.s_dim()).into_owned(), xhat: est0.clone() }
    }

    /// One synchronous step of every node.
    pub fn step(
        &self,
        states: &[C2NodeState],
        y: &[DVector<f64>],
        active: Option<&BTreeSet<(usize, usize)>>,
    ) -> Vec<C2NodeState> {
        let jf = &self.jsys.form;
        let z: Vec<DVector<f64>> = states.iter().map(|st| &jf.t_inv * &st.xhat).collect();
        self.nodes
            .iter()
            .zip(states)
            .map(|(nd, st)| {
                let sp = &nd.split;
                let i = sp.node;
                let s_next = &sp.jj * &st.s + &nd.gain * (&y[i - 1] - &sp.ff * &st.s);
                let mut zbar = DVector::zeros(self.n());
                zbar.rows_mut(0, sp.o_dim).copy_from(&s_next.rows(0, sp.o_dim));
                let mut off = sp.o_dim;
                for &k in &nd.uo_classes {
                    let cl = &jf.classes[k];
                    let cw = &self.class_weights[&k];
                    let base = cw.weights.get(&i).map(|w| w.as_slice()).unwrap_or(&[]);
                    let parents = cw.parents.get(&i).map(|p| p.as_slice()).unwrap_or(&[]);
                    let mut mix = DVector::zeros(cl.dim);
                    for (l, w) in switched_weights(i, base, parents, active) {
                        mix += z[l - 1].rows(cl.offset, cl.dim) * w;
                    }
                    zbar.rows_mut(off, cl.dim).copy_from(&(&cl.block * mix));
                    off += cl.dim;
                }
                let xhat = &jf.t * (&sp.perm * zbar);
                C2NodeState { s: s_next, xhat }
            })
            .collect()
    }
}

/// Assembles the four-equation bank from the Jordan system, gains and weights.
pub fn assemble_c2_bank(
    p: &Plant,
    jsys: &JordanSystem,
    gains: Vec<Mat>,
    weights: Vec<ClassWeights>,
    g: &Digraph,
) -> Result<C2ObserverBank> {
    if gains.len() != jsys.per_node.len() {
        return Err(Error::ShapeError(format!("{} gains for {} nodes", gains.len(), jsys.per_node.len())));
    }
    let class_weights: BTreeMap<usize, ClassWeights> = weights.into_iter().map(|cw| (cw.class, cw)).collect();
    for cw in class_weights.values() {
        validate_class_weights(g, cw, jsys)?;
    }
    let mut nodes = Vec::with_capacity(gains.len());
    for (sp, gain) in jsys.per_node.iter().zip(gains) {
        if gain.nrows() != sp.s_dim() || gain.ncols() != sp.ff.nrows() {
            return Err(Error::ShapeError(format!("gain of node {} has the wrong shape", sp.node)));
        }
        for k in &sp.undetectable {
            if !class_weights.contains_key(k) {
                return Err(Error::InvalidWeights(format!("no weights for class {k} needed by node {}", sp.node)));
            }
        }
        nodes.push(C2Node { split: sp.clone(), gain, uo_classes: sp.undetectable.clone() });
    }
    Ok(C2ObserverBank { jsys: jsys.clone(), c: p.c.clone(), nodes, class_weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2StabilityReport {
    /// ρ(𝕁_i - 𝕃_i 𝔽_i) per node.
    pub local_rho: Vec<f64>,
    /// (class, ρ(W12 ⊗ J_j)) for every class obtained by consensus.
    pub class_rho: Vec<(usize, f64)>,
    pub margin: f64,
    pub certified: bool,
}

impl C2StabilityReport {
    pub fn max_rho(&self) -> f64 {
        self.local_rho.iter().copied().chain(self.class_rho.iter().map(|(_, r)| *r)).fold(0.0, f64::max)
    }
}

pub fn certify_c2(bank: &C2ObserverBank, tol: &ToleranceConfig) -> Result<C2StabilityReport> {
    let local_rho = bank
        .nodes
        .iter()
        .map(|nd| {
            let sp = &nd.split;
            if sp.s_dim() == 0 {
                Ok(0.0)
            } else {
                spectral_radius(&(&sp.jj - &nd.gain * &sp.ff))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut class_rho = Vec::new();
    for (&k, cw) in &bank.class_weights {
        let followers: Vec<usize> = cw.topo_order.iter().copied().filter(|v| !cw.roots.contains(v)).collect();
        if followers.is_empty() {
            class_rho.push((k, 0.0));
            continue;
        }
        let w12 = Mat::from_fn(followers.len(), followers.len(), |r, c| {
            let (i, l) = (followers[r], followers[c]);
            cw.weights.get(&i).and_then(|ws| ws.iter().find(|(m, _)| *m == l)).map(|(_, w)| *w).unwrap_or(0.0)
        });
        let blk = &bank.jsys.form.classes[k].block;
        class_rho.push((k, spectral_radius_block_lower(&kron(&w12, blk), &vec![blk.nrows(); followers.len()])?));
    }
    let bound = 1.0 - tol.schur_margin;
    let certified = local_rho.iter().chain(class_rho.iter().map(|(_, r)| r)).all(|&r| r <= bound);
    Ok(C2StabilityReport { local_rho, class_rho, margin: tol.schur_margin, certified })
}

/// Designs and certifies the Condition-2 bank.
pub fn design_c2(
    p: &Plant,
    g: &Digraph,
    policy: PolesPolicy,
    max_parents: usize,
    tol: &ToleranceConfig,
) -> Result<(C2ObserverBank, C2StabilityReport)> {
    if g.n_nodes() != p.n_nodes() {
        return Err(Error::ShapeError(format!("graph has {} nodes, plant has {}", g.n_nodes(), p.n_nodes())));
    }
    let jsys = jordan_system(p, tol)?;
    let weights = eig_consensus_weights(g, &jsys, max_parents)?;
    let gains = jsys.per_node.iter().map(|sp| local_observer(sp, policy, tol)).collect::<Result<Vec<_>>>()?;
    let bank = assemble_c2_bank(p, &jsys, gains, weights, g)?;
    let report = certify_c2(&bank, tol)?;
    Ok((bank, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::from_rows;

    fn m(rows: &[&[f64]]) -> Mat {
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), ncols).unwrap()
    }

    fn illustrative() -> (Plant, Digraph) {
        let p = Plant::new(m(&[&[1.5]]), vec![m(&[&[1.]]), Mat::zeros(0, 1), Mat::zeros(0, 1)]).unwrap();
        (p, Digraph::new(3, [(1, 2), (1, 3), (2, 1)]).unwrap())
    }

    #[test]
    fn scalar_relay() {
        let tol = ToleranceConfig::default();
        let (p, g) = illustrative();
        let (bank, report) = design_c2(&p, &g, PolesPolicy::Deadbeat, 1, &tol).unwrap();
        assert!((bank.nodes[0].gain[(0, 0)] - 1.5).abs() < 1e-12);
        assert_eq!(bank.observer_dims(), vec![1, 1, 1]);
        let cw = bank.class_weights.values().next().unwrap();
        assert_eq!(cw.roots, vec![1]);
        assert_eq!(cw.weights[&2], vec![(1, 1.0)]);
        assert_eq!(cw.weights[&3], vec![(1, 1.0)]);
        assert!(report.certified);
    }

    #[test]
    fn two_group_is_infeasible() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(
            m(&[&[2., 0.], &[0., 2.]]),
            vec![m(&[&[1., 0.]]), m(&[&[0., 1.]]), Mat::identity(2, 2)],
        )
        .unwrap();
        let g = Digraph::new(3, [(1, 2), (2, 1)]).unwrap();
        match design_c2(&p, &g, PolesPolicy::Deadbeat, 1, &tol) {
            Err(Error::Condition2Infeasible(l)) => assert!((l.re - 2.0).abs() < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_detect_means_no_weights() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(m(&[&[1.2, 0.], &[0., 0.5]]), vec![Mat::identity(2, 2), Mat::identity(2, 2)]).unwrap();
        let g = Digraph::new(2, [(1, 2)]).unwrap();
        let (bank, report) = design_c2(&p, &g, PolesPolicy::Deadbeat, 1, &tol).unwrap();
        assert!(bank.class_weights.is_empty());
        assert!(report.max_rho() < 1e-9);
    }

    #[test]
    fn diagonal_deadbeat_local_observers() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(
            m(&[&[1.4, 0., 0.], &[0., -1.1, 0.], &[0., 0., 0.3]]),
            vec![m(&[&[1., 0., 1.]]), m(&[&[0., 1., 1.]])],
        )
        .unwrap();
        let g = Digraph::new(2, [(1, 2), (2, 1)]).unwrap();
        let (bank, report) = design_c2(&p, &g, PolesPolicy::Deadbeat, 1, &tol).unwrap();
        for r in &report.local_rho {
            assert!(*r < 1e-6);
        }
        assert_eq!(bank.observer_dims(), vec![3, 3]);
    }
}
