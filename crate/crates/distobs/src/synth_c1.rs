//! Observer synthesis under Condition 1: per-sub-state Luenberger gains,
//! tree-based consensus weights, the compact per-node update
//! x̂_i+ = N x̂_i + 𝒯ℍ_i (y_i - C_i x̂_i) + Σ_l 𝔾_il x̂_l, pure-consensus rules
//! for nodes outside the source components, and stability certification of
//! the composite error dynamics.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::conditions::check_condition1;
use crate::decomp::{decomposition_from_given, multisensor_decompose, MultiSensorDecomposition, Plant};
use crate::error::{Error, Result};
use crate::netgraph::{source_components, spanning_dag, spanning_dag_within, Digraph, SpanningStructure};
use crate::numkit::{block_diag, deadbeat_poles, kron, place_observer_gain, spectral_radius, spectral_radius_block_lower, sub, Mat, ToleranceConfig};

/// Pole locations for synthesized gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolesPolicy {
    /// All poles at zero.
    #[default]
    Deadbeat,
    /// All poles at the given real value.
    Uniform(f64),
}

impl PolesPolicy {
    pub fn poles(&self, n: usize) -> Vec<Complex64> {
        match *self {
            PolesPolicy::Deadbeat => deadbeat_poles(n),
            PolesPolicy::Uniform(r) => vec![Complex64::new(r, 0.0); n],
        }
    }
}

/// Luenberger gains L_s, one per observable slot (0 x r for empty slots).
/// Supplied gains are verified; missing ones are synthesized.
pub fn design_gains(
    d: &MultiSensorDecomposition,
    p: &Plant,
    policy: PolesPolicy,
    given: Option<&[Mat]>,
    tol: &ToleranceConfig,
) -> Result<Vec<Mat>> {
    if let Some(g) = given {
        if g.len() != d.o.len() {
            return Err(Error::ShapeError(format!("{} gains supplied for {} sub-states", g.len(), d.o.len())));
        }
    }
    let mut gains = Vec::with_capacity(d.o.len());
    for s in 0..d.o.len() {
        let r = p.c_of(d.nodes[s]).nrows();
        let a_ss = d.block(s, s);
        let c_ss = d.c_block(s, s);
        let l = match given {
            Some(g) => {
                let l = g[s].clone();
                if l.nrows() != d.o[s] || l.ncols() != r {
                    return Err(Error::ShapeError(format!(
                        "gain of node {} is {}x{}, expected {}x{r}",
                        d.nodes[s],
                        l.nrows(),
                        l.ncols(),
                        d.o[s]
                    )));
                }
                if d.o[s] > 0 {
                    let rho = spectral_radius(&(&a_ss - &l * &c_ss))?;
                    if rho >= 1.0 {
                        return Err(Error::NumericalError(format!(
                            "supplied gain of node {} leaves spectral radius {rho}",
                            d.nodes[s]
                        )));
                    }
                }
                l
            }
            None if d.o[s] == 0 => Mat::zeros(0, r),
            None => place_observer_gain(&a_ss, &c_ss, &policy.poles(d.o[s]), tol).map_err(|e| match e {
                Error::NotObservable(m) => {
                    Error::Internal(format!("sub-state of node {} is not observable: {m}", d.nodes[s]))
                }
                other => other,
            })?,
        };
        gains.push(l);
    }
    Ok(gains)
}

// ---------------------------------------------------------------------------
// Consensus weights

/// Consensus weights of one sub-state over the members of its component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotWeights {
    pub source: usize,
    /// For every member other than the source: (neighbor, weight) pairs.
    pub weights: BTreeMap<usize, Vec<(usize, f64)>>,
    /// Parent sets consulted when links fail; the first entry is the tree parent.
    pub parents: BTreeMap<usize, Vec<usize>>,
    /// Source first; parents precede children.
    pub topo_order: Vec<usize>,
}

impl SlotWeights {
    pub fn weight(&self, i: usize, l: usize) -> f64 {
        self.weights.get(&i).and_then(|ws| ws.iter().find(|(m, _)| *m == l)).map(|(_, w)| *w).unwrap_or(0.0)
    }
}

/// Weight 1 on the tree parent of every non-source node.
pub fn consensus_weights_for_substate(g: &Digraph, source: usize, tree: &SpanningStructure) -> Result<SlotWeights> {
    if tree.roots != BTreeSet::from([source]) {
        return Err(Error::Internal(format!("tree is not rooted at node {source}")));
    }
    let mut weights = BTreeMap::new();
    for (&i, ps) in &tree.parents {
        let p = *ps.first().ok_or_else(|| Error::Internal(format!("node {i} has an empty parent set")))?;
        if !g.has_edge(p, i) {
            return Err(Error::Internal(format!("tree branch ({p}, {i}) is not a graph edge")));
        }
        weights.insert(i, vec![(p, 1.0)]);
    }
    Ok(SlotWeights { source, weights, parents: tree.parents.clone(), topo_order: tree.topo_order.clone() })
}

/// Checks non-negativity, row sums and that weights only use in-neighbors or self.
pub fn validate_slot_weights(g: &Digraph, sw: &SlotWeights, members: &[usize]) -> Result<()> {
    let set: BTreeSet<usize> = members.iter().copied().collect();
    for &i in members {
        if i == sw.source {
            continue;
        }
        let Some(ws) = sw.weights.get(&i) else {
            return Err(Error::InvalidWeights(format!(
                "node {i} has no weights for the sub-state of node {}",
                sw.source
            )));
        };
        let mut sum = 0.0;
        for &(l, w) in ws {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidWeights(format!("weight w({i},{l}) = {w} is negative or not finite")));
            }
            if !set.contains(&l) || (l != i && !g.has_edge(l, i)) {
                return Err(Error::InvalidWeights(format!("node {i} weights node {l}, which is not a neighbor")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!(
                "weights of node {i} for the sub-state of node {} sum to {sum}",
                sw.source
            )));
        }
    }
    Ok(())
}

/// Stacked weight vector w_il supplied by the user: one entry per non-empty
/// sub-state in decomposition order, then the unobservable part if present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedWeight {
    pub node: usize,
    pub neighbor: usize,
    pub w: Vec<f64>,
}

/// Slots that carry an entry in a stacked weight vector.
pub fn stacked_slots(d: &MultiSensorDecomposition) -> Vec<usize> {
    let mut v: Vec<usize> = (0..d.o.len()).filter(|&s| d.o[s] > 0).collect();
    if d.u_dim > 0 {
        v.push(d.u_slot());
    }
    v
}

fn topo_from_support(source: usize, members: &[usize], weights: &BTreeMap<usize, Vec<(usize, f64)>>) -> Vec<usize> {
    let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut indeg: BTreeMap<usize, usize> = members.iter().map(|&m| (m, 0)).collect();
    for (&i, ws) in weights {
        for &(l, w) in ws {
            if l != i && w > 0.0 {
                children.entry(l).or_default().push(i);
                *indeg.entry(i).or_default() += 1;
            }
        }
    }
    let mut order = Vec::new();
    let mut queue: VecDeque<usize> = indeg.iter().filter(|(&v, &d)| d == 0 && v == source).map(|(&v, _)| v).collect();
    queue.extend(indeg.iter().filter(|(&v, &d)| d == 0 && v != source).map(|(&v, _)| v));
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &c in children.get(&v).map(|c| c.as_slice()).unwrap_or(&[]) {
            let d = indeg.get_mut(&c).expect("member");
            *d -= 1;
            if *d == 0 {
                queue.push_back(c);
            }
        }
    }
    if order.len() < members.len() {
        // Cyclic support: keep the source first, the rest ascending.
        order = std::iter::once(source).chain(members.iter().copied().filter(|&m| m != source)).collect();
    }
    order
}

/// Converts stacked weight vectors into per-sub-state weights. Entries for a
/// node's own sub-state and for the unobservable part must be 1 on the node
/// itself and 0 elsewhere.
pub fn weights_from_stacked(
    d: &MultiSensorDecomposition,
    entries: &[StackedWeight],
) -> Result<Vec<Option<SlotWeights>>> {
    let slots = stacked_slots(d);
    let mut out: Vec<Option<SlotWeights>> = (0..d.o.len())
        .map(|s| {
            (d.o[s] > 0).then(|| SlotWeights {
                source: d.nodes[s],
                weights: BTreeMap::new(),
                parents: BTreeMap::new(),
                topo_order: Vec::new(),
            })
        })
        .collect();
    for e in entries {
        let Some(own) = d.slot_of(e.node) else {
            return Err(Error::InvalidWeights(format!("node {} is not part of this decomposition", e.node)));
        };
        if d.slot_of(e.neighbor).is_none() {
            return Err(Error::InvalidWeights(format!("node {} is not part of this decomposition", e.neighbor)));
        }
        if e.w.len() != slots.len() {
            return Err(Error::InvalidWeights(format!(
                "w({},{}) has {} entries, expected {}",
                e.node,
                e.neighbor,
                e.w.len(),
                slots.len()
            )));
        }
        for (k, &s) in slots.iter().enumerate() {
            let w = e.w[k];
            if s == own || s == d.u_slot() {
                let want = if e.neighbor == e.node { 1.0 } else { 0.0 };
                if (w - want).abs() > 1e-12 {
                    return Err(Error::InvalidWeights(format!(
                        "w({},{}) must be {want} at entry {} (own or unobservable sub-state)",
                        e.node,
                        e.neighbor,
                        k + 1
                    )));
                }
                continue;
            }
            if w != 0.0 {
                let sw = out[s].as_mut().expect("non-empty slot");
                sw.weights.entry(e.node).or_default().push((e.neighbor, w));
            }
        }
    }
    for sw in out.iter_mut().flatten() {
        for (&i, ws) in &sw.weights {
            let ps: Vec<usize> = ws.iter().filter(|(l, w)| *l != i && *w > 0.0).map(|(l, _)| *l).collect();
            if !ps.is_empty() {
                sw.parents.insert(i, ps);
            }
        }
        sw.topo_order = topo_from_support(sw.source, &d.nodes, &sw.weights);
    }
    Ok(out)
}

/// Effective weights of node i at one step. With every parent reachable the
/// base weights apply; with a proper non-empty subset they are spread
/// uniformly over it; with none the node keeps its own estimate.
pub fn switched_weights(
    i: usize,
    base: &[(usize, f64)],
    parents: &[usize],
    active: Option<&BTreeSet<(usize, usize)>>,
) -> Vec<(usize, f64)> {
    let Some(active) = active else {
        return base.to_vec();
    };
    if parents.is_empty() {
        return base.to_vec();
    }
    let live: Vec<usize> = parents.iter().copied().filter(|&l| l == i || active.contains(&(l, i))).collect();
    if live.len() == parents.len() {
        base.to_vec()
    } else if live.is_empty() {
        vec![(i, 1.0)]
    } else {
        let w = 1.0 / live.len() as f64;
        live.into_iter().map(|l| (l, w)).collect()
    }
}

// ---------------------------------------------------------------------------
// Compact bank

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactNode {
    pub node: usize,
    /// Slot of the sub-state this node estimates with its own measurements.
    pub slot: usize,
    /// 𝒯ℍ_i, n x r_i.
    #[serde(with = "crate::numkit::row_major")]
    pub innovation_gain: Mat,
    /// Stacked weight vectors w_il, keyed by neighbor l (including l = i).
    pub stacked_weights: BTreeMap<usize, Vec<f64>>,
    /// 𝔾_il, keyed by neighbor l (including l = i).
    #[serde(with = "crate::numkit::row_major")]
    pub neighbor_gains: BTreeMap<usize, Mat>,
}

/// Compact observers of one source component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentBank {
    /// Members in decomposition order; member k owns slot k.
    pub members: Vec<usize>,
    pub decomposition: MultiSensorDecomposition,
    /// L_s per observable slot.
    #[serde(with = "crate::numkit::row_major")]
    pub gains: Vec<Mat>,
    pub slot_weights: Vec<Option<SlotWeights>>,
    /// N = 𝒯 Ā₁ 𝒯⁻¹.
    #[serde(with = "crate::numkit::row_major")]
    pub n_mat: Mat,
    /// 𝒯 E_s A_ss B_s 𝒯⁻¹ for every slot, unobservable slot last.
    #[serde(with = "crate::numkit::row_major")]
    pub projectors: Vec<Mat>,
    pub nodes: Vec<CompactNode>,
}

impl ComponentBank {
    pub fn member_index(&self, node: usize) -> Option<usize> {
        self.members.iter().position(|&v| v == node)
    }
}

/// Pure-consensus rule x̂_i+ = A Σ_l w_il x̂_l of a node outside every source component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonSourceRule {
    pub node: usize,
    pub weights: Vec<(usize, f64)>,
    pub parents: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonSourceConsensus {
    pub roots: Vec<usize>,
    pub rules: Vec<NonSourceRule>,
    /// Non-source nodes with parents first.
    pub topo_order: Vec<usize>,
}

/// Weight 1 on the forest parent for every node outside `sources`.
pub fn nonsource_consensus(g: &Digraph, sources: &BTreeSet<usize>, max_parents: usize) -> Result<NonSourceConsensus> {
    if sources.len() == g.n_nodes() {
        return Ok(NonSourceConsensus { roots: sources.iter().copied().collect(), rules: Vec::new(), topo_order: Vec::new() });
    }
    let dag = spanning_dag(g, sources, max_parents.max(1))?;
    let rules = dag
        .parents
        .iter()
        .map(|(&i, ps)| NonSourceRule { node: i, weights: vec![(ps[0], 1.0)], parents: ps.clone() })
        .collect();
    let topo_order = dag.topo_order.iter().copied().filter(|v| !sources.contains(v)).collect();
    Ok(NonSourceConsensus { roots: sources.iter().copied().collect(), rules, topo_order })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactObserverBank {
    #[serde(with = "crate::numkit::row_major")]
    pub a: Mat,
    #[serde(with = "crate::numkit::row_major")]
    pub c: Vec<Mat>,
    pub components: Vec<ComponentBank>,
    pub nonsource: NonSourceConsensus,
}

impl CompactObserverBank {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.c.len()
    }

    /// Parent sets per consensus layer: one map per non-empty sub-state of
    /// every component, then one for the non-source nodes if any.
    pub fn parent_layers(&self) -> Vec<BTreeMap<usize, Vec<usize>>> {
        let mut out: Vec<BTreeMap<usize, Vec<usize>>> = self
            .components
            .iter()
            .flat_map(|cb| cb.slot_weights.iter().flatten().map(|sw| sw.parents.clone()))
            .collect();
        if !self.nonsource.rules.is_empty() {
            out.push(self.nonsource.rules.iter().map(|r| (r.node, r.parents.clone())).collect());
        }
        out
    }

    /// One synchronous step of every node. `y[i - 1]` is node i's measurement;
    /// `active` is the set of live edges, `None` for the static graph.
    pub fn step(
        &self,
        xhat: &[DVector<f64>],
        y: &[DVector<f64>],
        active: Option<&BTreeSet<(usize, usize)>>,
    ) -> Vec<DVector<f64>> {
        let mut next = xhat.to_vec();
        for cb in &self.components {
            let d = &cb.decomposition;
            for (k, nd) in cb.nodes.iter().enumerate() {
                let i = nd.node;
                let xi = &xhat[i - 1];
                let innov = &y[i - 1] - &self.c[i - 1] * xi;
                let mut v = &cb.n_mat * xi + &nd.innovation_gain * innov;
                if active.is_none() {
                    for (&l, g) in &nd.neighbor_gains {
                        v += g * &xhat[l - 1];
                    }
                } else {
                    v += &cb.projectors[k] * xi;
                    v += &cb.projectors[d.u_slot()] * xi;
                    for (s, sw) in cb.slot_weights.iter().enumerate() {
                        let Some(sw) = sw else { continue };
                        if s == k {
                            continue;
                        }
                        let base = sw.weights.get(&i).map(|w| w.as_slice()).unwrap_or(&[]);
                        let parents = sw.parents.get(&i).map(|p| p.as_slice()).unwrap_or(&[]);
                        let mut mix = DVector::zeros(self.n());
                        for (l, w) in switched_weights(i, base, parents, active) {
                            mix += &xhat[l - 1] * w;
                        }
                        v += &cb.projectors[s] * mix;
                    }
                }
                next[i - 1] = v;
            }
        }
        for r in &self.nonsource.rules {
            let mut mix = DVector::zeros(self.n());
            for (l, w) in switched_weights(r.node, &r.weights, &r.parents, active) {
                mix += &xhat[l - 1] * w;
            }
            next[r.node - 1] = &self.a * mix;
        }
        next
    }
}

/// Stacked weight vector w_il over the slots listed by [`stacked_slots`].
pub fn stacked_weight_vector(cb_d: &MultiSensorDecomposition, weights: &[Option<SlotWeights>], i: usize, l: usize) -> Vec<f64> {
    let own = cb_d.slot_of(i).expect("member");
    stacked_slots(cb_d)
        .into_iter()
        .map(|s| {
            if s == own || s == cb_d.u_slot() {
                if l == i {
                    1.0
                } else {
                    0.0
                }
            } else {
                weights[s].as_ref().map(|sw| sw.weight(i, l)).unwrap_or(0.0)
            }
        })
        .collect()
}

/// Assembles the compact observers of one component.
pub fn assemble_compact_bank(
    p: &Plant,
    d: &MultiSensorDecomposition,
    gains: &[Mat],
    weights: &[Option<SlotWeights>],
    g: &Digraph,
) -> Result<ComponentBank> {
    if gains.len() != d.o.len() || weights.len() != d.o.len() {
        return Err(Error::Internal("gain or weight count does not match the sub-states".into()));
    }
    for sw in weights.iter().flatten() {
        validate_slot_weights(g, sw, &d.nodes)?;
    }
    let n = d.n();
    let a2 = d.abar_diag();
    let a1 = &d.abar - &a2;
    let n_mat = &d.t * &a1 * &d.t_inv;
    let projectors: Vec<Mat> = (0..d.n_slots())
        .map(|s| {
            let (off, dim) = (d.offset(s), d.dim(s));
            let t_s = sub(&d.t, 0, off, n, dim);
            let ti_s = sub(&d.t_inv, off, 0, dim, n);
            &t_s * d.block(s, s) * ti_s
        })
        .collect();
    let mut nodes = Vec::with_capacity(d.nodes.len());
    for (k, &i) in d.nodes.iter().enumerate() {
        let t_k = sub(&d.t, 0, d.offset(k), n, d.o[k]);
        let innovation_gain = if d.o[k] == 0 { Mat::zeros(n, p.c_of(i).nrows()) } else { &t_k * &gains[k] };
        let mut neighbors: BTreeSet<usize> = BTreeSet::from([i]);
        for sw in weights.iter().flatten() {
            if let Some(ws) = sw.weights.get(&i) {
                neighbors.extend(ws.iter().map(|(l, _)| *l));
            }
        }
        let mut stacked_weights = BTreeMap::new();
        let mut neighbor_gains = BTreeMap::new();
        for l in neighbors {
            let mut gl = Mat::zeros(n, n);
            if l == i {
                gl += &projectors[k];
                gl += &projectors[d.u_slot()];
            }
            for (s, sw) in weights.iter().enumerate() {
                if s == k {
                    continue;
                }
                if let Some(sw) = sw {
                    let w = sw.weight(i, l);
                    if w != 0.0 {
                        gl += &projectors[s] * w;
                    }
                }
            }
            stacked_weights.insert(l, stacked_weight_vector(d, weights, i, l));
            neighbor_gains.insert(l, gl);
        }
        nodes.push(CompactNode { node: i, slot: k, innovation_gain, stacked_weights, neighbor_gains });
    }
    Ok(ComponentBank {
        members: d.nodes.clone(),
        decomposition: d.clone(),
        gains: gains.to_vec(),
        slot_weights: weights.to_vec(),
        n_mat,
        projectors,
        nodes,
    })
}

/// One step of the unassembled sub-state observers of a component:
/// Luenberger update of the own sub-state, consensus on the others and the
/// open-loop copy of the unobservable part. `zhat[k]` and `y[k]` belong to
/// member k.
pub fn component_equations_step(cb: &ComponentBank, zhat: &[DVector<f64>], y: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let d = &cb.decomposition;
    let seg = |v: &DVector<f64>, s: usize| v.rows(d.offset(s), d.dim(s)).into_owned();
    let mut out = Vec::with_capacity(zhat.len());
    for (k, &i) in cb.members.iter().enumerate() {
        let zi = &zhat[k];
        let mut next = DVector::zeros(d.n());
        for s in 0..d.o.len() {
            if d.o[s] == 0 {
                continue;
            }
            let mut coupling = DVector::zeros(d.o[s]);
            for l in 0..s {
                coupling += d.block(s, l) * seg(zi, l);
            }
            let v = if s == k {
                let mut pred = DVector::zeros(d.cbar[k].nrows());
                for l in 0..=s {
                    pred += d.c_block(k, l) * seg(zi, l);
                }
                d.block(s, s) * seg(zi, s) + &coupling + &cb.gains[s] * (&y[k] - pred)
            } else {
                let sw = cb.slot_weights[s].as_ref().expect("non-empty slot");
                let mut mix = DVector::zeros(d.o[s]);
                for &(l, w) in sw.weights.get(&i).map(|w| w.as_slice()).unwrap_or(&[]) {
                    let m = cb.member_index(l).expect("member");
                    mix += seg(&zhat[m], s) * w;
                }
                d.block(s, s) * mix + &coupling
            };
            next.rows_mut(d.offset(s), d.o[s]).copy_from(&v);
        }
        if d.u_dim > 0 {
            let u = d.u_slot();
            let mut v = d.a_u() * seg(zi, u);
            for l in 0..d.o.len() {
                v += d.a_to_u(l) * seg(zi, l);
            }
            next.rows_mut(d.offset(u), d.u_dim).copy_from(&v);
        }
        let _ = i;
        out.push(next);
    }
    out
}

// ---------------------------------------------------------------------------
// Certification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstateStability {
    pub component: usize,
    pub slot: usize,
    pub source: usize,
    pub topo_order: Vec<usize>,
    /// [[A_pp - L_p C_pp, 0], [W21 ⊗ A_pp, W22 ⊗ A_pp]].
    #[serde(with = "crate::numkit::row_major")]
    pub m_p: Mat,
    pub rho: f64,
    /// (l, H_pl) for every earlier non-empty slot l.
    #[serde(with = "crate::numkit::row_major")]
    pub couplings: Vec<(usize, Mat)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub substates: Vec<SubstateStability>,
    /// ρ(A_U) per component; 0 for an empty unobservable part.
    pub rho_unobservable: Vec<f64>,
    /// ρ(W ⊗ A) over the non-source nodes.
    pub rho_nonsource: f64,
    pub margin: f64,
    pub certified: bool,
}

impl StabilityReport {
    pub fn max_rho(&self) -> f64 {
        self.substates
            .iter()
            .map(|s| s.rho)
            .chain(self.rho_unobservable.iter().copied())
            .chain(std::iter::once(self.rho_nonsource))
            .fold(0.0, f64::max)
    }
}

fn weight_matrix(rows: &[usize], cols: &[usize], w: impl Fn(usize, usize) -> f64) -> Mat {
    Mat::from_fn(rows.len(), cols.len(), |r, c| w(rows[r], cols[c]))
}

/// Composite error matrices of every sub-state and the unobservable parts.
pub fn certify_stability(bank: &CompactObserverBank, g: &Digraph, tol: &ToleranceConfig) -> Result<StabilityReport> {
    let mut substates = Vec::new();
    let mut rho_unobservable = Vec::new();
    for (ci, cb) in bank.components.iter().enumerate() {
        let d = &cb.decomposition;
        for sw in cb.slot_weights.iter().flatten() {
            validate_slot_weights(g, sw, &cb.members)?;
        }
        for p in 0..d.o.len() {
            let Some(sw) = cb.slot_weights[p].as_ref() else { continue };
            let order: Vec<usize> = {
                let mut o = vec![sw.source];
                o.extend(sw.topo_order.iter().copied().filter(|&v| v != sw.source && cb.members.contains(&v)));
                o.extend(cb.members.iter().copied().filter(|v| !sw.topo_order.contains(v) && *v != sw.source));
                o
            };
            let a_pp = d.block(p, p);
            let k_p = &a_pp - &cb.gains[p] * d.c_block(p, p);
            let m_p = if order.len() == 1 {
                k_p
            } else {
                let followers = &order[1..];
                let w = weight_matrix(followers, &order, |i, l| sw.weight(i, l));
                let w21 = w.columns(0, 1).into_owned();
                let w22 = w.columns(1, followers.len()).into_owned();
                let lower = crate::numkit::hstack(&[&kron(&w21, &a_pp), &kron(&w22, &a_pp)]);
                let top = crate::numkit::hstack(&[&k_p, &Mat::zeros(d.o[p], followers.len() * d.o[p])]);
                crate::numkit::vstack(&[&top, &lower])
            };
            let rho = spectral_radius_block_lower(&m_p, &vec![d.o[p]; order.len()])?;
            let couplings = (0..p)
                .filter(|&l| d.o[l] > 0)
                .map(|l| {
                    let a_pl = d.block(p, l);
                    let head = &a_pl - &cb.gains[p] * d.c_block(p, l);
                    let tail = kron(&Mat::identity(order.len() - 1, order.len() - 1), &a_pl);
                    (l, block_diag(&[&head, &tail]))
                })
                .collect();
            substates.push(SubstateStability { component: ci, slot: p, source: sw.source, topo_order: order, m_p, rho, couplings });
        }
        rho_unobservable.push(if d.u_dim > 0 { spectral_radius(&d.a_u())? } else { 0.0 });
    }
    let rho_nonsource = if bank.nonsource.rules.is_empty() {
        0.0
    } else {
        let order = &bank.nonsource.topo_order;
        let rules: BTreeMap<usize, &NonSourceRule> = bank.nonsource.rules.iter().map(|r| (r.node, r)).collect();
        for r in &bank.nonsource.rules {
            let sum: f64 = r.weights.iter().map(|(_, w)| *w).sum();
            if (sum - 1.0).abs() > 1e-9 || r.weights.iter().any(|&(l, w)| w < 0.0 || (l != r.node && !g.has_edge(l, r.node))) {
                return Err(Error::InvalidWeights(format!("pure-consensus weights of node {} are invalid", r.node)));
            }
        }
        let w = weight_matrix(order, order, |i, l| {
            rules[&i].weights.iter().find(|(m, _)| *m == l).map(|(_, w)| *w).unwrap_or(0.0)
        });
        spectral_radius_block_lower(&kron(&w, &bank.a), &vec![bank.n(); order.len()])?
    };
    let bound = 1.0 - tol.schur_margin;
    let certified = substates.iter().all(|s| s.rho <= bound)
        && rho_unobservable.iter().all(|&r| r <= bound)
        && rho_nonsource <= bound;
    Ok(StabilityReport { substates, rho_unobservable, rho_nonsource, margin: tol.schur_margin, certified })
}

// ---------------------------------------------------------------------------
// End-to-end design

/// A design supplied in full for one source component, used to reproduce
/// published numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GivenDesign {
    /// Members of the component in decomposition order.
    pub order: Vec<usize>,
    #[serde(with = "crate::numkit::row_major")]
    pub t: Mat,
    pub o: Vec<usize>,
    #[serde(with = "crate::numkit::row_major")]
    pub gains: Vec<Mat>,
    pub weights: Vec<StackedWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Options {
    /// Global sensor order; each component uses its members in this order.
    pub order: Option<Vec<usize>>,
    pub poles: PolesPolicy,
    /// Parents kept per node for link-failure redundancy; 1 gives trees.
    pub max_parents: usize,
    pub given: Option<GivenDesign>,
}

impl Default for C1Options {
    fn default() -> Self {
        Self { order: None, poles: PolesPolicy::Deadbeat, max_parents: 1, given: None }
    }
}

/// Designs the Condition-1 observer bank and certifies it.
pub fn design_c1(
    p: &Plant,
    g: &Digraph,
    opts: &C1Options,
    tol: &ToleranceConfig,
) -> Result<(CompactObserverBank, StabilityReport)> {
    let verdict = check_condition1(p, g, tol)?;
    if !verdict.holds {
        return Err(Error::Condition1Infeasible(verdict.diagnostics.join("; ")));
    }
    if let Some(order) = &opts.order {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (1..=p.n_nodes()).collect::<Vec<_>>() {
            return Err(Error::ShapeError(format!("sensor order {order:?} is not a permutation of 1..={}", p.n_nodes())));
        }
    }
    let mut components = Vec::new();
    let mut sources = BTreeSet::new();
    let mut given_used = false;
    for comp in source_components(g) {
        sources.extend(comp.iter().copied());
        let members: Vec<usize> = match &opts.order {
            Some(o) => o.iter().copied().filter(|v| comp.contains(v)).collect(),
            None => comp.iter().copied().collect(),
        };
        let given = opts.given.as_ref().filter(|gd| gd.order.iter().copied().collect::<BTreeSet<_>>() == comp);
        let cb = match given {
            Some(gd) => {
                given_used = true;
                let d = decomposition_from_given(p, &gd.order, &gd.t, &gd.o)?;
                let gains = design_gains(&d, p, opts.poles, Some(&gd.gains), tol)?;
                let weights = weights_from_stacked(&d, &gd.weights)?;
                assemble_compact_bank(p, &d, &gains, &weights, g)?
            }
            None => {
                let d = multisensor_decompose(p, &members, tol)?;
                let gains = design_gains(&d, p, opts.poles, None, tol)?;
                let mut weights = Vec::with_capacity(d.o.len());
                for s in 0..d.o.len() {
                    if d.o[s] == 0 {
                        weights.push(None);
                        continue;
                    }
                    let src = d.nodes[s];
                    let dag = spanning_dag_within(g, &BTreeSet::from([src]), &comp, opts.max_parents.max(1))?;
                    weights.push(Some(consensus_weights_for_substate(g, src, &dag)?));
                }
                assemble_compact_bank(p, &d, &gains, &weights, g)?
            }
        };
        components.push(cb);
    }
    if opts.given.is_some() && !given_used {
        return Err(Error::Schema("supplied design does not match the members of any source component".into()));
    }
    let nonsource = nonsource_consensus(g, &sources, opts.max_parents)?;
    let bank = CompactObserverBank { a: p.a.clone(), c: p.c.clone(), components, nonsource };
    let report = certify_stability(&bank, g, tol)?;
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

    fn worked_example() -> (Plant, Digraph) {
        let p = Plant::new(
            m(&[&[1., 0., 0.], &[2., 2., 0.], &[-5., 0., 2.]]),
            vec![m(&[&[4., 4., 1.]]), m(&[&[11., 13., 3.], &[16., 18., 4.]]), Mat::zeros(0, 3)],
        )
        .unwrap();
        (p, Digraph::new(3, [(1, 2), (2, 1), (2, 3)]).unwrap())
    }

    fn worked_example_given() -> GivenDesign {
        GivenDesign {
            order: vec![1, 2],
            t: m(&[&[4., 7., 0.], &[4., 8., -0.2425], &[1., 2., 0.9701]]),
            o: vec![2, 1],
            gains: vec![m(&[&[-4.6404], &[2.5174]]), m(&[&[-1.641, -3.282]])],
            weights: vec![
                StackedWeight { node: 1, neighbor: 1, w: vec![1., 0.] },
                StackedWeight { node: 1, neighbor: 2, w: vec![0., 1.] },
                StackedWeight { node: 2, neighbor: 1, w: vec![1., 0.] },
                StackedWeight { node: 2, neighbor: 2, w: vec![0., 1.] },
            ],
        }
    }

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        a.shape() == b.shape() && (a - b).abs().max() <= tol
    }

    /// Literal 𝒯 Ā₂ 𝔹 (w ⊗ 𝒯⁻¹) with 𝔹 = diag(B_s) over the stacked slots.
    fn g_literal(d: &MultiSensorDecomposition, w: &[f64]) -> Mat {
        let slots = stacked_slots(d);
        let n = d.n();
        let rows: usize = slots.iter().map(|&s| d.dim(s)).sum();
        let mut bb = Mat::zeros(rows, slots.len() * n);
        let mut r0 = 0;
        for (k, &s) in slots.iter().enumerate() {
            for q in 0..d.dim(s) {
                bb[(r0 + q, k * n + d.offset(s) + q)] = 1.0;
            }
            r0 += d.dim(s);
        }
        let blocks: Vec<Mat> = slots.iter().map(|&s| d.block(s, s)).collect();
        let refs: Vec<&Mat> = blocks.iter().collect();
        let a2 = block_diag(&refs);
        let wcol = Mat::from_column_slice(w.len(), 1, w);
        let t_sel = {
            let mut cols = Vec::new();
            for &s in &slots {
                cols.extend(d.offset(s)..d.offset(s) + d.dim(s));
            }
            crate::numkit::select_cols(&d.t, &cols)
        };
        t_sel * a2 * bb * kron(&wcol, &d.t_inv)
    }

    #[test]
    fn worked_example_reference_bank() {
        let tol = ToleranceConfig::default();
        let (p, g) = worked_example();
        let opts = C1Options { given: Some(worked_example_given()), ..Default::default() };
        let (bank, report) = design_c1(&p, &g, &opts, &tol).unwrap();
        let cb = &bank.components[0];
        assert!(close(&cb.n_mat, &m(&[&[0., 0., 0.], &[1.29, 0., 0.], &[-5.18, 0., 0.]]), 1e-2));
        assert!(close(&cb.nodes[0].innovation_gain, &m(&[&[-0.94], &[1.58], &[0.39]]), 1e-2));
        assert!(close(&cb.nodes[1].innovation_gain, &m(&[&[0., 0.], &[0.40, 0.80], &[-1.59, -3.18]]), 1e-2));
        let g11 = m(&[&[1., 0., 0.], &[0.71, 1.88, 0.47], &[0.18, 0.47, 0.12]]);
        let g12 = m(&[&[0., 0., 0.], &[0., 0.12, -0.47], &[0., -0.47, 1.88]]);
        assert!(close(&cb.nodes[0].neighbor_gains[&1], &g11, 1e-2));
        assert!(close(&cb.nodes[0].neighbor_gains[&2], &g12, 1e-2));
        assert!(close(&cb.nodes[1].neighbor_gains[&1], &g11, 1e-2));
        assert!(close(&cb.nodes[1].neighbor_gains[&2], &g12, 1e-2));
        assert!(report.certified);
        assert_eq!(bank.nonsource.rules, vec![NonSourceRule { node: 3, weights: vec![(2, 1.0)], parents: vec![2] }]);
    }

    #[test]
    fn neighbor_gains_match_literal_formula() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(
            m(&[&[1., 2., -2., -15.], &[0., 2., 4., -16.], &[0., 0., 3., -3.], &[0., 0., 0., 0.]]),
            vec![m(&[&[7., -14., 35., 14.]]), m(&[&[0., 2., -8., -4.]]), m(&[&[0., 0., 5., -5.]])],
        )
        .unwrap();
        let g = Digraph::new(3, [(1, 2), (2, 3), (3, 1)]).unwrap();
        let (bank, report) = design_c1(&p, &g, &C1Options::default(), &tol).unwrap();
        let cb = &bank.components[0];
        for nd in &cb.nodes {
            for (l, gl) in &nd.neighbor_gains {
                let lit = g_literal(&cb.decomposition, &nd.stacked_weights[l]);
                assert!(close(gl, &lit, 1e-10), "node {} neighbor {l}", nd.node);
            }
        }
        assert!(report.certified);
        assert_eq!(cb.decomposition.u_dim, 1);
    }

    #[test]
    fn deadbeat_scalar_gain() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(m(&[&[1.5]]), vec![m(&[&[1.]])]).unwrap();
        let d = multisensor_decompose(&p, &[1], &tol).unwrap();
        let gains = design_gains(&d, &p, PolesPolicy::Deadbeat, None, &tol).unwrap();
        let l = &d.t * &gains[0];
        assert!((l[(0, 0)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn reference_gains_are_accepted() {
        let tol = ToleranceConfig::default();
        let (p, _) = worked_example();
        let gd = worked_example_given();
        let d = decomposition_from_given(&p, &gd.order, &gd.t, &gd.o).unwrap();
        let gains = design_gains(&d, &p, PolesPolicy::Deadbeat, Some(&gd.gains), &tol).unwrap();
        assert_eq!(gains.len(), 2);
    }

    #[test]
    fn path_graph_weights() {
        let g = Digraph::new(3, [(1, 2), (2, 3)]).unwrap();
        let tree = crate::netgraph::bfs_tree(&g, 1).unwrap();
        let sw = consensus_weights_for_substate(&g, 1, &tree).unwrap();
        assert_eq!(sw.weights[&2], vec![(1, 1.0)]);
        assert_eq!(sw.weights[&3], vec![(2, 1.0)]);
        assert!(!sw.weights.contains_key(&1));
    }

    #[test]
    fn invalid_weights_rejected() {
        let tol = ToleranceConfig::default();
        let (p, g) = worked_example();
        let mut gd = worked_example_given();
        gd.weights[2].w = vec![0.7, 0.];
        let opts = C1Options { given: Some(gd), ..Default::default() };
        assert!(matches!(design_c1(&p, &g, &opts, &tol), Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn single_node_is_plain_luenberger() {
        let tol = ToleranceConfig::default();
        let a = m(&[&[1.1, 1.], &[0., 0.9]]);
        let c = m(&[&[1., 0.]]);
        let p = Plant::new(a.clone(), vec![c.clone()]).unwrap();
        let g = Digraph::new(1, []).unwrap();
        let (bank, report) = design_c1(&p, &g, &C1Options::default(), &tol).unwrap();
        let cb = &bank.components[0];
        let nd = &cb.nodes[0];
        assert_eq!(nd.neighbor_gains.len(), 1);
        let total = &cb.n_mat + &nd.neighbor_gains[&1];
        assert!(close(&total, &a, 1e-12));
        assert!(report.certified);
        assert!(report.max_rho() < 1e-6);
    }

    #[test]
    fn switched_weights_rules() {
        let active = BTreeSet::from([(1, 3)]);
        assert_eq!(switched_weights(3, &[(1, 1.0)], &[1, 2], Some(&active)), vec![(1, 1.0)]);
        let active = BTreeSet::from([(2, 3)]);
        assert_eq!(switched_weights(3, &[(1, 1.0)], &[1, 2], Some(&active)), vec![(2, 1.0)]);
        let both = BTreeSet::from([(1, 3), (2, 3)]);
        assert_eq!(switched_weights(3, &[(1, 1.0)], &[1, 2], Some(&both)), vec![(1, 1.0)]);
        assert_eq!(switched_weights(3, &[(1, 1.0)], &[1, 2], Some(&BTreeSet::new())), vec![(3, 1.0)]);
    }
}
