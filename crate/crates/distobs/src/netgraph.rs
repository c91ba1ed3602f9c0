//! Directed communication graphs: strong components, source components and
//! BFS-based spanning trees, forests and redundant DAGs.
//!
//! Node ids run from 1 to N. An edge (j, i) means j -> i, i.e. node i receives
//! from node j. Every node implicitly hears itself; self-loops are not stored.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Digraph {
    /// Builds a graph on nodes 1..=n. Self-loops are dropped.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (j, i) in edges {
            if j == 0 || i == 0 || j > n || i > n {
                return Err(Error::ShapeError(format!("edge ({j}, {i}) outside node range 1..={n}")));
            }
            if j != i {
                set.insert((j, i));
            }
        }
        Ok(Self { n, edges: set })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> {
        1..=self.n
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    /// Nodes that send to `i`, ascending.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        self.edges.iter().filter(|&&(_, t)| t == i).map(|&(f, _)| f).collect()
    }

    /// Nodes that receive from `j`, ascending.
    pub fn out_neighbors(&self, j: usize) -> Vec<usize> {
        self.edges.range((j, 0)..(j + 1, 0)).map(|&(_, t)| t).collect()
    }

    /// Graph restricted to the edges whose endpoints both lie in `keep`.
    pub fn induced(&self, keep: &BTreeSet<usize>) -> Self {
        let edges = self.edges.iter().filter(|(f, t)| keep.contains(f) && keep.contains(t)).copied().collect();
        Self { n: self.n, edges }
    }

    /// Same node set, with only the listed edges kept.
    pub fn with_edges(&self, edges: &BTreeSet<(usize, usize)>) -> Self {
        Self { n: self.n, edges: edges.intersection(&self.edges).copied().collect() }
    }
}

/// Rooted spanning structure. Trees and forests carry one parent per node;
/// DAGs may carry several.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanningStructure {
    pub roots: BTreeSet<usize>,
    /// Parents of every non-root node; the first entry is the forest parent.
    pub parents: BTreeMap<usize, Vec<usize>>,
    /// BFS layer order, ascending id within a layer. Parents precede children.
    /// Nodes outside the spanned set are absent.
    pub topo_order: Vec<usize>,
}

impl SpanningStructure {
    /// The unique parent of `i`, if `i` is a non-root node of a tree or forest.
    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents.get(&i).and_then(|p| p.first().copied())
    }

    /// Parent-relation adjacency under `topo_order`: entry (a, b) is 1 when the
    /// node at position b is a parent of the node at position a.
    pub fn ordered_adjacency(&self) -> Vec<Vec<u8>> {
        let pos: BTreeMap<usize, usize> = self.topo_order.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let m = self.topo_order.len();
        let mut adj = vec![vec![0u8; m]; m];
        for (child, ps) in &self.parents {
            for p in ps {
                adj[pos[child]][pos[p]] = 1;
            }
        }
        adj
    }
}

/// Strong components in reverse topological order of the condensation
/// (components with no outgoing edges come first). Members are ascending.
pub fn strong_components(g: &Digraph) -> Vec<BTreeSet<usize>> {
    // Iterative Tarjan.
    let n = g.n_nodes();
    let succ: Vec<Vec<usize>> = (0..=n).map(|v| if v == 0 { Vec::new() } else { g.out_neighbors(v) }).collect();
    let mut index = vec![usize::MAX; n + 1];
    let mut low = vec![0usize; n + 1];
    let mut on_stack = vec![false; n + 1];
    let mut stack = Vec::new();
    let mut counter = 0;
    let mut out = Vec::new();
    for s in 1..=n {
        if index[s] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(s, 0)];
        index[s] = counter;
        low[s] = counter;
        counter += 1;
        stack.push(s);
        on_stack[s] = true;
        while let Some(&mut (v, ref mut k)) = call.last_mut() {
            if *k < succ[v].len() {
                let w = succ[v][*k];
                *k += 1;
                if index[w] == usize::MAX {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(u, _)) = call.last() {
                    low[u] = low[u].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = BTreeSet::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack");
                        on_stack[w] = false;
                        comp.insert(w);
                        if w == v {
                            break;
                        }
                    }
                    out.push(comp);
                }
            }
        }
    }
    out
}

/// Strong components with no incoming edge from outside, ordered by smallest member.
pub fn source_components(g: &Digraph) -> Vec<BTreeSet<usize>> {
    let mut out: Vec<BTreeSet<usize>> = strong_components(g)
        .into_iter()
        .filter(|comp| !g.edges().iter().any(|(f, t)| comp.contains(t) && !comp.contains(f)))
        .collect();
    out.sort_by_key(|c| *c.iter().next().expect("non-empty component"));
    out
}

/// BFS layers from `roots`, restricted to `allowed` nodes.
fn layers(g: &Digraph, roots: &BTreeSet<usize>, allowed: &BTreeSet<usize>) -> Result<Vec<Vec<usize>>> {
    for r in roots {
        if *r == 0 || *r > g.n_nodes() {
            return Err(Error::ShapeError(format!("root {r} outside node range")));
        }
    }
    let mut seen: BTreeSet<usize> = roots.clone();
    let mut out = vec![roots.iter().copied().collect::<Vec<_>>()];
    loop {
        let last = out.last().expect("at least the root layer");
        let mut next = BTreeSet::new();
        for &u in last {
            for v in g.out_neighbors(u) {
                if allowed.contains(&v) && !seen.contains(&v) {
                    next.insert(v);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        seen.extend(next.iter().copied());
        out.push(next.into_iter().collect());
    }
    let missing: Vec<usize> = allowed.iter().filter(|v| !seen.contains(v)).copied().collect();
    if !missing.is_empty() {
        return Err(Error::NotSpanning(missing));
    }
    Ok(out)
}

fn layered_structure(
    g: &Digraph,
    roots: &BTreeSet<usize>,
    allowed: &BTreeSet<usize>,
    max_parents: usize,
) -> Result<SpanningStructure> {
    if max_parents == 0 {
        return Err(Error::ShapeError("max_parents must be at least 1".into()));
    }
    let ls = layers(g, roots, allowed)?;
    let order: Vec<usize> = ls.iter().flatten().copied().collect();
    let mut rank = BTreeMap::new();
    for (layer, members) in ls.iter().enumerate() {
        for &v in members {
            rank.insert(v, (layer, v));
        }
    }
    let mut parents = BTreeMap::new();
    for &v in order.iter().filter(|v| !roots.contains(v)) {
        // Candidates precede v in the BFS order: the previous layer, then earlier
        // members of v's own layer, ascending id within each. The first candidate
        // is therefore the forest parent.
        let mut ps: Vec<(usize, usize)> =
            g.in_neighbors(v).into_iter().filter_map(|u| rank.get(&u).copied()).filter(|r| *r < rank[&v]).collect();
        ps.sort();
        parents.insert(v, ps.into_iter().take(max_parents).map(|(_, u)| u).collect());
    }
    Ok(SpanningStructure { roots: roots.clone(), parents, topo_order: order })
}

fn all_nodes(g: &Digraph) -> BTreeSet<usize> {
    g.nodes().collect()
}

/// BFS spanning tree rooted at `root`. Each node's parent is its lowest-id
/// in-neighbor in the previous BFS layer.
pub fn bfs_tree(g: &Digraph, root: usize) -> Result<SpanningStructure> {
    spanning_forest(g, &BTreeSet::from([root]))
}

/// Multi-source BFS forest rooted at `roots` that spans every node.
pub fn spanning_forest(g: &Digraph, roots: &BTreeSet<usize>) -> Result<SpanningStructure> {
    layered_structure(g, roots, &all_nodes(g), 1)
}

/// Spanning forest over the subgraph induced by `members`.
pub fn spanning_forest_within(
    g: &Digraph,
    roots: &BTreeSet<usize>,
    members: &BTreeSet<usize>,
) -> Result<SpanningStructure> {
    layered_structure(&g.induced(members), roots, members, 1)
}

/// Layered BFS DAG: each non-root node keeps the in-neighbors that precede it in
/// the BFS order, previous layer first and ascending id within a layer, truncated
/// to `max_parents`. With `max_parents = 1` this is exactly `spanning_forest`.
pub fn spanning_dag(g: &Digraph, roots: &BTreeSet<usize>, max_parents: usize) -> Result<SpanningStructure> {
    layered_structure(g, roots, &all_nodes(g), max_parents)
}

/// Spanning DAG over the subgraph induced by `members`.
pub fn spanning_dag_within(
    g: &Digraph,
    roots: &BTreeSet<usize>,
    members: &BTreeSet<usize>,
    max_parents: usize,
) -> Result<SpanningStructure> {
    layered_structure(&g.induced(members), roots, members, max_parents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn fig1() -> Digraph {
        Digraph::new(3, [(1, 2), (2, 1)]).unwrap()
    }

    fn fig2_left() -> Digraph {
        Digraph::new(3, [(1, 2), (1, 3), (2, 1)]).unwrap()
    }

    fn fig4() -> Digraph {
        Digraph::new(3, [(1, 2), (2, 1), (2, 3)]).unwrap()
    }

    #[test]
    fn strong_components_examples() {
        assert_eq!(strong_components(&fig1()), vec![set(&[1, 2]), set(&[3])]);
        let k3 = Digraph::new(3, [(1, 2), (2, 1), (1, 3), (3, 1), (2, 3), (3, 2)]).unwrap();
        assert_eq!(strong_components(&k3), vec![set(&[1, 2, 3])]);
        let path = Digraph::new(3, [(1, 2), (2, 3)]).unwrap();
        // Sink first.
        assert_eq!(strong_components(&path), vec![set(&[3]), set(&[2]), set(&[1])]);
    }

    #[test]
    fn source_component_examples() {
        assert_eq!(source_components(&fig1()), vec![set(&[1, 2]), set(&[3])]);
        assert_eq!(source_components(&fig4()), vec![set(&[1, 2])]);
        let ring = Digraph::new(4, [(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap();
        assert_eq!(source_components(&ring), vec![set(&[1, 2, 3, 4])]);
    }

    #[test]
    fn bfs_tree_examples() {
        let t = bfs_tree(&fig2_left(), 1).unwrap();
        assert_eq!(t.parent(2), Some(1));
        assert_eq!(t.parent(3), Some(1));
        let path = Digraph::new(3, [(1, 2), (2, 3)]).unwrap();
        let t = bfs_tree(&path, 1).unwrap();
        assert_eq!((t.parent(2), t.parent(3)), (Some(1), Some(2)));
        let t = bfs_tree(&fig4(), 2).unwrap();
        assert_eq!((t.parent(1), t.parent(3)), (Some(2), Some(2)));
        assert_eq!(t.topo_order, vec![2, 1, 3]);
    }

    #[test]
    fn forest_examples() {
        let f = spanning_forest(&fig4(), &set(&[1, 2])).unwrap();
        assert_eq!(f.parent(3), Some(2));
        assert!(!f.parents.contains_key(&1));
        match spanning_forest(&fig1(), &set(&[3])) {
            Err(Error::NotSpanning(missing)) => assert_eq!(missing, vec![1, 2]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dag_examples() {
        let tri = Digraph::new(3, [(1, 2), (1, 3), (2, 3)]).unwrap();
        let d = spanning_dag(&tri, &set(&[1]), 2).unwrap();
        assert_eq!(d.parents[&2], vec![1]);
        assert_eq!(d.parents[&3], vec![1, 2]);
        let d = spanning_dag(&fig2_left(), &set(&[1]), 2).unwrap();
        assert_eq!(d.parents[&2], vec![1]);
        assert_eq!(d.parents[&3], vec![1]);
    }

    #[test]
    fn dag_keeps_redundant_parents() {
        let diamond = Digraph::new(4, [(1, 2), (1, 3), (2, 4), (3, 4)]).unwrap();
        let d = spanning_dag(&diamond, &set(&[1]), 2).unwrap();
        assert_eq!(d.parents[&4], vec![2, 3]);
        let d1 = spanning_dag(&diamond, &set(&[1]), 1).unwrap();
        assert_eq!(d1, spanning_forest(&diamond, &set(&[1])).unwrap());
        // A same-layer lower id never displaces the previous-layer parent.
        let g = Digraph::new(5, [(5, 3), (5, 2), (2, 3)]).unwrap();
        let members = set(&[2, 3, 5]);
        let d = spanning_dag_within(&g, &set(&[5]), &members, 2).unwrap();
        assert_eq!(d.parents[&3], vec![5, 2]);
        assert_eq!(spanning_forest_within(&g, &set(&[5]), &members).unwrap().parent(3), Some(5));
    }

    #[test]
    fn self_loops_dropped_and_range_checked() {
        let g = Digraph::new(2, [(1, 1), (1, 2)]).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert!(Digraph::new(2, [(0, 1)]).is_err());
        assert!(Digraph::new(2, [(1, 3)]).is_err());
    }

    #[test]
    fn forest_within_component() {
        let f = spanning_forest_within(&fig4(), &set(&[2]), &set(&[1, 2])).unwrap();
        assert_eq!(f.parent(1), Some(2));
        assert_eq!(f.topo_order, vec![2, 1]);
    }
}
