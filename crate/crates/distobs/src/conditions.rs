//! Feasibility analysis: per-node detectable eigenvalues, root-node sets and
//! the two network detectability conditions.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::decomp::Plant;
use crate::error::{Error, Result};
use crate::netgraph::{source_components, Digraph};
use crate::numkit::{eigen_info, pbh_detectable, EigenInfo, Mat, ToleranceConfig};

/// Human-readable eigenvalue; a fused pair prints as `a±bi`.
pub fn fmt_lambda(l: Complex64) -> String {
    if l.im == 0.0 {
        format!("{}", round_for_display(l.re))
    } else {
        format!("{}±{}i", round_for_display(l.re), round_for_display(l.im.abs()))
    }
}

fn round_for_display(v: f64) -> f64 {
    let r = (v * 1e9).round() / 1e9;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Eigenvalue classes of `a` that node measurements `c` can detect. Stable
/// classes are always included.
pub fn detectable_set(a: &Mat, c: &Mat, tol: &ToleranceConfig) -> Result<Vec<Complex64>> {
    let info = eigen_info(a, tol)?;
    detectable_among(&info, a, c, tol)
}

fn detectable_among(info: &EigenInfo, a: &Mat, c: &Mat, tol: &ToleranceConfig) -> Result<Vec<Complex64>> {
    let mut out = Vec::new();
    for cl in &info.classes {
        if pbh_detectable(a, c, cl.lambda, tol)? {
            out.push(cl.lambda);
        }
    }
    Ok(out)
}

fn check_graph(p: &Plant, g: &Digraph) -> Result<()> {
    if g.n_nodes() != p.n_nodes() {
        return Err(Error::ShapeError(format!(
            "graph has {} nodes but the plant has {} sensors",
            g.n_nodes(),
            p.n_nodes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentVerdict {
    pub nodes: Vec<usize>,
    pub detectable: bool,
    /// Unstable classes the component's stacked measurements miss, as (re, im).
    pub undetectable: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition1Verdict {
    pub holds: bool,
    pub components: Vec<ComponentVerdict>,
    pub diagnostics: Vec<String>,
}

/// Every source component must be collectively detectable.
pub fn check_condition1(p: &Plant, g: &Digraph, tol: &ToleranceConfig) -> Result<Condition1Verdict> {
    check_graph(p, g)?;
    let info = eigen_info(&p.a, tol)?;
    let mut components = Vec::new();
    let mut diagnostics = Vec::new();
    for comp in source_components(g) {
        let nodes: Vec<usize> = comp.iter().copied().collect();
        let c = p.stacked_c(&nodes);
        let mut missing = Vec::new();
        for cl in info.unstable(tol) {
            if !pbh_detectable(&p.a, &c, cl.lambda, tol)? {
                missing.push(cl.lambda);
            }
        }
        if !missing.is_empty() {
            let names: Vec<String> = missing.iter().map(|&l| fmt_lambda(l)).collect();
            diagnostics.push(format!(
                "source component {} cannot detect eigenvalue(s) {}",
                fmt_nodes(&nodes),
                names.join(", ")
            ));
        }
        components.push(ComponentVerdict {
            nodes,
            detectable: missing.is_empty(),
            undetectable: missing.iter().map(|l| (l.re, l.im)).collect(),
        });
    }
    Ok(Condition1Verdict { holds: components.iter().all(|c| c.detectable), components, diagnostics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootEntry {
    pub component: Vec<usize>,
    pub lambda: (f64, f64),
    /// Nodes of the component that detect lambda on their own.
    pub roots: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition2Verdict {
    pub holds: bool,
    pub table: Vec<RootEntry>,
    pub diagnostics: Vec<String>,
}

/// Every source component must hold a root node for every unstable class.
pub fn check_condition2(p: &Plant, g: &Digraph, tol: &ToleranceConfig) -> Result<Condition2Verdict> {
    check_graph(p, g)?;
    let info = eigen_info(&p.a, tol)?;
    let mut table = Vec::new();
    let mut diagnostics = Vec::new();
    for comp in source_components(g) {
        let nodes: Vec<usize> = comp.iter().copied().collect();
        for cl in info.unstable(tol) {
            let mut roots = Vec::new();
            for &i in &nodes {
                if pbh_detectable(&p.a, p.c_of(i), cl.lambda, tol)? {
                    roots.push(i);
                }
            }
            if roots.is_empty() {
                diagnostics.push(format!(
                    "source component {} has no root node for eigenvalue {}",
                    fmt_nodes(&nodes),
                    fmt_lambda(cl.lambda)
                ));
            }
            table.push(RootEntry { component: nodes.clone(), lambda: (cl.lambda.re, cl.lambda.im), roots });
        }
    }
    Ok(Condition2Verdict { holds: table.iter().all(|e| !e.roots.is_empty()), table, diagnostics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootSet {
    pub lambda: (f64, f64),
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Eigenvalue classes as (re, im), in class order.
    pub classes: Vec<(f64, f64)>,
    pub unstable: Vec<(f64, f64)>,
    /// Detectable classes of node i at index i - 1.
    pub per_node_detectable: Vec<Vec<(f64, f64)>>,
    /// Root nodes of every unstable class over the whole graph.
    pub root_sets: Vec<RootSet>,
    pub source_comps: Vec<Vec<usize>>,
    pub cond1: Condition1Verdict,
    pub cond2: Condition2Verdict,
}

impl FeasibilityReport {
    pub fn diagnostics(&self) -> impl Iterator<Item = &String> {
        self.cond1.diagnostics.iter().chain(self.cond2.diagnostics.iter())
    }
}

/// Full analysis of a plant and graph.
pub fn feasibility_report(p: &Plant, g: &Digraph, tol: &ToleranceConfig) -> Result<FeasibilityReport> {
    check_graph(p, g)?;
    let info = eigen_info(&p.a, tol)?;
    let pair = |l: &Complex64| (l.re, l.im);
    let per_node: Vec<Vec<Complex64>> = (1..=p.n_nodes())
        .map(|i| detectable_among(&info, &p.a, p.c_of(i), tol))
        .collect::<Result<_>>()?;
    let unstable: Vec<Complex64> = info.unstable(tol).map(|c| c.lambda).collect();
    let root_sets = unstable
        .iter()
        .map(|l| RootSet {
            lambda: pair(l),
            nodes: (1..=p.n_nodes()).filter(|&i| per_node[i - 1].contains(l)).collect(),
        })
        .collect();
    let cond1 = check_condition1(p, g, tol)?;
    let cond2 = check_condition2(p, g, tol)?;
    if cond2.holds && !cond1.holds {
        return Err(Error::Internal("Condition 2 holds while Condition 1 fails".into()));
    }
    Ok(FeasibilityReport {
        classes: info.classes.iter().map(|c| pair(&c.lambda)).collect(),
        unstable: unstable.iter().map(pair).collect(),
        per_node_detectable: per_node.iter().map(|v| v.iter().map(pair).collect()).collect(),
        root_sets,
        source_comps: source_components(g).into_iter().map(|c| c.into_iter().collect()).collect(),
        cond1,
        cond2,
    })
}

fn fmt_nodes(nodes: &[usize]) -> String {
    let inner: Vec<String> = nodes.iter().map(|v| v.to_string()).collect();
    format!("{{{}}}", inner.join(","))
}

fn fmt_pairs(v: &[(f64, f64)]) -> String {
    let inner: Vec<String> = v.iter().map(|&(re, im)| fmt_lambda(Complex64::new(re, im))).collect();
    format!("{{{}}}", inner.join(", "))
}

impl fmt::Display for FeasibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "eigenvalue classes: {}", fmt_pairs(&self.classes))?;
        writeln!(f, "unstable classes:   {}", fmt_pairs(&self.unstable))?;
        for (k, d) in self.per_node_detectable.iter().enumerate() {
            writeln!(f, "node {} detects:     {}", k + 1, fmt_pairs(d))?;
        }
        for r in &self.root_sets {
            writeln!(
                f,
                "root nodes for {}: {}",
                fmt_lambda(Complex64::new(r.lambda.0, r.lambda.1)),
                fmt_nodes(&r.nodes)
            )?;
        }
        let comps: Vec<String> = self.source_comps.iter().map(|c| fmt_nodes(c)).collect();
        writeln!(f, "source components:  {}", comps.join(" "))?;
        writeln!(f, "Condition 1: {}", if self.cond1.holds { "holds" } else { "fails" })?;
        writeln!(f, "Condition 2: {}", if self.cond2.holds { "holds" } else { "fails" })?;
        for d in self.diagnostics() {
            writeln!(f, "  - {d}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::from_rows;

    fn m(rows: &[&[f64]]) -> Mat {
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), ncols).unwrap()
    }

    fn two_group() -> (Plant, Digraph) {
        let p = Plant::new(
            m(&[&[2., 0.], &[0., 2.]]),
            vec![m(&[&[1., 0.]]), m(&[&[0., 1.]]), m(&[&[1., 0.], &[0., 1.]])],
        )
        .unwrap();
        (p, Digraph::new(3, [(1, 2), (2, 1)]).unwrap())
    }

    #[test]
    fn two_group_verdicts() {
        let tol = ToleranceConfig::default();
        let (p, g) = two_group();
        let r = feasibility_report(&p, &g, &tol).unwrap();
        assert!(r.cond1.holds);
        assert!(!r.cond2.holds);
        assert_eq!(r.cond2.diagnostics, vec!["source component {1,2} has no root node for eigenvalue 2".to_string()]);
        assert!(r.per_node_detectable[0].is_empty());
        assert_eq!(r.per_node_detectable[2], vec![(2.0, 0.0)]);
    }

    #[test]
    fn worked_example_condition1() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(
            m(&[&[1., 0., 0.], &[2., 2., 0.], &[-5., 0., 2.]]),
            vec![m(&[&[4., 4., 1.]]), m(&[&[11., 13., 3.], &[16., 18., 4.]]), Mat::zeros(0, 3)],
        )
        .unwrap();
        let g = Digraph::new(3, [(1, 2), (2, 1), (2, 3)]).unwrap();
        assert!(check_condition1(&p, &g, &tol).unwrap().holds);
        assert!(detectable_set(&p.a, p.c_of(3), &tol).unwrap().is_empty());
    }

    #[test]
    fn undetectable_component_named() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(m(&[&[1.2]]), vec![m(&[&[1.]]), Mat::zeros(0, 1)]).unwrap();
        let g = Digraph::new(2, []).unwrap();
        let v = check_condition1(&p, &g, &tol).unwrap();
        assert!(!v.holds);
        assert_eq!(v.diagnostics.len(), 1);
        assert!(v.diagnostics[0].contains("{2}"));
    }

    #[test]
    fn illustrative_condition2() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(m(&[&[1.5]]), vec![m(&[&[1.]]), Mat::zeros(0, 1), Mat::zeros(0, 1)]).unwrap();
        let g = Digraph::new(3, [(1, 2), (1, 3), (2, 1)]).unwrap();
        assert!(check_condition2(&p, &g, &tol).unwrap().holds);
    }

    #[test]
    fn stable_plant_is_vacuous() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(m(&[&[0.5, 1.], &[0., -0.3]]), vec![Mat::zeros(0, 2), Mat::zeros(0, 2)]).unwrap();
        let g = Digraph::new(2, []).unwrap();
        let r = feasibility_report(&p, &g, &tol).unwrap();
        assert!(r.cond1.holds && r.cond2.holds);
        assert!(r.unstable.is_empty());
    }

    #[test]
    fn complex_pair_prints_once() {
        assert_eq!(fmt_lambda(Complex64::new(0.5, -2.0)), "0.5±2i");
        assert_eq!(fmt_lambda(Complex64::new(2.0, 0.0)), "2");
    }
}
