//! Graph structure used by the consensus weights: strong components, source
//! components, a BFS tree and a layered DAG with up to two parents per node.

use std::collections::BTreeSet;

use distobs::netgraph::{bfs_tree, source_components, spanning_dag, strong_components, Digraph};

fn main() -> distobs::Result<()> {
    // 1 <-> 2 feed the cycle 3 -> 4 -> 5 -> 3; node 6 hangs off 5.
    // Node 3 hears from both 1 and 2, so the DAG can give it two parents.
    let g = Digraph::new(6, [(1, 2), (2, 1), (1, 3), (2, 3), (1, 4), (3, 4), (4, 5), (5, 3), (5, 6)])?;

    println!("strong components: {:?}", strong_components(&g));
    println!("source components: {:?}", source_components(&g));

    let tree = bfs_tree(&g, 1)?;
    println!("BFS tree from 1, order {:?}", tree.topo_order);
    for v in &tree.topo_order[1..] {
        println!("  parent of {v}: {:?}", tree.parent(*v));
    }

    let dag = spanning_dag(&g, &BTreeSet::from([1]), 2)?;
    println!("two-parent DAG from 1:");
    for (v, ps) in &dag.parents {
        println!("  {v} <- {ps:?}");
    }
    Ok(())
}
