mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{eigs, observability_rank, random_digraph, random_instance, random_strongly_connected, same_spectrum, Instance, Profile};
use distobs::conditions::{check_condition1, check_condition2, detectable_set};
use distobs::decomp::multisensor_decompose;
use distobs::netgraph::{bfs_tree, source_components, spanning_dag, spanning_forest, Digraph};
use distobs::numkit::{eigenvalues, norm2, obs_canon_decomp, pbh_detectable, place_observer_gain};
use distobs::simkit::{make_assumption2_signal, simulate, Bank};
use distobs::synth_c1::{design_c1, C1Options, PolesPolicy};
use distobs::synth_c2::design_c2;
use distobs::{Mat, ToleranceConfig};
use nalgebra::DVector;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn profile(n_max: usize, nodes_max: usize) -> Profile {
    Profile {
        n_max,
        nodes_max,
        max_modulus: 3.0,
        cover_unstable: false,
        cover_all: false,
        strongly_connected: false,
        complex: true,
        max_rows: 2,
    }
}

fn instance(seed: u64, s: &Profile) -> Instance {
    random_instance(&mut ChaCha8Rng::seed_from_u64(seed), s)
}

fn detectable_instance(seed: u64, n_max: usize, nodes_max: usize) -> Instance {
    let s = Profile { cover_unstable: true, strongly_connected: true, ..profile(n_max, nodes_max) };
    instance(seed, &s)
}

/// Every mode is seen somewhere, so no slow stable mode is left unobserved.
fn observable_instance(seed: u64, n_max: usize, nodes_max: usize) -> Instance {
    let s = Profile { cover_all: true, strongly_connected: true, ..profile(n_max, nodes_max) };
    instance(seed, &s)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

/// Nodes reachable from `from`, including itself.
fn reach(g: &Digraph, from: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([from]);
    let mut stack = vec![from];
    while let Some(v) = stack.pop() {
        for w in g.out_neighbors(v) {
            if seen.insert(w) {
                stack.push(w);
            }
        }
    }
    seen
}

fn is_strictly_lower(adj: &[Vec<u8>]) -> bool {
    adj.iter().enumerate().all(|(a, row)| row.iter().enumerate().all(|(b, &x)| x == 0 || b < a))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn observable_dimension_matches_brute_force_rank(seed in any::<u64>()) {
        let inst = instance(seed, &profile(8, 3));
        let p = &inst.plant;
        let c = p.stacked_c(&(1..=p.n_nodes()).collect::<Vec<_>>());
        let (t, n_obs) = obs_canon_decomp(&p.a, &c, &ToleranceConfig::default()).unwrap();
        prop_assert_eq!(n_obs, observability_rank(&p.a, &c, 1e-9));
        let defect = (t.transpose() * &t - Mat::identity(p.n(), p.n())).abs().max();
        prop_assert!(defect <= 1e-10, "T^T T - I = {defect:e}");
    }

    #[test]
    fn pbh_agrees_with_seen_modes(seed in any::<u64>()) {
        let inst = instance(seed, &profile(6, 2));
        let tol = ToleranceConfig::default();
        for (k, m) in inst.modes.iter().enumerate() {
            let expect = m.lambda.norm() < 1.0 || inst.seen[0].contains(&k);
            prop_assert_eq!(pbh_detectable(&inst.plant.a, inst.plant.c_of(1), m.lambda, &tol).unwrap(), expect);
        }
    }

    #[test]
    fn placed_poles_are_assigned(seed in any::<u64>()) {
        let s = Profile { cover_all: true, nodes_max: 1, ..profile(4, 1) };
        let inst = instance(seed, &s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let n = inst.plant.n();
        let mut poles = Vec::new();
        while poles.len() < n {
            if n - poles.len() >= 2 && rng.random::<bool>() {
                let z = Complex64::from_polar(0.2 + 0.6 * rng.random::<f64>(), 0.3 + 2.5 * rng.random::<f64>());
                poles.extend([z, z.conj()]);
            } else {
                poles.push(Complex64::new(1.6 * rng.random::<f64>() - 0.8, 0.0));
            }
        }
        let tol = ToleranceConfig::default();
        let l = place_observer_gain(&inst.plant.a, inst.plant.c_of(1), &poles, &tol).unwrap();
        let closed = &inst.plant.a - &l * inst.plant.c_of(1);
        prop_assert!(same_spectrum(&eigs(&closed), &poles, 1e-6), "placed {:?} vs {:?}", eigs(&closed), poles);
    }

    #[test]
    fn dag_parents_precede_children(seed in any::<u64>(), max_parents in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = rng.random_range(1..=7);
        let g = random_strongly_connected(&mut rng, size);
        let root = rng.random_range(1..=g.n_nodes());
        let s = spanning_dag(&g, &BTreeSet::from([root]), max_parents).unwrap();
        prop_assert_eq!(s.topo_order.len(), g.n_nodes());
        prop_assert!(is_strictly_lower(&s.ordered_adjacency()));
        for (child, ps) in &s.parents {
            prop_assert!(!ps.is_empty() && ps.len() <= max_parents);
            for &p in ps {
                prop_assert!(g.has_edge(p, *child));
            }
        }
    }

    #[test]
    fn source_components_have_no_outside_in_edges(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = rng.random_range(1..=7);
        let g = random_digraph(&mut rng, size, 0.25);
        let closure: BTreeMap<usize, BTreeSet<usize>> = g.nodes().map(|v| (v, reach(&g, v))).collect();
        let mut expect: BTreeSet<BTreeSet<usize>> = BTreeSet::new();
        for v in g.nodes() {
            let scc: BTreeSet<usize> = g.nodes().filter(|&w| closure[&v].contains(&w) && closure[&w].contains(&v)).collect();
            let entered = g.edges().iter().any(|&(a, b)| scc.contains(&b) && !scc.contains(&a));
            if !entered {
                expect.insert(scc);
            }
        }
        let got: BTreeSet<BTreeSet<usize>> = source_components(&g).into_iter().collect();
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn single_root_forest_is_the_bfs_tree(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = rng.random_range(1..=7);
        let g = random_strongly_connected(&mut rng, size);
        let r = rng.random_range(1..=g.n_nodes());
        prop_assert_eq!(spanning_forest(&g, &BTreeSet::from([r])).unwrap(), bfs_tree(&g, r).unwrap());
    }

    #[test]
    fn decomposition_round_trip_and_spectrum(seed in any::<u64>()) {
        let inst = instance(seed, &profile(8, 5));
        let p = &inst.plant;
        let order: Vec<usize> = (1..=p.n_nodes()).collect();
        let d = multisensor_decompose(p, &order, &ToleranceConfig::default()).unwrap();
        let back = &d.t * &d.abar * &d.t_inv;
        prop_assert!((&back - &p.a).norm() <= 1e-7 * norm2(&p.a).max(1.0));
        prop_assert_eq!(d.o.iter().sum::<usize>() + d.u_dim, p.n());
        prop_assert!(same_spectrum(&eigs(&d.abar), &eigs(&p.a), 1e-6));
        prop_assert!(same_spectrum(&eigs(&d.a_u()), &inst.unobservable_eigs(), 1e-6));
    }

    #[test]
    fn decomposition_totals_ignore_order(seed in any::<u64>()) {
        let inst = instance(seed, &profile(8, 5));
        let p = &inst.plant;
        let tol = ToleranceConfig::default();
        let forward: Vec<usize> = (1..=p.n_nodes()).collect();
        let backward: Vec<usize> = forward.iter().rev().copied().collect();
        let a = multisensor_decompose(p, &forward, &tol).unwrap();
        let b = multisensor_decompose(p, &backward, &tol).unwrap();
        prop_assert_eq!(a.u_dim, b.u_dim);
        prop_assert_eq!(a.o.iter().sum::<usize>(), b.o.iter().sum::<usize>());
    }

    #[test]
    fn condition2_implies_condition1(seed in any::<u64>()) {
        let inst = instance(seed, &profile(5, 4));
        let tol = ToleranceConfig::default();
        let c2 = check_condition2(&inst.plant, &inst.graph, &tol).unwrap();
        let c1 = check_condition1(&inst.plant, &inst.graph, &tol).unwrap();
        prop_assert!(!c2.holds || c1.holds);
    }

    #[test]
    fn detectable_set_matches_seen_modes(seed in any::<u64>()) {
        let inst = instance(seed, &profile(6, 2));
        let got = detectable_set(&inst.plant.a, inst.plant.c_of(1), &ToleranceConfig::default()).unwrap();
        for (k, m) in inst.modes.iter().enumerate() {
            let expect = m.lambda.norm() < 1.0 || inst.seen[0].contains(&k);
            let listed = got.iter().any(|z| (z - m.lambda).norm() < 1e-6 || (z - m.lambda.conj()).norm() < 1e-6);
            prop_assert_eq!(listed, expect, "mode {} ({})", k, m.lambda);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn slot_weights_are_stochastic_and_acyclic(seed in any::<u64>(), max_parents in 1usize..3) {
        let inst = detectable_instance(seed, 6, 5);
        let opts = C1Options { max_parents, ..C1Options::default() };
        let (bank, _) = design_c1(&inst.plant, &inst.graph, &opts, &ToleranceConfig::default()).unwrap();
        for cb in &bank.components {
            for sw in cb.slot_weights.iter().flatten() {
                let pos: BTreeMap<usize, usize> = sw.topo_order.iter().enumerate().map(|(k, &v)| (v, k)).collect();
                for (i, ws) in &sw.weights {
                    let total: f64 = ws.iter().map(|(_, w)| w).sum();
                    prop_assert!((total - 1.0).abs() <= 1e-12, "row {i} sums to {total}");
                    for &(l, w) in ws {
                        prop_assert!(w >= 0.0);
                        prop_assert!(pos[&l] < pos[i], "node {i} weighs later node {l}");
                    }
                }
            }
        }
    }

    #[test]
    fn class_weights_are_stochastic_and_dims_add_up(seed in any::<u64>()) {
        let inst = detectable_instance(seed, 5, 4);
        let tol = ToleranceConfig::default();
        if !check_condition2(&inst.plant, &inst.graph, &tol).unwrap().holds {
            return Ok(());
        }
        let (bank, report) = design_c2(&inst.plant, &inst.graph, PolesPolicy::Deadbeat, 1, &tol).unwrap();
        prop_assert!(report.certified);
        for cw in bank.class_weights.values() {
            for ws in cw.weights.values() {
                let total: f64 = ws.iter().map(|(_, w)| w).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }
        for node in &bank.nodes {
            prop_assert_eq!(node.observer_dim(), inst.plant.n() + node.split.w_o_dim);
        }
    }

    #[test]
    fn both_schemes_converge_under_condition2(seed in any::<u64>()) {
        let inst = detectable_instance(seed, 5, 4);
        let p = &inst.plant;
        let tol = ToleranceConfig::default();
        if !check_condition2(p, &inst.graph, &tol).unwrap().holds {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_vec(&mut rng, p.n());
        let est0: Vec<DVector<f64>> = (0..p.n_nodes()).map(|_| random_vec(&mut rng, p.n())).collect();
        // Locally unseen stable modes decay open loop at their own rate.
        let slowest = inst.modes.iter().map(|m| m.lambda.norm()).filter(|&r| r < 1.0).fold(0.0, f64::max);
        let k = 8 * p.n() + 8 + if slowest > 0.0 { (-25.0 / slowest.ln()).ceil().min(5000.0) as usize } else { 0 };
        let (c1, _) = design_c1(p, &inst.graph, &C1Options::default(), &tol).unwrap();
        let (c2, _) = design_c2(p, &inst.graph, PolesPolicy::Deadbeat, 1, &tol).unwrap();
        for bank in [Bank::C1(c1), Bank::C2(c2)] {
            let tr = simulate(p, &bank, &x0, &est0, k, None).unwrap();
            prop_assert!(tr.max_relerr(k) < 1e-8, "{} ends at {:e}", bank.scheme(), tr.max_relerr(k));
        }
    }

    #[test]
    fn switched_runs_converge_and_repeat(seed in any::<u64>()) {
        let inst = observable_instance(seed, 5, 4);
        let p = &inst.plant;
        let tol = ToleranceConfig::default();
        let opts = C1Options { max_parents: 2, ..C1Options::default() };
        let (bank, _) = design_c1(p, &inst.graph, &opts, &tol).unwrap();
        let bank = Bank::C1(bank);
        let t = 3;
        let k = 20 * t * p.n();
        let signal = make_assumption2_signal(&bank.parent_layers(), &inst.graph, t, k, 0.5, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_vec(&mut rng, p.n());
        let est0: Vec<DVector<f64>> = (0..p.n_nodes()).map(|_| random_vec(&mut rng, p.n())).collect();
        let first = simulate(p, &bank, &x0, &est0, k, Some(&signal)).unwrap();
        let again = simulate(p, &bank, &x0, &est0, k, Some(&signal)).unwrap();
        prop_assert!(first == again);
        prop_assert!(first.max_relerr(k) < 1e-6, "ends at {:e}", first.max_relerr(k));
    }
}

#[test]
fn unobservable_spectrum_is_stable_on_detectable_instances() {
    for seed in 0..40 {
        let inst = detectable_instance(seed, 6, 4);
        let order: Vec<usize> = (1..=inst.plant.n_nodes()).collect();
        let d = multisensor_decompose(&inst.plant, &order, &ToleranceConfig::default()).unwrap();
        let rho = eigenvalues(&d.a_u()).unwrap().iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(rho < 1.0, "seed {seed}: rho(A_U) = {rho}");
    }
}
