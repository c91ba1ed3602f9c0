//! Random instance generators and independent reference computations shared
//! by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use distobs::decomp::Plant;
use distobs::netgraph::Digraph;
use distobs::Mat;
use nalgebra::{DMatrix, QR};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

/// One real eigenvalue or one conjugate pair of the generated plant.
#[derive(Debug, Clone, Copy)]
pub struct Mode {
    pub lambda: Complex64,
    pub offset: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub plant: Plant,
    pub graph: Digraph,
    pub modes: Vec<Mode>,
    /// Modes seen by each node (indices into `modes`).
    pub seen: Vec<BTreeSet<usize>>,
}

impl Instance {
    /// Eigenvalues no node sees, each conjugate pair listed twice.
    pub fn unobservable_eigs(&self) -> Vec<Complex64> {
        let all: BTreeSet<usize> = self.seen.iter().flatten().copied().collect();
        let mut out = Vec::new();
        for (k, m) in self.modes.iter().enumerate() {
            if !all.contains(&k) {
                out.push(m.lambda);
                if m.dim == 2 {
                    out.push(m.lambda.conj());
                }
            }
        }
        out
    }
}

pub struct Profile {
    pub n_max: usize,
    pub nodes_max: usize,
    pub max_modulus: f64,
    /// Every mode with modulus >= 1 is seen by at least one node.
    pub cover_unstable: bool,
    /// Every mode is seen by at least one node.
    pub cover_all: bool,
    pub strongly_connected: bool,
    pub complex: bool,
    /// Largest number of rows per sensor.
    pub max_rows: usize,
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    QR::new(g).q()
}

fn sample_eigs(rng: &mut ChaCha8Rng, n: usize, profile: &Profile) -> Vec<(Complex64, usize)> {
    let mut out: Vec<(Complex64, usize)> = Vec::new();
    let mut used = 0;
    let far = |z: Complex64, out: &Vec<(Complex64, usize)>| out.iter().all(|(w, _)| (z - w).norm() > 0.15 && (z - w.conj()).norm() > 0.15);
    while used < n {
        let pair = profile.complex && n - used >= 2 && rng.random::<f64>() < 0.3;
        for _ in 0..200 {
            let r = rng.random::<f64>() * profile.max_modulus;
            let z = if pair {
                let th = 0.3 + rng.random::<f64>() * 2.5;
                Complex64::from_polar(r.max(0.2), th)
            } else {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Complex64::new(s * r, 0.0)
            };
            if far(z, &out) {
                out.push((z, if pair { 2 } else { 1 }));
                used += if pair { 2 } else { 1 };
                break;
            }
        }
    }
    out
}

pub fn random_strongly_connected(rng: &mut ChaCha8Rng, n: usize) -> Digraph {
    let mut perm: Vec<usize> = (1..=n).collect();
    perm.shuffle(rng);
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    if n > 1 {
        for k in 0..n {
            edges.insert((perm[k], perm[(k + 1) % n]));
        }
    }
    for i in 1..=n {
        for j in 1..=n {
            if i != j && rng.random::<f64>() < 0.25 {
                edges.insert((i, j));
            }
        }
    }
    Digraph::new(n, edges).unwrap()
}

pub fn random_digraph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Digraph {
    let mut edges = Vec::new();
    for i in 1..=n {
        for j in 1..=n {
            if i != j && rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Digraph::new(n, edges).unwrap()
}

/// A = S D S^-1 with block-diagonal D of separated eigenvalues; node i
/// measures C_i = R_i S^-1 restricted to the modes it sees.
pub fn random_instance(rng: &mut ChaCha8Rng, profile: &Profile) -> Instance {
    let n = rng.random_range(1..=profile.n_max);
    let nodes = rng.random_range(1..=profile.nodes_max);
    let eigs = sample_eigs(rng, n, profile);
    let mut d = Mat::zeros(n, n);
    let mut modes = Vec::new();
    let mut off = 0;
    for &(z, dim) in &eigs {
        if dim == 1 {
            d[(off, off)] = z.re;
        } else {
            d[(off, off)] = z.re;
            d[(off, off + 1)] = -z.im;
            d[(off + 1, off)] = z.im;
            d[(off + 1, off + 1)] = z.re;
        }
        modes.push(Mode { lambda: z, offset: off, dim });
        off += dim;
    }
    let scales = Mat::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| 0.5 + 1.5 * rng.random::<f64>()));
    let s = random_orthogonal(rng, n) * scales * random_orthogonal(rng, n);
    let s_inv = s.clone().try_inverse().unwrap();
    let a = &s * &d * &s_inv;

    let mut seen: Vec<BTreeSet<usize>> = (0..nodes)
        .map(|_| (0..modes.len()).filter(|_| rng.random::<f64>() < 0.4).collect())
        .collect();
    for (k, m) in modes.iter().enumerate() {
        let must = profile.cover_all || (profile.cover_unstable && m.lambda.norm() >= 1.0);
        if must && !seen.iter().any(|s| s.contains(&k)) {
            let i = rng.random_range(0..nodes);
            seen[i].insert(k);
        }
    }
    let c: Vec<Mat> = seen
        .iter()
        .map(|set| {
            let rows: Vec<usize> = set.iter().flat_map(|&k| modes[k].offset..modes[k].offset + modes[k].dim).collect();
            if rows.is_empty() {
                return Mat::zeros(0, n);
            }
            let r = rng.random_range(1..=profile.max_rows.min(rows.len()));
            let mut basis = Mat::zeros(rows.len(), n);
            for (q, &row) in rows.iter().enumerate() {
                basis.set_row(q, &s_inv.row(row));
            }
            let mix = DMatrix::from_fn(r, rows.len(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
            mix * basis
        })
        .collect();
    let graph = if profile.strongly_connected { random_strongly_connected(rng, nodes) } else { random_digraph(rng, nodes, 0.3) };
    Instance { plant: Plant::new(a, c).unwrap(), graph, modes, seen }
}

/// Rank of the observability matrix [C; CA; ...; CA^(n-1)] by plain SVD.
pub fn observability_rank(a: &Mat, c: &Mat, rel: f64) -> usize {
    let n = a.nrows();
    if n == 0 || c.nrows() == 0 {
        return 0;
    }
    let mut blocks = Vec::new();
    let mut cur = c.clone();
    for _ in 0..n {
        blocks.push(cur.clone());
        cur = &cur * a;
    }
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut o = Mat::zeros(rows, n);
    let mut r0 = 0;
    for b in &blocks {
        o.view_mut((r0, 0), (b.nrows(), n)).copy_from(b);
        r0 += b.nrows();
    }
    let sv = o.singular_values();
    let smax = sv.max();
    sv.iter().filter(|&&v| v > rel * smax).count()
}

/// Eigenvalues by the unsymmetric QR algorithm.
pub fn eigs(a: &Mat) -> Vec<Complex64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.complex_eigenvalues().iter().copied().collect()
}

/// Greedy matching of two eigenvalue multisets; true when every pair is within `tol`.
pub fn same_spectrum(a: &[Complex64], b: &[Complex64], tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut rest: Vec<Complex64> = b.to_vec();
    for z in a {
        let Some((k, _)) = rest.iter().enumerate().map(|(k, w)| (k, (z - w).norm())).min_by(|x, y| x.1.total_cmp(&y.1)) else {
            return false;
        };
        if (z - rest[k]).norm() > tol {
            return false;
        }
        rest.swap_remove(k);
    }
    true
}
