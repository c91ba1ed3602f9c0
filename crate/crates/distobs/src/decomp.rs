//! System-level transformations: the plant model, the sequential multi-sensor
//! observable decomposition, and the grouped real Jordan form with per-node
//! detectable/undetectable splits.

use nalgebra::DMatrix;
use crate::numkit::SvdScalar;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    self, block_diag, check_finite, cond, eigen_info_clustered, hstack, inverse_checked, norm2, obs_canon_decomp_scaled, select_cols,
    sub, vstack, EigenInfo, Mat, ToleranceConfig,
};

/// Largest condition number accepted for a user-supplied or computed transformation.
pub const MAX_TRANSFORM_COND: f64 = 1e12;

/// Discrete-time plant x[k+1] = A x[k] observed by N sensors y_i[k] = C_i x[k].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    #[serde(with = "crate::numkit::row_major")]
    pub a: Mat,
    /// `c[i - 1]` is the measurement matrix of node i; it may have zero rows.
    #[serde(with = "crate::numkit::row_major")]
    pub c: Vec<Mat>,
}

impl Plant {
    pub fn new(a: Mat, c: Vec<Mat>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::ShapeError(format!("A is {}x{}, expected square", a.nrows(), a.ncols())));
        }
        if c.is_empty() {
            return Err(Error::ShapeError("a plant needs at least one sensor".into()));
        }
        check_finite(&a, "A")?;
        for (i, ci) in c.iter().enumerate() {
            if ci.ncols() != a.nrows() {
                return Err(Error::ShapeError(format!(
                    "C_{} has {} columns, expected {}",
                    i + 1,
                    ci.ncols(),
                    a.nrows()
                )));
            }
            check_finite(ci, &format!("C_{}", i + 1))?;
        }
        Ok(Self { a, c })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.c.len()
    }

    /// Measurement matrix of node `i` (1-based).
    pub fn c_of(&self, i: usize) -> &Mat {
        &self.c[i - 1]
    }

    /// Rows of the listed nodes' measurement matrices, stacked in order.
    pub fn stacked_c(&self, nodes: &[usize]) -> Mat {
        let blocks: Vec<&Mat> = nodes.iter().map(|&i| self.c_of(i)).collect();
        if blocks.is_empty() {
            return Mat::zeros(0, self.n());
        }
        let out = vstack(&blocks);
        if out.ncols() == 0 {
            Mat::zeros(0, self.n())
        } else {
            out
        }
    }

    fn check_nodes(&self, nodes: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.n_nodes() + 1];
        for &i in nodes {
            if i == 0 || i > self.n_nodes() {
                return Err(Error::ShapeError(format!("node {i} outside 1..={}", self.n_nodes())));
            }
            if seen[i] {
                return Err(Error::ShapeError(format!("node {i} listed twice in the sensor order")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Multi-sensor decomposition

/// Result of the sequential decomposition. Slot s (0-based) holds the sub-state
/// newly observable at sensor `nodes[s]`; slot `nodes.len()` is the unobservable part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSensorDecomposition {
    /// Source node of every slot, in decomposition order.
    pub nodes: Vec<usize>,
    #[serde(with = "crate::numkit::row_major")]
    pub t: Mat,
    #[serde(with = "crate::numkit::row_major")]
    pub t_inv: Mat,
    /// Sub-state dimensions, one per slot; zeros allowed.
    pub o: Vec<usize>,
    pub u_dim: usize,
    /// T^-1 A T.
    #[serde(with = "crate::numkit::row_major")]
    pub abar: Mat,
    /// C_i T for the node of each slot.
    #[serde(with = "crate::numkit::row_major")]
    pub cbar: Vec<Mat>,
    pub cond_t: f64,
}

impl MultiSensorDecomposition {
    pub fn n(&self) -> usize {
        self.t.nrows()
    }

    /// Number of slots including the unobservable one.
    pub fn n_slots(&self) -> usize {
        self.o.len() + 1
    }

    pub fn u_slot(&self) -> usize {
        self.o.len()
    }

    pub fn dim(&self, slot: usize) -> usize {
        if slot == self.o.len() {
            self.u_dim
        } else {
            self.o[slot]
        }
    }

    /// First coordinate of a slot.
    pub fn offset(&self, slot: usize) -> usize {
        self.o[..slot.min(self.o.len())].iter().sum()
    }

    pub fn slot_of(&self, node: usize) -> Option<usize> {
        self.nodes.iter().position(|&v| v == node)
    }

    /// Block (row slot r, column slot c) of Abar.
    pub fn block(&self, r: usize, c: usize) -> Mat {
        sub(&self.abar, self.offset(r), self.offset(c), self.dim(r), self.dim(c))
    }

    pub fn a_u(&self) -> Mat {
        self.block(self.u_slot(), self.u_slot())
    }

    /// Coupling of sub-state `slot` into the unobservable part.
    pub fn a_to_u(&self, slot: usize) -> Mat {
        self.block(self.u_slot(), slot)
    }

    /// Columns of the slot-`s` node's transformed output matrix that belong to slot `c`.
    pub fn c_block(&self, s: usize, c: usize) -> Mat {
        let cb = &self.cbar[s];
        sub(cb, 0, self.offset(c), cb.nrows(), self.dim(c))
    }

    /// Block diagonal part diag(A_11, ..., A_NN, A_U).
    pub fn abar_diag(&self) -> Mat {
        let blocks: Vec<Mat> = (0..self.n_slots()).map(|s| self.block(s, s)).collect();
        let refs: Vec<&Mat> = blocks.iter().collect();
        block_diag(&refs)
    }
}

/// Zeroes Abar's strictly block-upper part and every C_i T column block past
/// the node's own slot, after checking those entries are negligible.
fn enforce_structure(d: &mut MultiSensorDecomposition, scale: f64) -> Result<()> {
    let eps = 1e-8 * scale.max(1.0);
    for r in 0..d.n_slots() {
        for c in (r + 1)..d.n_slots() {
            let (r0, c0, nr, nc) = (d.offset(r), d.offset(c), d.dim(r), d.dim(c));
            for i in r0..r0 + nr {
                for j in c0..c0 + nc {
                    if d.abar[(i, j)].abs() > eps {
                        return Err(Error::NumericalError(format!(
                            "decomposed block ({r}, {c}) is not zero: entry {:e}",
                            d.abar[(i, j)]
                        )));
                    }
                    d.abar[(i, j)] = 0.0;
                }
            }
        }
    }
    for s in 0..d.o.len() {
        let start = d.offset(s) + d.o[s];
        let cb = &mut d.cbar[s];
        let cscale = cb.norm().max(1.0);
        for i in 0..cb.nrows() {
            for j in start..cb.ncols() {
                if cb[(i, j)].abs() > 1e-8 * cscale * scale.max(1.0) {
                    return Err(Error::NumericalError(format!(
                        "output matrix of node {} leaks past its sub-state: entry {:e}",
                        d.nodes[s],
                        cb[(i, j)]
                    )));
                }
                cb[(i, j)] = 0.0;
            }
        }
    }
    Ok(())
}

/// Sequential observable decompositions, one per sensor in `order`.
///
/// Step s decomposes the unobservable residual left by the previous steps
/// against the restriction of C_{order[s]} to it; the accumulated product of
/// the orthogonal step transformations is returned as `t`. `order` may list a
/// subset of the nodes, e.g. the members of one source component.
pub fn multisensor_decompose(p: &Plant, order: &[usize], tol: &ToleranceConfig) -> Result<MultiSensorDecomposition> {
    tol.validate()?;
    p.check_nodes(order)?;
    let n = p.n();
    let mut t = Mat::identity(n, n);
    let mut k = 0usize;
    let mut o = Vec::with_capacity(order.len());
    for (step, &node) in order.iter().enumerate() {
        let rest = n - k;
        if rest == 0 {
            o.push(0);
            continue;
        }
        let tr = sub(&t, 0, k, n, rest);
        let a_res = tr.transpose() * &p.a * &tr;
        let c_res = p.c_of(node) * &tr;
        let (tb, oj) = obs_canon_decomp_scaled(&a_res, &c_res, tol, norm2(p.c_of(node)))
            .map_err(|e| Error::NumericalError(format!("decomposition step {} (node {node}): {e}", step + 1)))?;
        let new_tail = &tr * &tb;
        t.view_mut((0, k), (n, rest)).copy_from(&new_tail);
        o.push(oj);
        k += oj;
    }
    let t_inv = t.transpose();
    let abar = &t_inv * &p.a * &t;
    let cbar = order.iter().map(|&i| p.c_of(i) * &t).collect();
    let mut d = MultiSensorDecomposition {
        nodes: order.to_vec(),
        cond_t: cond(&t),
        t,
        t_inv,
        o,
        u_dim: n - k,
        abar,
        cbar,
    };
    enforce_structure(&mut d, norm2(&p.a))?;
    Ok(d)
}

/// Applies a user-supplied transformation: returns (T^-1 A T, [C_i T]).
pub fn apply_given_transformation(p: &Plant, t: &Mat) -> Result<(Mat, Vec<Mat>)> {
    if t.nrows() != p.n() || t.ncols() != p.n() {
        return Err(Error::ShapeError(format!("T is {}x{}, expected {n}x{n}", t.nrows(), t.ncols(), n = p.n())));
    }
    check_finite(t, "T")?;
    let t_inv = inverse_checked(t, MAX_TRANSFORM_COND)?;
    let abar = &t_inv * &p.a * t;
    let cbar = p.c.iter().map(|c| c * t).collect();
    Ok((abar, cbar))
}

/// Builds a decomposition record from a user-supplied transformation and
/// sub-state dimensions, without re-deriving the structure.
pub fn decomposition_from_given(
    p: &Plant,
    order: &[usize],
    t: &Mat,
    o: &[usize],
) -> Result<MultiSensorDecomposition> {
    p.check_nodes(order)?;
    if o.len() != order.len() {
        return Err(Error::ShapeError(format!("{} sub-state dimensions for {} sensors", o.len(), order.len())));
    }
    let total: usize = o.iter().sum();
    if total > p.n() {
        return Err(Error::ShapeError(format!("sub-state dimensions sum to {total} > n = {}", p.n())));
    }
    let (abar, _) = apply_given_transformation(p, t)?;
    let t_inv = inverse_checked(t, MAX_TRANSFORM_COND)?;
    let mut d = MultiSensorDecomposition {
        nodes: order.to_vec(),
        cond_t: cond(t),
        t: t.clone(),
        t_inv,
        o: o.to_vec(),
        u_dim: p.n() - total,
        abar,
        cbar: order.iter().map(|&i| p.c_of(i) * t).collect(),
    };
    // Given transformations often carry few digits, so the structural check is loose.
    let scale = norm2(&p.a) * d.cond_t.max(1.0) * 1e4;
    enforce_structure(&mut d, scale)?;
    Ok(d)
}

// ---------------------------------------------------------------------------
// Jordan form

/// One distinct-eigenvalue class of the grouped real Jordan form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JordanClass {
    /// Representative eigenvalue; non-negative imaginary part for a fused pair.
    pub lambda: (f64, f64),
    pub offset: usize,
    /// Real dimension a_J(lambda) (doubled for a conjugate pair).
    pub dim: usize,
    /// Sizes of the (complex) Jordan blocks, largest first.
    pub block_sizes: Vec<usize>,
    #[serde(with = "crate::numkit::row_major")]
    pub block: Mat,
}

impl JordanClass {
    pub fn lambda(&self) -> Complex64 {
        Complex64::new(self.lambda.0, self.lambda.1)
    }

    pub fn coords(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.dim
    }
}

/// A = T J T^-1 with J = diag(J_1, ..., J_gamma).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JordanForm {
    #[serde(with = "crate::numkit::row_major")]
    pub t: Mat,
    #[serde(with = "crate::numkit::row_major")]
    pub t_inv: Mat,
    #[serde(with = "crate::numkit::row_major")]
    pub j: Mat,
    pub classes: Vec<JordanClass>,
}

fn zero_matrix<T: SvdScalar>(m: &DMatrix<T>) -> bool {
    m.iter().all(|v| v.modulus() == 0.0)
}

/// Orthonormal null-space basis with an absolute singular-value cutoff.
fn null_abs<T: SvdScalar>(m: &DMatrix<T>, cutoff: f64) -> Result<DMatrix<T>> {
    let n = m.ncols();
    if m.nrows() == 0 || zero_matrix(m) {
        return Ok(DMatrix::identity(n, n));
    }
    let padded = if m.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let d = crate::numkit::svd_of(&padded)?;
    let vt = d.v_t.expect("v requested");
    let keep: Vec<usize> = (0..d.singular_values.len()).filter(|&k| d.singular_values[k] <= cutoff).collect();
    let mut out = DMatrix::zeros(n, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        out.set_column(c, &vt.row(k).adjoint());
    }
    Ok(out)
}

/// The `count` right singular vectors of the smallest singular values, plus the
/// largest of those and the next singular value above them.
fn smallest_right<T: SvdScalar>(
    m: &DMatrix<T>,
    count: usize,
) -> Result<(DMatrix<T>, f64, f64)> {
    let n = m.ncols();
    let padded = if m.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        p
    } else {
        m.clone()
    };
    if zero_matrix(&padded) {
        let mut out = DMatrix::zeros(n, count);
        for k in 0..count {
            out[(k, k)] = T::one();
        }
        return Ok((out, 0.0, if count < n { 0.0 } else { f64::INFINITY }));
    }
    let d = crate::numkit::svd_of(&padded)?;
    let vt = d.v_t.expect("v requested");
    let mut idx: Vec<usize> = (0..d.singular_values.len()).collect();
    idx.sort_by(|&a, &b| d.singular_values[a].partial_cmp(&d.singular_values[b]).unwrap());
    let mut out = DMatrix::zeros(n, count);
    for (c, &k) in idx.iter().take(count).enumerate() {
        out.set_column(c, &vt.row(k).adjoint());
    }
    let small = if count == 0 { 0.0 } else { d.singular_values[idx[count - 1]] };
    let next = if count < idx.len() { d.singular_values[idx[count]] } else { f64::INFINITY };
    Ok((out, small, next))
}

/// Orthonormal column basis with an absolute cutoff; columns sorted by decreasing singular value.
fn orth_cols<T: SvdScalar>(m: &DMatrix<T>, cutoff: f64) -> Result<(DMatrix<T>, Vec<f64>)> {
    if m.ncols() == 0 || zero_matrix(m) {
        return Ok((DMatrix::zeros(m.nrows(), 0), Vec::new()));
    }
    let d = crate::numkit::svd_of(m)?;
    let u = d.u.expect("u requested");
    let mut idx: Vec<usize> = (0..d.singular_values.len()).filter(|&k| d.singular_values[k] > cutoff).collect();
    idx.sort_by(|&a, &b| d.singular_values[b].partial_cmp(&d.singular_values[a]).unwrap());
    let mut out = DMatrix::zeros(m.nrows(), idx.len());
    for (c, &k) in idx.iter().enumerate() {
        out.set_column(c, &u.column(k));
    }
    Ok((out, idx.iter().map(|&k| d.singular_values[k]).collect()))
}

fn hcat<T: SvdScalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(a.nrows().max(b.nrows()), a.ncols() + b.ncols());
    if a.ncols() > 0 {
        out.view_mut((0, 0), a.shape()).copy_from(a);
    }
    if b.ncols() > 0 {
        out.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    }
    out
}

/// Jordan chains of one eigenvalue. Returns chains as column lists
/// [v_1, ..., v_s] with (A - lambda I) v_t = v_(t-1) and (A - lambda I) v_1 = 0,
/// longest chain first.
fn jordan_chains<T: SvdScalar>(
    m: &DMatrix<T>,
    mult: usize,
    geom: usize,
    lambda: Complex64,
    scale: f64,
    tol: &ToleranceConfig,
) -> Result<Vec<Vec<nalgebra::DVector<T>>>> {
    let ill = |detail: String| Error::IllConditionedJordan { lambda, detail };
    let n = m.nrows();
    // Basis of the generalized eigenspace: the mult smallest right singular
    // vectors of M^mult, which must be separated from the rest by a clear gap.
    let mut mp = DMatrix::<T>::identity(n, n);
    for _ in 0..mult {
        mp = &mp * m;
    }
    let (v, small, next) = smallest_right(&mp, mult)?;
    let pscale = scale.powi(mult as i32);
    if !(small <= tol.rank_tol.sqrt() * pscale && next > 1e3 * small.max(f64::EPSILON * pscale)) {
        return Err(ill(format!(
            "generalized eigenspace of dimension {mult} not separated (singular values {small:e} vs {next:e})"
        )));
    }
    // Nilpotent restriction to that space.
    let nil = v.adjoint() * m * &v;
    let cutoff = |k: usize| tol.rank_tol.sqrt() * scale.powi(k as i32);
    let mut d = vec![0usize];
    let mut k = 0;
    let mut pow = DMatrix::<T>::identity(mult, mult);
    while *d.last().expect("non-empty") < mult {
        k += 1;
        if k > mult {
            return Err(ill(format!("kernel dimensions {d:?} never reach {mult}")));
        }
        pow = &pow * &nil;
        let dk = null_abs(&pow, cutoff(k))?.ncols();
        if dk < *d.last().expect("non-empty") {
            return Err(ill(format!("kernel dimensions decrease: {d:?} then {dk}")));
        }
        d.push(dk);
    }
    let p = k;
    if d[1] != geom {
        return Err(ill(format!("kernel dimension {} disagrees with geometric multiplicity {geom}", d[1])));
    }
    // b[k] = number of blocks of size >= k.
    let b: Vec<usize> = (0..=p + 1).map(|k| if k == 0 || k > p { 0 } else { d[k] - d[k - 1] }).collect();
    for k in 2..=p {
        if b[k] > b[k - 1] {
            return Err(ill(format!("block counts not monotone for kernel dimensions {d:?}")));
        }
    }
    let powers: Vec<DMatrix<T>> = {
        let mut out = vec![DMatrix::<T>::identity(mult, mult)];
        for k in 1..=p {
            let next = &out[k - 1] * &nil;
            out.push(next);
        }
        out
    };
    let mut heads: Vec<(usize, nalgebra::DVector<T>)> = Vec::new();
    for k in (1..=p).rev() {
        let need = b[k] - b[k + 1];
        if need == 0 {
            continue;
        }
        let kernel = null_abs(&powers[k], cutoff(k))?;
        let lower = null_abs(&powers[k - 1], cutoff(k - 1))?;
        let mut span = lower;
        for (s, h) in &heads {
            let img = &powers[s - k] * h;
            span = hcat(&span, &DMatrix::from_column_slice(mult, 1, img.as_slice()));
        }
        let (q, _) = orth_cols(&span, 1e-8)?;
        let resid = &kernel - &q * (q.adjoint() * &kernel);
        let (fresh, sv) = orth_cols(&resid, 1e-6)?;
        if fresh.ncols() < need {
            return Err(ill(format!("found {} of {need} chains of length {k}", fresh.ncols())));
        }
        if sv[need - 1] < 1e-4 {
            return Err(ill(format!("chain heads of length {k} are nearly dependent ({:e})", sv[need - 1])));
        }
        for c in 0..need {
            heads.push((k, fresh.column(c).into_owned()));
        }
    }
    let mut chains = Vec::new();
    for (s, h) in heads {
        let chain: Vec<nalgebra::DVector<T>> = (0..s).rev().map(|t| &v * (&powers[t] * &h)).collect();
        chains.push(chain);
    }
    Ok(chains)
}

/// Grouped real Jordan form with classes ordered by descending modulus, then
/// descending real part, then ascending imaginary part. A conjugate pair forms
/// one class built from 2x2 rotation-scaling blocks.
pub fn jordan_grouped(a: &Mat, tol: &ToleranceConfig) -> Result<JordanForm> {
    tol.validate()?;
    if !a.is_square() {
        return Err(Error::ShapeError("A must be square".into()));
    }
    check_finite(a, "A")?;
    let scale = norm2(a).max(1.0);
    // A defective eigenvalue of multiplicity m is computed only to about
    // (eps·‖A‖)^(1/m), so the clustering radius widens until the chains
    // reconstruct A. The first failure is reported if none does.
    let mut first_err = None;
    let mut cluster_tol = tol.eig_cluster_tol;
    while cluster_tol <= 1e-3 * scale {
        match jordan_with_clusters(a, tol, cluster_tol, scale) {
            Ok(jf) => return Ok(jf),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
        cluster_tol *= 10.0;
    }
    Err(first_err.unwrap_or_else(|| Error::Internal("no clustering radius tried".into())))
}

fn jordan_with_clusters(a: &Mat, tol: &ToleranceConfig, cluster_tol: f64, scale: f64) -> Result<JordanForm> {
    let n = a.nrows();
    let info: EigenInfo = eigen_info_clustered(a, tol, cluster_tol)?;
    let mut cols: Vec<Mat> = Vec::new();
    let mut classes = Vec::new();
    let mut offset = 0;
    for cl in &info.classes {
        let lambda = cl.lambda;
        let mut blocks: Vec<Mat> = Vec::new();
        let mut sizes = Vec::new();
        if !cl.is_complex() {
            let m = a - Mat::identity(n, n) * lambda.re;
            let chains = jordan_chains(&m, cl.algebraic_mult, cl.geometric_mult, lambda, scale, tol)?;
            for chain in chains {
                let s = chain.len();
                sizes.push(s);
                let mut c = Mat::zeros(n, s);
                for (t, v) in chain.iter().enumerate() {
                    c.set_column(t, v);
                }
                cols.push(c);
                let mut jb = Mat::identity(s, s) * lambda.re;
                for t in 1..s {
                    jb[(t - 1, t)] = 1.0;
                }
                blocks.push(jb);
            }
        } else {
            let ac: DMatrix<Complex64> = a.map(|x| Complex64::new(x, 0.0));
            let m = ac - DMatrix::<Complex64>::identity(n, n) * lambda;
            let chains = jordan_chains(&m, cl.algebraic_mult / 2, cl.geometric_mult / 2, lambda, scale, tol)?;
            let (re, im) = (lambda.re, lambda.im);
            for chain in chains {
                let s = chain.len();
                sizes.push(s);
                let mut c = Mat::zeros(n, 2 * s);
                for (t, v) in chain.iter().enumerate() {
                    for r in 0..n {
                        c[(r, 2 * t)] = v[r].re;
                        c[(r, 2 * t + 1)] = v[r].im;
                    }
                }
                cols.push(c);
                let mut jb = Mat::zeros(2 * s, 2 * s);
                for t in 0..s {
                    jb[(2 * t, 2 * t)] = re;
                    jb[(2 * t, 2 * t + 1)] = im;
                    jb[(2 * t + 1, 2 * t)] = -im;
                    jb[(2 * t + 1, 2 * t + 1)] = re;
                    if t > 0 {
                        jb[(2 * t - 2, 2 * t)] = 1.0;
                        jb[(2 * t - 1, 2 * t + 1)] = 1.0;
                    }
                }
                blocks.push(jb);
            }
        }
        let refs: Vec<&Mat> = blocks.iter().collect();
        let block = block_diag(&refs);
        let dim = block.nrows();
        classes.push(JordanClass { lambda: (lambda.re, lambda.im), offset, dim, block_sizes: sizes, block });
        offset += dim;
    }
    let refs: Vec<&Mat> = cols.iter().collect();
    let t = if refs.is_empty() { Mat::zeros(n, 0) } else { hstack(&refs) };
    if t.ncols() != n {
        return Err(Error::Internal(format!("Jordan basis has {} columns, expected {n}", t.ncols())));
    }
    let t_inv = inverse_checked(&t, MAX_TRANSFORM_COND).map_err(|e| Error::IllConditionedJordan {
        lambda: info.classes.first().map(|c| c.lambda).unwrap_or_default(),
        detail: format!("Jordan basis is not safely invertible: {e}"),
    })?;
    let jrefs: Vec<&Mat> = classes.iter().map(|c| &c.block).collect();
    let j = block_diag(&jrefs);
    let resid = (&t * &j * &t_inv - a).norm();
    if resid > 1e-7 * scale {
        return Err(Error::IllConditionedJordan {
            lambda: info.classes.first().map(|c| c.lambda).unwrap_or_default(),
            detail: format!("reconstruction residual {resid:e} exceeds 1e-7·‖A‖"),
        });
    }
    Ok(JordanForm { t, t_inv, j, classes })
}

/// Per-node split of the Jordan coordinates into detectable and undetectable classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSplit {
    pub node: usize,
    /// Indices into `JordanForm::classes`.
    pub detectable: Vec<usize>,
    pub undetectable: Vec<usize>,
    /// z = P z̄ with z̄ = [z_O; z_UO].
    #[serde(with = "crate::numkit::row_major")]
    pub perm: Mat,
    pub o_dim: usize,
    #[serde(with = "crate::numkit::row_major")]
    pub j_o: Mat,
    #[serde(with = "crate::numkit::row_major")]
    pub j_uo: Mat,
    #[serde(with = "crate::numkit::row_major")]
    pub c_o: Mat,
    #[serde(with = "crate::numkit::row_major")]
    pub c_uo: Mat,
    /// Observable decomposition of (J_UO, C_UO).
    #[serde(with = "crate::numkit::row_major")]
    pub t_bar: Mat,
    /// diag(I, t_bar).
    #[serde(with = "crate::numkit::row_major")]
    pub t_i: Mat,
    /// Dimension of w_O, the part of z_UO visible to the node.
    pub w_o_dim: usize,
    #[serde(with = "crate::numkit::row_major")]
    pub g_o: Mat,
    #[serde(with = "crate::numkit::row_major")]
    pub g_uo: Mat,
    #[serde(with = "crate::numkit::row_major")]
    pub h_o: Mat,
    /// diag(J_O, G_O).
    #[serde(with = "crate::numkit::row_major")]
    pub jj: Mat,
    /// [C_O  H_O].
    #[serde(with = "crate::numkit::row_major")]
    pub ff: Mat,
}

impl NodeSplit {
    /// Dimension of the local Luenberger state s_i.
    pub fn s_dim(&self) -> usize {
        self.o_dim + self.w_o_dim
    }

    pub fn uo_dim(&self) -> usize {
        self.j_uo.nrows()
    }

    /// Internal observer dimension dim(s_i) + dim(z_UO).
    pub fn observer_dim(&self) -> usize {
        self.s_dim() + self.uo_dim()
    }
}

/// Splits node i's view of the Jordan coordinates. `c_i` is the node's
/// measurement matrix in original coordinates and `a` the plant matrix.
pub fn node_local_split(
    jf: &JordanForm,
    a: &Mat,
    node: usize,
    c_i: &Mat,
    tol: &ToleranceConfig,
) -> Result<NodeSplit> {
    let n = jf.t.nrows();
    let cbar = c_i * &jf.t;
    let mut detectable = Vec::new();
    let mut undetectable = Vec::new();
    for (k, cl) in jf.classes.iter().enumerate() {
        if numkit::pbh_detectable(a, c_i, cl.lambda(), tol)? {
            detectable.push(k);
        } else {
            undetectable.push(k);
        }
    }
    let coords = |set: &[usize]| -> Vec<usize> { set.iter().flat_map(|&k| jf.classes[k].coords()).collect() };
    let o_coords = coords(&detectable);
    let uo_coords = coords(&undetectable);
    let mut perm = Mat::zeros(n, n);
    for (col, &z) in o_coords.iter().chain(uo_coords.iter()).enumerate() {
        perm[(z, col)] = 1.0;
    }
    let pick = |set: &[usize]| -> Mat {
        let blocks: Vec<&Mat> = set.iter().map(|&k| &jf.classes[k].block).collect();
        block_diag(&blocks)
    };
    let j_o = pick(&detectable);
    let j_uo = pick(&undetectable);
    let c_o = select_cols(&cbar, &o_coords);
    let c_uo = select_cols(&cbar, &uo_coords);
    let (t_bar, q) = obs_canon_decomp_scaled(&j_uo, &c_uo, tol, norm2(&cbar))?;
    let o_dim = o_coords.len();
    let m = uo_coords.len();
    let rotated = t_bar.transpose() * &j_uo * &t_bar;
    let g_o = sub(&rotated, 0, 0, q, q);
    let g_uo = sub(&rotated, q, q, m - q, m - q);
    let h_o = sub(&(&c_uo * &t_bar), 0, 0, c_uo.nrows(), q);
    let t_i = block_diag(&[&Mat::identity(o_dim, o_dim), &t_bar]);
    let jj = block_diag(&[&j_o, &g_o]);
    let ff = hstack(&[&c_o, &h_o]);
    let ff = if ff.nrows() == 0 { Mat::zeros(c_i.nrows(), o_dim + q) } else { ff };
    Ok(NodeSplit {
        node,
        detectable,
        undetectable,
        perm,
        o_dim,
        j_o,
        j_uo,
        c_o,
        c_uo,
        t_bar,
        t_i,
        w_o_dim: q,
        g_o,
        g_uo,
        h_o,
        jj,
        ff,
    })
}

/// Jordan form plus every node's split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JordanSystem {
    pub form: JordanForm,
    pub per_node: Vec<NodeSplit>,
}

pub fn jordan_system(p: &Plant, tol: &ToleranceConfig) -> Result<JordanSystem> {
    let form = jordan_grouped(&p.a, tol)?;
    let per_node = (1..=p.n_nodes())
        .map(|i| node_local_split(&form, &p.a, i, p.c_of(i), tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(JordanSystem { form, per_node })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{eigenvalues, from_rows, observability_matrix, rank_tol};

    fn m(rows: &[&[f64]]) -> Mat {
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), ncols).unwrap()
    }

    fn staircase() -> Plant {
        Plant::new(
            m(&[&[1., 2., -2., -15.], &[0., 2., 4., -16.], &[0., 0., 3., -3.], &[0., 0., 0., 0.]]),
            vec![m(&[&[7., -14., 35., 14.]]), m(&[&[0., 2., -8., -4.]]), m(&[&[0., 0., 5., -5.]])],
        )
        .unwrap()
    }

    fn worked_example() -> Plant {
        Plant::new(
            m(&[&[1., 0., 0.], &[2., 2., 0.], &[-5., 0., 2.]]),
            vec![m(&[&[4., 4., 1.]]), m(&[&[11., 13., 3.], &[16., 18., 4.]]), Mat::zeros(0, 3)],
        )
        .unwrap()
    }

    fn sorted_re(a: &Mat) -> Vec<f64> {
        let mut v: Vec<f64> = eigenvalues(a).unwrap().iter().map(|z| z.re).collect();
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        v
    }

    #[test]
    fn staircase_structure() {
        let tol = ToleranceConfig::default();
        let d = multisensor_decompose(&staircase(), &[1, 2, 3], &tol).unwrap();
        assert_eq!(d.o, vec![1, 1, 1]);
        assert_eq!(d.u_dim, 1);
        for (s, want) in [(0, 1.0), (1, 2.0), (2, 3.0), (3, 0.0)] {
            let ev = sorted_re(&d.block(s, s));
            assert!((ev[0] - want).abs() < 1e-6, "slot {s}: {ev:?}");
        }
        let back = &d.t * &d.abar * &d.t_inv;
        assert!((back - &staircase().a).norm() < 1e-9);
    }

    #[test]
    fn worked_example_source_pair_is_fully_observable() {
        let tol = ToleranceConfig::default();
        let d = multisensor_decompose(&worked_example(), &[1, 2], &tol).unwrap();
        assert_eq!(d.o, vec![2, 1]);
        assert_eq!(d.u_dim, 0);
    }

    #[test]
    fn zero_sensor_gets_empty_slot() {
        let tol = ToleranceConfig::default();
        let d = multisensor_decompose(&worked_example(), &[3, 1, 2], &tol).unwrap();
        assert_eq!(d.o, vec![0, 2, 1]);
        assert_eq!(d.n_slots(), 4);
        assert_eq!(d.dim(0), 0);
    }

    #[test]
    fn given_transformation_reproduces_blocks() {
        let t1 = m(&[&[4., 7., 0.], &[4., 8., -0.2425], &[1., 2., 0.9701]]);
        let (abar, cbar) = apply_given_transformation(&worked_example(), &t1).unwrap();
        let want = m(&[&[-10.9412, -22.6471, 0.], &[6.8235, 13.9412, 0.], &[-21.3431, -37.3505, 2.]]);
        assert!((abar - want).abs().max() < 1e-2);
        assert!((&cbar[0] - m(&[&[33., 62., 0.]])).abs().max() < 1e-2);
        let c2 = m(&[&[99., 187., -0.2425], &[140., 264., -0.4851]]);
        assert!((&cbar[1] - c2).abs().max() < 1e-2);
    }

    #[test]
    fn identity_transformation_is_neutral() {
        let p = worked_example();
        let (abar, cbar) = apply_given_transformation(&p, &Mat::identity(3, 3)).unwrap();
        assert_eq!(abar, p.a);
        assert_eq!(cbar, p.c);
    }

    #[test]
    fn singular_transformation_rejected() {
        let t = m(&[&[1., 2., 0.], &[2., 4., 0.], &[0., 0., 1.]]);
        assert!(matches!(apply_given_transformation(&worked_example(), &t), Err(Error::InvalidTransform(_))));
    }

    #[test]
    fn jordan_of_scaled_identity() {
        let tol = ToleranceConfig::default();
        let jf = jordan_grouped(&m(&[&[2., 0.], &[0., 2.]]), &tol).unwrap();
        assert_eq!(jf.classes.len(), 1);
        assert_eq!(jf.classes[0].block, m(&[&[2., 0.], &[0., 2.]]));
    }

    #[test]
    fn jordan_of_worked_example_plant() {
        let tol = ToleranceConfig::default();
        let jf = jordan_grouped(&worked_example().a, &tol).unwrap();
        let dims: Vec<usize> = jf.classes.iter().map(|c| c.dim).collect();
        assert_eq!(dims, vec![2, 1]);
        assert!((jf.classes[0].lambda() - Complex64::new(2.0, 0.0)).norm() < 1e-9);
        // Oracle: rank(A - 2I) = 1, so lambda = 2 is semisimple.
        let r = rank_tol(&(&worked_example().a - Mat::identity(3, 3) * 2.0), &tol).unwrap();
        assert_eq!(jf.classes[0].block_sizes, vec![1; 3 - r]);
    }

    #[test]
    fn jordan_defective_and_complex() {
        let tol = ToleranceConfig::default();
        let a = m(&[
            &[3., 1., 0., 0., 0.],
            &[0., 3., 1., 0., 0.],
            &[0., 0., 3., 0., 0.],
            &[0., 0., 0., 0.5, 2.],
            &[0., 0., 0., -2., 0.5],
        ]);
        let lower = m(&[
            &[1., 0., 0., 0., 0.],
            &[0.5, 1., 0., 0., 0.],
            &[-1., 0.25, 1., 0., 0.],
            &[0., 1., 0.5, 1., 0.],
            &[0.3, 0., -0.5, 0.2, 1.],
        ]);
        let s = &lower * lower.transpose();
        let a = &s * a * s.clone().try_inverse().unwrap();
        let jf = jordan_grouped(&a, &tol).unwrap();
        assert_eq!(jf.classes.len(), 2);
        assert_eq!(jf.classes[0].block_sizes, vec![3]);
        assert!(jf.classes[1].lambda().im > 0.0);
        let resid = (&jf.t * &jf.j * &jf.t_inv - &a).norm();
        assert!(resid < 1e-7 * norm2(&a));
    }

    #[test]
    fn distinct_eigenvalues_give_scalar_blocks() {
        let tol = ToleranceConfig::default();
        let a = m(&[&[1., 4., 0.], &[0., -2., 1.], &[0., 0., 3.]]);
        let jf = jordan_grouped(&a, &tol).unwrap();
        assert!(jf.classes.iter().all(|c| c.dim == 1));
        let lams: Vec<f64> = jf.classes.iter().map(|c| c.lambda.0).collect();
        assert_eq!(lams, vec![3.0, -2.0, 1.0]);
    }

    #[test]
    fn scalar_split() {
        let tol = ToleranceConfig::default();
        let p = Plant::new(m(&[&[1.5]]), vec![m(&[&[1.]]), Mat::zeros(0, 1), Mat::zeros(0, 1)]).unwrap();
        let js = jordan_system(&p, &tol).unwrap();
        let s1 = &js.per_node[0];
        assert_eq!(s1.jj, m(&[&[1.5]]));
        assert!((s1.ff[(0, 0)].abs() - 1.0).abs() < 1e-12);
        let s2 = &js.per_node[1];
        assert_eq!(s2.detectable, Vec::<usize>::new());
        assert_eq!(s2.observer_dim(), 1);
        assert_eq!(s2.ff.nrows(), 0);
    }

    #[test]
    fn distinct_eigenvalues_need_no_augmentation() {
        let tol = ToleranceConfig::default();
        let a = m(&[&[2., 1., 0.], &[0., 1.5, 1.], &[0., 0., 0.5]]);
        let p = Plant::new(a, vec![m(&[&[1., 0., 0.]]), m(&[&[0., 0., 1.]])]).unwrap();
        let js = jordan_system(&p, &tol).unwrap();
        for s in &js.per_node {
            assert_eq!(s.w_o_dim, 0);
            assert_eq!(s.observer_dim(), 3);
        }
    }

    #[test]
    fn decomposition_blocks_observable() {
        let tol = ToleranceConfig::default();
        let p = staircase();
        let d = multisensor_decompose(&p, &[2, 3, 1], &tol).unwrap();
        for s in 0..d.o.len() {
            if d.o[s] > 0 {
                let obs = observability_matrix(&d.block(s, s), &d.c_block(s, s));
                assert_eq!(rank_tol(&obs, &tol).unwrap(), d.o[s]);
            }
        }
        assert_eq!(d.o.iter().sum::<usize>() + d.u_dim, 4);
    }
}
