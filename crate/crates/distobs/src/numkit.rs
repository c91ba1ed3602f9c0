//! Numerical kernel: tolerant rank, orthogonal bases, eigenstructure,
//! observability tests and observer gain placement.

use nalgebra::{DMatrix, DVector, SVD};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real matrix used throughout the crate.
pub type Mat = DMatrix<f64>;


/// Numerical tolerances shared by every module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceConfig {
    /// Relative singular-value cutoff, scaled by the largest singular value.
    pub rank_tol: f64,
    /// Absolute distance under which eigenvalues are merged into one class.
    pub eig_cluster_tol: f64,
    /// Required gap for Schur stability: rho(M) <= 1 - schur_margin.
    pub schur_margin: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self { rank_tol: 1e-9, eig_cluster_tol: 1e-7, schur_margin: 1e-6 }
    }
}

impl ToleranceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rank_tol", self.rank_tol),
            ("eig_cluster_tol", self.eig_cluster_tol),
            ("schur_margin", self.schur_margin),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidMatrix(format!("{name} must be finite and positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Conservative instability test: |lambda| >= 1 - eig_cluster_tol.
    pub fn is_unstable(&self, lambda: Complex64) -> bool {
        lambda.norm() >= 1.0 - self.eig_cluster_tol
    }
}

// ---------------------------------------------------------------------------
// Matrix helpers

pub fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidMatrix(format!("{what} has non-finite entries")))
    }
}

/// Builds a matrix from row slices. All rows must share one length.
pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<Mat> {
    let mut m = Mat::zeros(rows.len(), ncols);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::ShapeError(format!("row {i} has {} entries, expected {ncols}", r.len())));
        }
        for (j, v) in r.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    check_finite(&m, "matrix")?;
    Ok(m)
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn hstack(blocks: &[&Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).max().unwrap_or(0);
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        if b.ncols() > 0 {
            out.view_mut((0, c), (b.nrows(), b.ncols())).copy_from(*b);
        }
        c += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&Mat]) -> Mat {
    let cols = blocks.iter().map(|b| b.ncols()).max().unwrap_or(0);
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        if b.nrows() > 0 {
            out.view_mut((r, 0), (b.nrows(), b.ncols())).copy_from(*b);
        }
        r += b.nrows();
    }
    out
}

pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        if b.nrows() > 0 && b.ncols() > 0 {
            out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        }
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

/// Copies out the block starting at (r, c) with the given shape.
pub fn sub(m: &Mat, r: usize, c: usize, nr: usize, nc: usize) -> Mat {
    if nr == 0 || nc == 0 {
        return Mat::zeros(nr, nc);
    }
    m.view((r, c), (nr, nc)).into_owned()
}

/// Keeps the listed columns, in order.
pub fn select_cols(m: &Mat, cols: &[usize]) -> Mat {
    let mut out = Mat::zeros(m.nrows(), cols.len());
    for (k, &j) in cols.iter().enumerate() {
        out.set_column(k, &m.column(j));
    }
    out
}

/// Keeps the listed rows, in order.
pub fn select_rows(m: &Mat, rows: &[usize]) -> Mat {
    let mut out = Mat::zeros(rows.len(), m.ncols());
    for (k, &i) in rows.iter().enumerate() {
        out.set_row(k, &m.row(i));
    }
    out
}

/// Scalars with a faer-backed thin SVD.
pub(crate) trait SvdScalar: nalgebra::ComplexField<RealField = f64> + Copy {
    fn thin_svd(m: &DMatrix<Self>) -> Result<SVD<Self, nalgebra::Dyn, nalgebra::Dyn>>;
}

macro_rules! impl_svd_scalar {
    ($t:ty, $re:expr) => {
        impl SvdScalar for $t {
            fn thin_svd(m: &DMatrix<Self>) -> Result<SVD<Self, nalgebra::Dyn, nalgebra::Dyn>> {
                let (r, c) = m.shape();
                let k = r.min(c);
                if k == 0 {
                    return Ok(SVD { u: Some(DMatrix::zeros(r, 0)), v_t: Some(DMatrix::zeros(0, c)), singular_values: DVector::zeros(0) });
                }
                let f = faer::Mat::<$t>::from_fn(r, c, |i, j| m[(i, j)]);
                let d = f.thin_svd().map_err(|e| Error::NumericalError(format!("SVD failed: {e:?}")))?;
                let (fu, fv, fs) = (d.U(), d.V(), d.S());
                let mut idx: Vec<usize> = (0..k).collect();
                let sv = |q: usize| -> f64 { $re(fs[q]) };
                idx.sort_by(|&a, &b| sv(b).total_cmp(&sv(a)));
                Ok(SVD {
                    u: Some(DMatrix::from_fn(r, k, |i, q| fu[(i, idx[q])])),
                    v_t: Some(DMatrix::from_fn(k, c, |q, j| nalgebra::ComplexField::conjugate(fv[(j, idx[q])]))),
                    singular_values: DVector::from_fn(k, |q, _| sv(idx[q])),
                })
            }
        }
    };
}

impl_svd_scalar!(f64, |x: f64| x);
impl_svd_scalar!(Complex64, |x: Complex64| x.re);

/// Thin SVD with singular values in descending order.
pub(crate) fn svd_of<T: SvdScalar>(m: &DMatrix<T>) -> Result<SVD<T, nalgebra::Dyn, nalgebra::Dyn>> {
    if m.iter().any(|x| !nalgebra::ComplexField::is_finite(x)) {
        return Err(Error::NumericalError("SVD of a non-finite matrix".into()));
    }
    T::thin_svd(m)
}

fn svd(m: &Mat, _u: bool, _v: bool) -> Result<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    svd_of(m)
}

/// Singular values in descending order. Empty matrices give an empty vector.
pub fn singular_values(m: &Mat) -> Result<DVector<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    Ok(svd(m, false, false)?.singular_values)
}

/// Spectral norm.
pub fn norm2(m: &Mat) -> f64 {
    singular_values(m).ok().and_then(|s| s.iter().copied().reduce(f64::max)).unwrap_or(0.0)
}

/// 2-norm condition number; infinite for singular or empty-rank input.
pub fn cond(m: &Mat) -> f64 {
    match singular_values(m) {
        Ok(s) if !s.is_empty() => {
            let hi = s.iter().copied().fold(0.0, f64::max);
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            if lo == 0.0 { f64::INFINITY } else { hi / lo }
        }
        _ => f64::INFINITY,
    }
}

fn rank_rel(m: &Mat, rel: f64) -> Result<usize> {
    let s = singular_values(m)?;
    let smax = s.iter().copied().fold(0.0, f64::max);
    Ok(s.iter().filter(|&&v| v > rel * smax && v > 0.0).count())
}

/// Number of singular values above `rank_tol` times the largest one.
pub fn rank_tol(m: &Mat, tol: &ToleranceConfig) -> Result<usize> {
    check_finite(m, "matrix")?;
    rank_rel(m, tol.rank_tol)
}

/// Real embedding [[Re, -Im], [Im, Re]] of a complex matrix.
fn realify(re: &Mat, im: &Mat) -> Mat {
    let neg = -im;
    vstack(&[&hstack(&[re, &neg]), &hstack(&[im, re])])
}

/// Rank of the complex matrix re + i·im under a relative cutoff.
pub fn rank_complex(re: &Mat, im: &Mat, rel: f64) -> Result<usize> {
    // The embedding doubles every singular value's multiplicity.
    Ok(rank_rel(&realify(re, im), rel)?.div_ceil(2))
}

/// Orthonormal basis of the column space; singular values at or below `cutoff` are dropped.
pub fn orth_abs(m: &Mat, cutoff: f64) -> Result<Mat> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Mat::zeros(m.nrows(), 0));
    }
    let d = svd(m, true, false)?;
    let u = d.u.as_ref().expect("u requested");
    let keep: Vec<usize> = (0..d.singular_values.len()).filter(|&k| d.singular_values[k] > cutoff).collect();
    Ok(select_cols(u, &keep))
}

/// Orthonormal basis of the column space under a relative cutoff.
pub fn orth(m: &Mat, rel: f64) -> Result<Mat> {
    let smax = norm2(m);
    if smax == 0.0 {
        return Ok(Mat::zeros(m.nrows(), 0));
    }
    orth_abs(m, rel * smax)
}

/// Orthonormal basis of the null space under a relative cutoff.
pub fn null_space(m: &Mat, rel: f64) -> Result<Mat> {
    let smax = norm2(m);
    null_space_abs(m, rel * smax)
}

/// Orthonormal basis of the null space; singular values at or below `cutoff` count as zero.
pub fn null_space_abs(m: &Mat, cutoff: f64) -> Result<Mat> {
    let n = m.ncols();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    if m.nrows() == 0 || m.iter().all(|v| *v == 0.0) {
        return Ok(Mat::identity(n, n));
    }
    // Pad to at least n rows so the thin SVD returns a full right basis.
    let padded = if m.nrows() < n { vstack(&[m, &Mat::zeros(n - m.nrows(), n)]) } else { m.clone() };
    let d = svd(&padded, false, true)?;
    let vt = d.v_t.as_ref().expect("v requested");
    let keep: Vec<usize> = (0..d.singular_values.len()).filter(|&k| d.singular_values[k] <= cutoff).collect();
    let v = vt.transpose();
    Ok(select_cols(&v, &keep))
}

/// Orthonormal basis of the orthogonal complement of span(q) in R^n, q orthonormal.
pub fn complement(q: &Mat, n: usize) -> Result<Mat> {
    if q.ncols() == 0 {
        return Ok(Mat::identity(n, n));
    }
    if q.ncols() >= n {
        return Ok(Mat::zeros(n, 0));
    }
    null_space(&q.transpose(), 1e-8)
}

/// Moore-Penrose pseudo-inverse with a relative cutoff.
pub fn pinv(m: &Mat, rel: f64) -> Result<Mat> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Mat::zeros(m.ncols(), m.nrows()));
    }
    let smax = norm2(m);
    svd(m, true, true)?
        .pseudo_inverse(rel * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::NumericalError(e.into()))
}

/// Inverse that refuses matrices with condition number at or above `max_cond`.
pub fn inverse_checked(m: &Mat, max_cond: f64) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::ShapeError(format!("cannot invert a {}x{} matrix", m.nrows(), m.ncols())));
    }
    if m.nrows() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let c = cond(m);
    if !(c < max_cond) {
        return Err(Error::InvalidTransform(format!("condition number {c:e} exceeds {max_cond:e}")));
    }
    m.clone().try_inverse().ok_or_else(|| Error::InvalidTransform("matrix is singular".into()))
}

/// Stacked observability matrix [C; CA; ...; CA^(n-1)].
pub fn observability_matrix(a: &Mat, c: &Mat) -> Mat {
    let n = a.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut cur = c.clone();
    for _ in 0..n {
        blocks.push(cur.clone());
        cur = &cur * a;
    }
    let refs: Vec<&Mat> = blocks.iter().collect();
    if refs.is_empty() { Mat::zeros(0, n) } else { vstack(&refs) }
}

fn check_pair(a: &Mat, c: &Mat) -> Result<()> {
    if !a.is_square() {
        return Err(Error::ShapeError(format!("A is {}x{}, expected square", a.nrows(), a.ncols())));
    }
    if c.ncols() != a.nrows() {
        return Err(Error::ShapeError(format!("C has {} columns, A has dimension {}", c.ncols(), a.nrows())));
    }
    check_finite(a, "A")?;
    check_finite(c, "C")
}

// ---------------------------------------------------------------------------
// Eigenstructure

/// Groups of indices that are strongly connected in the sparsity pattern of `m`.
/// Permuting to these groups makes `m` block triangular, so the spectrum is the
/// union of the spectra of the diagonal blocks. Exact zeros are respected, which
/// keeps structurally nilpotent matrices at exactly zero spectral radius.
fn sparsity_components(m: &Mat) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let adj = |i: usize, j: usize| i != j && m[(i, j)] != 0.0;
    // Kosaraju: order by finish time, then sweep the transpose.
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![(s, 0usize)];
        while let Some((v, next)) = stack.pop() {
            if let Some(w) = (next..n).find(|&w| adj(v, w) && !seen[w]) {
                stack.push((v, w + 1));
                seen[w] = true;
                stack.push((w, 0));
            } else {
                order.push(v);
            }
        }
    }
    let mut comp = vec![usize::MAX; n];
    let mut groups = Vec::new();
    for &s in order.iter().rev() {
        if comp[s] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut members = vec![s];
        comp[s] = id;
        let mut k = 0;
        while k < members.len() {
            let v = members[k];
            for w in 0..n {
                if adj(w, v) && comp[w] == usize::MAX {
                    comp[w] = id;
                    members.push(w);
                }
            }
            k += 1;
        }
        members.sort_unstable();
        groups.push(members);
    }
    groups
}

fn dense_eigenvalues(m: &Mat) -> Result<Vec<Complex64>> {
    let n = m.nrows();
    if n == 1 {
        return Ok(vec![Complex64::new(m[(0, 0)], 0.0)]);
    }
    let f = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    f.eigenvalues().map_err(|e| Error::NumericalError(format!("eigenvalue iteration failed: {e:?}")))
}

/// Eigenvalues of each irreducible diagonal block by the unsymmetric QR algorithm.
pub fn eigenvalues(m: &Mat) -> Result<Vec<Complex64>> {
    if !m.is_square() {
        return Err(Error::ShapeError("eigenvalues of a non-square matrix".into()));
    }
    check_finite(m, "matrix")?;
    let mut out = Vec::with_capacity(m.nrows());
    for group in sparsity_components(m) {
        let block = select_cols(&select_rows(m, &group), &group);
        out.extend(dense_eigenvalues(&block)?);
    }
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NumericalError("non-finite eigenvalue".into()));
    }
    Ok(out)
}

/// Largest eigenvalue modulus; zero for an empty matrix.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Spectral radius of a matrix partitioned into square diagonal blocks of the
/// given sizes. When every block above the diagonal is exactly zero the
/// spectrum is the union of the diagonal blocks' spectra and each block is
/// solved separately; otherwise the whole matrix is solved.
pub fn spectral_radius_block_lower(m: &Mat, sizes: &[usize]) -> Result<f64> {
    if sizes.iter().sum::<usize>() != m.nrows() || !m.is_square() {
        return Err(Error::ShapeError("block sizes do not partition the matrix".into()));
    }
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, &s| {
        let o = *acc;
        *acc += s;
        Some(o)
    }).collect();
    let upper_zero = (0..sizes.len()).all(|b| {
        let (r0, nr) = (offsets[b], sizes[b]);
        let c0 = r0 + nr;
        (r0..r0 + nr).all(|i| (c0..m.ncols()).all(|j| m[(i, j)] == 0.0))
    });
    if !upper_zero {
        return spectral_radius(m);
    }
    let mut rho = 0.0_f64;
    for (b, &s) in sizes.iter().enumerate() {
        let blk = sub(m, offsets[b], offsets[b], s, s);
        if blk.iter().all(|&v| v == 0.0) {
            continue;
        }
        rho = rho.max(spectral_radius(&blk)?);
    }
    Ok(rho)
}

/// One distinct-eigenvalue class. A conjugate pair is fused into one class
/// whose representative has non-negative imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenClass {
    pub lambda: Complex64,
    /// Indices into `EigenInfo::eigenvalues`.
    pub members: Vec<usize>,
    /// Real dimension of the generalized eigenspace (doubled for a pair).
    pub algebraic_mult: usize,
    /// Real dimension of the eigenspace (doubled for a pair).
    pub geometric_mult: usize,
}

impl EigenClass {
    pub fn is_complex(&self) -> bool {
        self.lambda.im != 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenInfo {
    pub eigenvalues: Vec<Complex64>,
    /// Sorted by descending modulus, then descending real part, then ascending imaginary part.
    pub classes: Vec<EigenClass>,
}

impl EigenInfo {
    pub fn unstable<'a>(&'a self, tol: &'a ToleranceConfig) -> impl Iterator<Item = &'a EigenClass> + 'a {
        self.classes.iter().filter(move |c| tol.is_unstable(c.lambda))
    }
}

/// Ordering used for eigenvalue classes everywhere in the crate.
pub fn class_order(a: &Complex64, b: &Complex64) -> std::cmp::Ordering {
    b.norm()
        .partial_cmp(&a.norm())
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(b.re.partial_cmp(&a.re).unwrap_or(std::cmp::Ordering::Equal))
        .then(a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal))
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

/// Real and imaginary parts of A - lambda·I.
pub fn shifted(a: &Mat, lambda: Complex64) -> (Mat, Mat) {
    let n = a.nrows();
    let re = a - Mat::identity(n, n) * lambda.re;
    let im = Mat::identity(n, n) * (-lambda.im);
    (re, im)
}

/// Distinct eigenvalue classes with algebraic and geometric multiplicities.
pub fn eigen_info(a: &Mat, tol: &ToleranceConfig) -> Result<EigenInfo> {
    eigen_info_clustered(a, tol, tol.eig_cluster_tol)
}

/// As [`eigen_info`], merging computed eigenvalues closer than `cluster_tol`.
pub fn eigen_info_clustered(a: &Mat, tol: &ToleranceConfig, cluster_tol: f64) -> Result<EigenInfo> {
    let eigs = eigenvalues(a)?;
    let n = eigs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if (eigs[i] - eigs[j]).norm() <= cluster_tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[rj] = ri;
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut root_slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if root_slot[r] == usize::MAX {
            root_slot[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[root_slot[r]].push(i);
    }
    let means: Vec<Complex64> = clusters
        .iter()
        .map(|c| c.iter().map(|&i| eigs[i]).sum::<Complex64>() / c.len() as f64)
        .collect();

    let mut used = vec![false; clusters.len()];
    let mut classes = Vec::new();
    for k in 0..clusters.len() {
        if used[k] {
            continue;
        }
        used[k] = true;
        let mean = means[k];
        if mean.im.abs() <= cluster_tol {
            let lambda = Complex64::new(mean.re, 0.0);
            let g = n - shifted_rank(a, &Mat::zeros(0, n), lambda, tol)?;
            classes.push(EigenClass {
                lambda,
                members: clusters[k].clone(),
                algebraic_mult: clusters[k].len(),
                geometric_mult: g,
            });
            continue;
        }
        // Fuse with the conjugate cluster.
        let partner = (0..clusters.len())
            .filter(|&m| !used[m])
            .min_by(|&x, &y| {
                (means[x] - mean.conj()).norm().partial_cmp(&(means[y] - mean.conj()).norm()).unwrap()
            })
            .filter(|&m| (means[m] - mean.conj()).norm() <= 10.0 * cluster_tol.max(1e-12 * (1.0 + mean.norm())));
        let Some(m) = partner else {
            return Err(Error::NumericalError(format!("eigenvalue {mean} has no conjugate partner")));
        };
        used[m] = true;
        let avg = 0.5 * (mean + means[m].conj());
        let lambda = Complex64::new(avg.re, avg.im.abs());
        let g = n - shifted_rank(a, &Mat::zeros(0, n), lambda, tol)?;
        let mut members = clusters[k].clone();
        members.extend(&clusters[m]);
        members.sort_unstable();
        classes.push(EigenClass {
            lambda,
            algebraic_mult: members.len(),
            geometric_mult: 2 * g,
            members,
        });
    }
    classes.sort_by(|x, y| class_order(&x.lambda, &y.lambda));
    Ok(EigenInfo { eigenvalues: eigs, classes })
}

// ---------------------------------------------------------------------------
// Observability

/// PBH test: true when |lambda| < 1 or rank [A - lambda·I; C] = n.
pub fn pbh_detectable(a: &Mat, c: &Mat, lambda: Complex64, tol: &ToleranceConfig) -> Result<bool> {
    check_pair(a, c)?;
    if lambda.norm() < 1.0 - tol.eig_cluster_tol {
        return Ok(true);
    }
    pbh_rank_full(a, c, lambda, tol)
}

/// Rank of [A - lambda·I; C] with the cutoff scaled by the inputs, since
/// A - lambda·I alone may be pure rounding.
fn shifted_rank(a: &Mat, c: &Mat, lambda: Complex64, tol: &ToleranceConfig) -> Result<usize> {
    let n = a.ncols();
    let (re, im) = shifted(a, lambda);
    let re_s = vstack(&[&re, c]);
    let im_s = vstack(&[&im, &Mat::zeros(c.nrows(), n)]);
    let cutoff = tol.rank_tol * (norm2(a) + lambda.norm()).max(norm2(c));
    let s = singular_values(&realify(&re_s, &im_s))?;
    Ok(s.iter().filter(|&&v| v > cutoff).count().div_ceil(2))
}

/// Rank part of the PBH test, without the stable-eigenvalue shortcut.
pub fn pbh_rank_full(a: &Mat, c: &Mat, lambda: Complex64, tol: &ToleranceConfig) -> Result<bool> {
    check_pair(a, c)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(true);
    }
    Ok(shifted_rank(a, c, lambda, tol)? == n)
}

/// Orthonormal basis (n x n_obs) of the observable subspace of (A, C).
///
/// Built as the Krylov space of A^T generated by C^T, orthogonalized at every step.
pub fn observable_basis(a: &Mat, c: &Mat, tol: &ToleranceConfig) -> Result<Mat> {
    observable_basis_scaled(a, c, tol, norm2(c))
}

/// As [`observable_basis`], with output directions kept only above
/// `rank_tol * c_scale`. Used when `c` is the restriction of a larger output
/// matrix whose norm sets the noise floor.
pub fn observable_basis_scaled(a: &Mat, c: &Mat, tol: &ToleranceConfig, c_scale: f64) -> Result<Mat> {
    check_pair(a, c)?;
    let n = a.nrows();
    if c.nrows() == 0 || n == 0 {
        return Ok(Mat::zeros(n, 0));
    }
    let mut q = orth_abs(&c.transpose(), tol.rank_tol * c_scale.max(norm2(c)))?;
    let mut fresh = q.clone();
    let at = a.transpose();
    let cutoff = tol.rank_tol * norm2(a);
    while q.ncols() < n && fresh.ncols() > 0 {
        let mut r = &at * &fresh;
        for _ in 0..2 {
            let proj = &q * (q.transpose() * &r);
            r -= proj;
        }
        fresh = orth_abs(&r, cutoff)?;
        if fresh.ncols() > 0 {
            // Re-orthogonalize the new directions against the old ones.
            let mut f = fresh.clone();
            let proj = &q * (q.transpose() * &f);
            f -= proj;
            fresh = orth_abs(&f, 0.5)?;
            q = hstack(&[&q, &fresh]);
        }
    }
    Ok(q)
}

/// Orthogonal observable canonical decomposition.
///
/// Returns (T, n_obs) with T orthogonal, T^T A T = [A_o 0; * A_u] and C T = [C_o 0].
pub fn obs_canon_decomp(a: &Mat, c: &Mat, tol: &ToleranceConfig) -> Result<(Mat, usize)> {
    obs_canon_decomp_scaled(a, c, tol, norm2(c))
}

/// As [`obs_canon_decomp`] with the output noise floor set by `c_scale`.
pub fn obs_canon_decomp_scaled(a: &Mat, c: &Mat, tol: &ToleranceConfig, c_scale: f64) -> Result<(Mat, usize)> {
    let n = a.nrows();
    let q = observable_basis_scaled(a, c, tol, c_scale)?;
    let n_obs = q.ncols();
    let comp = complement(&q, n)?;
    if n_obs + comp.ncols() != n {
        return Err(Error::NumericalError(format!(
            "complement has dimension {} but {} was expected",
            comp.ncols(),
            n - n_obs
        )));
    }
    Ok((hstack(&[&q, &comp]), n_obs))
}

// ---------------------------------------------------------------------------
// Gain placement

fn poly_from_roots(poles: &[Complex64]) -> Vec<f64> {
    // Monic coefficients, highest degree first.
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for p in poles {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (k, c) in coeffs.iter().enumerate() {
            next[k] += c;
            next[k + 1] -= c * p;
        }
        coeffs = next;
    }
    coeffs.iter().map(|c| c.re).collect()
}

fn conjugate_closed(poles: &[Complex64]) -> bool {
    let mut rest: Vec<Complex64> = poles.to_vec();
    while let Some(p) = rest.pop() {
        if p.im.abs() <= 1e-12 * (1.0 + p.norm()) {
            continue;
        }
        let Some(pos) = rest.iter().position(|q| (q - p.conj()).norm() <= 1e-9 * (1.0 + p.norm())) else {
            return false;
        };
        rest.swap_remove(pos);
    }
    true
}

/// Deadbeat state feedback K for (F, G): F - G K nilpotent with index equal to
/// the controllability index. Builds the nested subspaces V_k = F^{-1}(V_{k-1} + im G).
fn deadbeat_feedback(f: &Mat, g: &Mat, tol: &ToleranceConfig) -> Result<Mat> {
    let n = f.nrows();
    let g_basis = orth(g, tol.rank_tol)?;
    let mut w = Mat::zeros(n, 0);
    let mut levels: Vec<usize> = Vec::new();
    let fscale = norm2(f).max(norm2(g)).max(f64::MIN_POSITIVE);
    while w.ncols() < n {
        let span = orth_abs(&hstack(&[&w, &g_basis]), 1e-8)?;
        let proj = Mat::identity(n, n) - &span * span.transpose();
        let vk = null_space_abs(&(&proj * f), tol.rank_tol * fscale)?;
        let mut r = vk.clone();
        for _ in 0..2 {
            let p = &w * (w.transpose() * &r);
            r -= p;
        }
        let fresh = orth_abs(&r, 1e-6)?;
        if fresh.ncols() == 0 {
            return Err(Error::NotObservable(format!("deadbeat recursion stalled at dimension {}", w.ncols())));
        }
        levels.push(fresh.ncols());
        w = hstack(&[&w, &fresh]);
        if levels.len() > n {
            return Err(Error::NumericalError("deadbeat recursion did not terminate".into()));
        }
    }
    if w.ncols() > n {
        return Err(Error::NumericalError("deadbeat subspaces overshoot the state dimension".into()));
    }
    // Solve F v = G g + V_{k-1} c for every basis vector v of level k.
    let r = g.ncols();
    let mut kw = Mat::zeros(r, n);
    let mut start = 0;
    for &len in &levels {
        let prev = sub(&w, 0, 0, n, start);
        let sys = hstack(&[g, &prev]);
        let sys_pinv = pinv(&sys, 1e-12)?;
        for j in start..start + len {
            let rhs = f * w.column(j);
            let sol = &sys_pinv * &rhs;
            let resid = (&sys * &sol - &rhs).norm();
            if resid > 1e-7 * (1.0 + rhs.norm()) {
                return Err(Error::NumericalError(format!("deadbeat solve residual {resid:e}")));
            }
            for i in 0..r {
                kw[(i, j)] = sol[i];
            }
        }
        start += len;
    }
    Ok(kw * w.transpose())
}

/// Generic pole placement: random feedback for cyclicity, then Ackermann on a
/// random input combination. Deterministic through a fixed seed.
fn general_feedback(f: &Mat, g: &Mat, poles: &[Complex64]) -> Result<Mat> {
    let n = f.nrows();
    let r = g.ncols();
    let coeffs = poly_from_roots(poles);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let scale = 1.0 + f.norm();
    for attempt in 0..40 {
        let k0 = if attempt == 0 {
            Mat::zeros(r, n)
        } else {
            Mat::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0) * scale / (1.0 + g.norm()))
        };
        let q = if attempt == 0 && r == 1 {
            Mat::from_element(1, 1, 1.0)
        } else {
            Mat::from_fn(r, 1, |_, _| rng.random_range(-1.0..1.0))
        };
        let f0 = f - g * &k0;
        let b = g * &q;
        let mut cols = Vec::with_capacity(n);
        let mut cur = b.clone();
        for _ in 0..n {
            cols.push(cur.clone());
            cur = &f0 * cur;
        }
        let refs: Vec<&Mat> = cols.iter().collect();
        let ctrb = hstack(&refs);
        if cond(&ctrb) > 1e12 {
            continue;
        }
        let Some(ctrb_inv) = ctrb.clone().try_inverse() else { continue };
        // p(F0) by Horner's rule.
        let mut pf = Mat::identity(n, n) * coeffs[0];
        for c in &coeffs[1..] {
            pf = &f0 * pf + Mat::identity(n, n) * *c;
        }
        let last = ctrb_inv.row(n - 1).into_owned();
        let k = Mat::from_row_slice(1, n, (last * pf).as_slice());
        return Ok(k0 + q * k);
    }
    Err(Error::NumericalError("pole placement found no well-conditioned single-input reduction".into()))
}

/// Observer gain L such that A - L C has the requested poles (default deadbeat).
///
/// Placement runs on the dual pair (A^T, C^T). All-zero poles use a
/// minimal-index deadbeat construction; other pole sets use Ackermann's formula
/// after a cyclic single-input reduction.
pub fn place_observer_gain(a: &Mat, c: &Mat, poles: &[Complex64], tol: &ToleranceConfig) -> Result<Mat> {
    check_pair(a, c)?;
    let n = a.nrows();
    if poles.len() != n {
        return Err(Error::ShapeError(format!("{} poles requested for a block of dimension {n}", poles.len())));
    }
    if !conjugate_closed(poles) {
        return Err(Error::ShapeError("poles are not closed under conjugation".into()));
    }
    if n == 0 {
        return Ok(Mat::zeros(0, c.nrows()));
    }
    if observable_basis(a, c, tol)?.ncols() < n {
        return Err(Error::NotObservable(format!("observable subspace is smaller than {n}")));
    }
    let f = a.transpose();
    let g = c.transpose();
    let deadbeat = poles.iter().all(|p| p.norm() == 0.0);
    let k = if deadbeat && g.ncols() == 1 {
        // Ackermann keeps exactly representable data exact; the subspace
        // construction is the fallback when the reduction is ill-conditioned.
        general_feedback(&f, &g, poles).or_else(|_| deadbeat_feedback(&f, &g, tol))?
    } else if deadbeat {
        deadbeat_feedback(&f, &g, tol)?
    } else {
        general_feedback(&f, &g, poles)?
    };
    let l = k.transpose();
    verify_placement(a, c, &l, poles)?;
    Ok(l)
}

fn verify_placement(a: &Mat, c: &Mat, l: &Mat, poles: &[Complex64]) -> Result<()> {
    let n = a.nrows();
    let closed = a - l * c;
    check_finite(&closed, "closed-loop matrix")?;
    let rho = spectral_radius(&closed)?;
    let target = poles.iter().map(|p| p.norm()).fold(0.0, f64::max);
    // Repeated poles are sensitive: a multiplicity-m pole moves by about (eps·scale)^(1/m).
    let scale = 1.0 + a.norm() + l.norm() * c.norm();
    let slack = 1e-6 + (1e3 * f64::EPSILON * scale).powf(1.0 / n as f64);
    if rho > target + slack {
        return Err(Error::NumericalError(format!(
            "placed spectral radius {rho:e} exceeds target {target:e} by more than {slack:e}"
        )));
    }
    Ok(())
}

/// Default deadbeat pole list for a block of dimension n.
pub fn deadbeat_poles(n: usize) -> Vec<Complex64> {
    vec![Complex64::new(0.0, 0.0); n]
}


/// Serde adapter writing matrices as `{"shape": [rows, cols], "rows": [[...], ...]}`
/// in row-major order. Works on single matrices and on the containers of
/// matrices used by the observer banks.
pub mod row_major {
    use std::collections::BTreeMap;

    use serde::de::{DeserializeOwned, Error as _};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Mat;

    #[derive(Serialize, Deserialize)]
    pub struct MatRepr {
        pub shape: [usize; 2],
        pub rows: Vec<Vec<f64>>,
    }

    impl MatRepr {
        pub fn from_mat(m: &Mat) -> Self {
            Self { shape: [m.nrows(), m.ncols()], rows: super::to_rows(m) }
        }

        pub fn into_mat(self) -> Result<Mat, String> {
            let [r, c] = self.shape;
            if self.rows.len() != r || self.rows.iter().any(|row| row.len() != c) {
                return Err(format!("matrix rows do not match shape {r}x{c}"));
            }
            Ok(Mat::from_fn(r, c, |i, j| self.rows[i][j]))
        }
    }

    pub trait Repr: Sized {
        type Out: Serialize + DeserializeOwned;
        fn to_repr(&self) -> Self::Out;
        fn from_repr(r: Self::Out) -> Result<Self, String>;
    }

    impl Repr for Mat {
        type Out = MatRepr;
        fn to_repr(&self) -> MatRepr {
            MatRepr::from_mat(self)
        }
        fn from_repr(r: MatRepr) -> Result<Self, String> {
            r.into_mat()
        }
    }

    impl Repr for Vec<Mat> {
        type Out = Vec<MatRepr>;
        fn to_repr(&self) -> Self::Out {
            self.iter().map(MatRepr::from_mat).collect()
        }
        fn from_repr(r: Self::Out) -> Result<Self, String> {
            r.into_iter().map(MatRepr::into_mat).collect()
        }
    }

    impl Repr for BTreeMap<usize, Mat> {
        type Out = BTreeMap<usize, MatRepr>;
        fn to_repr(&self) -> Self::Out {
            self.iter().map(|(k, m)| (*k, MatRepr::from_mat(m))).collect()
        }
        fn from_repr(r: Self::Out) -> Result<Self, String> {
            r.into_iter().map(|(k, m)| m.into_mat().map(|m| (k, m))).collect()
        }
    }

    impl Repr for Vec<(usize, Mat)> {
        type Out = Vec<(usize, MatRepr)>;
        fn to_repr(&self) -> Self::Out {
            self.iter().map(|(k, m)| (*k, MatRepr::from_mat(m))).collect()
        }
        fn from_repr(r: Self::Out) -> Result<Self, String> {
            r.into_iter().map(|(k, m)| m.into_mat().map(|m| (k, m))).collect()
        }
    }

    pub fn serialize<T: Repr, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        v.to_repr().serialize(s)
    }

    pub fn deserialize<'de, T: Repr, D: Deserializer<'de>>(d: D) -> Result<T, D::Error> {
        T::from_repr(T::Out::deserialize(d)?).map_err(D::Error::custom)
    }
}
