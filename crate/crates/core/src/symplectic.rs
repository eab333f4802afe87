//! Linear symplectic algebra on single fibres.
//!
//! A fibre carries a constant linear symplectic form and a positive-definite
//! quadratic form (the transverse Hessian of the Hamiltonian). Both can be put
//! simultaneously into normal form: the form becomes the standard block matrix
//! `J = [[0, -I], [I, 0]]` and the Hessian becomes `sum a_i (y_i^2 + y_{i+p}^2)`.
//! The `a_i` are the symplectic eigenvalues; their integer-dependence pattern
//! over the base manifold decides how many periodic-orbit families survive.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Default nondegeneracy tolerance for |det|.
pub const DET_TOL: f64 = 1e-12;
/// Eigenvalue pairs closer than this (relatively) are reported as a cluster:
/// the normal-form basis inside the cluster is not unique.
pub const CLUSTER_TOL: f64 = 1e-8;
/// Default bound on tested integer multiples in resonance classification.
pub const DEFAULT_MAX_MULTIPLE: u32 = 16;
/// Default relative tolerance for integer-dependence tests.
pub const DEFAULT_REL_TOL: f64 = 1e-8;

/// The standard symplectic block matrix `J = [[0, -I], [I, 0]]` on `R^{2p}`.
pub fn standard_j(p: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * p, 2 * p);
    for i in 0..p {
        j[(i, p + i)] = -1.0;
        j[(p + i, i)] = 1.0;
    }
    j
}

/// A nondegenerate antisymmetric bilinear form on an even-dimensional space,
/// stored as its matrix of pairings `Omega(e_i, e_j)`.
#[derive(Debug, Clone)]
pub struct SymplecticMatrix {
    mat: DMatrix<f64>,
}

impl SymplecticMatrix {
    /// Wraps a matrix that is antisymmetric exactly as stored.
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        Self::with_det_tol(mat, DET_TOL)
    }

    pub fn with_det_tol(mat: DMatrix<f64>, det_tol: f64) -> Result<Self> {
        check_even_square(&mat)?;
        let asym = (&mat + mat.transpose()).amax();
        if asym > 0.0 {
            return Err(Error::NotAntisymmetric { asymmetry: asym });
        }
        let det = mat.clone().lu().determinant();
        if det.abs() <= det_tol {
            return Err(Error::DegenerateForm {
                det: det.abs(),
                tol: det_tol,
            });
        }
        Ok(Self { mat })
    }

    /// Antisymmetrizes a computed matrix, rejecting it only when the asymmetry
    /// exceeds `asym_tol` relative to the matrix scale.
    pub fn from_nearly_antisymmetric(mat: DMatrix<f64>, asym_tol: f64) -> Result<Self> {
        check_even_square(&mat)?;
        let scale = mat.amax().max(1.0);
        let asym = (&mat + mat.transpose()).amax();
        if asym > asym_tol * scale {
            return Err(Error::NotAntisymmetric { asymmetry: asym });
        }
        let clean = (&mat - mat.transpose()) * 0.5;
        Self::new(clean)
    }

    pub fn standard(p: usize) -> Self {
        Self { mat: standard_j(p) }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// Pairing `Omega(u, v) = u^T M v`.
    pub fn pair(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        (u.transpose() * &self.mat * v)[(0, 0)]
    }
}

/// A positive-definite quadratic form `Q(y) = y^T A y` with `A` symmetric.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    mat: DMatrix<f64>,
    min_eigenvalue: f64,
}

impl QuadraticForm {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        check_even_square(&mat)?;
        let asym = (&mat - mat.transpose()).amax();
        if asym > 0.0 {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let eig = mat.clone().symmetric_eigenvalues();
        let min = eig.min();
        if min <= DET_TOL {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min,
            });
        }
        Ok(Self {
            mat,
            min_eigenvalue: min,
        })
    }

    /// Symmetrizes a computed matrix before validation.
    pub fn from_nearly_symmetric(mat: DMatrix<f64>, asym_tol: f64) -> Result<Self> {
        check_even_square(&mat)?;
        let scale = mat.amax().max(1.0);
        let asym = (&mat - mat.transpose()).amax();
        if asym > asym_tol * scale {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let clean = (&mat + mat.transpose()) * 0.5;
        Self::new(clean)
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        (y.transpose() * &self.mat * y)[(0, 0)]
    }
}

fn check_even_square(mat: &DMatrix<f64>) -> Result<()> {
    if mat.nrows() != mat.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    if !mat.nrows().is_multiple_of(2) {
        return Err(Error::DimensionMismatch(format!(
            "expected even dimension, got {}",
            mat.nrows()
        )));
    }
    Ok(())
}

/// Orthonormalizes the columns of `cols` by modified Gram-Schmidt with two
/// passes, dropping columns whose residual falls below `drop_tol`.
fn orthonormalize(cols: &[DVector<f64>], drop_tol: f64) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(cols.len());
    for c in cols {
        let mut v = c.clone();
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
        }
        let n = v.norm();
        if n > drop_tol {
            basis.push(v / n);
        }
    }
    basis
}

/// Basis of the orthogonal complement of the span of `basis` (orthonormal columns)
/// in `R^dim`, built by projecting the standard basis and keeping the `dim - k`
/// directions with the largest residuals first.
fn orthogonal_complement(basis: &[DVector<f64>], dim: usize) -> Vec<DVector<f64>> {
    let want = dim - basis.len();
    let mut result: Vec<DVector<f64>> = Vec::with_capacity(want);
    let mut residuals: Vec<DVector<f64>> = (0..dim)
        .map(|k| {
            let mut e = DVector::zeros(dim);
            e[k] = 1.0;
            for b in basis {
                let proj = b.dot(&e);
                e -= b * proj;
            }
            e
        })
        .collect();
    while result.len() < want {
        // column pivoting: take the largest remaining residual
        let (best, _) = residuals
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.norm()))
            .fold((0, -1.0), |acc, it| if it.1 > acc.1 { it } else { acc });
        let mut v = residuals.swap_remove(best);
        for _ in 0..2 {
            for b in basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
            for r in &result {
                let proj = r.dot(&v);
                v -= r * proj;
            }
        }
        let n = v.norm();
        debug_assert!(n > 1e-10, "complement residual collapsed");
        v /= n;
        for r in residuals.iter_mut() {
            let proj = v.dot(r);
            *r -= &v * proj;
        }
        result.push(v);
    }
    result
}

/// Basis of the `Omega`-orthogonal complement `{v : Omega(v, w) = 0 for all w in span(subspace)}`.
///
/// The returned columns are orthonormal and span the annihilator of the subspace
/// under the pairing; its dimension is `ambient - subspace` columns. The form
/// must restrict nondegenerately to the subspace, otherwise the offending Gram
/// matrix is reported.
pub fn symplectic_complement(
    omega: &SymplecticMatrix,
    subspace: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let dim = omega.dim();
    if subspace.nrows() != dim {
        return Err(Error::DimensionMismatch(format!(
            "subspace rows {} != ambient dim {}",
            subspace.nrows(),
            dim
        )));
    }
    let k = subspace.ncols();
    if k == 0 || k > dim {
        return Err(Error::DimensionMismatch(format!(
            "subspace has {k} columns in ambient dim {dim}"
        )));
    }
    let cols: Vec<DVector<f64>> = (0..k).map(|j| subspace.column(j).into_owned()).collect();
    let ortho = orthonormalize(&cols, 1e-10);
    if ortho.len() < k {
        return Err(Error::DependentColumns {
            rank: ortho.len(),
            cols: k,
        });
    }
    let gram = subspace.transpose() * omega.matrix() * subspace;
    let det = gram.clone().lu().determinant();
    let scale = gram.amax().max(1.0);
    if det.abs() <= DET_TOL * scale.powi(k as i32) {
        return Err(Error::DegenerateRestriction {
            det: det.abs(),
            gram,
        });
    }
    // Null space of (Omega B)^T = orthogonal complement of col(Omega B).
    let image: Vec<DVector<f64>> = cols.iter().map(|c| omega.matrix() * c).collect();
    let image_ortho = orthonormalize(&image, 1e-12);
    debug_assert_eq!(image_ortho.len(), k);
    let comp = orthogonal_complement(&image_ortho, dim);
    if comp.is_empty() {
        return Ok(DMatrix::zeros(dim, 0));
    }
    Ok(DMatrix::from_columns(&comp))
}

/// Simultaneous normal form of a symplectic form and a positive-definite
/// quadratic form on one fibre.
#[derive(Debug, Clone)]
pub struct WilliamsonResult {
    /// Symplectic eigenvalues `a_1 <= ... <= a_p`.
    pub eigenvalues: Vec<f64>,
    /// Basis matrix `T` with `T^T Omega T = J` and `T^T A T = diag(a; a)`.
    pub basis: DMatrix<f64>,
    /// Index groups of eigenvalues separated by less than [`CLUSTER_TOL`]
    /// (relative); within a group the basis is not unique. Only groups of two
    /// or more are listed.
    pub clusters: Vec<Vec<usize>>,
}

impl WilliamsonResult {
    pub fn p(&self) -> usize {
        self.eigenvalues.len()
    }
}

/// Simultaneously reduces `(Omega, A)` to `(J, diag(a; a))`.
///
/// Route: whiten `A`, eigendecompose the Hermitian matrix `i * Om1` through its
/// real symmetric embedding, pair real/imaginary parts of the positive-frequency
/// eigenvectors into invariant planes, and polish every plane with an exact 2x2
/// reduction. Eigenvalues return sorted ascending; near-degenerate eigenvalues
/// still succeed but are flagged in `clusters`.
pub fn williamson(omega: &SymplecticMatrix, form: &QuadraticForm) -> Result<WilliamsonResult> {
    let n = omega.dim();
    if form.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "form dim {} != symplectic dim {}",
            form.dim(),
            n
        )));
    }
    let p = n / 2;

    // A^{-1/2}
    let a_eig = form.matrix().clone().symmetric_eigen();
    let mut inv_sqrt = DMatrix::zeros(n, n);
    for k in 0..n {
        let w = a_eig.eigenvalues[k];
        if w <= 0.0 {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: w });
        }
        let col = a_eig.eigenvectors.column(k);
        inv_sqrt += col * col.transpose() / w.sqrt();
    }

    let om1_raw = &inv_sqrt * omega.matrix() * &inv_sqrt;
    let om1 = (&om1_raw - om1_raw.transpose()) * 0.5;

    // Real symmetric embedding of i*Om1: E = [[0, -Om1], [Om1, 0]].
    let mut embed = DMatrix::zeros(2 * n, 2 * n);
    embed.view_mut((0, n), (n, n)).copy_from(&(-&om1));
    embed.view_mut((n, 0), (n, n)).copy_from(&om1);
    let e_eig = embed.symmetric_eigen();

    let mut positive: Vec<(f64, usize)> = (0..2 * n)
        .filter(|&k| e_eig.eigenvalues[k] > 0.0)
        .map(|k| (e_eig.eigenvalues[k], k))
        .collect();
    if positive.len() != n {
        return Err(Error::DegenerateForm {
            det: 0.0,
            tol: DET_TOL,
        });
    }
    positive.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Each complex eigenvector appears twice in the real embedding (z and i*z);
    // Hermitian Gram-Schmidt keeps one representative per invariant plane.
    let mut selected: Vec<(f64, DVector<Complex<f64>>)> = Vec::with_capacity(p);
    for &(nu, k) in &positive {
        let col = e_eig.eigenvectors.column(k);
        let mut z = DVector::from_fn(n, |i, _| Complex::new(col[i], col[n + i]));
        for (_, zs) in &selected {
            let c = zs.dotc(&z);
            z -= zs * c;
        }
        let norm = z.norm();
        if norm > 1e-6 {
            selected.push((nu, z / Complex::new(norm, 0.0)));
        }
    }
    if selected.len() != p {
        return Err(Error::InvalidParameter(format!(
            "eigenvector pairing failed: found {} invariant planes, expected {p}",
            selected.len()
        )));
    }

    let mut planes: Vec<(f64, DVector<f64>, DVector<f64>)> = Vec::with_capacity(p);
    for (nu, z) in selected {
        let sqrt2_over = (2.0 / nu).sqrt();
        let t1 = &inv_sqrt * z.map(|c| c.re) * sqrt2_over;
        let t2 = &inv_sqrt * z.map(|c| c.im) * sqrt2_over;
        let (a, c1, c2) = polish_plane(omega.matrix(), form.matrix(), &t1, &t2)?;
        planes.push((a, c1, c2));
    }
    planes.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut basis = DMatrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(p);
    for (i, (a, c1, c2)) in planes.into_iter().enumerate() {
        eigenvalues.push(a);
        basis.set_column(i, &c1);
        basis.set_column(p + i, &c2);
    }

    let clusters = cluster_groups(&eigenvalues, CLUSTER_TOL);
    Ok(WilliamsonResult {
        eigenvalues,
        basis,
        clusters,
    })
}

/// Exact reduction of one invariant plane: rescales the two candidate columns so
/// that the restricted pairing is exactly `[[0, -1], [1, 0]]` and the restricted
/// Hessian is a multiple of the identity.
fn polish_plane(
    omega: &DMatrix<f64>,
    form: &DMatrix<f64>,
    t1: &DVector<f64>,
    t2: &DVector<f64>,
) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let sigma = 0.5
        * ((t1.transpose() * omega * t2)[(0, 0)] - (t2.transpose() * omega * t1)[(0, 0)]);
    if sigma.abs() < 1e-300 {
        return Err(Error::DegenerateForm {
            det: sigma.abs(),
            tol: DET_TOL,
        });
    }
    let a11 = (t1.transpose() * form * t1)[(0, 0)];
    let a22 = (t2.transpose() * form * t2)[(0, 0)];
    let a12 = 0.5 * ((t1.transpose() * form * t2)[(0, 0)] + (t2.transpose() * form * t1)[(0, 0)]);
    let a2 = nalgebra::Matrix2::new(a11, a12, a12, a22);
    let eig = a2.symmetric_eigen();
    let mut b = nalgebra::Matrix2::zeros();
    for k in 0..2 {
        let w = eig.eigenvalues[k];
        if w <= 0.0 {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: w });
        }
        let col = eig.eigenvectors.column(k);
        b += col * col.transpose() / w.sqrt();
    }
    let det_b = b[(0, 0)] * b[(1, 1)] - b[(0, 1)] * b[(1, 0)];
    let c = det_b * sigma;
    let a_val = 1.0 / c.abs();
    let scale = a_val.sqrt();
    // reflection flips the pairing sign when needed
    let q2 = if c < 0.0 { 1.0 } else { -1.0 };
    let r11 = b[(0, 0)] * scale;
    let r21 = b[(1, 0)] * scale;
    let r12 = b[(0, 1)] * q2 * scale;
    let r22 = b[(1, 1)] * q2 * scale;
    let c1 = t1 * r11 + t2 * r21;
    let c2 = t1 * r12 + t2 * r22;
    Ok((a_val, c1, c2))
}

fn cluster_groups(sorted: &[f64], rel_tol: f64) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut current = vec![0usize];
    for i in 1..sorted.len() {
        if sorted[i] - sorted[i - 1] <= rel_tol * sorted[i].abs() {
            current.push(i);
        } else {
            if current.len() > 1 {
                groups.push(current.clone());
            }
            current = vec![i];
        }
    }
    if current.len() > 1 {
        groups.push(current);
    }
    if sorted.is_empty() {
        groups.clear();
    }
    groups
}

/// One sampled fibre spectrum: a base point and its sorted symplectic eigenvalues.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SpectrumSample {
    pub point: Vec<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Witness for a failure of the global resonance conditions: the dependence
/// relation of one eigenvalue pair differs between two sampled base points.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GrcWitness {
    /// Eigenvalue indices `(i, j)` with `i > j` into the sorted spectrum.
    pub pair: (usize, usize),
    pub point_first: Vec<f64>,
    pub point_other: Vec<f64>,
    pub eigenvalues_first: (f64, f64),
    pub eigenvalues_other: (f64, f64),
    /// Multiple `n` observed at the first point, if the pair was dependent there.
    pub multiple_first: Option<u32>,
    pub multiple_other: Option<u32>,
}

/// Partition of the eigenvalue indices into integer-dependence classes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ResonancePartition {
    /// Index groups into the sorted eigenvalue list, ordered by smallest member.
    pub classes: Vec<Vec<usize>>,
    /// Cumulative class boundaries `k_0 = 0 < k_1 < ... < k_q = p`.
    pub boundaries: Vec<usize>,
    /// Number of classes.
    pub q: usize,
    /// True when the dependence pattern is identical at every sampled point.
    pub grc_satisfied: bool,
    pub witness: Option<GrcWitness>,
    pub max_multiple: u32,
    pub rel_tol: f64,
}

/// Tests whether `hi ~= n * lo` for some `1 <= n <= max_multiple`
/// within `rel_tol * hi`. Call with `hi >= lo > 0`.
fn integer_multiple(hi: f64, lo: f64, max_multiple: u32, rel_tol: f64) -> Option<u32> {
    if lo <= 0.0 {
        return None;
    }
    let n = (hi / lo).round();
    if n < 1.0 || n > f64::from(max_multiple) {
        return None;
    }
    if (hi - n * lo).abs() <= rel_tol * hi {
        Some(n as u32)
    } else {
        None
    }
}

fn dependence_pattern(eigs: &[f64], max_multiple: u32, rel_tol: f64) -> Vec<Option<u32>> {
    let p = eigs.len();
    let mut pattern = Vec::with_capacity(p * (p - 1) / 2);
    for i in 1..p {
        for j in 0..i {
            pattern.push(integer_multiple(eigs[i], eigs[j], max_multiple, rel_tol));
        }
    }
    pattern
}

fn pair_index(i: usize, j: usize) -> usize {
    // pairs (i, j) with i > j in row-major order of i
    i * (i - 1) / 2 + j
}

fn sorted_eigs(sample: &SpectrumSample) -> Vec<f64> {
    let mut e = sample.eigenvalues.clone();
    e.sort_by(|a, b| a.total_cmp(b));
    e
}

/// Classifies eigenvalues into integer-dependence classes over sampled base points.
///
/// The pairwise relation `a_i = n a_j` is tested at the first sample and closed
/// transitively into candidate classes; the same relations are then required at
/// every other sample. A failure is reported through `grc_satisfied = false` and
/// a witness, not an error. Classes are tracked by the dependence pattern, not by
/// eigenvalue continuation, so branch crossings along the base never relabel them.
pub fn classify_resonance(
    samples: &[SpectrumSample],
    max_multiple: u32,
    rel_tol: f64,
) -> Result<ResonancePartition> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if max_multiple < 1 {
        return Err(Error::InvalidParameter(
            "max_multiple must be at least 1".into(),
        ));
    }
    let p = samples[0].eigenvalues.len();
    if p == 0 {
        return Err(Error::EmptySamples);
    }
    for s in samples {
        if s.eigenvalues.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "sample at {:?} has {} eigenvalues, expected {p}",
                s.point,
                s.eigenvalues.len()
            )));
        }
        if s.eigenvalues.iter().any(|&a| a <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "non-positive eigenvalue at {:?}",
                s.point
            )));
        }
    }

    let first = sorted_eigs(&samples[0]);
    let reference = dependence_pattern(&first, max_multiple, rel_tol);

    let mut grc_satisfied = true;
    let mut witness = None;
    'outer: for s in &samples[1..] {
        let eigs = sorted_eigs(s);
        let pattern = dependence_pattern(&eigs, max_multiple, rel_tol);
        for i in 1..p {
            for j in 0..i {
                let k = pair_index(i, j);
                if pattern[k] != reference[k] {
                    grc_satisfied = false;
                    witness = Some(GrcWitness {
                        pair: (i, j),
                        point_first: samples[0].point.clone(),
                        point_other: s.point.clone(),
                        eigenvalues_first: (first[i], first[j]),
                        eigenvalues_other: (eigs[i], eigs[j]),
                        multiple_first: reference[k],
                        multiple_other: pattern[k],
                    });
                    break 'outer;
                }
            }
        }
    }

    // union-find over the first-sample relations
    let mut parent: Vec<usize> = (0..p).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 1..p {
        for j in 0..i {
            if reference[pair_index(i, j)].is_some() {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let roots: Vec<usize> = (0..p).map(|i| find(&mut parent, i)).collect();
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for i in 0..p {
        if let Some(class) = classes.iter_mut().find(|c| roots[c[0]] == roots[i]) {
            class.push(i);
        } else {
            classes.push(vec![i]);
        }
    }
    classes.sort_by_key(|c| c[0]);
    let mut boundaries = vec![0usize];
    for c in &classes {
        boundaries.push(boundaries.last().unwrap() + c.len());
    }
    let q = classes.len();

    Ok(ResonancePartition {
        classes,
        boundaries,
        q,
        grc_satisfied,
        witness,
        max_multiple,
        rel_tol,
    })
}

/// A class that remains internally integer-dependent at every sample while no
/// outside eigenvalue is an integer multiple of any member anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StableSet {
    pub class_index: usize,
    /// Order `r` = number of eigenvalues in the class; the class contributes
    /// `CL(M) + r` orbits even when the full resonance conditions fail.
    pub order: usize,
}

/// Stable eigenvalue sets of the partition, checked against every sample.
pub fn stable_eigenvalue_sets(
    partition: &ResonancePartition,
    samples: &[SpectrumSample],
) -> Vec<StableSet> {
    let mut stable = Vec::new();
    let (mm, tol) = (partition.max_multiple, partition.rel_tol);
    'class: for (ci, class) in partition.classes.iter().enumerate() {
        for s in samples {
            let eigs = sorted_eigs(s);
            // members pairwise dependent at this sample
            for (xi, &i) in class.iter().enumerate() {
                for &j in &class[..xi] {
                    let (hi, lo) = (eigs[i.max(j)], eigs[i.min(j)]);
                    if integer_multiple(hi, lo, mm, tol).is_none() {
                        continue 'class;
                    }
                }
            }
            // no outside eigenvalue is an integer multiple of a member
            for o in 0..eigs.len() {
                if class.contains(&o) {
                    continue;
                }
                for &m in class {
                    if eigs[o] >= eigs[m] * (1.0 - tol)
                        && integer_multiple(eigs[o], eigs[m], mm, tol).is_some()
                    {
                        continue 'class;
                    }
                }
            }
        }
        stable.push(StableSet {
            class_index: ci,
            order: class.len(),
        });
    }
    stable
}
