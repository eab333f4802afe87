//! Chart-based base manifolds, metric and magnetic fields, and the twisted
//! phase space `T*M` with `Omega = d(lambda) + pi* omega`.
//!
//! Charts are periodic boxes (flat torus family) or a single rectangular patch.
//! The magnetic 2-form enters the twisted form as the top-left block of
//! `[[omega(q), -I], [I, 0]]` in `(q, p)` coordinates with `lambda = sum p_i dq_i`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::symplectic::{
    classify_resonance, symplectic_complement, williamson, QuadraticForm, ResonancePartition,
    SpectrumSample, SymplecticMatrix, WilliamsonResult, DEFAULT_MAX_MULTIPLE, DEFAULT_REL_TOL,
};

type MatrixFieldFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;
type MatrixDerivFn = dyn Fn(&DVector<f64>, usize) -> DMatrix<f64> + Send + Sync;

/// Coordinate chart of the base manifold.
#[derive(Debug, Clone)]
pub enum Chart {
    /// Flat torus: coordinates wrap modulo the per-axis periods.
    PeriodicBox { periods: Vec<f64> },
    /// Single rectangular patch without identification.
    Patch { lo: Vec<f64>, hi: Vec<f64> },
}

impl Chart {
    pub fn dim(&self) -> usize {
        match self {
            Chart::PeriodicBox { periods } => periods.len(),
            Chart::Patch { lo, .. } => lo.len(),
        }
    }

    pub fn contains(&self, q: &DVector<f64>) -> bool {
        match self {
            Chart::PeriodicBox { .. } => q.iter().all(|x| x.is_finite()),
            Chart::Patch { lo, hi } => q
                .iter()
                .enumerate()
                .all(|(k, &x)| x.is_finite() && x >= lo[k] && x <= hi[k]),
        }
    }

    /// Brings a point back into the fundamental domain.
    pub fn wrap(&self, q: &DVector<f64>) -> DVector<f64> {
        match self {
            Chart::PeriodicBox { periods } => {
                DVector::from_fn(periods.len(), |k, _| q[k].rem_euclid(periods[k]))
            }
            Chart::Patch { .. } => q.clone(),
        }
    }

    /// Smallest representative of `a - b` (minimum-image difference on tori).
    pub fn delta(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Chart::PeriodicBox { periods } => DVector::from_fn(periods.len(), |k, _| {
                let d = (a[k] - b[k]).rem_euclid(periods[k]);
                if d > 0.5 * periods[k] {
                    d - periods[k]
                } else {
                    d
                }
            }),
            Chart::Patch { .. } => a - b,
        }
    }

    /// Uniform grid with `counts[k]` points per axis; the first point sits at
    /// the domain corner.
    pub fn grid(&self, counts: &[usize]) -> Result<Vec<DVector<f64>>> {
        self.grid_impl(counts, false)
    }

    /// Cell-centered uniform grid: points at `(k + 1/2) / count` per axis.
    /// Seeding uses this variant so no seed starts on the symmetry loci of the
    /// fixture fields, where shooting Jacobians lose their leading signal.
    pub fn grid_centered(&self, counts: &[usize]) -> Result<Vec<DVector<f64>>> {
        self.grid_impl(counts, true)
    }

    fn grid_impl(&self, counts: &[usize], centered: bool) -> Result<Vec<DVector<f64>>> {
        if counts.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "grid counts {} != chart dim {}",
                counts.len(),
                self.dim()
            )));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidParameter("grid counts must be positive".into()));
        }
        let dim = self.dim();
        let total: usize = counts.iter().product();
        let mut points = Vec::with_capacity(total);
        let mut index = vec![0usize; dim];
        loop {
            let q = DVector::from_fn(dim, |k, _| {
                let frac = if centered {
                    (index[k] as f64 + 0.5) / counts[k] as f64
                } else {
                    index[k] as f64 / counts[k] as f64
                };
                match self {
                    Chart::PeriodicBox { periods } => periods[k] * frac,
                    Chart::Patch { lo, hi } => {
                        if counts[k] == 1 {
                            0.5 * (lo[k] + hi[k])
                        } else if centered {
                            lo[k] + (hi[k] - lo[k]) * frac
                        } else {
                            lo[k] + (hi[k] - lo[k]) * index[k] as f64 / (counts[k] - 1) as f64
                        }
                    }
                }
            });
            points.push(q);
            let mut k = 0;
            loop {
                index[k] += 1;
                if index[k] < counts[k] {
                    break;
                }
                index[k] = 0;
                k += 1;
                if k == dim {
                    return Ok(points);
                }
            }
        }
    }
}

/// Base manifold: a chart plus the fixture topology constants entering the
/// orbit-count bounds (computing cohomology is out of scope; the constants are
/// data with documented sources, e.g. CL(T^2) = 2, Crit(T^2) = 3, CL(T^4) = 4).
#[derive(Debug, Clone)]
pub struct BaseManifold {
    pub chart: Chart,
    pub cuplength: u32,
    pub crit_lower_bound: u32,
}

impl BaseManifold {
    pub fn flat_torus(periods: Vec<f64>, cuplength: u32, crit_lower_bound: u32) -> Result<Self> {
        if periods.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidParameter("periods must be positive".into()));
        }
        Ok(Self {
            chart: Chart::PeriodicBox { periods },
            cuplength,
            crit_lower_bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.chart.dim()
    }
}

/// Riemannian metric on the base: an evaluator `q -> g(q)` (symmetric positive
/// definite) plus a derivative evaluator `q, k -> dg/dq_k`.
#[derive(Clone)]
pub struct MetricField {
    eval: Arc<MatrixFieldFn>,
    deriv: MetricDerivative,
    constant: bool,
}

#[derive(Clone)]
enum MetricDerivative {
    Analytic(Arc<MatrixDerivFn>),
    FiniteDifference { step: f64 },
}

impl MetricField {
    pub fn identity(dim: usize) -> Self {
        let zero = DMatrix::zeros(dim, dim);
        Self {
            eval: Arc::new(move |_q| DMatrix::identity(dim, dim)),
            deriv: MetricDerivative::Analytic(Arc::new(move |_q, _k| zero.clone())),
            constant: true,
        }
    }

    pub fn diagonal(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidParameter(
                "diagonal metric entries must be positive".into(),
            ));
        }
        let dim = values.len();
        let mat = DMatrix::from_diagonal(&DVector::from_vec(values));
        let zero = DMatrix::zeros(dim, dim);
        Ok(Self {
            eval: Arc::new(move |_q| mat.clone()),
            deriv: MetricDerivative::Analytic(Arc::new(move |_q, _k| zero.clone())),
            constant: true,
        })
    }

    /// Conformally flat metric `g(q) = (base + amp sin q_axis) I`.
    pub fn conformal_sine(dim: usize, base: f64, amp: f64, axis: usize) -> Result<Self> {
        if axis >= dim {
            return Err(Error::InvalidParameter(format!(
                "conformal axis {axis} out of range for dim {dim}"
            )));
        }
        if base - amp.abs() <= 0.0 {
            return Err(Error::InvalidParameter(
                "conformal factor must stay positive".into(),
            ));
        }
        Ok(Self {
            eval: Arc::new(move |q| {
                DMatrix::identity(dim, dim) * (base + amp * q[axis].sin())
            }),
            deriv: MetricDerivative::Analytic(Arc::new(move |q, k| {
                if k == axis {
                    DMatrix::identity(dim, dim) * (amp * q[axis].cos())
                } else {
                    DMatrix::zeros(dim, dim)
                }
            })),
            constant: false,
        })
    }

    /// Arbitrary evaluator with finite-difference derivatives of step `h_fd`.
    pub fn custom(
        eval: Arc<MatrixFieldFn>,
        h_fd: f64,
    ) -> Self {
        Self {
            eval,
            deriv: MetricDerivative::FiniteDifference { step: h_fd },
            constant: false,
        }
    }

    pub fn evaluate(&self, q: &DVector<f64>) -> DMatrix<f64> {
        (self.eval)(q)
    }

    pub fn derivative(&self, q: &DVector<f64>, k: usize) -> DMatrix<f64> {
        match &self.deriv {
            MetricDerivative::Analytic(f) => f(q, k),
            MetricDerivative::FiniteDifference { step } => {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += step;
                qm[k] -= step;
                ((self.eval)(&qp) - (self.eval)(&qm)) / (2.0 * step)
            }
        }
    }

    /// True when the derivative vanishes identically (skips work in field evaluations).
    pub fn is_constant(&self) -> bool {
        self.constant
    }

    /// Inverse metric at `q`; errors carry a reciprocal-condition estimate.
    pub fn inverse_at(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        let g = self.evaluate(q);
        match g.clone().cholesky() {
            Some(chol) => Ok(chol.inverse()),
            None => {
                let sv = g.svd(false, false).singular_values;
                let rcond = sv.min() / sv.max();
                Err(Error::SingularMetric {
                    point: q.iter().copied().collect(),
                    rcond,
                })
            }
        }
    }
}

/// Magnetic field: a closed 2-form on the base, stored as the antisymmetric
/// matrix of its coefficients `omega_{ij}(q)`.
#[derive(Clone)]
pub struct MagneticForm {
    eval: Arc<MatrixFieldFn>,
    pub closed_tol: f64,
    constant: bool,
}

impl MagneticForm {
    /// `omega = b dq_1 ^ dq_2` on a surface.
    pub fn constant_surface(b: f64) -> Self {
        Self::split_constant(vec![b])
    }

    /// Block-constant form `sum_k s_k dq_{2k-1} ^ dq_{2k}`.
    pub fn split_constant(strengths: Vec<f64>) -> Self {
        let dim = 2 * strengths.len();
        let mut mat = DMatrix::zeros(dim, dim);
        for (k, &s) in strengths.iter().enumerate() {
            mat[(2 * k, 2 * k + 1)] = s;
            mat[(2 * k + 1, 2 * k)] = -s;
        }
        Self {
            eval: Arc::new(move |_q| mat.clone()),
            closed_tol: 1e-6,
            constant: true,
        }
    }

    /// Surface field `omega = (base + amp sin q_axis) dq_1 ^ dq_2`.
    pub fn sine_surface(base: f64, amp: f64, axis: usize) -> Result<Self> {
        if axis >= 2 {
            return Err(Error::InvalidParameter(
                "sine_surface axis must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            eval: Arc::new(move |q| {
                let b = base + amp * q[axis].sin();
                DMatrix::from_row_slice(2, 2, &[0.0, b, -b, 0.0])
            }),
            closed_tol: 1e-6,
            constant: false,
        })
    }

    /// Deliberately non-closed field on a >= 3 dimensional chart:
    /// `omega_{12} = q_{axis}` with `axis >= 2`, so `d omega != 0`.
    pub fn nonclosed_linear(dim: usize, axis: usize) -> Result<Self> {
        if dim < 3 || axis < 2 || axis >= dim {
            return Err(Error::InvalidParameter(
                "nonclosed_linear needs dim >= 3 and axis in 2..dim".into(),
            ));
        }
        Ok(Self {
            eval: Arc::new(move |q| {
                let mut m = DMatrix::zeros(dim, dim);
                m[(0, 1)] = q[axis];
                m[(1, 0)] = -q[axis];
                m
            }),
            closed_tol: 1e-6,
            constant: false,
        })
    }

    /// Exact form `d(f dq_2)` with `f = sin q_1 sin q_3` on a >= 4 dimensional
    /// chart; closed with genuinely varying coefficients.
    pub fn exact_sine(dim: usize) -> Result<Self> {
        if dim < 4 {
            return Err(Error::InvalidParameter("exact_sine needs dim >= 4".into()));
        }
        Ok(Self {
            eval: Arc::new(move |q| {
                let mut m = DMatrix::zeros(dim, dim);
                // omega = d(sin q1 sin q3 dq2) = cos q1 sin q3 dq1^dq2 + sin q1 cos q3 dq3^dq2
                let w12 = q[0].cos() * q[2].sin();
                let w32 = q[0].sin() * q[2].cos();
                m[(0, 1)] = w12;
                m[(1, 0)] = -w12;
                m[(2, 1)] = w32;
                m[(1, 2)] = -w32;
                m
            }),
            closed_tol: 1e-6,
            constant: false,
        })
    }

    pub fn custom(eval: Arc<MatrixFieldFn>, closed_tol: f64) -> Self {
        Self {
            eval,
            closed_tol,
            constant: false,
        }
    }

    pub fn evaluate(&self, q: &DVector<f64>) -> DMatrix<f64> {
        (self.eval)(q)
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }
}

/// Max closedness residual of the cyclic sum
/// `d_i omega_{jk} + d_j omega_{ki} + d_k omega_{ij}` over all triples `i<j<k`
/// and grid points, with central differences of step `h_fd`. On surfaces there
/// are no triples and the residual is exactly zero.
pub fn check_closed(magnetic: &MagneticForm, grid: &[DVector<f64>], h_fd: f64) -> f64 {
    let mut max_res: f64 = 0.0;
    for q in grid {
        let dim = q.len();
        // partial derivatives of the full matrix per axis
        let partials: Vec<DMatrix<f64>> = (0..dim)
            .map(|k| {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[k] += h_fd;
                qm[k] -= h_fd;
                (magnetic.evaluate(&qp) - magnetic.evaluate(&qm)) / (2.0 * h_fd)
            })
            .collect();
        for i in 0..dim {
            for j in (i + 1)..dim {
                for k in (j + 1)..dim {
                    let cyc = partials[i][(j, k)] + partials[j][(k, i)] + partials[k][(i, j)];
                    max_res = max_res.max(cyc.abs());
                }
            }
        }
    }
    max_res
}

/// Fibre data at a base point: the restriction of the twisted form to the
/// symplectic orthogonal complement of the zero-section tangent space, the
/// transverse Hessian of the Hamiltonian on it, and the frame realizing both.
#[derive(Debug, Clone)]
pub struct FibrePair {
    /// Restricted twisted form; equals `-omega(q)` in this frame.
    pub omega_f: SymplecticMatrix,
    /// Transverse Hessian as a quadratic form `Q(u) = u^T A u`; the limiting
    /// rescaled Hamiltonian is exactly `Q`.
    pub hessian: QuadraticForm,
    /// Columns of the complement frame in `(q, p)` coordinates: `[I; omega(q)]`
    /// up to round-off, so vertical parts are `omega(q) u`.
    pub frame: DMatrix<f64>,
}

/// Eigenvalue field over a grid: per-point sorted symplectic eigenvalues plus
/// their resonance partition.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SpectrumField {
    pub samples: Vec<SpectrumSample>,
    pub partition: ResonancePartition,
}

/// The phase space `T*M` with the twisted symplectic structure.
#[derive(Clone)]
pub struct TwistedPhaseSpace {
    pub base: BaseManifold,
    pub metric: MetricField,
    pub magnetic: MagneticForm,
}

impl TwistedPhaseSpace {
    pub fn new(base: BaseManifold, metric: MetricField, magnetic: MagneticForm) -> Self {
        Self {
            base,
            metric,
            magnetic,
        }
    }

    pub fn dim_base(&self) -> usize {
        self.base.dim()
    }

    pub fn dim_phase(&self) -> usize {
        2 * self.base.dim()
    }

    /// Kinetic energy `H(q, p) = 1/2 p^T g(q)^{-1} p`.
    pub fn hamiltonian(&self, q: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
        if !self.base.chart.contains(q) {
            return Err(Error::OutsideChart {
                point: q.iter().copied().collect(),
            });
        }
        let ginv = self.metric.inverse_at(q)?;
        Ok(0.5 * (p.transpose() * ginv * p)[(0, 0)])
    }

    /// Matrix of the twisted form in `(q, p)` block coordinates:
    /// `[[omega(q), -I], [I, 0]]`.
    pub fn twisted_form_matrix(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim_base();
        let omega = self.magnetic.evaluate(q);
        let mut m = DMatrix::zeros(2 * d, 2 * d);
        m.view_mut((0, 0), (d, d)).copy_from(&omega);
        for i in 0..d {
            m[(i, d + i)] = -1.0;
            m[(d + i, i)] = 1.0;
        }
        m
    }

    /// Extracts `(Omega^F, d^2_N H)` at a base point.
    ///
    /// The complement of the zero-section tangent space is computed through
    /// [`symplectic_complement`] and then re-expressed in the canonical frame
    /// `u -> (u, omega(q) u)`, in which `Omega^F = -omega(q)` as matrices and
    /// the Hessian form is `1/2 (omega u)^T g^{-1} (omega u)`.
    pub fn fibre_data(&self, q: &DVector<f64>) -> Result<FibrePair> {
        let d = self.dim_base();
        let omega_q = self.magnetic.evaluate(q);
        let det = omega_q.clone().lu().determinant();
        if det.abs() <= 1e-12 {
            return Err(Error::DegenerateMagnetic {
                point: q.iter().copied().collect(),
                det: det.abs(),
            });
        }
        let full = SymplecticMatrix::new(self.twisted_form_matrix(q))?;
        let mut zero_section = DMatrix::zeros(2 * d, d);
        for i in 0..d {
            zero_section[(i, i)] = 1.0;
        }
        let raw = symplectic_complement(&full, &zero_section)?;
        // canonical frame: normalize so the horizontal block is the identity
        let horizontal = raw.view((0, 0), (d, d)).into_owned();
        let inv = horizontal.lu().try_inverse().ok_or_else(|| Error::DegenerateMagnetic {
            point: q.iter().copied().collect(),
            det: det.abs(),
        })?;
        let frame = raw * inv;

        let omega_f_raw = frame.transpose() * full.matrix() * &frame;
        let omega_f = SymplecticMatrix::from_nearly_antisymmetric(omega_f_raw, 1e-9)?;

        let ginv = self.metric.inverse_at(q)?;
        let vertical = frame.view((d, 0), (d, d)).into_owned();
        let hessian_raw = vertical.transpose() * ginv * &vertical * 0.5;
        let hessian = QuadraticForm::from_nearly_symmetric(hessian_raw, 1e-9)?;

        Ok(FibrePair {
            omega_f,
            hessian,
            frame,
        })
    }

    /// Williamson data of the fibre at `q`.
    pub fn fibre_normal_form(&self, q: &DVector<f64>) -> Result<(FibrePair, WilliamsonResult)> {
        let pair = self.fibre_data(q)?;
        let res = williamson(&pair.omega_f, &pair.hessian)?;
        Ok((pair, res))
    }

    /// Sorted symplectic eigenvalues over a grid plus their resonance partition.
    pub fn eigenvalue_field(&self, grid: &[DVector<f64>]) -> Result<SpectrumField> {
        self.eigenvalue_field_with(grid, DEFAULT_MAX_MULTIPLE, DEFAULT_REL_TOL)
    }

    pub fn eigenvalue_field_with(
        &self,
        grid: &[DVector<f64>],
        max_multiple: u32,
        rel_tol: f64,
    ) -> Result<SpectrumField> {
        let samples: Result<Vec<SpectrumSample>> = grid
            .par_iter()
            .map(|q| {
                let (_, res) = self.fibre_normal_form(q)?;
                Ok(SpectrumSample {
                    point: q.iter().copied().collect(),
                    eigenvalues: res.eigenvalues,
                })
            })
            .collect();
        let samples = samples?;
        let partition = classify_resonance(&samples, max_multiple, rel_tol)?;
        Ok(SpectrumField { samples, partition })
    }
}
