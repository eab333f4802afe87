//! Periodic orbit search on low energy levels.
//!
//! Seeds come from the invariant sphere bundles of the limiting fibrewise flow:
//! base grid points paired with fibre directions inside one resonance class,
//! dilated onto `{H = eps^2}`. A Newton iteration on the flow map with two phase
//! conditions (energy pinning and a time-translation anchor) locates nearby
//! closed orbits; geometric deduplication and the loop-1-form residual keep the
//! census honest about which solutions are genuinely distinct orbits.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{closest_return, flow_map, grad_h, hamiltonian_field, PhaseState};
use crate::error::{Error, Result};
use crate::geometry::{SpectrumField, TwistedPhaseSpace};
use crate::predictions::BoundReport;
use crate::symplectic::{stable_eigenvalue_sets, ResonancePartition};

/// One candidate starting point with its limiting-period prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitSeed {
    pub state: PhaseState,
    pub period_guess: f64,
}

/// Seeds for one resonance class on one energy level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSet {
    pub class_index: usize,
    pub epsilon: f64,
    pub seeds: Vec<OrbitSeed>,
    /// Limiting period at the first base point, for reporting.
    pub predicted_period: f64,
}

/// Approximate positive gcd of a small set of positive reals, up to `rel_tol`.
fn approx_gcd(values: &[f64], rel_tol: f64) -> f64 {
    let scale = values.iter().cloned().fold(0.0f64, f64::max);
    let tol = rel_tol * scale;
    let mut g = values[0];
    for &v in &values[1..] {
        let mut a = g.max(v);
        let mut b = g.min(v);
        while b > tol {
            let r = a % b;
            a = b;
            b = r;
        }
        g = a;
    }
    g
}

/// Builds the seed set of one class: `n_base` grid points per base axis, and per
/// class member `n_fibre` points on its fibre circle (plus a diagonal family
/// when the class has several members), all dilated onto `{H = eps^2}`.
///
/// Densities are knobs, not guarantees: the count bounds assert existence of
/// orbits, not basin sizes, so coarse seeding may miss solutions denser seeding finds.
pub fn seed_from_limit(
    space: &TwistedPhaseSpace,
    partition: &ResonancePartition,
    class_index: usize,
    epsilon: f64,
    n_base: usize,
    n_fibre: usize,
) -> Result<SeedSet> {
    if class_index >= partition.classes.len() {
        return Err(Error::ClassOutOfRange {
            index: class_index,
            classes: partition.classes.len(),
        });
    }
    if n_base == 0 || n_fibre == 0 {
        return Err(Error::InvalidParameter("seed counts must be positive".into()));
    }
    let d = space.dim_base();
    let members = &partition.classes[class_index];
    let grid = space.base.chart.grid_centered(&vec![n_base; d])?;

    let mut seeds = Vec::new();
    let mut predicted_period = 0.0;
    for (gi, q) in grid.iter().enumerate() {
        let (pair, wres) = space.fibre_normal_form(q)?;
        let p_half = wres.p();
        let omega_q = space.magnetic.evaluate(q);
        let class_a: Vec<f64> = members.iter().map(|&j| wres.eigenvalues[j]).collect();
        let period = std::f64::consts::PI / approx_gcd(&class_a, 1e-6);
        if gi == 0 {
            predicted_period = period;
        }

        let mut fibre_points: Vec<DVector<f64>> = Vec::new();
        for &j in members {
            let t1 = wres.basis.column(j).into_owned();
            let t2 = wres.basis.column(p_half + j).into_owned();
            let scale = 1.0 / wres.eigenvalues[j].sqrt();
            for k in 0..n_fibre {
                let th = std::f64::consts::TAU * k as f64 / n_fibre as f64;
                fibre_points.push((&t1 * th.cos() + &t2 * th.sin()) * scale);
            }
        }
        if members.len() > 1 {
            // equal-weight mix of the first two member planes
            let (j0, j1) = (members[0], members[1]);
            let (a0, a1) = (wres.eigenvalues[j0], wres.eigenvalues[j1]);
            for k in 0..n_fibre {
                let th = std::f64::consts::TAU * k as f64 / n_fibre as f64;
                let u0 = (wres.basis.column(j0) * th.cos()
                    + wres.basis.column(p_half + j0) * th.sin())
                    / (2.0 * a0).sqrt();
                let u1 = (wres.basis.column(j1) * th.cos()
                    + wres.basis.column(p_half + j1) * th.sin())
                    / (2.0 * a1).sqrt();
                fibre_points.push(u0 + u1);
            }
        }

        for u in fibre_points {
            debug_assert!((pair.hessian.value(&u) - 1.0).abs() < 1e-8);
            let p = &omega_q * &u * epsilon;
            seeds.push(OrbitSeed {
                state: PhaseState {
                    q: q.iter().copied().collect(),
                    p: p.iter().copied().collect(),
                    t: 0.0,
                },
                period_guess: period,
            });
        }
    }
    Ok(SeedSet {
        class_index,
        epsilon,
        seeds,
        predicted_period,
    })
}

/// Newton shooting parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShootingConfig {
    /// Acceptance threshold on the flow-map closure residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Fixed RK4 step for flow maps.
    pub step: f64,
    /// Finite-difference step scale for the shooting Jacobian.
    pub fd_step: f64,
    /// Period search window: `T` stays within `(1 +- window) T_guess`.
    pub period_window: f64,
    /// Accepted periods must exceed `t_min_factor * T_guess` (fixed-point guard).
    pub t_min_factor: f64,
    /// Seed precondition: `|H(seed) - E|` above this is an off-level rejection.
    pub level_tol: f64,
    /// Accepted orbits must pin the energy to the level within this.
    pub energy_tol: f64,
    /// Closest-return scan resolution per base axis before the Newton stage;
    /// values below 2 disable the scan.
    pub scan_points: usize,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 150,
            step: 2e-3,
            fd_step: 1e-6,
            period_window: 0.5,
            t_min_factor: 0.25,
            level_tol: 1e-8,
            energy_tol: 1e-8,
            scan_points: 16,
        }
    }
}

/// Why a seed produced no accepted orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Rejection {
    OffLevel { energy: f64, target: f64 },
    NoConvergence { residual: f64 },
    PeriodCollapse { period: f64 },
    NonFinite,
}

/// An accepted periodic orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitRecord {
    pub representative: PhaseState,
    pub period: f64,
    pub energy: f64,
    /// Flow-map closure residual at acceptance.
    pub newton_residual: f64,
    /// Full monodromy spectrum as `(re, im)` pairs; contains 1 from the flow
    /// direction of the autonomous field.
    pub floquet: Vec<(f64, f64)>,
    /// Max loop-1-form pairing over random level-tangent variations.
    pub ds_residual: f64,
    /// Class the seed belonged to.
    pub class_index: usize,
}

pub type ShotResult = std::result::Result<OrbitRecord, Rejection>;

struct ResidualData {
    full: DVector<f64>,
    closure_norm: f64,
    flow_q: DVector<f64>,
    flow_p: DVector<f64>,
}

fn state_delta(
    space: &TwistedPhaseSpace,
    qa: &DVector<f64>,
    pa: &DVector<f64>,
    qb: &DVector<f64>,
    pb: &DVector<f64>,
) -> DVector<f64> {
    let d = qa.len();
    let dq = space.base.chart.delta(qa, qb);
    let mut out = DVector::zeros(2 * d);
    out.rows_mut(0, d).copy_from(&dq);
    out.rows_mut(d, d).copy_from(&(pa - pb));
    out
}

/// Locates a periodic orbit near `seed` by Levenberg-Marquardt on
/// `F(x, T) = phi_T(x) - x` with the energy and time-translation phase
/// conditions appended. The Jacobian is taken by forward finite differences of
/// the flow map; the adaptive damping keeps steps sane along the nearly-flat
/// orbit-family directions that make plain Newton bounce.
pub fn find_orbit(
    space: &TwistedPhaseSpace,
    seed: &OrbitSeed,
    target_energy: f64,
    cfg: &ShootingConfig,
) -> Result<ShotResult> {
    let d = space.dim_base();
    let n = 2 * d;
    let q0 = seed.state.q_vec();
    let p0 = seed.state.p_vec();

    let h_seed = space.hamiltonian(&q0, &p0)?;
    if (h_seed - target_energy).abs() > cfg.level_tol {
        return Ok(Err(Rejection::OffLevel {
            energy: h_seed,
            target: target_energy,
        }));
    }

    let t_guess = seed.period_guess;
    let (t_lo, t_hi) = (
        t_guess * (1.0 - cfg.period_window),
        t_guess * (1.0 + cfg.period_window),
    );

    let mut xq = q0.clone();
    let mut xp = p0.clone();
    let mut t = t_guess;

    // coarse closest-return scan along every base axis: the slow landscape has
    // isolated zeros (the drift-free loci) that the linearized model cannot see
    // from a distant seed, but a grid scan finds their neighborhoods cheaply
    if cfg.scan_points > 1 {
        let axis_spans: Vec<f64> = match &space.base.chart {
            crate::geometry::Chart::PeriodicBox { periods } => periods.clone(),
            crate::geometry::Chart::Patch { .. } => vec![0.0; d],
        };
        let (t0, d0) = closest_return(space, &xq, &xp, t_lo, t_hi, cfg.step)?;
        let mut best = (d0, xq.clone(), xp.clone(), t0);
        for axis in 0..d {
            if axis_spans[axis] <= 0.0 {
                continue;
            }
            for k in 1..cfg.scan_points {
                let mut qc = q0.clone();
                qc[axis] += axis_spans[axis] * k as f64 / cfg.scan_points as f64;
                let h_c = space.hamiltonian(&space.base.chart.wrap(&qc), &p0)?;
                if h_c <= 0.0 {
                    continue;
                }
                let pc = &p0 * (target_energy / h_c).sqrt();
                let (tb, db) = closest_return(space, &qc, &pc, t_lo, t_hi, cfg.step)?;
                if db < best.0 {
                    best = (db, qc, pc, tb);
                }
            }
        }
        xq = best.1;
        xp = best.2;
        t = best.3;
    }

    // residual plus the endpoint of the flow (reused by the forward differences);
    // the time-translation condition is re-anchored at the current iterate, so
    // its residual entry is identically zero and only its gradient row acts,
    // removing the flow-direction degeneracy of the update
    let residual = |xq: &DVector<f64>, xp: &DVector<f64>, t: f64| -> Result<ResidualData> {
        let (fq, fp) = flow_map(space, xq, xp, t, cfg.step)?;
        let closure = state_delta(space, &fq, &fp, xq, xp);
        let energy = space.hamiltonian(&space.base.chart.wrap(xq), xp)?;
        let mut full = DVector::zeros(n + 2);
        full.rows_mut(0, n).copy_from(&closure);
        full[n] = energy - target_energy;
        full[n + 1] = 0.0;
        let closure_norm = closure.norm();
        Ok(ResidualData {
            full,
            closure_norm,
            flow_q: fq,
            flow_p: fp,
        })
    };

    let mut cur = residual(&xq, &xp, t)?;
    let mut mu_rel = 1e-3;
    let mut recent: Vec<f64> = Vec::new();

    for _ in 0..cfg.max_iter {
        if !cur.full.iter().all(|v| v.is_finite()) {
            return Ok(Err(Rejection::NonFinite));
        }
        if cur.closure_norm <= cfg.tol && cur.full[n].abs() <= cfg.energy_tol {
            break;
        }

        // forward-difference Jacobian in the state, field direction in T
        let mut jac = DMatrix::zeros(n + 2, n + 1);
        let scale = cfg.fd_step * (1.0f64).max((xq.norm_squared() + xp.norm_squared()).sqrt());
        for j in 0..n {
            let (mut qa, mut pa) = (xq.clone(), xp.clone());
            if j < d {
                qa[j] += scale;
            } else {
                pa[j - d] += scale;
            }
            let (fqa, fpa) = flow_map(space, &qa, &pa, t, cfg.step)?;
            let dflow = state_delta(space, &fqa, &fpa, &cur.flow_q, &cur.flow_p) / scale;
            for i in 0..n {
                jac[(i, j)] = dflow[i] - if i == j { 1.0 } else { 0.0 };
            }
        }
        let (tq, tp) = hamiltonian_field(space, &cur.flow_q, &cur.flow_p)?;
        for i in 0..d {
            jac[(i, n)] = tq[i];
            jac[(d + i, n)] = tp[i];
        }
        let wrapped = space.base.chart.wrap(&xq);
        let (gq, gp) = grad_h(space, &wrapped, &xp)?;
        let (aq, ap) = hamiltonian_field(space, &xq, &xp)?;
        for i in 0..d {
            jac[(n, i)] = gq[i];
            jac[(n, d + i)] = gp[i];
            jac[(n + 1, i)] = aq[i];
            jac[(n + 1, d + i)] = ap[i];
        }

        // Levenberg-Marquardt step on the normal equations with Marquardt's
        // diagonal scaling; the damping adapts per iteration
        let jtj = jac.transpose() * &jac;
        let jtf = jac.transpose() * &cur.full;
        if jtf.norm() < 1e-16 {
            break;
        }
        let mut diag = jtj.diagonal();
        let dmax = diag.max();
        for v in diag.iter_mut() {
            *v = v.max(1e-12 * dmax);
        }

        let fnorm = cur.full.norm();
        let mut moved = false;
        for _ in 0..10 {
            let mut a = jtj.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += mu_rel * diag[k];
            }
            let chol = match a.cholesky() {
                Some(c) => c,
                None => {
                    mu_rel = (mu_rel * 10.0).min(1e10);
                    continue;
                }
            };
            let delta = chol.solve(&(-&jtf));
            let nq = &xq + delta.rows(0, d);
            let np = &xp + delta.rows(d, d);
            let nt = (t + delta[n]).clamp(t_lo, t_hi);
            match residual(&nq, &np, nt) {
                Ok(mut next)
                    if next.full.iter().all(|v| v.is_finite()) && next.full.norm() < fnorm =>
                {
                    xq = nq;
                    xp = np;
                    t = nt;
                    // chord corrections: reuse the factored normal matrix to
                    // mop up the curvature error the linear step left behind
                    for _ in 0..3 {
                        let gain = next.full.norm();
                        let jtf2 = jac.transpose() * &next.full;
                        let delta2 = chol.solve(&(-&jtf2));
                        let cq = &xq + delta2.rows(0, d);
                        let cp = &xp + delta2.rows(d, d);
                        let ct = (t + delta2[n]).clamp(t_lo, t_hi);
                        match residual(&cq, &cp, ct) {
                            Ok(corr)
                                if corr.full.iter().all(|v| v.is_finite())
                                    && corr.full.norm() < 0.7 * gain =>
                            {
                                xq = cq;
                                xp = cp;
                                t = ct;
                                next = corr;
                            }
                            _ => break,
                        }
                    }
                    cur = next;
                    mu_rel = (mu_rel * 0.3).max(1e-14);
                    moved = true;
                    break;
                }
                _ => mu_rel = (mu_rel * 10.0).min(1e10),
            }
        }
        if !moved {
            break;
        }
        // stagnation exit: no meaningful decrease over a window
        recent.push(cur.closure_norm);
        if recent.len() > 8 {
            recent.remove(0);
            if cur.closure_norm > 0.97 * recent[0] && cur.closure_norm > cfg.tol {
                break;
            }
        }
    }

    if !(cur.closure_norm <= cfg.tol && cur.full[n].abs() <= cfg.energy_tol) {
        return Ok(Err(Rejection::NoConvergence {
            residual: cur.closure_norm,
        }));
    }
    if t < cfg.t_min_factor * t_guess {
        return Ok(Err(Rejection::PeriodCollapse { period: t }));
    }

    let energy = space.hamiltonian(&space.base.chart.wrap(&xq), &xp)?;
    let floquet = monodromy_spectrum(space, &xq, &xp, t, cfg)?;
    let wrapped = space.base.chart.wrap(&xq);
    let representative = PhaseState {
        q: wrapped.iter().copied().collect(),
        p: xp.iter().copied().collect(),
        t: 0.0,
    };
    let ds = ds_residual(space, &representative, t, 256, 8, 0x5eed)?;

    Ok(Ok(OrbitRecord {
        representative,
        period: t,
        energy,
        newton_residual: cur.closure_norm,
        floquet,
        ds_residual: ds,
        class_index: 0,
    }))
}

/// Eigenvalues of the monodromy matrix `D phi_T` by central finite differences.
fn monodromy_spectrum(
    space: &TwistedPhaseSpace,
    xq: &DVector<f64>,
    xp: &DVector<f64>,
    t: f64,
    cfg: &ShootingConfig,
) -> Result<Vec<(f64, f64)>> {
    let d = xq.len();
    let n = 2 * d;
    let scale = cfg.fd_step * (1.0f64).max((xq.norm_squared() + xp.norm_squared()).sqrt());
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let (mut qa, mut pa) = (xq.clone(), xp.clone());
        let (mut qb, mut pb) = (xq.clone(), xp.clone());
        if j < d {
            qa[j] += scale;
            qb[j] -= scale;
        } else {
            pa[j - d] += scale;
            pb[j - d] -= scale;
        }
        let (fqa, fpa) = flow_map(space, &qa, &pa, t, cfg.step)?;
        let (fqb, fpb) = flow_map(space, &qb, &pb, t, cfg.step)?;
        let col = state_delta(space, &fqa, &fpa, &fqb, &fpb) / (2.0 * scale);
        m.set_column(j, &col);
    }
    Ok(m.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect())
}

/// Loop nodes of one period, evenly spaced, starting at the representative.
fn orbit_nodes(
    space: &TwistedPhaseSpace,
    state: &PhaseState,
    period: f64,
    n_nodes: usize,
    step: f64,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    let dt = period / n_nodes as f64;
    let mut nodes = Vec::with_capacity(n_nodes);
    let mut q = state.q_vec();
    let mut p = state.p_vec();
    nodes.push((q.clone(), p.clone()));
    for _ in 1..n_nodes {
        let (nq, np) = flow_map(space, &q, &p, dt, step.min(dt))?;
        q = nq;
        p = np;
        nodes.push((q.clone(), p.clone()));
    }
    Ok(nodes)
}

/// Loop-1-form residual of a discretized loop: the maximal pairing
/// `| closed-loop integral of Omega(gamma_dot, xi) dt |` over `n_variations`
/// random unit variation fields `xi` tangent to the energy level, trapezoid
/// rule on the nodes, with `gamma_dot` taken from the loop geometry by central
/// differences. Small exactly when the loop is an orbit of the level flow.
pub fn ds_residual_of_loop(
    space: &TwistedPhaseSpace,
    nodes: &[(DVector<f64>, DVector<f64>)],
    period: f64,
    n_variations: usize,
    rng_seed: u64,
) -> Result<f64> {
    let n_nodes = nodes.len();
    if n_nodes < 64 {
        return Err(Error::InvalidParameter(
            "loop must be discretized at >= 64 nodes".into(),
        ));
    }
    let d = space.dim_base();
    let n = 2 * d;
    let dt = period / n_nodes as f64;

    // gamma_dot from the loop geometry (not from the field: a corrupted loop
    // must show up in the residual)
    let mut gamma_dot = Vec::with_capacity(n_nodes);
    for k in 0..n_nodes {
        let (qn, pn) = &nodes[(k + 1) % n_nodes];
        let (qp, pp) = &nodes[(k + n_nodes - 1) % n_nodes];
        gamma_dot.push(state_delta(space, qn, pn, qp, pp) / (2.0 * dt));
    }

    let forms: Vec<DMatrix<f64>> = nodes
        .iter()
        .map(|(q, _)| space.twisted_form_matrix(q))
        .collect();
    let grads: Vec<DVector<f64>> = nodes
        .iter()
        .map(|(q, p)| {
            let wrapped = space.base.chart.wrap(q);
            let (gq, gp) = grad_h(space, &wrapped, p)?;
            let mut g = DVector::zeros(n);
            g.rows_mut(0, d).copy_from(&gq);
            g.rows_mut(d, d).copy_from(&gp);
            Ok(g)
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n_variations {
        let mut integral = 0.0;
        for k in 0..n_nodes {
            let mut xi = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let g = &grads[k];
            let g2 = g.norm_squared();
            if g2 > 1e-300 {
                let c = xi.dot(g) / g2;
                xi -= g * c;
            }
            let norm = xi.norm();
            if norm > 1e-300 {
                xi /= norm;
            }
            // trapezoid on a closed loop: every node carries weight dt
            integral += (gamma_dot[k].transpose() * &forms[k] * xi)[(0, 0)] * dt;
        }
        worst = worst.max(integral.abs());
    }
    Ok(worst)
}

/// Loop-1-form residual of an orbit given by a representative point and period.
pub fn ds_residual(
    space: &TwistedPhaseSpace,
    state: &PhaseState,
    period: f64,
    n_nodes: usize,
    n_variations: usize,
    rng_seed: u64,
) -> Result<f64> {
    let nodes = orbit_nodes(space, state, period, n_nodes, 2e-3)?;
    ds_residual_of_loop(space, &nodes, period, n_variations, rng_seed)
}

/// Geometric deduplication settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    /// Absolute merge distance; when `None`, `0.1 x` the orbit diameter is used.
    pub tol_geom: Option<f64>,
    /// Relative tolerance on the integer-multiple period test.
    pub tol_period: f64,
    /// Curve sampling density for the distance test.
    pub n_nodes: usize,
    /// Integrator step for resampling curves.
    pub step: f64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            tol_geom: None,
            tol_period: 1e-3,
            n_nodes: 128,
            step: 2e-3,
        }
    }
}

fn periods_integer_related(ta: f64, tb: f64, rel_tol: f64) -> bool {
    let (hi, lo) = (ta.max(tb), ta.min(tb));
    let k = (hi / lo).round();
    k >= 1.0 && (hi - k * lo).abs() <= rel_tol * hi
}

/// Merges records describing the same geometric orbit: one representative lying
/// on the other's sampled curve with integer-related periods. Merged groups keep
/// the smallest-residual record. Union-find over the symmetric relation makes
/// the result independent of input order, and idempotent.
pub fn deduplicate(
    orbits: &[OrbitRecord],
    space: &TwistedPhaseSpace,
    cfg: &DedupConfig,
) -> Result<Vec<OrbitRecord>> {
    let m = orbits.len();
    if m <= 1 {
        return Ok(orbits.to_vec());
    }
    let curves: Vec<Vec<(DVector<f64>, DVector<f64>)>> = orbits
        .par_iter()
        .map(|o| orbit_nodes(space, &o.representative, o.period, cfg.n_nodes, cfg.step))
        .collect::<Result<_>>()?;
    let diameters: Vec<f64> = curves
        .iter()
        .map(|nodes| {
            let mut diam: f64 = 0.0;
            for i in 0..nodes.len() {
                for j in (i + 1)..nodes.len() {
                    let dist = state_delta(space, &nodes[i].0, &nodes[i].1, &nodes[j].0, &nodes[j].1)
                        .norm();
                    diam = diam.max(dist);
                }
            }
            diam
        })
        .collect();

    let dist_to_curve = |i: usize, j: usize| -> f64 {
        let (qi, pi) = (
            orbits[i].representative.q_vec(),
            orbits[i].representative.p_vec(),
        );
        curves[j]
            .iter()
            .map(|(q, p)| state_delta(space, &qi, &pi, q, p).norm())
            .fold(f64::INFINITY, f64::min)
    };

    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..m {
        for j in (i + 1)..m {
            if !periods_integer_related(orbits[i].period, orbits[j].period, cfg.tol_period) {
                continue;
            }
            let tol = cfg
                .tol_geom
                .unwrap_or(0.1 * diameters[i].max(diameters[j]));
            if dist_to_curve(i, j).min(dist_to_curve(j, i)) <= tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }

    let mut best: Vec<Option<usize>> = vec![None; m];
    for i in 0..m {
        let root = find(&mut parent, i);
        match best[root] {
            Some(b) if orbits[b].newton_residual <= orbits[i].newton_residual => {}
            _ => best[root] = Some(i),
        }
    }
    let mut keep: Vec<OrbitRecord> = best
        .into_iter()
        .flatten()
        .map(|i| orbits[i].clone())
        .collect();
    keep.sort_by(|a, b| a.period.total_cmp(&b.period));
    Ok(keep)
}

/// Census settings for one fixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CensusConfig {
    pub n_base: usize,
    pub n_fibre: usize,
    pub shooting: ShootingConfig,
    pub dedup: DedupConfig,
}

impl Default for CensusConfig {
    fn default() -> Self {
        Self {
            n_base: 8,
            n_fibre: 8,
            shooting: ShootingConfig::default(),
            dedup: DedupConfig::default(),
        }
    }
}

/// One energy level's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CensusRow {
    pub epsilon: f64,
    pub seeds: usize,
    pub converged: usize,
    pub distinct: usize,
    pub bound: u32,
    pub pass: bool,
    pub convergence_rate: f64,
    pub rejections: RejectionCounts,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub off_level: usize,
    pub no_convergence: usize,
    pub period_collapse: usize,
    pub non_finite: usize,
}

/// Full census over an energy sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitCensus {
    pub rows: Vec<CensusRow>,
    pub bound_report: BoundReport,
    /// Accepted distinct orbits per energy level.
    pub orbits: Vec<(f64, Vec<OrbitRecord>)>,
    /// Smallest epsilon whose convergence rate reached 90%.
    pub smallest_converged_epsilon: Option<f64>,
}

/// Seeds, solves, deduplicates and counts distinct orbits for every energy
/// level `H = eps^2`, comparing the count against the predicted lower bound.
/// Failures are report rows, not errors.
pub fn orbit_census(
    space: &TwistedPhaseSpace,
    field: &SpectrumField,
    epsilons: &[f64],
    cfg: &CensusConfig,
) -> Result<OrbitCensus> {
    let partition = &field.partition;
    let stable = stable_eigenvalue_sets(partition, &field.samples);
    let m = (space.dim_base() / 2) as u32;
    let bound_report = BoundReport::magnetic(
        partition,
        &stable,
        space.base.cuplength,
        space.base.crit_lower_bound,
        m,
    )?;
    let bound = bound_report.bound_main;

    let mut rows = Vec::new();
    let mut orbits_by_eps = Vec::new();
    for &eps in epsilons {
        let target = eps * eps;
        let mut all_seeds: Vec<(usize, OrbitSeed)> = Vec::new();
        for ci in 0..partition.classes.len() {
            let set = seed_from_limit(space, partition, ci, eps, cfg.n_base, cfg.n_fibre)?;
            all_seeds.extend(set.seeds.into_iter().map(|s| (ci, s)));
        }
        let shots: Vec<(usize, ShotResult)> = all_seeds
            .par_iter()
            .map(|(ci, seed)| {
                let shot = find_orbit(space, seed, target, &cfg.shooting)?;
                Ok((*ci, shot))
            })
            .collect::<Result<_>>()?;

        let mut accepted = Vec::new();
        let mut rejections = RejectionCounts::default();
        for (ci, shot) in shots {
            match shot {
                Ok(mut rec) => {
                    rec.class_index = ci;
                    accepted.push(rec);
                }
                Err(Rejection::OffLevel { .. }) => rejections.off_level += 1,
                Err(Rejection::NoConvergence { .. }) => rejections.no_convergence += 1,
                Err(Rejection::PeriodCollapse { .. }) => rejections.period_collapse += 1,
                Err(Rejection::NonFinite) => rejections.non_finite += 1,
            }
        }
        let converged = accepted.len();
        let seeds = converged
            + rejections.off_level
            + rejections.no_convergence
            + rejections.period_collapse
            + rejections.non_finite;
        let distinct_orbits = deduplicate(&accepted, space, &cfg.dedup)?;
        let distinct = distinct_orbits.len();
        rows.push(CensusRow {
            epsilon: eps,
            seeds,
            converged,
            distinct,
            bound,
            pass: distinct as u32 >= bound,
            convergence_rate: if seeds > 0 {
                converged as f64 / seeds as f64
            } else {
                0.0
            },
            rejections,
        });
        orbits_by_eps.push((eps, distinct_orbits));
    }

    let smallest_converged_epsilon = rows
        .iter()
        .filter(|r| r.convergence_rate >= 0.9)
        .map(|r| r.epsilon)
        .fold(None, |acc: Option<f64>, e| {
            Some(acc.map_or(e, |a| a.min(e)))
        });

    Ok(OrbitCensus {
        rows,
        bound_report,
        orbits: orbits_by_eps,
        smallest_converged_epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BaseManifold, MagneticForm, MetricField};
    use approx::assert_relative_eq;

    const TAU: f64 = std::f64::consts::TAU;

    fn flat_t2(b: f64) -> TwistedPhaseSpace {
        let base = BaseManifold::flat_torus(vec![TAU, TAU], 2, 3).unwrap();
        TwistedPhaseSpace::new(base, MetricField::identity(2), MagneticForm::constant_surface(b))
    }

    fn perturbed_t2() -> TwistedPhaseSpace {
        let base = BaseManifold::flat_torus(vec![TAU, TAU], 2, 3).unwrap();
        TwistedPhaseSpace::new(
            base,
            MetricField::identity(2),
            MagneticForm::sine_surface(2.0, 1.0, 0).unwrap(),
        )
    }

    fn partition_of(space: &TwistedPhaseSpace, n: usize) -> SpectrumField {
        let grid = space.base.chart.grid(&vec![n; space.dim_base()]).unwrap();
        space.eigenvalue_field(&grid).unwrap()
    }

    #[test]
    fn seeds_sit_on_the_level_and_scale_linearly() {
        let space = flat_t2(1.0);
        let field = partition_of(&space, 4);
        let eps = 0.05;
        let set = seed_from_limit(&space, &field.partition, 0, eps, 3, 4).unwrap();
        assert_eq!(set.seeds.len(), 3 * 3 * 4);
        for s in &set.seeds {
            let h = space
                .hamiltonian(&s.state.q_vec(), &s.state.p_vec())
                .unwrap();
            assert!((h - eps * eps).abs() <= 1e-10, "off level: {h}");
            // limiting period of the B = 1 fixture: pi / (1/2) = 2 pi
            assert_relative_eq!(s.period_guess, TAU, max_relative = 1e-9);
        }
        // dilation linearity: seeds at 2 eps are exactly twice the fibre part
        let set2 = seed_from_limit(&space, &field.partition, 0, 2.0 * eps, 3, 4).unwrap();
        for (a, b) in set.seeds.iter().zip(&set2.seeds) {
            assert_eq!(a.state.q, b.state.q);
            for (pa, pb) in a.state.p.iter().zip(&b.state.p) {
                assert_relative_eq!(2.0 * pa, *pb, max_relative = 1e-12);
            }
        }
        assert!(matches!(
            seed_from_limit(&space, &field.partition, 1, eps, 2, 2),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn t4_seed_sets_live_in_orthogonal_planes() {
        let base = BaseManifold::flat_torus(vec![TAU; 4], 4, 5).unwrap();
        let space = TwistedPhaseSpace::new(
            base,
            MetricField::identity(4),
            MagneticForm::split_constant(vec![1.0, std::f64::consts::SQRT_2]),
        );
        let field = partition_of(&space, 2);
        assert_eq!(field.partition.q, 2);
        let set0 = seed_from_limit(&space, &field.partition, 0, 0.05, 2, 3).unwrap();
        let set1 = seed_from_limit(&space, &field.partition, 1, 0.05, 2, 3).unwrap();
        // class eigenspace membership via the Williamson basis: fibre parts of
        // different classes pair to zero under the Hessian inner product
        let q = set0.seeds[0].state.q_vec();
        let (pair, _) = space.fibre_normal_form(&q).unwrap();
        let omega_q = space.magnetic.evaluate(&q);
        let u_of = |s: &OrbitSeed| {
            omega_q.clone().lu().solve(&(s.state.p_vec() / 0.05)).unwrap()
        };
        for s0 in set0.seeds.iter().take(3) {
            for s1 in set1.seeds.iter().take(3) {
                let cross = (u_of(s0).transpose() * pair.hessian.matrix() * u_of(s1))[(0, 0)];
                assert!(cross.abs() < 1e-9, "cross pairing {cross}");
            }
        }
    }

    #[test]
    fn cyclotron_orbit_found_fast() {
        let space = flat_t2(1.0);
        let field = partition_of(&space, 2);
        let eps = 0.1;
        let set = seed_from_limit(&space, &field.partition, 0, eps, 2, 2).unwrap();
        let cfg = ShootingConfig::default();
        let mut accepted = 0;
        for seed in &set.seeds {
            match find_orbit(&space, seed, eps * eps, &cfg).unwrap() {
                Ok(rec) => {
                    accepted += 1;
                    assert!(rec.newton_residual <= 1e-10, "residual {}", rec.newton_residual);
                    assert_relative_eq!(rec.period, TAU, max_relative = 1e-6);
                    assert!((rec.energy - eps * eps).abs() <= 1e-10);
                }
                Err(r) => panic!("cyclotron seed rejected: {r:?}"),
            }
        }
        assert_eq!(accepted, set.seeds.len());
    }

    #[test]
    fn off_level_seed_is_rejected() {
        let space = flat_t2(1.0);
        let seed = OrbitSeed {
            state: PhaseState::new(vec![0.0, 0.0], vec![0.5, 0.0]),
            period_guess: TAU,
        };
        let shot = find_orbit(&space, &seed, 0.01, &ShootingConfig::default()).unwrap();
        assert!(matches!(shot, Err(Rejection::OffLevel { .. })));
    }

    #[test]
    fn floquet_contains_unity() {
        let space = perturbed_t2();
        let eps = 0.05;
        // seed near the field maximum q1 = pi/2 where orbits localize
        let q = DVector::from_vec(vec![std::f64::consts::FRAC_PI_2, 1.0]);
        let (_, wres) = space.fibre_normal_form(&q).unwrap();
        let u = wres.basis.column(0) / wres.eigenvalues[0].sqrt();
        let p = space.magnetic.evaluate(&q) * u * eps;
        let seed = OrbitSeed {
            state: PhaseState {
                q: q.iter().copied().collect(),
                p: p.iter().copied().collect(),
                t: 0.0,
            },
            period_guess: std::f64::consts::PI / wres.eigenvalues[0],
        };
        let rec = find_orbit(&space, &seed, eps * eps, &ShootingConfig::default())
            .unwrap()
            .expect("orbit near the field maximum");
        let has_unit = rec
            .floquet
            .iter()
            .any(|(re, im)| ((re - 1.0).powi(2) + im.powi(2)).sqrt() < 1e-5);
        assert!(has_unit, "floquet {:?}", rec.floquet);
    }

    #[test]
    fn dedup_merges_phases_and_covers_keeps_separated() {
        let space = flat_t2(1.0);
        let eps = 0.05;
        let e = eps * eps;
        let cfg = ShootingConfig::default();
        let mk = |q1: f64, theta: f64, period: f64| -> OrbitRecord {
            let q = DVector::from_vec(vec![q1, 1.0]);
            let u = DVector::from_vec(vec![theta.cos(), theta.sin()]) * 2f64.sqrt();
            let p = space.magnetic.evaluate(&q) * u * eps;
            let seed = OrbitSeed {
                state: PhaseState {
                    q: q.iter().copied().collect(),
                    p: p.iter().copied().collect(),
                    t: 0.0,
                },
                period_guess: period,
            };
            find_orbit(&space, &seed, e, &cfg).unwrap().expect("orbit")
        };
        // same circle sampled at two phases: flow the representative forward
        let a = mk(1.0, 0.0, TAU);
        let mut b = a.clone();
        let (bq, bp) = flow_map(
            &space,
            &a.representative.q_vec(),
            &a.representative.p_vec(),
            1.3,
            2e-3,
        )
        .unwrap();
        b.representative = PhaseState {
            q: space.base.chart.wrap(&bq).iter().copied().collect(),
            p: bp.iter().copied().collect(),
            t: 0.0,
        };
        // double cover: same circle, twice the period
        let mut c = a.clone();
        c.period *= 2.0;
        // distant circle: base points 1 apart, radius eps sqrt(2)/B ~ 0.14
        let d = mk(2.0, 0.0, TAU);

        let dd = DedupConfig::default();
        let merged = deduplicate(&[a.clone(), b.clone()], &space, &dd).unwrap();
        assert_eq!(merged.len(), 1);
        let merged = deduplicate(&[a.clone(), c.clone()], &space, &dd).unwrap();
        assert_eq!(merged.len(), 1);
        let merged = deduplicate(&[a.clone(), d.clone()], &space, &dd).unwrap();
        assert_eq!(merged.len(), 2);

        // order independence and idempotence
        let m1 = deduplicate(&[a.clone(), b.clone(), c.clone(), d.clone()], &space, &dd).unwrap();
        let m2 = deduplicate(&[d.clone(), c.clone(), b.clone(), a.clone()], &space, &dd).unwrap();
        assert_eq!(m1.len(), 2);
        assert_eq!(m1.len(), m2.len());
        let m3 = deduplicate(&m1, &space, &dd).unwrap();
        assert_eq!(m3.len(), m1.len());
    }

    #[test]
    fn ds_residual_accepts_true_loops_and_flags_broken_ones() {
        let space = flat_t2(1.0);
        let eps = 0.1;
        // analytic cyclotron circle at E = eps^2: radius sqrt(2) eps, period 2 pi
        let center = DVector::from_vec(vec![1.0, 1.0]);
        let r = 2f64.sqrt() * eps;
        let n_nodes = 256;
        let mut nodes = Vec::with_capacity(n_nodes);
        for k in 0..n_nodes {
            let th = TAU * k as f64 / n_nodes as f64;
            // clockwise circle: q = c + r (cos t, -sin t), p = qdot satisfies pdot = omega p
            let q = DVector::from_vec(vec![center[0] + r * th.cos(), center[1] - r * th.sin()]);
            let p = DVector::from_vec(vec![-r * th.sin(), -r * th.cos()]);
            nodes.push((q, p));
        }
        let res = ds_residual_of_loop(&space, &nodes, TAU, 8, 7).unwrap();
        assert!(res <= 1e-8, "analytic loop residual {res}");

        // negative control: displace one node by 0.1
        let mut broken = nodes.clone();
        broken[40].0[0] += 0.1;
        let res_broken = ds_residual_of_loop(&space, &broken, TAU, 8, 7).unwrap();
        assert!(res_broken > 1e-3, "broken loop residual {res_broken}");
        assert!(res_broken / res.max(1e-300) >= 1e3);
    }

    #[test]
    fn census_constant_field_passes_bound() {
        let space = flat_t2(1.0);
        let field = partition_of(&space, 3);
        let cfg = CensusConfig {
            n_base: 3,
            n_fibre: 2,
            ..Default::default()
        };
        let census = orbit_census(&space, &field, &[0.1], &cfg).unwrap();
        assert_eq!(census.bound_report.bound_main, 3);
        let row = &census.rows[0];
        assert_eq!(row.seeds, 18);
        assert!(row.convergence_rate > 0.99, "rate {}", row.convergence_rate);
        // continuum of cyclotron circles: every distinct base point yields one
        assert!(row.distinct >= 3, "distinct {}", row.distinct);
        assert!(row.pass);
    }
}
