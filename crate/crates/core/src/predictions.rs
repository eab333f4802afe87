//! Orbit-count lower bounds from resonance data and fixture topology constants.
//!
//! All inputs are small integers; `CL` and `Crit` come from fixtures (cuplength
//! and minimal critical-point count of the base manifold), never from computed
//! topology. The point-minimum case is encoded with `CL = 0`, where the main
//! bound degenerates to `n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symplectic::{ResonancePartition, StableSet};

/// Main bound: `q CL(M) + (n - m)` closed orbits on low energy levels, for `q`
/// integer-dependence classes on a `2m`-dimensional minimum inside a
/// `2n`-dimensional phase space.
pub fn bound_main(q: u32, cuplength: u32, n: u32, m: u32) -> Result<u32> {
    if q < 1 {
        return Err(Error::InvalidParameter("q must be at least 1".into()));
    }
    if n <= m {
        return Err(Error::InvalidParameter(format!(
            "need n > m, got n = {n}, m = {m}"
        )));
    }
    Ok(q * cuplength + (n - m))
}

/// Magnetic specialization (`n = 2m`): `q CL(M) + m`.
pub fn bound_magnetic(q: u32, cuplength: u32, m: u32) -> Result<u32> {
    if m < 1 {
        return Err(Error::InvalidParameter("m must be at least 1".into()));
    }
    bound_main(q, cuplength, 2 * m, m)
}

/// A stable eigenvalue set of order `r` yields `CL(M) + r` orbits on its own.
pub fn bound_stable_set(cuplength: u32, r: u32) -> u32 {
    cuplength + r
}

/// Per-class counts `CL(M) + (k_i - k_{i-1})`; their sum reproduces the main bound.
pub fn per_class_bound(class_sizes: &[u32], cuplength: u32) -> Vec<u32> {
    class_sizes.iter().map(|&s| cuplength + s).collect()
}

/// Assembled bound data for one fixture, embedded in census reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    /// Number of integer-dependence classes.
    pub q: u32,
    /// Fibre half-dimension `p = n - m`.
    pub p: u32,
    pub cuplength: u32,
    pub crit_lower_bound: u32,
    /// `q CL + (n - m)`.
    pub bound_main: u32,
    /// `q CL + m` for the magnetic case (`n = 2m`), when applicable.
    pub bound_magnetic: Option<u32>,
    /// `Crit(M)`, the sharper surface-case bound.
    pub bound_surface: Option<u32>,
    /// `CL + (k_i - k_{i-1})` per class.
    pub per_class: Vec<u32>,
    /// Stable-set bounds `CL + r`, by class index.
    pub stable_sets: Vec<(usize, u32)>,
    /// Speculative `(n - m)(CL + 1)`; reported, never asserted.
    pub conjectured: u32,
}

impl BoundReport {
    /// Builds the report for a magnetic fixture: base dimension `2m`, phase
    /// space dimension `2n = 4m`.
    pub fn magnetic(
        partition: &ResonancePartition,
        stable: &[StableSet],
        cuplength: u32,
        crit_lower_bound: u32,
        m: u32,
    ) -> Result<Self> {
        let q = partition.q as u32;
        let p = *partition.boundaries.last().unwrap() as u32;
        if p != m {
            return Err(Error::DimensionMismatch(format!(
                "partition covers {p} eigenvalues, expected m = {m}"
            )));
        }
        let n = 2 * m;
        let class_sizes: Vec<u32> = partition.classes.iter().map(|c| c.len() as u32).collect();
        Ok(Self {
            q,
            p,
            cuplength,
            crit_lower_bound,
            bound_main: bound_main(q, cuplength, n, m)?,
            bound_magnetic: Some(bound_magnetic(q, cuplength, m)?),
            bound_surface: if m == 1 { Some(crit_lower_bound) } else { None },
            per_class: per_class_bound(&class_sizes, cuplength),
            stable_sets: stable
                .iter()
                .map(|s| (s.class_index, bound_stable_set(cuplength, s.order as u32)))
                .collect(),
            conjectured: (n - m) * (cuplength + 1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_instances() {
        // surface magnetic case: q = 1, CL = 2, n = 2, m = 1
        assert_eq!(bound_main(1, 2, 2, 1).unwrap(), 3);
        // point minimum: CL = 0 gives n
        assert_eq!(bound_main(1, 0, 5, 0).unwrap(), 5);
        // T^4 with two classes
        assert_eq!(bound_main(2, 4, 4, 2).unwrap(), 10);

        assert_eq!(bound_magnetic(1, 2, 1).unwrap(), 3);
        assert_eq!(bound_magnetic(1, 4, 2).unwrap(), 6);
        assert_eq!(bound_magnetic(2, 4, 2).unwrap(), 10);

        assert_eq!(bound_stable_set(2, 1), 3);
        assert_eq!(bound_stable_set(0, 1), 1);
        assert_eq!(bound_stable_set(4, 2), 6);

        assert_eq!(per_class_bound(&[1], 2), vec![3]);
        assert_eq!(per_class_bound(&[1, 1], 4), vec![5, 5]);
        assert_eq!(per_class_bound(&[2], 4), vec![6]);
    }

    #[test]
    fn per_class_sums_to_main() {
        // identity: sum_i (CL + k_i - k_{i-1}) = q CL + (n - m), any partition
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..1000 {
            let q = 1 + (next() % 5) as u32;
            let cl = (next() % 7) as u32;
            let sizes: Vec<u32> = (0..q).map(|_| 1 + (next() % 4) as u32).collect();
            let total: u32 = sizes.iter().sum();
            let (m, n) = (total, 2 * total);
            let sum: u32 = per_class_bound(&sizes, cl).iter().sum();
            assert_eq!(sum, bound_main(q, cl, n, m).unwrap());
        }
    }

    #[test]
    fn monotone_in_inputs() {
        for q in 1..4 {
            for cl in 0..4 {
                let b = bound_main(q, cl, 6, 2).unwrap();
                assert!(bound_main(q + 1, cl, 6, 2).unwrap() >= b);
                assert!(bound_main(q, cl + 1, 6, 2).unwrap() >= b);
                assert!(bound_main(q, cl, 7, 2).unwrap() >= b);
            }
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(bound_main(0, 2, 2, 1).is_err());
        assert!(bound_main(1, 2, 2, 2).is_err());
        assert!(bound_magnetic(1, 2, 0).is_err());
    }
}
