//! Implicit hashed projection matrices.
//!
//! A [`SubspaceFamily`] owns one base bucket map `H: [0, n) -> [0, m_max)`.
//! The subspace of dimension `m` (a power of two dividing `m_max`) is the
//! binary matrix `S[a, b] = sign(a)` iff `H(a) mod m == b`. Folding one base map
//! keeps equal-dimension subspaces identical and nests smaller ones inside
//! larger ones. No `S` is ever materialized outside [`Subspace::dense_matrix`].

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{FairError, Result};
use crate::hashing::{SignHash, UniversalHash};

/// Largest `n * m` that [`Subspace::dense_matrix`] will materialize.
pub const DENSE_CAP: usize = 1 << 20;

/// Greatest power of two `<= x`, or `None` for `x == 0`.
pub fn floor_pow2(x: usize) -> Option<usize> {
    if x == 0 {
        None
    } else {
        Some(1usize << (usize::BITS - 1 - x.leading_zeros()))
    }
}

#[derive(Debug, Clone)]
enum BucketMap {
    Hashed(UniversalHash),
    /// Explicit base buckets, one per coordinate.
    Table(Arc<[u32]>),
}

#[derive(Debug, Clone, Copy)]
pub struct FamilyOptions {
    /// Defaults to the greatest power of two `<= n`.
    pub m_max: Option<usize>,
    pub signed: bool,
    pub identity_at_full: bool,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        Self {
            m_max: None,
            signed: false,
            identity_at_full: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubspaceFamily {
    n: usize,
    m_max: usize,
    base: BucketMap,
    sign: Option<SignHash>,
    use_identity_at_full: bool,
}

impl SubspaceFamily {
    pub fn new(n: usize, seed: u64, opts: FamilyOptions) -> Result<Self> {
        let full =
            floor_pow2(n).ok_or_else(|| FairError::invalid("family dimension must be >= 1"))?;
        let m_max = opts.m_max.unwrap_or(full);
        if !m_max.is_power_of_two() || m_max > n {
            return Err(FairError::invalid(format!(
                "m_max {m_max} must be a power of two no larger than n = {n}"
            )));
        }
        let base = UniversalHash::new(seed, n as u64, m_max as u64)?;
        let sign = if opts.signed {
            Some(SignHash::new(seed, n as u64)?)
        } else {
            None
        };
        Ok(Self {
            n,
            m_max,
            base: BucketMap::Hashed(base),
            sign,
            use_identity_at_full: opts.identity_at_full,
        })
    }

    /// Family with an explicit base bucket per coordinate. Used for
    /// hand-constructed examples and fault injection in the verify suites.
    pub fn from_bucket_table(m_max: usize, table: Vec<u32>) -> Result<Self> {
        let n = table.len();
        if n == 0 || !m_max.is_power_of_two() || m_max > n {
            return Err(FairError::invalid(format!(
                "m_max {m_max} must be a power of two in [1, {n}]"
            )));
        }
        if let Some(bad) = table.iter().find(|&&b| b as usize >= m_max) {
            return Err(FairError::invalid(format!(
                "bucket {bad} outside [0, {m_max})"
            )));
        }
        Ok(Self {
            n,
            m_max,
            base: BucketMap::Table(table.into()),
            sign: None,
            use_identity_at_full: true,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }

    pub fn is_signed(&self) -> bool {
        self.sign.is_some()
    }

    #[inline]
    fn base_bucket(&self, a: usize) -> usize {
        match &self.base {
            BucketMap::Hashed(h) => h.eval(a as u64) as usize,
            BucketMap::Table(t) => t[a] as usize,
        }
    }

    /// Hashed subspace of dimension `m`.
    pub fn subspace(&self, m: usize) -> Result<Subspace> {
        if !m.is_power_of_two() || !self.m_max.is_multiple_of(m) {
            return Err(FairError::invalid(format!(
                "subspace dimension {m} must be a power of two dividing {}",
                self.m_max
            )));
        }
        Ok(Subspace {
            family: self.clone(),
            m,
            identity: false,
        })
    }

    /// The exact full space, `S = I`.
    pub fn identity(&self) -> Subspace {
        Subspace {
            family: self.clone(),
            m: self.n,
            identity: true,
        }
    }

    /// Subspace for a device that can hold a fraction `alpha` of the parameters:
    /// the greatest power of two `<= floor(alpha * n)`, capped at `m_max`.
    pub fn subspace_for_capacity(&self, alpha: f64) -> Result<Subspace> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(FairError::invalid(format!(
                "capacity {alpha} not in (0, 1]"
            )));
        }
        if alpha == 1.0 && self.use_identity_at_full {
            return Ok(self.identity());
        }
        // Guard against 0.25 * 100 landing at 24.999...
        let budget = (alpha * self.n as f64 + 1e-9).floor() as usize;
        self.subspace_for_budget(budget)
    }

    /// Same as [`Self::subspace_for_capacity`] for `alpha = 1 / factor`, in exact
    /// integer arithmetic.
    pub fn subspace_for_factor(&self, factor: u32) -> Result<Subspace> {
        if factor == 0 {
            return Err(FairError::invalid("compression factor must be >= 1"));
        }
        if factor == 1 && self.use_identity_at_full {
            return Ok(self.identity());
        }
        self.subspace_for_budget(self.n / factor as usize)
    }

    fn subspace_for_budget(&self, budget: usize) -> Result<Subspace> {
        let m = floor_pow2(budget).ok_or_else(|| {
            FairError::invalid(format!(
                "capacity leaves no parameters out of n = {}",
                self.n
            ))
        })?;
        self.subspace(m.min(self.m_max))
    }
}

#[derive(Debug, Clone)]
pub struct Subspace {
    family: SubspaceFamily,
    m: usize,
    identity: bool,
}

impl Subspace {
    pub fn n(&self) -> usize {
        self.family.n
    }

    /// Device-side dimension `m`.
    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn family(&self) -> &SubspaceFamily {
        &self.family
    }

    #[inline]
    pub fn row_bucket(&self, a: usize) -> usize {
        if self.identity {
            a
        } else {
            self.family.base_bucket(a) % self.m
        }
    }

    #[inline]
    pub fn sign(&self, a: usize) -> f64 {
        match (&self.family.sign, self.identity) {
            (Some(s), false) => s.sign(a as u64),
            _ => 1.0,
        }
    }

    /// Number of coordinates hashed into each bucket, i.e. the diagonal of `SᵀS`.
    pub fn bucket_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.m];
        for a in 0..self.n() {
            counts[self.row_bucket(a)] += 1;
        }
        counts
    }

    /// Least-squares coordinates of `theta` in this subspace: the signed
    /// per-bucket mean. Empty buckets get 0.
    pub fn reduce(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(theta.len(), self.n())?;
        if self.identity {
            return Ok(theta.to_vec());
        }
        let mut psi = vec![0.0; self.m];
        let mut counts = vec![0u32; self.m];
        for (a, &t) in theta.iter().enumerate() {
            let j = self.row_bucket(a);
            psi[j] += self.sign(a) * t;
            counts[j] += 1;
        }
        for (p, &c) in psi.iter_mut().zip(&counts) {
            if c > 0 {
                *p /= c as f64;
            }
        }
        Ok(psi)
    }

    /// `S * psi`.
    pub fn recover(&self, psi: &[f64]) -> Result<Vec<f64>> {
        self.recover_slice(psi, 0, self.n())
    }

    /// `(S * psi)[a..b]` in O(b - a) time without forming the full vector.
    pub fn recover_slice(&self, psi: &[f64], a: usize, b: usize) -> Result<Vec<f64>> {
        if a >= b || b > self.n() {
            return Err(FairError::invalid(format!(
                "slice {a}..{b} invalid for n = {}",
                self.n()
            )));
        }
        let mut out = vec![0.0; b - a];
        self.recover_slice_into(psi, a, &mut out)?;
        Ok(out)
    }

    /// Writes `(S * psi)[a..a + out.len()]` into `out`.
    pub fn recover_slice_into(&self, psi: &[f64], a: usize, out: &mut [f64]) -> Result<()> {
        check_len(psi.len(), self.m)?;
        check_range(a, out.len(), self.n())?;
        if self.identity {
            out.copy_from_slice(&psi[a..a + out.len()]);
        } else {
            for (t, o) in out.iter_mut().enumerate() {
                *o = self.sign(a + t) * psi[self.row_bucket(a + t)];
            }
        }
        Ok(())
    }

    /// `accum += Sᵀ[a..a+len] * grad`: the chain rule through `theta = S psi`
    /// for a gradient that touches only `theta[a..a+len]`.
    pub fn scatter_grad(&self, a: usize, grad: &[f64], accum: &mut [f64]) -> Result<()> {
        self.scatter_grad_scaled(a, grad, 1.0, accum)
    }

    /// `accum += scale * Sᵀ[a..a+len] * grad`.
    pub fn scatter_grad_scaled(
        &self,
        a: usize,
        grad: &[f64],
        scale: f64,
        accum: &mut [f64],
    ) -> Result<()> {
        check_len(accum.len(), self.m)?;
        check_range(a, grad.len(), self.n())?;
        for (t, &g) in grad.iter().enumerate() {
            accum[self.row_bucket(a + t)] += scale * self.sign(a + t) * g;
        }
        Ok(())
    }

    /// Materializes `S` (n x m). Only for small verification problems.
    pub fn dense_matrix(&self) -> Result<DMatrix<f64>> {
        let (rows, cols) = (self.n(), self.m);
        if rows.saturating_mul(cols) > DENSE_CAP {
            return Err(FairError::TooLarge {
                rows,
                cols,
                cap: DENSE_CAP,
            });
        }
        let mut s = DMatrix::zeros(rows, cols);
        for a in 0..rows {
            s[(a, self.row_bucket(a))] = self.sign(a);
        }
        Ok(s)
    }
}

fn check_len(actual: usize, expected: usize) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(FairError::DimensionMismatch { expected, actual })
    }
}

fn check_range(start: usize, len: usize, n: usize) -> Result<()> {
    match start.checked_add(len) {
        Some(end) if end <= n => Ok(()),
        _ => Err(FairError::OutOfRange {
            index: start.saturating_add(len),
            limit: n,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bucket() -> Subspace {
        SubspaceFamily::from_bucket_table(2, vec![0, 0, 1, 1])
            .unwrap()
            .subspace(2)
            .unwrap()
    }

    #[test]
    fn floor_pow2_values() {
        assert_eq!(floor_pow2(0), None);
        assert_eq!(floor_pow2(1), Some(1));
        assert_eq!(floor_pow2(25), Some(16));
        assert_eq!(floor_pow2(64), Some(64));
        assert_eq!(floor_pow2(1000), Some(512));
    }

    #[test]
    fn capacity_rule() {
        let f = SubspaceFamily::new(100, 1, FamilyOptions::default()).unwrap();
        assert_eq!(f.m_max(), 64);
        assert_eq!(f.subspace_for_capacity(0.25).unwrap().dim(), 16);
        assert_eq!(f.subspace_for_factor(4).unwrap().dim(), 16);
        assert!(f.subspace_for_capacity(0.005).is_err());
        assert!(f.subspace_for_capacity(0.0).is_err());
        assert!(f.subspace_for_capacity(1.5).is_err());
        assert!(f.subspace_for_capacity(f64::NAN).is_err());
        // Capped at m_max when not using the identity.
        let g = SubspaceFamily::new(
            100,
            1,
            FamilyOptions {
                identity_at_full: false,
                ..Default::default()
            },
        )
        .unwrap();
        let s = g.subspace_for_capacity(1.0).unwrap();
        assert!(!s.is_identity());
        assert_eq!(s.dim(), 64);

        let h = SubspaceFamily::new(64, 1, FamilyOptions::default()).unwrap();
        let id = h.subspace_for_capacity(1.0).unwrap();
        assert!(id.is_identity());
        assert_eq!(id.dim(), 64);
    }

    #[test]
    fn subspace_dimension_must_divide_m_max() {
        let f = SubspaceFamily::new(100, 1, FamilyOptions::default()).unwrap();
        assert!(f.subspace(3).is_err());
        assert!(f.subspace(128).is_err());
        assert!(f.subspace(32).is_ok());
    }

    #[test]
    fn reduce_is_bucket_mean() {
        let s = two_bucket();
        assert_eq!(s.reduce(&[1.0, 3.0, 2.0, 4.0]).unwrap(), vec![2.0, 3.0]);
        let psi = s.reduce(&[5.0, 5.0, 9.0, 9.0]).unwrap();
        assert_eq!(psi, vec![5.0, 9.0]);
        assert_eq!(s.recover(&psi).unwrap(), vec![5.0, 5.0, 9.0, 9.0]);
        assert!(s.reduce(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn reduce_empty_bucket_is_zero() {
        let s = SubspaceFamily::from_bucket_table(2, vec![0, 0, 0, 0])
            .unwrap()
            .subspace(2)
            .unwrap();
        assert_eq!(s.reduce(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![2.5, 0.0]);
    }

    #[test]
    fn recover_and_slices() {
        let s = two_bucket();
        assert_eq!(s.recover(&[2.0, 3.0]).unwrap(), vec![2.0, 2.0, 3.0, 3.0]);
        assert_eq!(s.recover(&[0.0, 0.0]).unwrap(), vec![0.0; 4]);
        assert_eq!(s.recover_slice(&[2.0, 3.0], 1, 3).unwrap(), vec![2.0, 3.0]);
        assert!(s.recover_slice(&[2.0, 3.0], 2, 5).is_err());
        assert!(s.recover_slice(&[2.0, 3.0], 2, 2).is_err());
        assert!(s.recover(&[1.0]).is_err());
    }

    #[test]
    fn scatter_is_transpose() {
        let s = two_bucket();
        let mut acc = vec![0.0; 2];
        s.scatter_grad(0, &[1.0; 4], &mut acc).unwrap();
        assert_eq!(acc, vec![2.0, 2.0]);
        s.scatter_grad(1, &[0.0; 2], &mut acc).unwrap();
        assert_eq!(acc, vec![2.0, 2.0]);
        assert!(s.scatter_grad(3, &[1.0, 1.0], &mut acc).is_err());

        let id = SubspaceFamily::new(8, 3, FamilyOptions::default())
            .unwrap()
            .identity();
        let mut acc = vec![0.0; 8];
        id.scatter_grad(5, &[1.0, 2.0], &mut acc).unwrap();
        assert_eq!(acc, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn dense_matrix_hand_example() {
        let s = two_bucket().dense_matrix().unwrap();
        let expect = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(s, expect);
        let big = SubspaceFamily::new(1 << 21, 1, FamilyOptions::default())
            .unwrap()
            .subspace(2)
            .unwrap();
        assert!(matches!(
            big.dense_matrix(),
            Err(FairError::TooLarge { .. })
        ));
    }

    #[test]
    fn identity_is_passthrough() {
        let id = SubspaceFamily::new(
            6,
            3,
            FamilyOptions {
                signed: true,
                ..Default::default()
            },
        )
        .unwrap()
        .identity();
        let theta = [1.0, -2.0, 3.0, 4.5, 0.0, 7.0];
        assert_eq!(id.reduce(&theta).unwrap(), theta.to_vec());
        assert_eq!(id.recover(&theta).unwrap(), theta.to_vec());
        assert_eq!(id.recover_slice(&theta, 2, 4).unwrap(), vec![3.0, 4.5]);
    }

    #[test]
    fn signed_reduce_recover_roundtrip() {
        let f = SubspaceFamily::new(
            64,
            11,
            FamilyOptions {
                signed: true,
                ..Default::default()
            },
        )
        .unwrap();
        let s = f.subspace(8).unwrap();
        let counts = s.bucket_counts();
        assert!(counts.iter().all(|&c| c > 0));
        let psi: Vec<f64> = (0..8).map(|j| j as f64 - 3.5).collect();
        let theta = s.recover(&psi).unwrap();
        assert!((0..64).any(|a| s.sign(a) < 0.0));
        let back = s.reduce(&theta).unwrap();
        for (x, y) in back.iter().zip(&psi) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
