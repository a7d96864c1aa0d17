//! Convergence bench on strongly convex quadratics.
//!
//! Every device `i` owns `F_i(θ) = ½‖A_i θ - b_i‖²`. All devices share one
//! hashed subspace (the homogeneous setting), so the server iterate stays in
//! that subspace and the run can be compared against the subspace-restricted
//! optimum solved densely.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::sim::{aggregate, ClientUpdate};
use crate::error::{FairError, Result};
use crate::seed::{self, tag};
use crate::subspace::{FamilyOptions, Subspace, SubspaceFamily};

/// Largest `n` the bench accepts; every eigen problem stays this small.
pub const MAX_BENCH_DIM: usize = 256;
/// Slack on the eigenvalue containment check.
pub const EIGEN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticParams {
    pub n: usize,
    pub m: usize,
    pub devices: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DeviceQuadratic {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl DeviceQuadratic {
    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        0.5 * (&self.a * theta - &self.b).norm_squared()
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(&(&self.a * theta - &self.b))
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        self.a.tr_mul(&self.a)
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub devices: Vec<DeviceQuadratic>,
    /// FedAvg weights, proportional to each device's row count.
    pub weights: Vec<f64>,
    /// `Σ p_i A_iᵀ A_i`.
    pub hessian: DMatrix<f64>,
    /// `Σ p_i A_iᵀ b_i`.
    pub linear: DVector<f64>,
    pub mu: f64,
    pub l: f64,
}

fn extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

impl QuadraticProblem {
    /// Random heterogeneous instance: `A_i` is `4n x n` with `N(0, 1/4n)`
    /// entries; `b_i = A_i x + ε_i` around one shared `x`.
    pub fn generate(n: usize, devices: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > MAX_BENCH_DIM || devices == 0 {
            return Err(FairError::invalid(format!(
                "quadratic needs 1 <= n <= {MAX_BENCH_DIM} and >= 1 device"
            )));
        }
        let mut rng = seed::rng_for(seed, &[tag::QUADRATIC]);
        let mut normal = move || -> f64 { rng.sample(StandardNormal) };
        let rows = 4 * n;
        let scale = 1.0 / (rows as f64).sqrt();
        let x = DVector::from_fn(n, |_, _| normal());
        let parts = (0..devices)
            .map(|_| {
                let a = DMatrix::from_fn(rows, n, |_, _| scale * normal());
                let noise = DVector::from_fn(rows, |_, _| normal());
                let b = &a * &x + noise;
                (a, b)
            })
            .collect();
        Self::from_devices(parts)
    }

    pub fn from_devices(parts: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        let n = parts
            .first()
            .map(|(a, _)| a.ncols())
            .ok_or_else(|| FairError::invalid("no devices"))?;
        let total_rows: usize = parts.iter().map(|(a, _)| a.nrows()).sum();
        let mut hessian = DMatrix::zeros(n, n);
        let mut linear = DVector::zeros(n);
        let mut weights = Vec::with_capacity(parts.len());
        let mut devices = Vec::with_capacity(parts.len());
        for (a, b) in parts {
            if a.ncols() != n || a.nrows() != b.len() {
                return Err(FairError::invalid("inconsistent quadratic shapes"));
            }
            let p = a.nrows() as f64 / total_rows as f64;
            hessian += p * a.tr_mul(&a);
            linear += p * a.tr_mul(&b);
            weights.push(p);
            devices.push(DeviceQuadratic { a, b });
        }
        let (mu, l) = extreme_eigenvalues(&hessian);
        if mu.is_nan() || mu <= 1e-10 * l.max(1.0) {
            return Err(FairError::invalid(format!(
                "quadratic is singular (smallest eigenvalue {mu:e})"
            )));
        }
        Ok(Self {
            devices,
            weights,
            hessian,
            linear,
            mu,
            l,
        })
    }

    pub fn n(&self) -> usize {
        self.hessian.nrows()
    }

    /// `F(θ) = Σ p_i F_i(θ)`.
    pub fn objective(&self, theta: &DVector<f64>) -> f64 {
        self.devices
            .iter()
            .zip(&self.weights)
            .map(|(d, p)| p * d.value(theta))
            .sum()
    }

    pub fn unconstrained_optimum(&self) -> Result<DVector<f64>> {
        self.hessian
            .clone()
            .cholesky()
            .map(|c| c.solve(&self.linear))
            .ok_or_else(|| FairError::invalid("hessian is not positive definite"))
    }

    /// `argmin F` over the column space of `S`, via the orthonormal basis.
    pub fn restricted_optimum(&self, s: &Subspace) -> Result<DVector<f64>> {
        let q = orthonormal_basis(s)?;
        let reduced = q.tr_mul(&self.hessian) * &q;
        let rhs = q.tr_mul(&self.linear);
        let y = reduced
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| FairError::invalid("restricted hessian is not positive definite"))?;
        Ok(q * y)
    }

    /// `F(θ) - F(θ*)` for `θ` in the subspace whose restricted optimum is
    /// `θ*`. There the first-order term vanishes, leaving
    /// `½ (θ - θ*)ᵀ H (θ - θ*)`, which avoids cancellation near the optimum.
    pub fn subspace_gap(&self, theta: &DVector<f64>, optimum: &DVector<f64>) -> f64 {
        let d = theta - optimum;
        0.5 * d.dot(&(&self.hessian * &d))
    }
}

/// `S D^{-1/2}` with empty buckets dropped: orthonormal columns spanning
/// the same space as `S`.
pub fn orthonormal_basis(s: &Subspace) -> Result<DMatrix<f64>> {
    let dense = s.dense_matrix()?;
    let counts = s.bucket_counts();
    let cols: Vec<DVector<f64>> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(j, &c)| dense.column(j) / (c as f64).sqrt())
        .collect();
    Ok(DMatrix::from_columns(&cols))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenRange {
    pub min: f64,
    pub max: f64,
}

impl EigenRange {
    pub fn within(&self, mu: f64, l: f64, eps: f64) -> bool {
        self.min >= mu - eps && self.max <= l + eps
    }
}

/// Extreme eigenvalues of `S̃ᵀ H S̃`.
pub fn restricted_eigen_range(h: &DMatrix<f64>, s: &Subspace) -> Result<EigenRange> {
    let q = orthonormal_basis(s)?;
    let (min, max) = extreme_eigenvalues(&(q.tr_mul(h) * &q));
    Ok(EigenRange { min, max })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub params: QuadraticParams,
    /// Dimension of the subspace actually used (`n` for the identity).
    pub subspace_dim: usize,
    pub mu: f64,
    pub l: f64,
    pub restricted: EigenRange,
    /// Every device's restricted spectrum lies inside its own `[μ_i, L_i]`.
    pub per_device_ok: bool,
    /// Gap after each round; `gaps[r - 1]` is round `r`.
    pub gaps: Vec<f64>,
}

impl ConvergenceReport {
    pub fn gap_at(&self, round: usize) -> Option<f64> {
        round.checked_sub(1).and_then(|i| self.gaps.get(i).copied())
    }

    /// Gaps at rounds `T/4`, `T/2`, `T` (deduplicated, skipping round 0).
    pub fn checkpoints(&self) -> Vec<(usize, f64)> {
        let t = self.gaps.len();
        let mut rounds = vec![t / 4, t / 2, t];
        rounds.retain(|&r| r >= 1);
        rounds.dedup();
        rounds
            .into_iter()
            .filter_map(|r| self.gap_at(r).map(|g| (r, g)))
            .collect()
    }

    pub fn eigen_ok(&self) -> bool {
        self.restricted.within(self.mu, self.l, EIGEN_TOLERANCE) && self.per_device_ok
    }
}

/// Subspace used by the bench: the identity when `m == n`, else the hashed
/// subspace of dimension `m` from a seeded family.
pub fn bench_subspace(n: usize, m: usize, seed: u64) -> Result<Subspace> {
    let family = SubspaceFamily::new(
        n,
        seed::derive_seed(seed, &[tag::FAMILY]),
        FamilyOptions::default(),
    )?;
    if m == n {
        Ok(family.identity())
    } else {
        family.subspace(m)
    }
}

/// Runs homogeneous federated training on a random quadratic and reports the
/// optimality gap per round plus the restricted-spectrum check.
///
/// Local training is full-gradient descent in the orthonormal coordinates of
/// the subspace (count-preconditioned in the stored binary coordinates) with
/// the decaying step `η_τ = β / (γ + τ)`, `β = 4/μ'`, `γ = max(16κ', E)`, where
/// `μ'`, `L'`, `κ'` belong to the restricted global objective and `τ` counts
/// local steps since the start.
pub fn quadratic_bench(params: &QuadraticParams) -> Result<ConvergenceReport> {
    let &QuadraticParams {
        n,
        m,
        devices,
        rounds,
        local_steps,
        seed,
    } = params;
    if n == 0 || n > MAX_BENCH_DIM {
        return Err(FairError::invalid(format!(
            "n must be in [1, {MAX_BENCH_DIM}]"
        )));
    }
    if m == 0 || m > n {
        return Err(FairError::invalid(format!("m must be in [1, n = {n}]")));
    }
    if rounds == 0 || local_steps == 0 || devices == 0 {
        return Err(FairError::invalid(
            "rounds, local steps and devices must be >= 1",
        ));
    }
    let problem = QuadraticProblem::generate(n, devices, seed)?;
    let s = bench_subspace(n, m, seed)?;
    let optimum = problem.restricted_optimum(&s)?;

    let restricted = restricted_eigen_range(&problem.hessian, &s)?;
    let mut per_device_ok = true;
    for dev in &problem.devices {
        let h = dev.hessian();
        let (mu_i, l_i) = extreme_eigenvalues(&h);
        per_device_ok &= restricted_eigen_range(&h, &s)?.within(mu_i, l_i, EIGEN_TOLERANCE);
    }

    let kappa = restricted.max / restricted.min;
    let beta = 4.0 / restricted.min;
    let gamma = (16.0 * kappa).max(local_steps as f64);
    let counts: Vec<f64> = s.bucket_counts().into_iter().map(|c| c as f64).collect();

    let mut rng = seed::rng_for(seed, &[tag::SERVER_INIT]);
    let mut theta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut gaps = Vec::with_capacity(rounds);
    let mut grad_psi = vec![0.0; s.dim()];
    for round in 0..rounds {
        let mut updates = Vec::with_capacity(devices);
        for (i, dev) in problem.devices.iter().enumerate() {
            let mut psi = s.reduce(&theta)?;
            for e in 0..local_steps {
                let tau = (round * local_steps + e) as f64;
                let eta = beta / (gamma + tau);
                let local = DVector::from_vec(s.recover(&psi)?);
                let g = dev.gradient(&local);
                grad_psi.iter_mut().for_each(|v| *v = 0.0);
                s.scatter_grad(0, g.as_slice(), &mut grad_psi)?;
                for ((p, g), &c) in psi.iter_mut().zip(&grad_psi).zip(&counts) {
                    if c > 0.0 {
                        *p -= eta * g / c;
                    }
                }
            }
            updates.push(ClientUpdate {
                device: i,
                psi,
                // Row counts reproduce the problem's weights.
                num_samples: dev.a.nrows(),
            });
        }
        let pairs: Vec<(&Subspace, &ClientUpdate)> = updates.iter().map(|u| (&s, u)).collect();
        theta = aggregate(n, &pairs)?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(FairError::Diverged {
                round: round + 1,
                device: 0,
            });
        }
        gaps.push(problem.subspace_gap(&DVector::from_column_slice(&theta), &optimum));
    }

    Ok(ConvergenceReport {
        params: *params,
        subspace_dim: s.dim(),
        mu: problem.mu,
        l: problem.l,
        restricted,
        per_device_ok,
        gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        let base = QuadraticParams {
            n: 16,
            m: 4,
            devices: 2,
            rounds: 4,
            local_steps: 1,
            seed: 0,
        };
        assert!(quadratic_bench(&QuadraticParams { n: 300, ..base }).is_err());
        assert!(quadratic_bench(&QuadraticParams { m: 32, ..base }).is_err());
        assert!(quadratic_bench(&QuadraticParams { m: 3, ..base }).is_err());
        assert!(quadratic_bench(&QuadraticParams { rounds: 0, ..base }).is_err());
        assert!(quadratic_bench(&base).is_ok());
    }

    #[test]
    fn singular_quadratic_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        assert!(QuadraticProblem::from_devices(vec![(a, b)]).is_err());
    }

    #[test]
    fn identity_restricted_optimum_is_unconstrained() {
        let p = QuadraticProblem::generate(16, 3, 5).unwrap();
        let s = bench_subspace(16, 16, 5).unwrap();
        assert!(s.is_identity());
        let a = p.restricted_optimum(&s).unwrap();
        let b = p.unconstrained_optimum().unwrap();
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn single_round_gives_single_checkpoint() {
        let r = quadratic_bench(&QuadraticParams {
            n: 16,
            m: 4,
            devices: 2,
            rounds: 1,
            local_steps: 1,
            seed: 1,
        })
        .unwrap();
        assert_eq!(r.checkpoints().len(), 1);
        assert_eq!(r.checkpoints()[0].0, 1);
    }
}
