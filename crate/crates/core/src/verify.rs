//! Dense-oracle verification suites, runnable from the CLI.
//!
//! Each suite materializes small projection matrices and checks the implicit
//! operations against textbook linear algebra at fixed seeds.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::{synth_lowrank, FeedbackKind, SynthParams};
use crate::fedsim::quadratic::{restricted_eigen_range, QuadraticProblem, EIGEN_TOLERANCE};
use crate::fedsim::{CapacityScheme, DenseFedAvg, Mode, RunConfig, Simulator};
use crate::model::{ClientModel, HashedEmbeddingTable, TrainExample};
use crate::seed;
use crate::subspace::{FamilyOptions, Subspace, SubspaceFamily};

pub const SUITES: &[&str] = &[
    "projection",
    "collapsibility",
    "consistency",
    "slice-adjoint",
    "gradients",
    "restricted-spectrum",
    "fedavg-coincidence",
];

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Builds the smaller subspace of each collapsibility pair from a base map
    /// with one coordinate moved. The suite must then fail.
    pub corrupt_bucket_map: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

type Check = std::result::Result<String, String>;

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Option<SuiteResult> {
    let (name, check): (&'static str, fn(&VerifyOptions) -> Check) = match name {
        "projection" => ("projection", projection),
        "collapsibility" => ("collapsibility", collapsibility),
        "consistency" => ("consistency", consistency),
        "slice-adjoint" => ("slice-adjoint", slice_adjoint),
        "gradients" => ("gradients", gradients),
        "restricted-spectrum" => ("restricted-spectrum", restricted_spectrum),
        "fedavg-coincidence" => ("fedavg-coincidence", fedavg_coincidence),
        _ => return None,
    };
    let start = Instant::now();
    let outcome = check(opts);
    let elapsed = start.elapsed();
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Some(SuiteResult {
        name,
        passed,
        detail,
        elapsed,
    })
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .filter_map(|name| run_suite(name, opts))
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_vec(rng: &mut seed::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn family(n: usize, seed: u64, signed: bool) -> std::result::Result<SubspaceFamily, String> {
    SubspaceFamily::new(
        n,
        seed,
        FamilyOptions {
            signed,
            ..FamilyOptions::default()
        },
    )
    .map_err(|e| e.to_string())
}

/// `S (SᵀS)⁺ Sᵀ`.
pub fn dense_projector(s: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = s.tr_mul(s);
    let pinv = gram
        .pseudo_inverse(1e-12)
        .expect("pseudo-inverse with non-negative epsilon");
    s * pinv * s.transpose()
}

fn projection(_: &VerifyOptions) -> Check {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut rng = seed::rng_for(case, &[0xA1]);
        let m = [2usize, 4, 8, 16][case as usize % 4];
        let n = rng.random_range(m..=64);
        let f = family(n, case, case % 3 == 0)?;
        let s = f.subspace(m).map_err(|e| e.to_string())?;
        let theta = random_vec(&mut rng, n);
        let implicit = s
            .recover(&s.reduce(&theta).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let dense = s.dense_matrix().map_err(|e| e.to_string())?;
        let oracle = dense_projector(&dense) * DVector::from_vec(theta);
        let err = (DVector::from_vec(implicit) - oracle).amax();
        worst = worst.max(err);
        ensure(err < 1e-10, || {
            format!("case {case} (n={n}, m={m}): error {err:e}")
        })?;
    }
    Ok(format!("100 cases, max error {worst:.1e}"))
}

/// Base bucket of every coordinate, read through the `m_max` subspace.
fn base_table(f: &SubspaceFamily) -> std::result::Result<Vec<u32>, String> {
    let s = f.subspace(f.m_max()).map_err(|e| e.to_string())?;
    Ok((0..f.n()).map(|a| s.row_bucket(a) as u32).collect())
}

fn collapsibility(opts: &VerifyOptions) -> Check {
    let mut pairs = 0usize;
    for case in 0..50u64 {
        let mut rng = seed::rng_for(case, &[0xC0]);
        let n = rng.random_range(16..=128);
        let f = family(n, 1000 + case, false)?;
        let small_family = if opts.corrupt_bucket_map {
            let mut table = base_table(&f)?;
            table[0] = (table[0] + 1) % f.m_max() as u32;
            SubspaceFamily::from_bucket_table(f.m_max(), table).map_err(|e| e.to_string())?
        } else {
            f.clone()
        };
        let dims: Vec<usize> = (0..)
            .map(|k| 1usize << k)
            .take_while(|&m| m <= f.m_max())
            .collect();
        for (i, &mi) in dims.iter().enumerate() {
            for &mj in &dims[i + 1..] {
                let si = small_family
                    .subspace(mi)
                    .map_err(|e| e.to_string())?
                    .dense_matrix()
                    .map_err(|e| e.to_string())?;
                let sj = f
                    .subspace(mj)
                    .map_err(|e| e.to_string())?
                    .dense_matrix()
                    .map_err(|e| e.to_string())?;
                let proj = dense_projector(&sj);
                for b in 0..mi {
                    let mut folded = DVector::zeros(n);
                    for c in (b..mj).step_by(mi) {
                        folded += sj.column(c);
                    }
                    let col = si.column(b).into_owned();
                    let exact = (&col - &folded).amax();
                    let residual = (&col - &proj * &col).amax();
                    ensure(exact == 0.0 && residual < 1e-12, || {
                        format!(
                            "family {case} (n={n}): column {b} of m={mi} is not the fold of m={mj} \
                             (fold error {exact:e}, residual {residual:e})"
                        )
                    })?;
                }
                pairs += 1;
            }
        }
    }
    Ok(format!("50 families, {pairs} nested pairs"))
}

fn consistency(_: &VerifyOptions) -> Check {
    for case in 0..20u64 {
        let n = 32 + case as usize;
        let f = family(n, case, case % 2 == 0)?;
        let g = family(n, case, case % 2 == 0)?;
        for m in [1usize, 2, 4, 8, 16] {
            let a = f
                .subspace(m)
                .map_err(|e| e.to_string())?
                .dense_matrix()
                .map_err(|e| e.to_string())?;
            let b = f
                .subspace(m)
                .map_err(|e| e.to_string())?
                .dense_matrix()
                .map_err(|e| e.to_string())?;
            let c = g
                .subspace(m)
                .map_err(|e| e.to_string())?
                .dense_matrix()
                .map_err(|e| e.to_string())?;
            ensure(a == b && a == c, || {
                format!("family {case}: m={m} subspaces differ")
            })?;
            let gram = a.tr_mul(&a);
            let counts = f.subspace(m).map_err(|e| e.to_string())?.bucket_counts();
            for r in 0..m {
                for c in 0..m {
                    let expect = if r == c { counts[r] as f64 } else { 0.0 };
                    ensure(gram[(r, c)] == expect, || {
                        format!("family {case}: Gram[{r},{c}] = {} for m={m}", gram[(r, c)])
                    })?;
                }
            }
        }
    }
    Ok("20 families, m in {1..16}".into())
}

fn slice_adjoint(_: &VerifyOptions) -> Check {
    for case in 0..50u64 {
        let mut rng = seed::rng_for(case, &[0x5A]);
        let n = rng.random_range(8..=64);
        let f = family(n, case, case % 2 == 1)?;
        let m = 1 << rng.random_range(0..=f.m_max().trailing_zeros());
        let s: Subspace = f.subspace(m).map_err(|e| e.to_string())?;
        let dense = s.dense_matrix().map_err(|e| e.to_string())?;
        let psi = random_vec(&mut rng, m);
        let full = s.recover(&psi).map_err(|e| e.to_string())?;
        let oracle = &dense * DVector::from_column_slice(&psi);
        ensure(
            (DVector::from_column_slice(&full) - oracle).amax() < 1e-12,
            || format!("case {case}: recover differs from S psi"),
        )?;
        let a = rng.random_range(0..n);
        let b = rng.random_range(a + 1..=n);
        let slice = s.recover_slice(&psi, a, b).map_err(|e| e.to_string())?;
        ensure(slice == full[a..b], || {
            format!("case {case}: slice {a}..{b} differs")
        })?;

        let g = random_vec(&mut rng, b - a);
        let mut acc = vec![0.0; m];
        s.scatter_grad(a, &g, &mut acc).map_err(|e| e.to_string())?;
        let mut padded = DVector::zeros(n);
        padded.rows_mut(a, b - a).copy_from_slice(&g);
        let oracle = dense.tr_mul(&padded);
        ensure((DVector::from_vec(acc) - oracle).amax() < 1e-12, || {
            format!("case {case}: scatter differs from Sᵀg")
        })?;
    }
    Ok("50 cases".into())
}

/// Relative error between an analytic and a central-difference derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn gradients(_: &VerifyOptions) -> Check {
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let mut rng = seed::rng_for(case, &[0x6D]);
        let (items, dim) = (6usize, 3usize);
        let f = family(items * dim, case, case % 2 == 0)?;
        let s = f.subspace(4).map_err(|e| e.to_string())?;
        let psi = random_vec(&mut rng, 4);
        let user = random_vec(&mut rng, dim);
        let ex = if case % 2 == 0 {
            TrainExample::Implicit { pos: 1, neg: 4 }
        } else {
            TrainExample::Explicit {
                item: 2,
                rating: rng.sample(StandardNormal),
            }
        };
        let build = |psi: Vec<f64>| -> std::result::Result<ClientModel, String> {
            let table =
                HashedEmbeddingTable::new(items, dim, s.clone(), psi).map_err(|e| e.to_string())?;
            ClientModel::new(user.clone(), table, 0.1, 1e-2).map_err(|e| e.to_string())
        };
        let grads = build(psi.clone())?
            .gradients(&ex)
            .map_err(|e| e.to_string())?;
        let h = 1e-6;
        for j in 0..psi.len() {
            let mut up = psi.clone();
            up[j] += h;
            let mut down = psi.clone();
            down[j] -= h;
            let lu = build(up)?.loss(&ex).map_err(|e| e.to_string())?;
            let ld = build(down)?.loss(&ex).map_err(|e| e.to_string())?;
            let numeric = (lu - ld) / (2.0 * h);
            if grads.psi[j].abs() < 1e-9 && numeric.abs() < 1e-9 {
                continue;
            }
            let err = relative_error(grads.psi[j], numeric);
            worst = worst.max(err);
            ensure(err < 1e-5, || {
                format!("case {case}: psi[{j}] relative error {err:e}")
            })?;
        }
    }
    Ok(format!(
        "50 micro-instances, max relative error {worst:.1e}"
    ))
}

fn restricted_spectrum(_: &VerifyOptions) -> Check {
    for case in 0..20u64 {
        let mut rng = seed::rng_for(case, &[0x1E]);
        let n = rng.random_range(8..=64);
        let problem = QuadraticProblem::generate(n, 3, case).map_err(|e| e.to_string())?;
        let f = family(n, case, false)?;
        let m = 1 << rng.random_range(0..=f.m_max().trailing_zeros());
        let s = f.subspace(m).map_err(|e| e.to_string())?;
        let range = restricted_eigen_range(&problem.hessian, &s).map_err(|e| e.to_string())?;
        ensure(range.within(problem.mu, problem.l, EIGEN_TOLERANCE), || {
            format!(
                "instance {case}: spectrum [{}, {}] escapes [{}, {}]",
                range.min, range.max, problem.mu, problem.l
            )
        })?;
    }
    Ok("20 instances".into())
}

fn fedavg_coincidence(_: &VerifyOptions) -> Check {
    let ds = synth_lowrank(&SynthParams {
        num_users: 8,
        num_items: 60,
        latent_dim: 4,
        density: 0.2,
        noise_sd: 0.0,
        seed: 17,
        kind: FeedbackKind::Implicit,
    })
    .and_then(|d| d.split_train_test(2, 17))
    .map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        mode: Mode::FedAvg,
        devices_per_round: 8,
        local_epochs: 1,
        learning_rate: 0.05,
        dim: 4,
        seed: 23,
        ..RunConfig::default()
    };
    let scheme = CapacityScheme::parse("1x", 8).map_err(|e| e.to_string())?;
    let mut sim = Simulator::new(&cfg, &ds, &scheme).map_err(|e| e.to_string())?;
    let mut reference = DenseFedAvg::new(&cfg, &ds).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for round in 1..=20 {
        let sampled = sim.sample_round(round);
        sim.run_round(&sampled).map_err(|e| e.to_string())?;
        reference.run_round(&sampled).map_err(|e| e.to_string())?;
        let err = sim
            .server()
            .theta
            .iter()
            .zip(&reference.theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err <= 1e-12, || {
            format!("round {round}: max deviation {err:e}")
        })?;
    }
    Ok(format!("20 rounds, max deviation {worst:.1e}"))
}
