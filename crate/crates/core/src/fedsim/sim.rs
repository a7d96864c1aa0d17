//! The federated round loop: reduce, local training, recovery, weighted
//! aggregation.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::config::{Consistency, LocalUnit, Mode, RunConfig};
use super::scheme::CapacityScheme;
use crate::data::{
    sample_negatives, DeviceData, DevicePartition, FeedbackKind, InteractionDataset,
};
use crate::error::{FairError, Result};
use crate::eval::{evaluate_server, Evaluation, MetricRecord, MetricsLog};
use crate::model::{ClientModel, HashedEmbeddingTable};
use crate::seed::{self, tag};
use crate::subspace::{FamilyOptions, Subspace, SubspaceFamily};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// Flattened `num_items x dim` item table.
    pub theta: Vec<f64>,
    /// Completed rounds.
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub device: usize,
    pub psi: Vec<f64>,
    pub num_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundStats {
    pub round: usize,
    /// Mean pre-update loss over every local step of every sampled device.
    pub mean_loss: f64,
    pub steps: usize,
}

/// FedAvg weights `n_i / Σ n_j`; uniform when no device has data.
pub fn aggregation_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![1.0 / counts.len() as f64; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// `Σ p_i S_i psi_i`, summed in the order given.
pub fn aggregate(n: usize, updates: &[(&Subspace, &ClientUpdate)]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(FairError::invalid("cannot aggregate zero updates"));
    }
    let counts: Vec<usize> = updates.iter().map(|(_, u)| u.num_samples).collect();
    let weights = aggregation_weights(&counts);
    let mut theta = vec![0.0; n];
    for ((s, update), p) in updates.iter().zip(weights) {
        let recovered = s.recover(&update.psi)?;
        for (t, r) in theta.iter_mut().zip(recovered) {
            *t += p * r;
        }
    }
    Ok(theta)
}

/// Devices sampled in `round`: `k` of `eligible` uniformly without
/// replacement, returned in ascending id order.
pub fn sample_devices(seed: u64, round: usize, eligible: &[usize], k: usize) -> Vec<usize> {
    let k = k.min(eligible.len());
    let mut rng = seed::rng_for(seed, &[tag::SAMPLE, round as u64]);
    let mut picked: Vec<usize> = index::sample(&mut rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    picked
}

pub fn initial_theta(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut rng = seed::rng_for(seed, &[tag::SERVER_INIT]);
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn initial_user_vec(seed: u64, device: usize, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = seed::rng_for(seed, &[tag::USER_INIT, device as u64]);
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn local_rng(seed: u64, round: usize, device: usize) -> seed::Rng {
    seed::rng_for(seed, &[tag::LOCAL, round as u64, device as u64])
}

/// Visits the device's train records in the order local training uses:
/// `epochs` shuffled passes, or `steps` records drawn from reshuffled passes.
/// `visit(record_index, rng)` may draw from the same stream.
pub fn local_schedule<F>(
    data: &DeviceData,
    budget: usize,
    unit: LocalUnit,
    rng: &mut seed::Rng,
    mut visit: F,
) -> Result<()>
where
    F: FnMut(usize, &mut seed::Rng) -> Result<()>,
{
    let len = data.train.len();
    if len == 0 {
        return Ok(());
    }
    let mut order: Vec<usize> = (0..len).collect();
    match unit {
        LocalUnit::Epochs => {
            for _ in 0..budget {
                order.shuffle(rng);
                for &i in &order {
                    visit(i, rng)?;
                }
            }
        }
        LocalUnit::Steps => {
            let mut cursor = len;
            for _ in 0..budget {
                if cursor == len {
                    order.shuffle(rng);
                    cursor = 0;
                }
                visit(order[cursor], rng)?;
                cursor += 1;
            }
        }
    }
    Ok(())
}

/// One full simulated federation: server, devices, and their subspaces.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: RunConfig,
    scheme: CapacityScheme,
    dataset: InteractionDataset,
    partition: DevicePartition,
    subspaces: Vec<Subspace>,
    eligible: Vec<usize>,
    server: ServerState,
    user_vecs: Vec<Vec<f64>>,
}

impl Simulator {
    pub fn new(
        cfg: &RunConfig,
        dataset: &InteractionDataset,
        scheme: &CapacityScheme,
    ) -> Result<Self> {
        cfg.validate_model()?;
        let num_devices = dataset.num_users;
        if scheme.num_devices() != num_devices {
            return Err(FairError::invalid(format!(
                "capacity scheme covers {} devices, dataset has {num_devices} users",
                scheme.num_devices()
            )));
        }
        if cfg.devices_per_round > num_devices {
            return Err(FairError::invalid(format!(
                "devices_per_round {} exceeds the {num_devices} devices",
                cfg.devices_per_round
            )));
        }
        let n = dataset
            .num_items
            .checked_mul(cfg.dim)
            .ok_or_else(|| FairError::invalid("item table size overflows"))?;

        let factors: Vec<u32> = (0..num_devices)
            .map(|d| match cfg.mode {
                Mode::FairHet => scheme.factor(d),
                Mode::FairHom => scheme.max_factor(),
                Mode::FullTrn | Mode::FedAvg => 1,
            })
            .collect();
        let eligible: Vec<usize> = match cfg.mode {
            Mode::FullTrn => (0..num_devices)
                .filter(|&d| scheme.factor(d) == 1)
                .collect(),
            _ => (0..num_devices).collect(),
        };
        if eligible.is_empty() {
            return Err(FairError::invalid(format!(
                "{} needs at least one full-capacity device in scheme {}",
                cfg.mode, scheme
            )));
        }

        let opts = FamilyOptions {
            signed: cfg.signed_hash,
            ..FamilyOptions::default()
        };
        let family_seed = |d: u64| seed::derive_seed(cfg.seed, &[tag::FAMILY, d]);
        let shared = SubspaceFamily::new(n, family_seed(0), opts)?;
        let subspaces = factors
            .iter()
            .enumerate()
            .map(|(d, &factor)| match cfg.consistency {
                Consistency::Consistent => shared.subspace_for_factor(factor),
                Consistency::Inconsistent => {
                    SubspaceFamily::new(n, family_seed(d as u64 + 1), opts)?
                        .subspace_for_factor(factor)
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let server = ServerState {
            theta: initial_theta(cfg.seed, n, cfg.init_scale),
            round: 0,
        };
        let user_vecs = (0..num_devices)
            .map(|d| initial_user_vec(cfg.seed, d, cfg.dim, cfg.init_scale))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            scheme: scheme.clone(),
            dataset: dataset.clone(),
            partition: dataset.partition(),
            subspaces,
            eligible,
            server,
            user_vecs,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut ServerState {
        &mut self.server
    }

    pub fn user_vecs(&self) -> &[Vec<f64>] {
        &self.user_vecs
    }

    pub fn subspace(&self, device: usize) -> &Subspace {
        &self.subspaces[device]
    }

    pub fn eligible_devices(&self) -> &[usize] {
        &self.eligible
    }

    /// Overrides the local budget. `0` turns a round into a pure
    /// reduce/recover pass; used to test the projection step in isolation.
    pub fn set_local_budget(&mut self, budget: usize) {
        self.cfg.local_epochs = budget;
    }

    pub fn sample_round(&self, round: usize) -> Vec<usize> {
        sample_devices(
            self.cfg.seed,
            round,
            &self.eligible,
            self.cfg.devices_per_round,
        )
    }

    /// Downloads `reduce(S_d, theta)` to device `d` and trains it locally.
    /// Returns the update, the device's new user vector, and the loss sum and
    /// step count.
    pub fn train_device(
        &self,
        device: usize,
        round: usize,
    ) -> Result<(ClientUpdate, Vec<f64>, f64, usize)> {
        let cfg = &self.cfg;
        let s = &self.subspaces[device];
        let data = &self.partition.devices[device];
        let psi = s.reduce(&self.server.theta)?;
        let table = HashedEmbeddingTable::new(self.dataset.num_items, cfg.dim, s.clone(), psi)?;
        let mut model = ClientModel::new(
            self.user_vecs[device].clone(),
            table,
            cfg.learning_rate,
            cfg.l2,
        )?;
        if cfg.scale_item_lr {
            model = model.with_item_step_scale(s.dim() as f64 / s.n() as f64)?;
        }
        let mut rng = local_rng(cfg.seed, round, device);
        let mut loss = 0.0;
        let mut steps = 0usize;
        let num_items = self.dataset.num_items;
        local_schedule(
            data,
            cfg.local_epochs,
            cfg.local_unit,
            &mut rng,
            |i, rng| {
                let (item, rating) = data.train[i];
                match self.partition.kind {
                    FeedbackKind::Implicit => {
                        let negs =
                            sample_negatives(&data.positives, num_items, cfg.num_negatives, rng)
                                .map_err(|_| FairError::NoNegatives { user: device })?;
                        for neg in negs {
                            loss += model.bpr_step(item, neg)?;
                            steps += 1;
                        }
                    }
                    FeedbackKind::Explicit => {
                        loss += model.mse_step(item, rating)?;
                        steps += 1;
                    }
                }
                Ok(())
            },
        )?;
        let (user, psi) = model.into_parts();
        let update = ClientUpdate {
            device,
            psi,
            num_samples: data.num_samples(),
        };
        Ok((update, user, loss, steps))
    }

    /// Runs one round over `sampled` and replaces `theta` with the weighted
    /// mean of the recovered device models.
    pub fn run_round(&mut self, sampled: &[usize]) -> Result<RoundStats> {
        if sampled.is_empty() {
            return Err(FairError::invalid("no devices sampled"));
        }
        let mut devices = sampled.to_vec();
        devices.sort_unstable();
        devices.dedup();
        if let Some(&bad) = devices.iter().find(|&&d| d >= self.user_vecs.len()) {
            return Err(FairError::OutOfRange {
                index: bad,
                limit: self.user_vecs.len(),
            });
        }
        let round = self.server.round + 1;

        let results: Vec<_> = devices
            .par_iter()
            .map(|&d| self.train_device(d, round))
            .collect::<Result<_>>()?;

        for (update, user, loss, _) in &results {
            if !loss.is_finite() || update.psi.iter().chain(user).any(|v| !v.is_finite()) {
                return Err(FairError::Diverged {
                    round,
                    device: update.device,
                });
            }
        }
        let pairs: Vec<(&Subspace, &ClientUpdate)> = results
            .iter()
            .map(|(u, ..)| (&self.subspaces[u.device], u))
            .collect();
        let theta = aggregate(self.server.theta.len(), &pairs)?;
        if let Some(pos) = theta.iter().position(|v| !v.is_finite()) {
            // Attribute to the first device whose recovered value is non-finite there.
            let device = results
                .iter()
                .find(|(u, ..)| {
                    let s = &self.subspaces[u.device];
                    !(s.sign(pos) * u.psi[s.row_bucket(pos)]).is_finite()
                })
                .map(|(u, ..)| u.device)
                .unwrap_or(devices[0]);
            return Err(FairError::Diverged { round, device });
        }

        let (mut loss, mut steps) = (0.0, 0usize);
        for (update, user, l, s) in results {
            self.user_vecs[update.device] = user;
            loss += l;
            steps += s;
        }
        self.server.theta = theta;
        self.server.round = round;
        Ok(RoundStats {
            round,
            mean_loss: if steps > 0 { loss / steps as f64 } else { 0.0 },
            steps,
        })
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate_server(
            &self.server.theta,
            self.cfg.dim,
            &self.user_vecs,
            &self.dataset,
            self.cfg.ndcg_k,
        )
    }

    fn record(&self, round: usize, metric: String, value: f64) -> MetricRecord {
        MetricRecord {
            round,
            mode: self.cfg.mode.to_string(),
            scheme: self.scheme.to_string(),
            seed: self.cfg.seed,
            metric,
            value,
        }
    }

    /// Runs `rounds` more rounds. Logs the training loss every round and the
    /// server metric every `eval_every` rounds and after the last round.
    pub fn run(&mut self, rounds: usize) -> Result<MetricsLog> {
        let mut log = MetricsLog::default();
        let last = self.server.round + rounds;
        for _ in 0..rounds {
            let round = self.server.round + 1;
            let sampled = self.sample_round(round);
            let stats = self.run_round(&sampled)?;
            log.push(self.record(round, "loss".into(), stats.mean_loss));
            if round.is_multiple_of(self.cfg.eval_every.max(1)) || round == last {
                let eval = self.evaluate()?;
                log.push(self.record(round, eval.metric.name(), eval.value));
            }
        }
        Ok(log)
    }
}

/// Builds a simulator and runs `cfg.rounds` rounds.
pub fn run_training(
    cfg: &RunConfig,
    dataset: &InteractionDataset,
    scheme: &CapacityScheme,
) -> Result<MetricsLog> {
    cfg.validate()?;
    Simulator::new(cfg, dataset, scheme)?.run(cfg.rounds)
}
