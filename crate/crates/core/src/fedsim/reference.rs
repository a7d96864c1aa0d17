//! Plain FedAvg over a dense item table, with no subspaces or hashing.
//!
//! Shares the simulator's seeding and data-visit order so the two can be
//! compared step for step when every device holds the full model.

use super::config::RunConfig;
use super::sim::{aggregation_weights, initial_theta, initial_user_vec, local_rng, local_schedule};
use crate::data::{sample_negatives, DevicePartition, FeedbackKind, InteractionDataset};
use crate::error::{FairError, Result};
use crate::model::{dot, sigmoid};

#[derive(Debug, Clone)]
pub struct DenseFedAvg {
    cfg: RunConfig,
    num_items: usize,
    partition: DevicePartition,
    pub theta: Vec<f64>,
    pub user_vecs: Vec<Vec<f64>>,
    pub round: usize,
}

impl DenseFedAvg {
    pub fn new(cfg: &RunConfig, dataset: &InteractionDataset) -> Result<Self> {
        let n = dataset.num_items * cfg.dim;
        Ok(Self {
            cfg: cfg.clone(),
            num_items: dataset.num_items,
            partition: dataset.partition(),
            theta: initial_theta(cfg.seed, n, cfg.init_scale),
            user_vecs: (0..dataset.num_users)
                .map(|d| initial_user_vec(cfg.seed, d, cfg.dim, cfg.init_scale))
                .collect(),
            round: 0,
        })
    }

    pub fn run_round(&mut self, sampled: &[usize]) -> Result<()> {
        let mut devices = sampled.to_vec();
        devices.sort_unstable();
        devices.dedup();
        let round = self.round + 1;
        let d = self.cfg.dim;
        let lr = self.cfg.learning_rate;
        let l2 = self.cfg.l2;

        let mut locals = Vec::with_capacity(devices.len());
        for &dev in &devices {
            let data = &self.partition.devices[dev];
            let mut table = self.theta.clone();
            let mut u = self.user_vecs[dev].clone();
            let mut rng = local_rng(self.cfg.seed, round, dev);
            let kind = self.partition.kind;
            let (num_items, num_neg) = (self.num_items, self.cfg.num_negatives);
            local_schedule(
                data,
                self.cfg.local_epochs,
                self.cfg.local_unit,
                &mut rng,
                |i, rng| {
                    let (item, rating) = data.train[i];
                    match kind {
                        FeedbackKind::Implicit => {
                            let negs = sample_negatives(&data.positives, num_items, num_neg, rng)
                                .map_err(|_| FairError::NoNegatives { user: dev })?;
                            for neg in negs {
                                let ep = table[item * d..(item + 1) * d].to_vec();
                                let en = table[neg * d..(neg + 1) * d].to_vec();
                                let c = sigmoid(-(dot(&u, &ep) - dot(&u, &en)));
                                for k in 0..d {
                                    let gu = -c * (ep[k] - en[k]) + 2.0 * l2 * u[k];
                                    let gp = -c * u[k] + 2.0 * l2 * ep[k];
                                    let gn = c * u[k] + 2.0 * l2 * en[k];
                                    table[item * d + k] -= lr * gp;
                                    table[neg * d + k] -= lr * gn;
                                    u[k] -= lr * gu;
                                }
                            }
                        }
                        FeedbackKind::Explicit => {
                            let e = table[item * d..(item + 1) * d].to_vec();
                            let err = dot(&u, &e) - rating;
                            for k in 0..d {
                                let gu = 2.0 * err * e[k];
                                table[item * d + k] -= lr * 2.0 * err * u[k];
                                u[k] -= lr * gu;
                            }
                        }
                    }
                    Ok(())
                },
            )?;
            self.user_vecs[dev] = u;
            locals.push((table, data.num_samples()));
        }

        let counts: Vec<usize> = locals.iter().map(|(_, c)| *c).collect();
        let weights = aggregation_weights(&counts);
        let mut theta = vec![0.0; self.theta.len()];
        for ((table, _), p) in locals.iter().zip(weights) {
            for (t, v) in theta.iter_mut().zip(table) {
                *t += p * v;
            }
        }
        self.theta = theta;
        self.round = round;
        Ok(())
    }
}
