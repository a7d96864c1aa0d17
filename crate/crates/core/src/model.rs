//! GMF-style collaborative filtering model whose item table lives in a subspace.
//!
//! The item table is a virtual `num_items x dim` matrix flattened row-major
//! into `theta = S psi`. Only `psi` and the rows touched by the current step
//! are ever resident.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{FairError, Result};
use crate::subspace::Subspace;

/// Default L2 coefficient on the embeddings touched by a BPR step.
pub const DEFAULT_L2: f64 = 1e-6;

#[derive(Debug, Default)]
struct MeterInner {
    current: AtomicUsize,
    peak: AtomicUsize,
}

/// Counts resident parameter values (f64 slots) held by a model, and the
/// high-water mark.
#[derive(Debug, Clone, Default)]
pub struct ParamMeter(Arc<MeterInner>);

impl ParamMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> usize {
        self.0.current.load(Ordering::Relaxed)
    }

    pub fn peak(&self) -> usize {
        self.0.peak.load(Ordering::Relaxed)
    }

    fn add(&self, n: usize) {
        let now = self.0.current.fetch_add(n, Ordering::Relaxed) + n;
        self.0.peak.fetch_max(now, Ordering::Relaxed);
    }

    fn sub(&self, n: usize) {
        self.0.current.fetch_sub(n, Ordering::Relaxed);
    }

    pub fn buffer(&self, data: Vec<f64>) -> TrackedBuf {
        self.add(data.len());
        TrackedBuf {
            data,
            meter: self.clone(),
        }
    }

    pub fn zeros(&self, len: usize) -> TrackedBuf {
        self.buffer(vec![0.0; len])
    }
}

/// A parameter buffer whose length is charged to a [`ParamMeter`] while alive.
#[derive(Debug)]
pub struct TrackedBuf {
    data: Vec<f64>,
    meter: ParamMeter,
}

impl TrackedBuf {
    pub fn into_vec(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }
}

impl Drop for TrackedBuf {
    fn drop(&mut self) {
        self.meter.sub(self.data.len());
    }
}

impl Deref for TrackedBuf {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for TrackedBuf {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[derive(Debug)]
pub struct HashedEmbeddingTable {
    num_items: usize,
    dim: usize,
    subspace: Subspace,
    psi: TrackedBuf,
    meter: ParamMeter,
}

impl HashedEmbeddingTable {
    pub fn new(num_items: usize, dim: usize, subspace: Subspace, psi: Vec<f64>) -> Result<Self> {
        if dim == 0 || num_items == 0 {
            return Err(FairError::invalid("embedding table must be non-empty"));
        }
        let n = num_items
            .checked_mul(dim)
            .ok_or_else(|| FairError::invalid("embedding table size overflows"))?;
        if subspace.n() != n {
            return Err(FairError::DimensionMismatch {
                expected: n,
                actual: subspace.n(),
            });
        }
        if psi.len() != subspace.dim() {
            return Err(FairError::DimensionMismatch {
                expected: subspace.dim(),
                actual: psi.len(),
            });
        }
        let meter = ParamMeter::new();
        let psi = meter.buffer(psi);
        Ok(Self {
            num_items,
            dim,
            subspace,
            psi,
            meter,
        })
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn subspace(&self) -> &Subspace {
        &self.subspace
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn meter(&self) -> &ParamMeter {
        &self.meter
    }

    fn check_row(&self, row: usize) -> Result<()> {
        if row < self.num_items {
            Ok(())
        } else {
            Err(FairError::OutOfRange {
                index: row,
                limit: self.num_items,
            })
        }
    }

    /// Recovers embedding row `row` from `psi`.
    pub fn lookup(&self, row: usize) -> Result<Vec<f64>> {
        self.check_row(row)?;
        let mut out = vec![0.0; self.dim];
        self.subspace
            .recover_slice_into(&self.psi, row * self.dim, &mut out)?;
        Ok(out)
    }

    fn lookup_tracked(&self, row: usize) -> Result<TrackedBuf> {
        self.check_row(row)?;
        let mut out = self.meter.zeros(self.dim);
        self.subspace
            .recover_slice_into(&self.psi, row * self.dim, &mut out)?;
        Ok(out)
    }

    /// `psi -= lr * Sᵀ[row] * grad`.
    fn apply_row_grad(&mut self, row: usize, grad: &[f64], lr: f64) -> Result<()> {
        self.subspace
            .scatter_grad_scaled(row * self.dim, grad, -lr, &mut self.psi)
    }

    fn scatter_row_grad(&self, row: usize, grad: &[f64], accum: &mut [f64]) -> Result<()> {
        self.subspace.scatter_grad(row * self.dim, grad, accum)
    }

    pub fn into_psi(self) -> Vec<f64> {
        self.psi.into_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainExample {
    Implicit { pos: usize, neg: usize },
    Explicit { item: usize, rating: f64 },
}

/// Gradients of one example's loss. `psi` is dense over the subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub user: Vec<f64>,
    pub psi: Vec<f64>,
}

#[derive(Debug)]
pub struct ClientModel {
    user: TrackedBuf,
    items: HashedEmbeddingTable,
    learning_rate: f64,
    /// Multiplier on the learning rate for `psi` updates only.
    item_step_scale: f64,
    l2: f64,
}

impl ClientModel {
    pub fn new(
        user_vec: Vec<f64>,
        items: HashedEmbeddingTable,
        learning_rate: f64,
        l2: f64,
    ) -> Result<Self> {
        if user_vec.len() != items.dim {
            return Err(FairError::DimensionMismatch {
                expected: items.dim,
                actual: user_vec.len(),
            });
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(FairError::invalid(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(FairError::invalid(format!("l2 {l2} must be non-negative")));
        }
        let user = items.meter.buffer(user_vec);
        Ok(Self {
            user,
            items,
            learning_rate,
            item_step_scale: 1.0,
            l2,
        })
    }

    /// Scales the step applied to `psi` (the user vector keeps the base rate).
    pub fn with_item_step_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(FairError::invalid(format!(
                "item step scale {scale} must be positive"
            )));
        }
        self.item_step_scale = scale;
        Ok(self)
    }

    pub fn user_vec(&self) -> &[f64] {
        &self.user
    }

    pub fn items(&self) -> &HashedEmbeddingTable {
        &self.items
    }

    pub fn meter(&self) -> &ParamMeter {
        &self.items.meter
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        let ClientModel { user, items, .. } = self;
        (user.into_vec(), items.into_psi())
    }

    pub fn score(&self, item: usize) -> Result<f64> {
        let e = self.items.lookup_tracked(item)?;
        Ok(dot(&self.user, &e))
    }

    pub fn step(&mut self, ex: &TrainExample) -> Result<f64> {
        match *ex {
            TrainExample::Implicit { pos, neg } => self.bpr_step(pos, neg),
            TrainExample::Explicit { item, rating } => self.mse_step(item, rating),
        }
    }

    pub fn loss(&self, ex: &TrainExample) -> Result<f64> {
        Ok(self.gradients(ex)?.loss)
    }

    /// One SGD step on `-ln σ(s_pos - s_neg) + λ(‖u‖² + ‖e_pos‖² + ‖e_neg‖²)`.
    /// Returns the loss before the update.
    pub fn bpr_step(&mut self, pos: usize, neg: usize) -> Result<f64> {
        if pos == neg {
            return Err(FairError::invalid(
                "BPR positive and negative items coincide",
            ));
        }
        let mut ep = self.items.lookup_tracked(pos)?;
        let mut en = self.items.lookup_tracked(neg)?;
        let (loss, c) = bpr_terms(&self.user, &ep, &en, self.l2);
        let (lr, l2) = (self.learning_rate, self.l2);
        // Row buffers are overwritten with their own gradients; every
        // coordinate k only reads index k of the old values.
        for k in 0..self.user.len() {
            let (u, p, n) = (self.user[k], ep[k], en[k]);
            self.user[k] = u - lr * (-c * (p - n) + 2.0 * l2 * u);
            ep[k] = -c * u + 2.0 * l2 * p;
            en[k] = c * u + 2.0 * l2 * n;
        }
        let item_lr = lr * self.item_step_scale;
        self.items.apply_row_grad(pos, &ep, item_lr)?;
        self.items.apply_row_grad(neg, &en, item_lr)?;
        Ok(loss)
    }

    /// One SGD step on `(⟨u, e_item⟩ - rating)²`. Returns the loss before the update.
    pub fn mse_step(&mut self, item: usize, rating: f64) -> Result<f64> {
        if !rating.is_finite() {
            return Err(FairError::invalid("rating must be finite"));
        }
        let mut e = self.items.lookup_tracked(item)?;
        let err = dot(&self.user, &e) - rating;
        let lr = self.learning_rate;
        for k in 0..self.user.len() {
            let (u, v) = (self.user[k], e[k]);
            self.user[k] = u - lr * 2.0 * err * v;
            e[k] = 2.0 * err * u;
        }
        self.items
            .apply_row_grad(item, &e, lr * self.item_step_scale)?;
        Ok(err * err)
    }

    /// Analytic gradients with respect to the user vector and `psi`, without
    /// updating anything. Allocates a dense `psi`-sized gradient; diagnostic use.
    pub fn gradients(&self, ex: &TrainExample) -> Result<Gradients> {
        let mut psi = vec![0.0; self.items.psi.len()];
        let l2 = self.l2;
        match *ex {
            TrainExample::Implicit { pos, neg } => {
                if pos == neg {
                    return Err(FairError::invalid(
                        "BPR positive and negative items coincide",
                    ));
                }
                let ep = self.items.lookup(pos)?;
                let en = self.items.lookup(neg)?;
                let (loss, c) = bpr_terms(&self.user, &ep, &en, l2);
                let user = (0..ep.len())
                    .map(|k| -c * (ep[k] - en[k]) + 2.0 * l2 * self.user[k])
                    .collect();
                let gp: Vec<f64> = (0..ep.len())
                    .map(|k| -c * self.user[k] + 2.0 * l2 * ep[k])
                    .collect();
                let gn: Vec<f64> = (0..ep.len())
                    .map(|k| c * self.user[k] + 2.0 * l2 * en[k])
                    .collect();
                self.items.scatter_row_grad(pos, &gp, &mut psi)?;
                self.items.scatter_row_grad(neg, &gn, &mut psi)?;
                Ok(Gradients { loss, user, psi })
            }
            TrainExample::Explicit { item, rating } => {
                let e = self.items.lookup(item)?;
                let err = dot(&self.user, &e) - rating;
                let user = e.iter().map(|v| 2.0 * err * v).collect();
                let ge: Vec<f64> = self.user.iter().map(|u| 2.0 * err * u).collect();
                self.items.scatter_row_grad(item, &ge, &mut psi)?;
                Ok(Gradients {
                    loss: err * err,
                    user,
                    psi,
                })
            }
        }
    }
}

/// Loss and `σ(-(s_pos - s_neg))`, the magnitude of `dL/d(margin)`.
fn bpr_terms(u: &[f64], ep: &[f64], en: &[f64], l2: f64) -> (f64, f64) {
    let margin = dot(u, ep) - dot(u, en);
    let reg = l2 * (dot(u, u) + dot(ep, ep) + dot(en, en));
    (softplus(-margin) + reg, sigmoid(-margin))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
