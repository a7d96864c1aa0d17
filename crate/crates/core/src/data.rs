//! Interaction data: CSV ingestion, synthetic low-rank generation, leave-k-out
//! splitting, negative sampling and per-user device partitioning.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackKind {
    Implicit,
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub kind: FeedbackKind,
    pub records: Vec<Interaction>,
    /// Raw user id for each dense user index.
    pub user_ids: Vec<u64>,
    /// Raw item id for each dense item index.
    pub item_ids: Vec<u64>,
    pub duplicates_dropped: usize,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> FairError {
    FairError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn densify(map: &mut HashMap<u64, usize>, ids: &mut Vec<u64>, raw: u64) -> usize {
    *map.entry(raw).or_insert_with(|| {
        ids.push(raw);
        ids.len() - 1
    })
}

/// Reads `user_id,item_id[,rating]` with a header line. Ids are densified in
/// order of first appearance; repeated `(user, item)` rows keep the first.
pub fn load_csv(path: &Path, kind: FeedbackKind) -> Result<InteractionDataset> {
    let file = std::fs::File::open(path).map_err(|source| FairError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_rating = match names.as_slice() {
        ["user_id", "item_id"] => false,
        ["user_id", "item_id", "rating"] => true,
        _ => {
            return Err(parse_err(
                path,
                1,
                format!(
                    "expected header user_id,item_id[,rating], found {}",
                    names.join(",")
                ),
            ))
        }
    };
    if kind == FeedbackKind::Explicit && !has_rating {
        return Err(parse_err(
            path,
            1,
            "explicit feedback requires a rating column",
        ));
    }

    let mut user_map = HashMap::new();
    let mut item_map = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    let mut duplicates_dropped = 0;

    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let expected = if has_rating { 3 } else { 2 };
        if row.len() != expected {
            return Err(parse_err(
                path,
                line,
                format!("expected {expected} fields, found {}", row.len()),
            ));
        }
        let field = |i: usize, name: &str| -> Result<u64> {
            row[i]
                .parse::<u64>()
                .map_err(|_| parse_err(path, line, format!("non-numeric {name} {:?}", &row[i])))
        };
        let raw_user = field(0, "user_id")?;
        let raw_item = field(1, "item_id")?;
        let rating = if has_rating {
            let r: f64 = row[2]
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric rating {:?}", &row[2])))?;
            if !r.is_finite() {
                return Err(parse_err(path, line, "rating must be finite"));
            }
            r
        } else {
            1.0
        };
        let user = densify(&mut user_map, &mut user_ids, raw_user);
        let item = densify(&mut item_map, &mut item_ids, raw_item);
        if !seen.insert((user, item)) {
            duplicates_dropped += 1;
            continue;
        }
        records.push(Interaction {
            user,
            item,
            rating: if kind == FeedbackKind::Implicit {
                1.0
            } else {
                rating
            },
            split: Split::Train,
        });
    }
    if duplicates_dropped > 0 {
        log::warn!(
            "{}: dropped {duplicates_dropped} duplicate rows",
            path.display()
        );
    }
    Ok(InteractionDataset {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        kind,
        records,
        user_ids,
        item_ids,
        duplicates_dropped,
    })
}

/// Writes `raw_id,dense_id` rows.
pub fn write_id_map<W: Write>(ids: &[u64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| FairError::invalid(format!("writing id map: {e}"));
    w.write_record(["raw_id", "dense_id"]).map_err(io)?;
    for (dense, raw) in ids.iter().enumerate() {
        w.write_record([raw.to_string(), dense.to_string()])
            .map_err(io)?;
    }
    w.flush()
        .map_err(|e| FairError::invalid(format!("writing id map: {e}")))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    pub density: f64,
    #[serde(default)]
    pub noise_sd: f64,
    pub seed: u64,
    pub kind: FeedbackKind,
}

/// Ground-truth factors behind a synthetic dataset, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFactors {
    pub latent_dim: usize,
    pub users: Vec<f64>,
    pub items: Vec<f64>,
}

impl SynthFactors {
    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        let k = self.latent_dim;
        crate::model::dot(
            &self.users[user * k..(user + 1) * k],
            &self.items[item * k..(item + 1) * k],
        )
    }
}

pub fn synth_lowrank(params: &SynthParams) -> Result<InteractionDataset> {
    synth_lowrank_with_factors(params).map(|(ds, _)| ds)
}

/// Draws `U`, `V` from a seeded standard normal. Explicit data observes
/// `UVᵀ + noise` on a Bernoulli(density) mask; implicit data marks each user's
/// top `ceil(density * items)` items by `UVᵀ` as positives.
pub fn synth_lowrank_with_factors(
    params: &SynthParams,
) -> Result<(InteractionDataset, SynthFactors)> {
    let &SynthParams {
        num_users,
        num_items,
        latent_dim,
        density,
        noise_sd,
        seed,
        kind,
    } = params;
    if num_users == 0 || num_items == 0 || latent_dim == 0 {
        return Err(FairError::invalid("synthetic sizes must be positive"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(FairError::invalid(format!(
            "density {density} not in (0, 1]"
        )));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(FairError::invalid(format!(
            "noise_sd {noise_sd} must be >= 0"
        )));
    }

    let mut rng = seed::rng_for(seed, &[]);
    let mut normal =
        |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let factors = SynthFactors {
        latent_dim,
        users: normal(num_users * latent_dim),
        items: normal(num_items * latent_dim),
    };

    let mut records = Vec::new();
    match kind {
        FeedbackKind::Explicit => {
            for user in 0..num_users {
                for item in 0..num_items {
                    let keep = density >= 1.0 || rng.random::<f64>() < density;
                    let noise: f64 = rng.sample(StandardNormal);
                    if keep {
                        records.push(Interaction {
                            user,
                            item,
                            rating: factors.affinity(user, item) + noise_sd * noise,
                            split: Split::Train,
                        });
                    }
                }
            }
        }
        FeedbackKind::Implicit => {
            let per_user = ((density * num_items as f64) - 1e-9).ceil().max(1.0) as usize;
            let per_user = per_user.min(num_items);
            for user in 0..num_users {
                let mut order: Vec<(f64, usize)> = (0..num_items)
                    .map(|item| (factors.affinity(user, item), item))
                    .collect();
                order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let mut top: Vec<usize> = order[..per_user].iter().map(|&(_, i)| i).collect();
                top.sort_unstable();
                records.extend(top.into_iter().map(|item| Interaction {
                    user,
                    item,
                    rating: 1.0,
                    split: Split::Train,
                }));
            }
        }
    }
    let ds = InteractionDataset {
        num_users,
        num_items,
        kind,
        records,
        user_ids: (0..num_users as u64).collect(),
        item_ids: (0..num_items as u64).collect(),
        duplicates_dropped: 0,
    };
    Ok((ds, factors))
}

impl InteractionDataset {
    /// Moves `holdout_per_user` uniformly chosen records of every user to the
    /// test split. The choice for user `u` depends only on `(seed, u)`.
    pub fn split_train_test(&self, holdout_per_user: usize, seed: u64) -> Result<Self> {
        let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); self.num_users];
        for (idx, r) in self.records.iter().enumerate() {
            by_user[r.user].push(idx);
        }
        let mut out = self.clone();
        for r in &mut out.records {
            r.split = Split::Train;
        }
        if holdout_per_user == 0 {
            return Ok(out);
        }
        for (user, idxs) in by_user.iter().enumerate() {
            if idxs.len() <= holdout_per_user {
                return Err(FairError::TooFewInteractions {
                    user,
                    available: idxs.len(),
                    required: holdout_per_user,
                });
            }
            let mut rng = seed::rng_for(seed, &[user as u64]);
            for pick in index::sample(&mut rng, idxs.len(), holdout_per_user) {
                out.records[idxs[pick]].split = Split::Test;
            }
        }
        Ok(out)
    }

    pub fn train(&self) -> impl Iterator<Item = &Interaction> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Interaction> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    /// Sorted item lists per user for one split.
    pub fn items_by_user(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for r in self.records.iter().filter(|r| r.split == split) {
            out[r.user].push(r.item);
        }
        for v in &mut out {
            v.sort_unstable();
        }
        out
    }

    /// Uniform negatives for `user`: items outside the user's train positives.
    pub fn sample_negatives(
        &self,
        user: usize,
        count: usize,
        rng: &mut seed::Rng,
    ) -> Result<Vec<usize>> {
        if user >= self.num_users {
            return Err(FairError::OutOfRange {
                index: user,
                limit: self.num_users,
            });
        }
        let mut positives: Vec<usize> = self
            .train()
            .filter(|r| r.user == user)
            .map(|r| r.item)
            .collect();
        positives.sort_unstable();
        sample_negatives(&positives, self.num_items, count, rng)
            .map_err(|_| FairError::NoNegatives { user })
    }

    /// One device per user; device `i` holds exactly user `i`'s train records.
    pub fn partition(&self) -> DevicePartition {
        let mut devices: Vec<DeviceData> = (0..self.num_users)
            .map(|user| DeviceData {
                user,
                train: Vec::new(),
                positives: Vec::new(),
            })
            .collect();
        for r in self.train() {
            devices[r.user].train.push((r.item, r.rating));
        }
        for d in &mut devices {
            d.positives = d.train.iter().map(|&(i, _)| i).collect();
            d.positives.sort_unstable();
        }
        DevicePartition {
            num_items: self.num_items,
            kind: self.kind,
            devices,
        }
    }
}

/// Draws `count` items uniformly from `[0, num_items) \ positives`.
/// `positives` must be sorted and deduplicated.
pub fn sample_negatives(
    positives: &[usize],
    num_items: usize,
    count: usize,
    rng: &mut seed::Rng,
) -> Result<Vec<usize>> {
    let available = num_items.saturating_sub(positives.len());
    if count == 0 {
        return Ok(Vec::new());
    }
    if available == 0 {
        return Err(FairError::invalid("every item is a positive"));
    }
    Ok((0..count)
        .map(|_| nth_non_positive(positives, rng.random_range(0..available)))
        .collect())
}

/// The `rank`-th (0-based) item not in sorted `positives`.
fn nth_non_positive(positives: &[usize], rank: usize) -> usize {
    let mut item = rank;
    for &p in positives {
        if p <= item {
            item += 1;
        } else {
            break;
        }
    }
    item
}

#[derive(Debug, Clone)]
pub struct DeviceData {
    pub user: usize,
    /// `(item, rating)` train records in dataset order.
    pub train: Vec<(usize, f64)>,
    /// Sorted train items.
    pub positives: Vec<usize>,
}

impl DeviceData {
    pub fn num_samples(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone)]
pub struct DevicePartition {
    pub num_items: usize,
    pub kind: FeedbackKind,
    pub devices: Vec<DeviceData>,
}

impl DevicePartition {
    pub fn sample_counts(&self) -> Vec<usize> {
        self.devices.iter().map(DeviceData::num_samples).collect()
    }
}
