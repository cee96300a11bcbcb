//! Label-skew partitioning: every client holds exactly `S` of the `m` classes.

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Class draws are repeated until every class has at least one holder.
pub const MAX_DRAW_ATTEMPTS: usize = 100;

/// Fraction of each client's per-class samples held out for testing.
const TEST_FRACTION: f64 = 0.2;

/// Each holder of a class receives at least this many of its samples, so the
/// stratified split can place one in train and one in test.
const MIN_PER_HOLDER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Allocation {
    /// Equal split of each class among its holders.
    Uniform,
    /// Holder shares proportional to per-client `LogNormal(0, sigma^2)` weights.
    LogNormal { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub allocation: Allocation,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Partition("need at least one client".into()));
        }
        if self.classes_per_client == 0 || self.classes_per_client > num_classes {
            return Err(Error::Partition(format!(
                "classes per client must be in 1..={num_classes}, got {}",
                self.classes_per_client
            )));
        }
        if let Allocation::LogNormal { sigma } = self.allocation {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::Partition(format!("log-normal sigma must be finite and >= 0, got {sigma}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Sorted classes held by this client.
    pub class_set: Vec<usize>,
}

/// Splits `counts_total` samples over `weights`: proportional shares,
/// floored, the remainder going to the largest fractional parts (lowest index
/// on ties); clients below `min_each` are then topped up one sample at a time
/// from the currently largest client.
fn allocate(counts_total: usize, weights: &[f64], min_each: usize) -> Result<Vec<usize>> {
    let n = weights.len();
    if counts_total < n * min_each {
        return Err(Error::Partition(format!("{counts_total} samples cannot give {n} clients {min_each} each")));
    }
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| counts_total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(counts_total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    for i in 0..n {
        while counts[i] < min_each {
            let donor = (0..n).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("non-empty");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

fn lognormal_weights<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0; n]);
    }
    let dist = LogNormal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Per-client sample counts drawn from log-normal weights; every client gets
/// at least one sample and the counts sum to `counts_total`.
pub fn lognormal_allocate<R: Rng + ?Sized>(counts_total: usize, num_clients: usize, sigma: f64, rng: &mut R) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::InvalidParameter("need at least one client".into()));
    }
    if counts_total < num_clients {
        return Err(Error::Partition(format!("{counts_total} samples for {num_clients} clients")));
    }
    let weights = lognormal_weights(num_clients, sigma, rng)?;
    allocate(counts_total, &weights, 1)
}

/// Assigns each client `S` distinct classes and divides every class's samples
/// among its holders, then splits each client's share 80/20 into train/test
/// per class.
pub fn partition_by_classes<R: Rng + ?Sized>(data: &Dataset, spec: &PartitionSpec, rng: &mut R) -> Result<Vec<ClientShard>> {
    let m = data.num_classes();
    spec.validate(m)?;
    let n = spec.num_clients;

    let mut class_sets = None;
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let sets: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let mut s = sample(rng, m, spec.classes_per_client).into_vec();
                s.sort_unstable();
                s
            })
            .collect();
        let mut held = vec![false; m];
        sets.iter().flatten().for_each(|&c| held[c] = true);
        if held.iter().all(|&h| h) {
            class_sets = Some(sets);
            break;
        }
    }
    let class_sets = class_sets.ok_or_else(|| {
        Error::Partition(format!(
            "some class had no holder after {MAX_DRAW_ATTEMPTS} draws ({n} clients x {} classes of {m})",
            spec.classes_per_client
        ))
    })?;

    let weights = match spec.allocation {
        Allocation::Uniform => vec![1.0; n],
        Allocation::LogNormal { sigma } => lognormal_weights(n, sigma, rng)?,
    };

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let mut train_idx: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut test_idx: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (class, samples) in by_class.iter().enumerate() {
        let holders: Vec<usize> = (0..n).filter(|&k| class_sets[k].binary_search(&class).is_ok()).collect();
        let w: Vec<f64> = holders.iter().map(|&k| weights[k]).collect();
        let counts = allocate(samples.len(), &w, MIN_PER_HOLDER)
            .map_err(|_| Error::Partition(format!("class {class} has {} samples for {} holders", samples.len(), holders.len())))?;
        let mut start = 0;
        for (&k, &count) in holders.iter().zip(&counts) {
            let chunk = &samples[start..start + count];
            start += count;
            let n_test = ((count as f64 * TEST_FRACTION).round() as usize).clamp(1, count - 1);
            test_idx[k].extend_from_slice(&chunk[..n_test]);
            train_idx[k].extend_from_slice(&chunk[n_test..]);
        }
    }

    Ok((0..n)
        .map(|k| ClientShard {
            client_id: k,
            train: data.subset(&train_idx[k]),
            test: data.subset(&test_idx[k]),
            class_set: class_sets[k].clone(),
        })
        .collect())
}

/// Empirical label distribution of a shard (train and test together).
fn label_distribution(shard: &ClientShard) -> Vec<f64> {
    let mut counts = shard.train.class_counts();
    for (c, t) in counts.iter_mut().zip(shard.test.class_counts()) {
        *c += t;
    }
    let total: usize = counts.iter().sum();
    counts.into_iter().map(|c| c as f64 / total.max(1) as f64).collect()
}

/// `sum_c min(p_a(c), p_b(c))`: 1 for identical label distributions, 0 for disjoint ones.
pub fn label_overlap(a: &ClientShard, b: &ClientShard) -> f64 {
    label_distribution(a).iter().zip(label_distribution(b)).map(|(x, y)| x.min(y)).sum()
}

pub fn mean_pairwise_overlap(shards: &[ClientShard]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..shards.len() {
        for j in i + 1..shards.len() {
            total += label_overlap(&shards[i], &shards[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        1.0
    } else {
        total / pairs as f64
    }
}

/// CSV manifest: `client_id,class_set,train_count,test_count`, with the
/// class set written as `;`-separated ids.
pub fn write_manifest<W: Write>(mut w: W, shards: &[ClientShard]) -> Result<()> {
    writeln!(w, "client_id,class_set,train_count,test_count")?;
    for s in shards {
        let classes: Vec<String> = s.class_set.iter().map(usize::to_string).collect();
        writeln!(w, "{},{},{},{}", s.client_id, classes.join(";"), s.train.len(), s.test.len())?;
    }
    Ok(())
}
