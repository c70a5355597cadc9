//! Splitting a dataset into disjoint client shards.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::Dataset;

/// Disjoint shards covering the dataset, with weights `alpha_i = |D_i| / |D|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub alpha: Vec<f64>,
}

impl Partition {
    /// Builds a partition from shards, computing the weights.
    pub fn from_shards(shards: Vec<Vec<usize>>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::invalid("shards", "need at least one client"));
        }
        if shards.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("shards", "every shard must be nonempty"));
        }
        let alpha = alpha_from_sizes(&shards);
        Ok(Self { shards, alpha })
    }

    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    /// Checks disjointness and coverage of `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for s in &self.shards {
            if s.is_empty() {
                return Err(Error::invalid("shards", "empty shard"));
            }
            for &i in s {
                if i >= n || seen[i] {
                    return Err(Error::invalid("shards", format!("index {i} repeated or out of range")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("shards", "shards do not cover the dataset"));
        }
        Ok(())
    }
}

fn alpha_from_sizes(shards: &[Vec<usize>]) -> Vec<f64> {
    let total: usize = shards.iter().map(Vec::len).sum();
    shards
        .iter()
        .map(|s| s.len() as f64 / total as f64)
        .collect()
}

fn check_clients(n: usize, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("m", "need at least one client"));
    }
    if m > n {
        return Err(Error::MoreClientsThanSamples);
    }
    Ok(())
}

/// Cuts `order` into consecutive chunks of the given sizes.
fn cut(order: &[usize], sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        out.push(order[at..at + s].to_vec());
        at += s;
    }
    out
}

/// Sizes differing by at most one, larger ones first.
fn near_equal(n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| n / m + usize::from(i < n % m)).collect()
}

/// Seeded uniform shuffle split into `m` near-equal shards.
pub fn partition_iid(dataset: &Dataset, m: usize, seed: u64) -> Result<Partition> {
    let n = dataset.len();
    check_clients(n, m)?;
    let mut order = dataset.all_indices();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Partition::from_shards(cut(&order, &near_equal(n, m)))
}

/// Each client receives samples from `s` distinct classes.
///
/// Classes are assigned round-robin over a seeded class permutation: when
/// there are at least as many clients as classes, client `i` takes the `s`
/// consecutive classes starting at position `i` (neighbouring clients overlap);
/// otherwise client `i` takes the `s` classes starting at position `i * s`.
/// A class held by several clients is split between them in near-equal parts.
pub fn partition_label_skew(dataset: &Dataset, m: usize, s: usize, seed: u64) -> Result<Partition> {
    let labels = dataset.labels().ok_or(Error::LabelsRequired)?;
    let k = dataset.classes().ok_or(Error::LabelsRequired)?;
    let n = dataset.len();
    check_clients(n, m)?;
    if s == 0 || s > k {
        return Err(Error::invalid("s", format!("must lie in [1, {k}]")));
    }
    if m * s < k {
        return Err(Error::invalid("s", "m * s must cover every class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut rng);

    let stride = if m >= k { 1 } else { s };
    let client_classes: Vec<Vec<usize>> = (0..m)
        .map(|i| (0..s).map(|j| perm[(i * stride + j) % k]).collect())
        .collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    let mut shards = vec![Vec::new(); m];
    for (class, members) in by_class.iter().enumerate() {
        let holders: Vec<usize> = (0..m).filter(|&i| client_classes[i].contains(&class)).collect();
        if holders.is_empty() {
            return Err(Error::invalid("s", format!("class {class} assigned to no client")));
        }
        for (h, part) in holders.iter().zip(cut(members, &near_equal(members.len(), holders.len()))) {
            shards[*h].extend(part);
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    if shards.iter().any(Vec::is_empty) {
        return Err(Error::invalid("s", "a client received no samples"));
    }
    Partition::from_shards(shards)
}

/// Shard sizes in a geometric progression whose largest/smallest ratio is
/// `ratio`; samples are assigned at random.
pub fn partition_quantity_skew(dataset: &Dataset, m: usize, ratio: f64, seed: u64) -> Result<Partition> {
    let n = dataset.len();
    check_clients(n, m)?;
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::invalid("ratio", "must be finite and at least 1"));
    }
    let step = if m > 1 { ratio.powf(1.0 / (m - 1) as f64) } else { 1.0 };
    let weights: Vec<f64> = (0..m).map(|i| step.powi(i as i32)).collect();
    let unit = n as f64 / weights.iter().sum::<f64>();
    let mut sizes: Vec<usize> = weights.iter().map(|w| (w * unit).round() as usize).collect();
    // Rounding drift goes to the largest shard.
    let assigned: usize = sizes.iter().sum();
    let last = m - 1;
    if assigned > n {
        sizes[last] = sizes[last].checked_sub(assigned - n).ok_or(Error::RatioTooExtreme)?;
    } else {
        sizes[last] += n - assigned;
    }
    if sizes.contains(&0) {
        return Err(Error::RatioTooExtreme);
    }
    let mut order = dataset.all_indices();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Partition::from_shards(cut(&order, &sizes))
}
