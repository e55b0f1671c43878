//! Synthetic dataset generation, long-tail skewing, and the two non-iid
//! partition strategies (label sharding and Dirichlet allocation).
//!
//! All randomized operations are pure functions of their inputs and a seed.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A dataset of feature vectors with integer class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
            return Err(FedError::Input(format!(
                "label {} >= num_classes {}",
                s.label, num_classes
            )));
        }
        Ok(LabeledDataset {
            samples,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map(|s| s.features.len()).unwrap_or(0)
    }

    /// Per-class sample counts, indexed by class id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Classes with at least one sample, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(n, _)| n)
            .collect()
    }

    /// Sample indices grouped by class, preserving dataset order.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.label).or_default().push(i);
        }
        map
    }

    /// Write the canonical CSV interchange form: a header line
    /// `num_classes,dim,count` followed by one row per sample holding `dim`
    /// reals and the integer label.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{},{},{}", self.num_classes, self.dim(), self.len())?;
        for s in &self.samples {
            for f in &s.features {
                // {:?} prints the shortest representation that round-trips.
                write!(out, "{:?},", f)?;
            }
            writeln!(out, "{}", s.label)?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let reader = BufReader::new(input);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| FedError::Input("empty dataset file".into()))??;
        let parts: Vec<&str> = header.trim().split(',').collect();
        if parts.len() != 3 {
            return Err(FedError::Input("bad dataset header".into()));
        }
        let num_classes: usize = parts[0]
            .parse()
            .map_err(|_| FedError::Input("bad num_classes in header".into()))?;
        let dim: usize = parts[1]
            .parse()
            .map_err(|_| FedError::Input("bad dim in header".into()))?;
        let count: usize = parts[2]
            .parse()
            .map_err(|_| FedError::Input("bad count in header".into()))?;
        let mut samples = Vec::with_capacity(count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(FedError::Input(format!(
                    "row has {} fields, expected {}",
                    fields.len(),
                    dim + 1
                )));
            }
            let features: Vec<f64> = fields[..dim]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| FedError::Input("bad feature value".into()))?;
            let label: usize = fields[dim]
                .parse()
                .map_err(|_| FedError::Input("bad label value".into()))?;
            samples.push(Sample { features, label });
        }
        if samples.len() != count {
            return Err(FedError::Input(format!(
                "header promised {} rows, found {}",
                count,
                samples.len()
            )));
        }
        LabeledDataset::new(samples, num_classes)
    }

    pub fn write_csv_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file)
    }
}

/// Which non-iid partition strategy to use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PartitionStrategy {
    /// Label-sorted equal shards, `s` shards (hence at most `s` classes) per client.
    Sharding { classes_per_client: usize },
    /// Per-class Dirichlet(alpha) allocation across clients.
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub strategy: PartitionStrategy,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients < 1 {
            return Err(FedError::Config("num_clients must be >= 1".into()));
        }
        match self.strategy {
            PartitionStrategy::Sharding { classes_per_client } => {
                if classes_per_client == 0 || classes_per_client > num_classes {
                    return Err(FedError::Config(format!(
                        "classes_per_client must be in [1, {num_classes}]"
                    )));
                }
            }
            PartitionStrategy::Dirichlet { alpha } => {
                if alpha <= 0.0 {
                    return Err(FedError::Config("alpha must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<Vec<LabeledDataset>> {
        self.validate(ds.num_classes)?;
        match self.strategy {
            PartitionStrategy::Sharding { classes_per_client } => {
                partition_sharding(ds, self.num_clients, classes_per_client, self.seed)
            }
            PartitionStrategy::Dirichlet { alpha } => {
                partition_dirichlet(ds, self.num_clients, alpha, self.seed)
            }
        }
    }
}

/// Global long-tail profile: target imbalance ratio and which classes are
/// dominant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewProfile {
    /// Imbalance ratio `min_i n_i / max_i n_i`, in `(0, 1]`.
    pub gamma: f64,
    /// Permutation of class ids; earlier classes keep more samples.
    pub ordering: Vec<usize>,
}

impl SkewProfile {
    pub fn identity_ordering(gamma: f64, num_classes: usize) -> Self {
        SkewProfile {
            gamma,
            ordering: (0..num_classes).collect(),
        }
    }
}

/// Deterministic Gaussian blob dataset: `num_classes` clusters with centers
/// kept at pairwise distance >= 4 * spread.
pub fn gen_blobs(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(FedError::Config("gen_blobs needs at least 2 classes".into()));
    }
    if per_class < 1 {
        return Err(FedError::Config("per_class must be >= 1".into()));
    }
    if spread <= 0.0 {
        return Err(FedError::Config("spread must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dist = 4.0 * spread;
    // Centers come from a wide Gaussian; retries widen the scale further.
    let mut centers: Option<Vec<Vec<f64>>> = None;
    for attempt in 0..32 {
        // Two points drawn per-coordinate from N(0, s) sit at typical
        // distance s * sqrt(2 * dim); aim for ~8 * spread so classes are
        // separable but genuinely overlap at the tails, then widen on retry.
        let scale = spread * 8.0 / (2.0 * dim as f64).sqrt() * (1.0 + attempt as f64 * 0.5);
        let normal = Normal::new(0.0, scale).expect("valid normal");
        let candidate: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| (0..dim).map(|_| rng.sample(normal)).collect())
            .collect();
        let ok = (0..num_classes).all(|i| {
            (i + 1..num_classes).all(|j| {
                let d2: f64 = candidate[i]
                    .iter()
                    .zip(&candidate[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                d2.sqrt() >= min_dist
            })
        });
        if ok {
            centers = Some(candidate);
            break;
        }
    }
    let centers = centers.ok_or_else(|| {
        FedError::Generation(format!(
            "could not place {num_classes} centers at pairwise distance >= {min_dist} in dim {dim} after 32 attempts"
        ))
    })?;
    let noise = Normal::new(0.0, spread).expect("valid normal");
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let features: Vec<f64> = center.iter().map(|c| c + rng.sample(noise)).collect();
            samples.push(Sample { features, label });
        }
    }
    LabeledDataset::new(samples, num_classes)
}

/// True cluster centers for a `gen_blobs` call; used by the nearest-centroid
/// oracle in tests and by calibration.
pub fn blob_centers(ds: &LabeledDataset) -> BTreeMap<usize, Vec<f64>> {
    let by_class = ds.indices_by_class();
    let dim = ds.dim();
    let mut centers = BTreeMap::new();
    for (class, idxs) in by_class {
        let mut c = vec![0.0; dim];
        for &i in &idxs {
            for (acc, v) in c.iter_mut().zip(&ds.samples[i].features) {
                *acc += v;
            }
        }
        for v in c.iter_mut() {
            *v /= idxs.len() as f64;
        }
        centers.insert(class, c);
    }
    centers
}

/// Subsample a balanced dataset down to an exponential long-tail profile:
/// the class at ordering rank `r` keeps `round(n_max * gamma^(r/(N-1)))`
/// samples. `gamma = 1` is the identity.
pub fn apply_longtail(
    ds: &LabeledDataset,
    profile: &SkewProfile,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(profile.gamma > 0.0 && profile.gamma <= 1.0) {
        return Err(FedError::Input("gamma must be in (0, 1]".into()));
    }
    let n = ds.num_classes;
    let mut ordering = profile.ordering.clone();
    ordering.sort_unstable();
    if ordering != (0..n).collect::<Vec<_>>() {
        return Err(FedError::Input(
            "skew ordering must be a permutation of class ids".into(),
        ));
    }
    let counts = ds.class_counts();
    let n_max = counts[0];
    if counts.iter().any(|c| *c != n_max) {
        return Err(FedError::Input(
            "apply_longtail requires equal per-class counts".into(),
        ));
    }
    if profile.gamma == 1.0 {
        return Ok(ds.clone());
    }
    let mut keep = vec![0usize; n];
    for (rank, &class) in profile.ordering.iter().enumerate() {
        let frac = if n > 1 {
            rank as f64 / (n as f64 - 1.0)
        } else {
            0.0
        };
        let k = (n_max as f64 * profile.gamma.powf(frac)).round() as usize;
        if k < 1 {
            return Err(FedError::Input(format!(
                "long-tail profile leaves class {class} with zero samples"
            )));
        }
        keep[class] = k;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = ds.indices_by_class();
    let mut kept_indices = Vec::new();
    for (class, idxs) in by_class {
        let mut idxs = idxs;
        idxs.shuffle(&mut rng);
        idxs.truncate(keep[class]);
        idxs.sort_unstable();
        kept_indices.extend(idxs);
    }
    kept_indices.sort_unstable();
    let samples = kept_indices
        .into_iter()
        .map(|i| ds.samples[i].clone())
        .collect();
    LabeledDataset::new(samples, n)
}

/// Per-coordinate affine normalization fitted on one dataset and applied to
/// others, the usual train-fitted feature scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    /// Fit mean and standard deviation per coordinate. Constant coordinates
    /// get unit scale so they pass through unchanged.
    pub fn fit(ds: &LabeledDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(FedError::Input("cannot fit a standardizer on no data".into()));
        }
        let dim = ds.dim();
        let n = ds.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in &ds.samples {
            for (m, v) in mean.iter_mut().zip(&s.features) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for s in &ds.samples {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(&s.features) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        let samples = ds
            .samples
            .iter()
            .map(|s| {
                if s.features.len() != self.mean.len() {
                    return Err(FedError::Dimension(format!(
                        "sample dim {} != standardizer dim {}",
                        s.features.len(),
                        self.mean.len()
                    )));
                }
                Ok(Sample {
                    features: s
                        .features
                        .iter()
                        .zip(&self.mean)
                        .zip(&self.std)
                        .map(|((x, m), sd)| (x - m) / sd)
                        .collect(),
                    label: s.label,
                })
            })
            .collect::<Result<_>>()?;
        LabeledDataset::new(samples, ds.num_classes)
    }
}

/// `min_i n_i / max_i n_i` over nonzero class counts.
pub fn imbalance_ratio(counts: &[usize]) -> Result<f64> {
    let nonzero: Vec<usize> = counts.iter().copied().filter(|c| *c > 0).collect();
    if nonzero.is_empty() {
        return Err(FedError::Input("imbalance_ratio of empty counts".into()));
    }
    let min = *nonzero.iter().min().unwrap();
    let max = *nonzero.iter().max().unwrap();
    Ok(min as f64 / max as f64)
}

/// Largest-remainder apportionment of `total` units across `weights`,
/// guaranteeing exact totals. When `min_one` is set, every positive-weight
/// slot receives at least one unit (requires enough units).
fn apportion(total: usize, weights: &[f64], min_one: bool) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || total == 0 {
        return vec![0; weights.len()];
    }
    let mut base: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    for (i, w) in weights.iter().enumerate() {
        let exact = total as f64 * w / sum;
        let floor = exact.floor() as usize;
        base.push(floor);
        remainders.push((i, exact - floor as f64));
    }
    let assigned: usize = base.iter().sum();
    // Ties broken by index for determinism.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..total.saturating_sub(assigned) {
        base[remainders[k % remainders.len()].0] += 1;
    }
    if min_one {
        loop {
            let Some(zero_idx) = (0..weights.len()).find(|&i| weights[i] > 0.0 && base[i] == 0)
            else {
                break;
            };
            let donor = (0..weights.len())
                .max_by_key(|&i| base[i])
                .expect("nonempty");
            if base[donor] <= 1 {
                break;
            }
            base[donor] -= 1;
            base[zero_idx] += 1;
        }
    }
    base
}

/// Label-sorted sharding: the dataset is sorted by label, cut into `K*s`
/// contiguous shards that never cross a class boundary, and each client is
/// dealt `s` shards by a seeded shuffle.
pub fn partition_sharding(
    ds: &LabeledDataset,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let k = num_clients;
    let s = classes_per_client;
    if s == 0 || s > ds.num_classes {
        return Err(FedError::Input(format!(
            "classes_per_client {s} must be in [1, {}]",
            ds.num_classes
        )));
    }
    let total_shards = k * s;
    if total_shards > ds.len() {
        return Err(FedError::Input(format!(
            "cannot cut {} samples into {total_shards} nonempty shards",
            ds.len()
        )));
    }
    let by_class = ds.indices_by_class();
    if total_shards < by_class.len() {
        return Err(FedError::Input(format!(
            "{total_shards} shards cannot cover {} populated classes",
            by_class.len()
        )));
    }
    // Shard counts per class, proportional to class size, at least one per
    // populated class so every sample lands somewhere.
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let weights: Vec<f64> = classes.iter().map(|c| by_class[c].len() as f64).collect();
    let shards_per_class = apportion(total_shards, &weights, true);
    let mut shards: Vec<Vec<usize>> = Vec::with_capacity(total_shards);
    for (ci, class) in classes.iter().enumerate() {
        let idxs = &by_class[class];
        let n_shards = shards_per_class[ci].max(1);
        let chunks = apportion(idxs.len(), &vec![1.0; n_shards], true);
        let mut cursor = 0;
        for chunk in chunks {
            shards.push(idxs[cursor..cursor + chunk].to_vec());
            cursor += chunk;
        }
    }
    debug_assert_eq!(shards.len(), total_shards);
    let mut order: Vec<usize> = (0..shards.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut clients = Vec::with_capacity(k);
    for client in 0..k {
        let mut indices: Vec<usize> = order[client * s..(client + 1) * s]
            .iter()
            .flat_map(|&shard| shards[shard].iter().copied())
            .collect();
        indices.sort_unstable();
        let samples = indices.into_iter().map(|i| ds.samples[i].clone()).collect();
        clients.push(LabeledDataset::new(samples, ds.num_classes)?);
    }
    Ok(clients)
}

/// Dirichlet Distribution Allocation: for each class, a K-dimensional
/// Dirichlet(alpha) draw fixes that class's client proportions; counts use
/// largest-remainder rounding so per-class totals are exact. If some client
/// ends up empty the whole draw is retried (up to 10 times) before being
/// accepted with a warning.
pub fn partition_dirichlet(
    ds: &LabeledDataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if alpha <= 0.0 {
        return Err(FedError::Input("alpha must be > 0".into()));
    }
    let k = num_clients;
    let by_class = ds.indices_by_class();
    for retry in 0..=10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(retry.wrapping_mul(0x9e3779b97f4a7c15)));
        let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); k];
        for idxs in by_class.values() {
            let shares: Vec<f64> = if k == 1 {
                vec![1.0]
            } else {
                let dir = Dirichlet::new(&vec![alpha; k])
                    .map_err(|e| FedError::Input(format!("bad Dirichlet parameter: {e}")))?;
                rng.sample(dir)
            };
            let counts = apportion(idxs.len(), &shares, false);
            let mut shuffled = idxs.clone();
            shuffled.shuffle(&mut rng);
            let mut cursor = 0;
            for (client, count) in counts.iter().enumerate() {
                client_indices[client].extend_from_slice(&shuffled[cursor..cursor + count]);
                cursor += count;
            }
        }
        let empties = client_indices.iter().filter(|c| c.is_empty()).count();
        if empties > 0 && retry < 10 {
            continue;
        }
        if empties > 0 {
            log::warn!(
                "partition_dirichlet: {empties} empty client(s) remain after 10 re-seeds (alpha={alpha}, K={k})"
            );
        }
        let mut clients = Vec::with_capacity(k);
        for mut indices in client_indices {
            indices.sort_unstable();
            let samples = indices.into_iter().map(|i| ds.samples[i].clone()).collect();
            clients.push(LabeledDataset::new(samples, ds.num_classes)?);
        }
        return Ok(clients);
    }
    unreachable!()
}

/// Many/Medium/Few class groups by descending training-sample count:
/// top 20%, next 30%, remainder. Ties broken by ascending class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

pub fn class_groups(counts: &[usize]) -> ClassGroups {
    let n = counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let n_many = ((0.2 * n as f64).ceil() as usize).min(n);
    let n_medium = ((0.3 * n as f64).ceil() as usize).min(n - n_many);
    let mut many: Vec<usize> = order[..n_many].to_vec();
    let mut medium: Vec<usize> = order[n_many..n_many + n_medium].to_vec();
    let mut few: Vec<usize> = order[n_many + n_medium..].to_vec();
    many.sort_unstable();
    medium.sort_unstable();
    few.sort_unstable();
    ClassGroups { many, medium, few }
}

/// Draw a per-client test set from `pool` matching the class proportions of
/// `client_train`, for the own-distribution accuracy metric. Sampling is
/// without replacement within the pool's per-class lists and deterministic
/// in the seed.
pub fn matched_test_set(
    client_train: &LabeledDataset,
    pool: &LabeledDataset,
    seed: u64,
) -> Result<LabeledDataset> {
    let train_counts = client_train.class_counts();
    let pool_by_class = pool.indices_by_class();
    let target_total = client_train.len().min(pool.len());
    let weights: Vec<f64> = train_counts.iter().map(|c| *c as f64).collect();
    let wanted = apportion(target_total, &weights, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (class, want) in wanted.iter().enumerate() {
        if *want == 0 {
            continue;
        }
        let Some(avail) = pool_by_class.get(&class) else {
            continue;
        };
        let mut avail = avail.clone();
        avail.shuffle(&mut rng);
        avail.truncate(*want);
        for i in avail {
            samples.push(pool.samples[i].clone());
        }
    }
    LabeledDataset::new(samples, pool.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn balanced(n: usize, per_class: usize) -> LabeledDataset {
        let samples = (0..n)
            .flat_map(|label| {
                (0..per_class).map(move |i| Sample {
                    features: vec![label as f64, i as f64],
                    label,
                })
            })
            .collect();
        LabeledDataset::new(samples, n).unwrap()
    }

    fn multiset_key(s: &Sample) -> (usize, Vec<u64>) {
        (s.label, s.features.iter().map(|f| f.to_bits()).collect())
    }

    fn assert_exact_partition(ds: &LabeledDataset, parts: &[LabeledDataset]) {
        let mut want: HashMap<(usize, Vec<u64>), isize> = HashMap::new();
        for s in &ds.samples {
            *want.entry(multiset_key(s)).or_default() += 1;
        }
        for p in parts {
            for s in &p.samples {
                *want.entry(multiset_key(s)).or_default() -= 1;
            }
        }
        assert!(want.values().all(|v| *v == 0), "not an exact partition");
    }

    #[test]
    fn blobs_count_contract() {
        let ds = gen_blobs(2, 2, 10, 1.0, 42).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.class_counts(), vec![10, 10]);
    }

    #[test]
    fn blobs_deterministic_in_seed() {
        let a = gen_blobs(3, 4, 5, 0.5, 7).unwrap();
        let b = gen_blobs(3, 4, 5, 0.5, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_blobs(3, 4, 5, 0.5, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blobs_nearest_centroid_oracle() {
        let ds = gen_blobs(10, 32, 500, 1.0, 3).unwrap();
        let centers = blob_centers(&ds);
        let mut correct = 0usize;
        for s in &ds.samples {
            let pred = centers
                .iter()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a
                        .iter()
                        .zip(&s.features)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    let db: f64 = b
                        .iter()
                        .zip(&s.features)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(c, _)| *c)
                .unwrap();
            if pred == s.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "nearest-centroid oracle accuracy {acc}");
    }

    #[test]
    fn longtail_identity_at_gamma_one() {
        let ds = balanced(4, 10);
        let profile = SkewProfile::identity_ordering(1.0, 4);
        let out = apply_longtail(&ds, &profile, 1).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn longtail_exponential_profile() {
        let ds = balanced(3, 100);
        let profile = SkewProfile::identity_ordering(0.25, 3);
        let out = apply_longtail(&ds, &profile, 1).unwrap();
        assert_eq!(out.class_counts(), vec![100, 50, 25]);
    }

    #[test]
    fn longtail_endpoints_at_gamma_tenth() {
        let ds = balanced(10, 500);
        let profile = SkewProfile::identity_ordering(0.1, 10);
        let out = apply_longtail(&ds, &profile, 9).unwrap();
        let counts = out.class_counts();
        assert_eq!(counts[0], 500);
        assert_eq!(counts[9], 50);
        assert!((imbalance_ratio(&counts).unwrap() - 0.1).abs() < 1e-9);
        // Monotone in ordering rank.
        for w in counts.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn longtail_rejects_unbalanced_input() {
        let mut ds = balanced(3, 10);
        ds.samples.pop();
        let profile = SkewProfile::identity_ordering(0.5, 3);
        assert!(apply_longtail(&ds, &profile, 1).is_err());
    }

    #[test]
    fn sharding_single_client_gets_everything() {
        let ds = balanced(4, 6);
        let parts = partition_sharding(&ds, 1, 4, 0).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), ds.len());
    }

    #[test]
    fn sharding_class_bound_and_exact_partition() {
        let ds = balanced(10, 50);
        let parts = partition_sharding(&ds, 20, 4, 5).unwrap();
        assert_exact_partition(&ds, &parts);
        for p in &parts {
            assert!(p.present_classes().len() <= 4);
        }
        // With s < N at least one pair of clients must differ in label marginals.
        let some_differ = parts
            .iter()
            .any(|p| p.class_counts() != parts[0].class_counts());
        assert!(some_differ);
    }

    #[test]
    fn sharding_deterministic() {
        let ds = balanced(6, 20);
        let a = partition_sharding(&ds, 5, 3, 11).unwrap();
        let b = partition_sharding(&ds, 5, 3, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sharding_infeasible_errors() {
        let ds = balanced(2, 2);
        assert!(partition_sharding(&ds, 10, 2, 0).is_err());
    }

    #[test]
    fn dirichlet_concentration_limit_is_uniform() {
        let ds = balanced(10, 40);
        let parts = partition_dirichlet(&ds, 4, 1e6, 3).unwrap();
        assert_exact_partition(&ds, &parts);
        for p in &parts {
            let share = p.len() as f64 / ds.len() as f64;
            assert!((share - 0.25).abs() < 0.05, "share {share}");
        }
    }

    #[test]
    fn dirichlet_exact_per_class_totals() {
        let ds = balanced(5, 33);
        let parts = partition_dirichlet(&ds, 7, 0.3, 21).unwrap();
        assert_exact_partition(&ds, &parts);
        let mut totals = vec![0usize; 5];
        for p in &parts {
            for (c, n) in p.class_counts().iter().enumerate() {
                totals[c] += n;
            }
        }
        assert_eq!(totals, vec![33; 5]);
    }

    #[test]
    fn dirichlet_low_alpha_more_skew() {
        let ds = balanced(10, 30);
        let mean_max_share = |alpha: f64| {
            let mut acc = 0.0;
            let mut count = 0usize;
            for seed in 0..100 {
                let parts = partition_dirichlet(&ds, 10, alpha, seed).unwrap();
                for p in &parts {
                    if p.is_empty() {
                        continue;
                    }
                    let max = *p.class_counts().iter().max().unwrap();
                    acc += max as f64 / p.len() as f64;
                    count += 1;
                }
            }
            acc / count as f64
        };
        let skewed = mean_max_share(0.05);
        let mild = mean_max_share(0.4);
        assert!(
            skewed > mild,
            "expected more concentration at alpha=0.05 ({skewed}) than 0.4 ({mild})"
        );
    }

    #[test]
    fn imbalance_ratio_cases() {
        assert!((imbalance_ratio(&[500, 300, 50]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(imbalance_ratio(&[7, 7, 7]).unwrap(), 1.0);
        assert_eq!(imbalance_ratio(&[7]).unwrap(), 1.0);
        assert!(imbalance_ratio(&[]).is_err());
    }

    #[test]
    fn class_groups_ten_classes() {
        let counts: Vec<usize> = (0..10).map(|i| 100 - i * 10).collect();
        let g = class_groups(&counts);
        assert_eq!(g.many, vec![0, 1]);
        assert_eq!(g.medium, vec![2, 3, 4]);
        assert_eq!(g.few, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn class_groups_tie_break() {
        let g = class_groups(&[5, 5, 5, 5]);
        assert_eq!(g.many, vec![0]);
        assert_eq!(g.medium, vec![1, 2]);
        assert_eq!(g.few, vec![3]);
    }

    #[test]
    fn class_groups_sorted_oracle_on_longtail() {
        let ds = balanced(100, 40);
        let profile = SkewProfile::identity_ordering(0.05, 100);
        let out = apply_longtail(&ds, &profile, 2).unwrap();
        let counts = out.class_counts();
        let g = class_groups(&counts);
        assert_eq!(g.many.len(), 20);
        let mut order: Vec<usize> = (0..100).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut top20: Vec<usize> = order[..20].to_vec();
        top20.sort_unstable();
        assert_eq!(g.many, top20);
    }

    #[test]
    fn standardizer_zero_mean_unit_variance() {
        let ds = gen_blobs(4, 6, 50, 1.0, 3).unwrap();
        let sz = Standardizer::fit(&ds).unwrap();
        let out = sz.apply(&ds).unwrap();
        let n = out.len() as f64;
        for d in 0..out.dim() {
            let mean: f64 = out.samples.iter().map(|s| s.features[d]).sum::<f64>() / n;
            let var: f64 = out
                .samples
                .iter()
                .map(|s| (s.features[d] - mean) * (s.features[d] - mean))
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 1e-9, "mean {mean} at dim {d}");
            assert!((var - 1.0).abs() < 1e-9, "var {var} at dim {d}");
        }
    }

    #[test]
    fn standardizer_constant_coordinate_passes_through() {
        let samples = vec![
            Sample { features: vec![3.0, 1.0], label: 0 },
            Sample { features: vec![3.0, 5.0], label: 1 },
        ];
        let ds = LabeledDataset::new(samples, 2).unwrap();
        let sz = Standardizer::fit(&ds).unwrap();
        let out = sz.apply(&ds).unwrap();
        assert_eq!(out.samples[0].features[0], 0.0);
        assert_eq!(out.samples[1].features[0], 0.0);
    }

    #[test]
    fn standardizer_rejects_dim_mismatch() {
        let ds = balanced(2, 4);
        let sz = Standardizer::fit(&ds).unwrap();
        let other = LabeledDataset::new(
            vec![Sample { features: vec![1.0, 2.0, 3.0], label: 0 }],
            2,
        )
        .unwrap();
        assert!(sz.apply(&other).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_blobs(3, 4, 7, 0.8, 13).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = LabeledDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn matched_test_set_tracks_train_proportions() {
        let mut train = balanced(4, 10);
        // Drop classes 2 and 3 from the client.
        train.samples.retain(|s| s.label < 2);
        let pool = balanced(4, 50);
        let t = matched_test_set(&train, &pool, 5).unwrap();
        assert!(t.present_classes().iter().all(|c| *c < 2));
        assert!(!t.is_empty());
    }
}
