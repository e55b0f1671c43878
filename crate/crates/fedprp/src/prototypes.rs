//! Empirical prototypes, server-side moving-average rectification, and the
//! inter-class discrimination / intra-class consistency losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{FedError, Result};
use crate::model::SharedParams;
use crate::numerics::softmax;

/// Distance used inside the inter-class discrimination loss.
///
/// The default softmax-normalizes both vectors and takes the KL divergence;
/// squared Euclidean distance is available as an ablation alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    SoftmaxKl,
    SquaredEuclidean,
}

impl DistanceKind {
    pub fn eval(&self, proto: &[f64], z: &[f64]) -> f64 {
        match self {
            DistanceKind::SoftmaxKl => {
                let p = softmax(proto);
                let q = softmax(z);
                p.iter()
                    .zip(&q)
                    .filter(|(pi, _)| **pi > 0.0)
                    .map(|(pi, qi)| pi * (pi / qi).ln())
                    .sum()
            }
            DistanceKind::SquaredEuclidean => proto
                .iter()
                .zip(z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum(),
        }
    }

    /// Gradient of `eval(proto, z)` with respect to `z` (the prototype is a
    /// constant).
    pub fn grad_z(&self, proto: &[f64], z: &[f64]) -> Vec<f64> {
        match self {
            DistanceKind::SoftmaxKl => {
                // d = const(p) - sum_i p_i log softmax(z)_i, so dz = q - p.
                let p = softmax(proto);
                let q = softmax(z);
                q.iter().zip(&p).map(|(qi, pi)| qi - pi).collect()
            }
            DistanceKind::SquaredEuclidean => {
                proto.iter().zip(z).map(|(a, b)| 2.0 * (b - a)).collect()
            }
        }
    }
}

/// Per-client class centroids in embedding space, with support counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPrototypes {
    pub client_id: usize,
    centroids: BTreeMap<usize, Vec<f64>>,
    counts: BTreeMap<usize, usize>,
}

impl EmpiricalPrototypes {
    /// A prototype set with no classes; report plumbing for protocols that
    /// do not exchange prototypes.
    pub fn empty(client_id: usize) -> Self {
        EmpiricalPrototypes {
            client_id,
            centroids: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }

    /// Rebuild a prototype set from its parts (checkpoint loading).
    pub fn from_parts(
        client_id: usize,
        centroids: BTreeMap<usize, Vec<f64>>,
        counts: BTreeMap<usize, usize>,
    ) -> Self {
        EmpiricalPrototypes {
            client_id,
            centroids,
            counts,
        }
    }

    pub fn centroids(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.centroids
    }

    pub fn counts(&self) -> &BTreeMap<usize, usize> {
        &self.counts
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.centroids.get(&class).map(|v| v.as_slice())
    }
}

/// Per-class mean of the embeddings of `data` under `mu`. Classes absent
/// from the data are absent from the output.
pub fn empirical_prototypes(
    mu: &SharedParams,
    data: &LabeledDataset,
    client_id: usize,
) -> Result<EmpiricalPrototypes> {
    if data.is_empty() {
        return Err(FedError::Input("empirical prototypes of empty data".into()));
    }
    let dim = mu.embedding_dim();
    let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &data.samples {
        let z = mu.embed(&s.features)?;
        let acc = sums.entry(s.label).or_insert_with(|| vec![0.0; dim]);
        for (a, v) in acc.iter_mut().zip(&z) {
            *a += v;
        }
        *counts.entry(s.label).or_default() += 1;
    }
    let centroids = sums
        .into_iter()
        .map(|(class, mut sum)| {
            let n = counts[&class] as f64;
            for v in sum.iter_mut() {
                *v /= n;
            }
            (class, sum)
        })
        .collect();
    Ok(EmpiricalPrototypes {
        client_id,
        centroids,
        counts,
    })
}

/// Server-held class centroids, rectified across rounds by a moving average.
/// Once a class is initialized its entry is never removed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GlobalPrototypes {
    centroids: BTreeMap<usize, Vec<f64>>,
}

impl GlobalPrototypes {
    pub fn new() -> Self {
        GlobalPrototypes::default()
    }

    /// Rebuild a global set from its centroid map (checkpoint loading).
    pub fn from_centroids(centroids: BTreeMap<usize, Vec<f64>>) -> Self {
        GlobalPrototypes { centroids }
    }

    pub fn centroids(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.centroids
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.centroids.get(&class).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Seed a class entry that has no server value yet; no-op when the class
    /// is already initialized.
    pub fn insert_if_absent(&mut self, class: usize, centroid: Vec<f64>) {
        self.centroids.entry(class).or_insert(centroid);
    }

    /// Moving-average update from this round's client prototypes.
    ///
    /// For each contributed class the clients owning it are averaged into a
    /// round mean `M`; an initialized class moves to `beta * old + (1-beta) * M`,
    /// while a brand-new class takes `M` outright (the new-class rule treats
    /// beta as 0). Classes with no contribution this round are untouched.
    pub fn ema_update(&mut self, contributions: &[EmpiricalPrototypes], beta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(FedError::Config(format!("beta {beta} outside [0, 1]")));
        }
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for contrib in contributions {
            for (&class, centroid) in contrib.centroids() {
                let entry = sums
                    .entry(class)
                    .or_insert_with(|| (vec![0.0; centroid.len()], 0));
                for (a, v) in entry.0.iter_mut().zip(centroid) {
                    *a += v;
                }
                entry.1 += 1;
            }
        }
        for (class, (sum, n)) in sums {
            let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
            match self.centroids.get_mut(&class) {
                Some(old) => {
                    for (o, m) in old.iter_mut().zip(&mean) {
                        *o = beta * *o + (1.0 - beta) * m;
                    }
                }
                None => {
                    self.centroids.insert(class, mean);
                }
            }
        }
        Ok(())
    }
}

/// Robustness margins of the discrimination loss. `epsilon` is the learnable
/// positive-pair margin; `epsilon_prime` stays fixed (0 by default). Both are
/// clamped to `[0, 10]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub epsilon: f64,
    pub epsilon_prime: f64,
}

pub const MARGIN_MAX: f64 = 10.0;

impl Default for Margins {
    fn default() -> Self {
        Margins {
            epsilon: 0.0,
            epsilon_prime: 0.0,
        }
    }
}

impl Margins {
    pub fn clamped(epsilon: f64, epsilon_prime: f64) -> Self {
        Margins {
            epsilon: epsilon.clamp(0.0, MARGIN_MAX),
            epsilon_prime: epsilon_prime.clamp(0.0, MARGIN_MAX),
        }
    }
}

/// Loss value and gradients returned by the two prototype losses.
#[derive(Debug, Clone)]
pub struct ProtoLoss {
    pub loss: f64,
    /// One gradient vector per input embedding, in input order.
    pub grad_embeddings: Vec<Vec<f64>>,
    /// d loss / d epsilon; zero for the consistency loss.
    pub grad_epsilon: f64,
}

/// Inter-class discrimination loss over a batch of embeddings.
///
/// Each sample contributes `-log( e^{-d(C_y, z) - eps} / sum_{z'} e^{-d(C_y, z') - m} )`
/// where `z'` ranges over the whole batch, `m` is `eps` for the sample's own
/// term and `eps'` otherwise, and prototypes are constants within the step.
pub fn inter_class_discrimination_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    protos: &EmpiricalPrototypes,
    margins: &Margins,
    distance: DistanceKind,
) -> Result<ProtoLoss> {
    debug_assert_eq!(embeddings.len(), labels.len());
    let b = embeddings.len();
    let dim = embeddings.first().map(|z| z.len()).unwrap_or(0);
    for &label in labels {
        if protos.get(label).is_none() {
            return Err(FedError::Internal(format!(
                "no empirical prototype for present class {label}; refresh prototypes first"
            )));
        }
    }
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; dim]; b];
    let mut grad_eps = 0.0;
    // dist[i][j] = d(C_{y_i}, z_j); cached because the anchor prototype of
    // sample i is shared by every denominator term of i.
    let mut dist = vec![vec![0.0; b]; b];
    for i in 0..b {
        let proto = protos.get(labels[i]).unwrap();
        for j in 0..b {
            dist[i][j] = distance.eval(proto, &embeddings[j]);
        }
    }
    for i in 0..b {
        let proto = protos.get(labels[i]).unwrap();
        // Stabilize the log-sum-exp of the denominator.
        let terms: Vec<f64> = (0..b)
            .map(|j| {
                let m = if j == i {
                    margins.epsilon
                } else {
                    margins.epsilon_prime
                };
                -dist[i][j] - m
            })
            .collect();
        let max_t = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = terms.iter().map(|t| (t - max_t).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let log_den = max_t + denom.ln();
        loss += dist[i][i] + margins.epsilon + log_den;
        // d loss_i / d eps = 1 - p_ii (own term share of the denominator).
        let p_own = exps[i] / denom;
        grad_eps += 1.0 - p_own;
        // Numerator term pulls z_i toward its prototype.
        let pull = distance.grad_z(proto, &embeddings[i]);
        for (g, v) in grad[i].iter_mut().zip(&pull) {
            *g += v;
        }
        // Denominator pushes every batch member away from C_{y_i}.
        for j in 0..b {
            let p_ij = exps[j] / denom;
            let push = distance.grad_z(proto, &embeddings[j]);
            for (g, v) in grad[j].iter_mut().zip(&push) {
                *g -= p_ij * v;
            }
        }
    }
    Ok(ProtoLoss {
        loss,
        grad_embeddings: grad,
        grad_epsilon: grad_eps,
    })
}

/// Intra-class consistency loss: mean squared distance between embeddings
/// and their class's global prototype. Global prototypes are constants.
pub fn intra_class_consistency_loss(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    global: &GlobalPrototypes,
    n_samples: usize,
) -> Result<ProtoLoss> {
    debug_assert_eq!(embeddings.len(), labels.len());
    if n_samples == 0 {
        return Err(FedError::Input("n_samples must be positive".into()));
    }
    let scale = 1.0 / n_samples as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(embeddings.len());
    for (z, &label) in embeddings.iter().zip(labels) {
        let proto = global.get(label).ok_or_else(|| {
            FedError::Internal(format!(
                "no global prototype for present class {label}; initialize from empirical prototypes first"
            ))
        })?;
        let mut g = vec![0.0; z.len()];
        for ((zi, pi), gi) in z.iter().zip(proto).zip(g.iter_mut()) {
            let diff = zi - pi;
            loss += scale * diff * diff;
            *gi = scale * 2.0 * diff;
        }
        grads.push(g);
    }
    Ok(ProtoLoss {
        loss,
        grad_embeddings: grads,
        grad_epsilon: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn protos_from(entries: &[(usize, Vec<f64>)]) -> EmpiricalPrototypes {
        EmpiricalPrototypes {
            client_id: 0,
            centroids: entries.iter().cloned().collect(),
            counts: entries.iter().map(|(c, _)| (*c, 1)).collect(),
        }
    }

    fn globals_from(entries: &[(usize, Vec<f64>)]) -> GlobalPrototypes {
        GlobalPrototypes {
            centroids: entries.iter().cloned().collect(),
        }
    }

    #[test]
    fn ema_midpoint() {
        let mut g = globals_from(&[(0, vec![1.0, 0.0])]);
        let c = protos_from(&[(0, vec![0.0, 1.0])]);
        g.ema_update(&[c], 0.5).unwrap();
        assert_eq!(g.get(0).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn ema_beta_one_freezes() {
        let mut g = globals_from(&[(0, vec![1.0, 2.0])]);
        let c = protos_from(&[(0, vec![-5.0, 9.0])]);
        g.ema_update(&[c], 1.0).unwrap();
        assert_eq!(g.get(0).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn ema_new_class_ignores_beta() {
        let mut g = GlobalPrototypes::new();
        let c = protos_from(&[(3, vec![2.0, 2.0])]);
        g.ema_update(&[c], 0.9).unwrap();
        assert_eq!(g.get(3).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn ema_rejects_bad_beta() {
        let mut g = GlobalPrototypes::new();
        assert!(g.ema_update(&[], 1.5).is_err());
        assert!(g.ema_update(&[], -0.1).is_err());
    }

    #[test]
    fn ema_convexity_on_random_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let dim = rng.gen_range(1..=6);
            let old: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let n_clients = rng.gen_range(1..=4);
            let contribs: Vec<EmpiricalPrototypes> = (0..n_clients)
                .map(|_| {
                    protos_from(&[(0, (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect())])
                })
                .collect();
            let mut mean = vec![0.0; dim];
            for c in &contribs {
                for (m, v) in mean.iter_mut().zip(c.get(0).unwrap()) {
                    *m += v / n_clients as f64;
                }
            }
            let beta: f64 = rng.gen_range(0.0..=1.0);
            let mut g = globals_from(&[(0, old.clone())]);
            g.ema_update(&contribs, beta).unwrap();
            for ((new, o), m) in g.get(0).unwrap().iter().zip(&old).zip(&mean) {
                let lo = o.min(*m) - 1e-12;
                let hi = o.max(*m) + 1e-12;
                assert!(*new >= lo && *new <= hi, "convexity broken: {new} not in [{lo},{hi}]");
            }
        }
    }

    #[test]
    fn id_loss_single_sample_is_zero() {
        let protos = protos_from(&[(0, vec![1.0, 2.0])]);
        let out = inter_class_discrimination_loss(
            &[vec![0.5, 0.5]],
            &[0],
            &protos,
            &Margins::default(),
            DistanceKind::SoftmaxKl,
        )
        .unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert!(out.grad_epsilon.abs() < 1e-12);
    }

    #[test]
    fn id_loss_symmetric_two_class_closed_form() {
        // Two samples of different classes, both equidistant from both
        // prototypes, equal margins: each term is -log(1/2).
        let protos = protos_from(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let z = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let out = inter_class_discrimination_loss(
            &z,
            &[0, 1],
            &protos,
            &Margins::clamped(0.3, 0.3),
            DistanceKind::SquaredEuclidean,
        )
        .unwrap();
        assert!((out.loss - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn id_loss_missing_prototype_is_internal_error() {
        let protos = protos_from(&[(0, vec![1.0, 0.0])]);
        let err = inter_class_discrimination_loss(
            &[vec![0.0, 0.0]],
            &[1],
            &protos,
            &Margins::default(),
            DistanceKind::SoftmaxKl,
        );
        assert!(err.is_err());
    }

    #[test]
    fn id_loss_distance_shift_invariance() {
        // Adding a constant to every distance (via both margins) leaves each
        // per-sample softmax term unchanged.
        let protos = protos_from(&[(0, vec![1.0, -1.0]), (1, vec![-2.0, 0.5])]);
        let z = vec![vec![0.3, 0.7], vec![-0.5, 0.2], vec![1.5, -0.4]];
        let labels = [0, 1, 0];
        let a = inter_class_discrimination_loss(
            &z,
            &labels,
            &protos,
            &Margins::clamped(0.2, 0.2),
            DistanceKind::SoftmaxKl,
        )
        .unwrap();
        let b = inter_class_discrimination_loss(
            &z,
            &labels,
            &protos,
            &Margins::clamped(1.7, 1.7),
            DistanceKind::SoftmaxKl,
        )
        .unwrap();
        assert!((a.loss - b.loss).abs() < 1e-9);
    }

    fn random_batch(
        rng: &mut ChaCha8Rng,
        max_dim: usize,
        max_batch: usize,
    ) -> (Vec<Vec<f64>>, Vec<usize>, EmpiricalPrototypes) {
        let dim = rng.gen_range(2..=max_dim);
        let b = rng.gen_range(1..=max_batch);
        let n_classes = rng.gen_range(1..=3usize);
        let z: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n_classes)).collect();
        let protos = protos_from(
            &(0..n_classes)
                .map(|c| (c, (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()))
                .collect::<Vec<_>>(),
        );
        (z, labels, protos)
    }

    #[test]
    fn id_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for kind in [DistanceKind::SoftmaxKl, DistanceKind::SquaredEuclidean] {
            for _ in 0..50 {
                let (z, labels, protos) = random_batch(&mut rng, 8, 6);
                let eps0 = rng.gen_range(0.0..2.0);
                let margins = Margins::clamped(eps0, 0.5);
                let out =
                    inter_class_discrimination_loss(&z, &labels, &protos, &margins, kind).unwrap();
                // Embedding gradients, flattened.
                let flat: Vec<f64> = z.iter().flatten().copied().collect();
                let analytical: Vec<f64> = out.grad_embeddings.iter().flatten().copied().collect();
                let dim = z[0].len();
                let err = finite_diff_check(
                    |p| {
                        let batch: Vec<Vec<f64>> =
                            p.chunks(dim).map(|c| c.to_vec()).collect();
                        inter_class_discrimination_loss(&batch, &labels, &protos, &margins, kind)
                            .unwrap()
                            .loss
                    },
                    &flat,
                    &analytical,
                    1e-5,
                );
                assert!(err < 1e-3, "ID embedding grad off by {err} ({kind:?})");
                // Epsilon gradient.
                let eps_err = finite_diff_check(
                    |p| {
                        let m = Margins {
                            epsilon: p[0],
                            epsilon_prime: 0.5,
                        };
                        inter_class_discrimination_loss(&z, &labels, &protos, &m, kind)
                            .unwrap()
                            .loss
                    },
                    &[eps0],
                    &[out.grad_epsilon],
                    1e-5,
                );
                assert!(eps_err < 1e-3, "ID epsilon grad off by {eps_err}");
            }
        }
    }

    #[test]
    fn ic_loss_zero_at_prototypes() {
        let globals = globals_from(&[(0, vec![1.0, 2.0]), (1, vec![-1.0, 0.0])]);
        let z = vec![vec![1.0, 2.0], vec![-1.0, 0.0]];
        let out = intra_class_consistency_loss(&z, &[0, 1], &globals, 2).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_embeddings.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn ic_loss_squared_distance_case() {
        let globals = globals_from(&[(0, vec![0.0, 1.0])]);
        let out =
            intra_class_consistency_loss(&[vec![1.0, 0.0]], &[0], &globals, 1).unwrap();
        assert!((out.loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ic_loss_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..100 {
            let dim = rng.gen_range(2..=8);
            let b = rng.gen_range(1..=6);
            let z: Vec<Vec<f64>> = (0..b)
                .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            let globals = globals_from(&[
                (0, (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()),
                (1, (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()),
            ]);
            let n = rng.gen_range(b..b + 20);
            let out = intra_class_consistency_loss(&z, &labels, &globals, n).unwrap();
            // Straight-line accumulation oracle.
            let mut expected = 0.0;
            for (zi, &label) in z.iter().zip(&labels) {
                let proto = globals.get(label).unwrap();
                let mut d2 = 0.0;
                for (a, b) in zi.iter().zip(proto) {
                    d2 += (a - b) * (a - b);
                }
                expected += d2 / n as f64;
            }
            assert!((out.loss - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ic_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let dim = rng.gen_range(2..=8);
            let b = rng.gen_range(1..=6);
            let z: Vec<Vec<f64>> = (0..b)
                .map(|_| (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            let globals = globals_from(&[
                (0, (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()),
                (1, (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect()),
            ]);
            let out = intra_class_consistency_loss(&z, &labels, &globals, b).unwrap();
            let flat: Vec<f64> = z.iter().flatten().copied().collect();
            let analytical: Vec<f64> = out.grad_embeddings.iter().flatten().copied().collect();
            let err = finite_diff_check(
                |p| {
                    let batch: Vec<Vec<f64>> = p.chunks(dim).map(|c| c.to_vec()).collect();
                    intra_class_consistency_loss(&batch, &labels, &globals, b)
                        .unwrap()
                        .loss
                },
                &flat,
                &analytical,
                1e-5,
            );
            assert!(err < 1e-3, "IC grad off by {err}");
        }
    }

    #[test]
    fn ic_loss_translation_invariance() {
        let shift = vec![0.7, -1.3, 2.1];
        let z = vec![vec![1.0, 0.0, -1.0], vec![0.5, 0.5, 0.5]];
        let labels = [0, 1];
        let globals = globals_from(&[(0, vec![0.0, 0.1, 0.2]), (1, vec![1.0, -1.0, 0.0])]);
        let shifted_z: Vec<Vec<f64>> = z
            .iter()
            .map(|v| v.iter().zip(&shift).map(|(a, b)| a + b).collect())
            .collect();
        let shifted_globals = globals_from(&[
            (0, vec![0.7, -1.2, 2.3]),
            (1, vec![1.7, -2.3, 2.1]),
        ]);
        let a = intra_class_consistency_loss(&z, &labels, &globals, 2).unwrap();
        let b = intra_class_consistency_loss(&shifted_z, &labels, &shifted_globals, 2).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }
}
