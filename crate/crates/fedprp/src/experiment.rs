//! Experiment harness: turn a plan into per-client datasets, run the
//! federated rounds, summarize the metric stream, and run the new-client
//! generalization experiment. No disk I/O here; the CLI owns the run
//! directory layout.

use crate::config::ExperimentPlan;
use crate::data::{
    apply_longtail, class_groups, gen_blobs, matched_test_set, LabeledDataset, SkewProfile,
    Standardizer,
};
use crate::error::{FedError, Result};
use crate::eval::{accuracy, Predictor};
use crate::federation::{
    local_update, run_round, ClientData, EvalContext, FederationConfig, FederationState,
    LocInference, RunRecord,
};
use serde::{Deserialize, Serialize};

/// Everything a run needs besides the federation state itself.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub clients: Vec<ClientData>,
    pub eval_ctx: EvalContext,
    /// Hash of the partition structure; runs must agree on it to be
    /// comparable.
    pub fingerprint: u64,
    pub input_dim: usize,
    pub num_classes: usize,
}

fn split_balanced(
    ds: &LabeledDataset,
    train_per_class: usize,
    test_per_class: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let by_class = ds.indices_by_class();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, idxs) in by_class {
        if idxs.len() != train_per_class + test_per_class {
            return Err(FedError::Generation(format!(
                "class {class} has {} samples, expected {}",
                idxs.len(),
                train_per_class + test_per_class
            )));
        }
        for &i in &idxs[..train_per_class] {
            train.push(ds.samples[i].clone());
        }
        for &i in &idxs[train_per_class..] {
            test.push(ds.samples[i].clone());
        }
    }
    Ok((
        LabeledDataset::new(train, ds.num_classes)?,
        LabeledDataset::new(test, ds.num_classes)?,
    ))
}

fn fnv_feed(h: &mut u64, v: u64) {
    for byte in v.to_le_bytes() {
        *h ^= byte as u64;
        *h = h.wrapping_mul(0x100000001b3);
    }
}

/// Hash of the partition structure: per-client per-class counts plus the
/// seeds that produced them. Two runs with equal fingerprints trained on the
/// same client datasets.
pub fn partition_fingerprint(plan: &ExperimentPlan, clients: &[ClientData]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    fnv_feed(&mut h, plan.data.seed);
    fnv_feed(&mut h, plan.partition_seed);
    fnv_feed(&mut h, plan.gamma.to_bits());
    fnv_feed(&mut h, clients.len() as u64);
    for c in clients {
        for count in c.train.class_counts() {
            fnv_feed(&mut h, count as u64);
        }
    }
    h
}

/// Build the full data pipeline for a plan: generate or load, hold out the
/// balanced test pool, skew the training side, partition, and draw each
/// client's own-distribution test set from the pool.
pub fn prepare_data(plan: &ExperimentPlan) -> Result<PreparedData> {
    plan.validate()?;
    let (mut train_full, mut test_pool) = match (&plan.data.train_file, &plan.data.test_file) {
        (Some(train_path), Some(test_path)) => (
            LabeledDataset::read_csv_file(train_path)?,
            LabeledDataset::read_csv_file(test_path)?,
        ),
        _ => {
            let all = gen_blobs(
                plan.data.classes,
                plan.data.dim,
                plan.data.per_class + plan.data.test_per_class,
                plan.data.spread,
                plan.data.seed,
            )?;
            split_balanced(&all, plan.data.per_class, plan.data.test_per_class)?
        }
    };
    if train_full.num_classes != test_pool.num_classes || train_full.dim() != test_pool.dim() {
        return Err(FedError::Input("train/test schema mismatch".into()));
    }
    if plan.data.standardize {
        // Fitted on the training pool only; the test pool reuses the same
        // affine map, as usual.
        let scaler = Standardizer::fit(&train_full)?;
        train_full = scaler.apply(&train_full)?;
        test_pool = scaler.apply(&test_pool)?;
    }
    let skew = SkewProfile::identity_ordering(plan.gamma, train_full.num_classes);
    let train = apply_longtail(&train_full, &skew, plan.data.seed.wrapping_add(1))?;
    let parts = plan.partition_spec().apply(&train)?;
    let groups = class_groups(&train.class_counts());
    let clients: Vec<ClientData> = parts
        .into_iter()
        .enumerate()
        .map(|(i, tr)| {
            let seed = plan
                .partition_seed
                .wrapping_add((i as u64).wrapping_mul(0x9e3779b97f4a7c15));
            let test = matched_test_set(&tr, &test_pool, seed)?;
            Ok(ClientData { train: tr, test })
        })
        .collect::<Result<_>>()?;
    let fingerprint = partition_fingerprint(plan, &clients);
    Ok(PreparedData {
        input_dim: train.dim(),
        num_classes: train.num_classes,
        eval_ctx: EvalContext {
            balanced_test: test_pool,
            groups,
        },
        clients,
        fingerprint,
    })
}

/// Run `rounds` federated rounds, invoking `on_record` after each. Resumable:
/// the state carries its round counter and all RNG is derived from it.
pub fn run_rounds(
    state: &mut FederationState,
    prepared: &PreparedData,
    fed: &FederationConfig,
    rounds: usize,
    mut on_record: impl FnMut(&RunRecord) -> Result<()>,
) -> Result<Vec<RunRecord>> {
    let mut records = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let record = run_round(state, &prepared.clients, fed, &prepared.eval_ctx)?;
        on_record(&record)?;
        records.push(record);
    }
    Ok(records)
}

/// Window-averaged metrics over the last `window` records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub window: usize,
    pub acc_glo: f64,
    pub acc_loc: f64,
    pub acc_sel: f64,
    pub many: f64,
    pub medium: f64,
    pub few: f64,
}

pub fn window_summary(records: &[RunRecord], window: usize) -> Result<Summary> {
    if records.is_empty() {
        return Err(FedError::Input("no records to summarize".into()));
    }
    let w = window.max(1).min(records.len());
    let tail = &records[records.len() - w..];
    let n = tail.len() as f64;
    let mean = |f: fn(&RunRecord) -> f64| tail.iter().map(f).sum::<f64>() / n;
    Ok(Summary {
        rounds: records.len(),
        window: w,
        acc_glo: mean(|r| r.acc_glo),
        acc_loc: mean(|r| r.acc_loc),
        acc_sel: mean(|r| r.acc_sel),
        many: mean(|r| r.many),
        medium: mean(|r| r.medium),
        few: mean(|r| r.few),
    })
}

/// Datasets for clients joining after training: disjoint slices of the
/// held-out pool, partitioned with the plan's strategy under a shifted seed.
/// Directional new-client comparisons are unaffected by the pool overlap
/// with the balanced test set, since both arms share it.
pub fn new_client_datasets(
    plan: &ExperimentPlan,
    pool: &LabeledDataset,
    n_new: usize,
) -> Result<Vec<LabeledDataset>> {
    if n_new == 0 {
        return Ok(Vec::new());
    }
    let mut spec = plan.partition_spec();
    spec.num_clients = n_new;
    spec.seed = plan.partition_seed ^ 0x6e65775f636c69; // distinct stream from the training partition
    spec.apply(pool)
}

/// Register `datasets.len()` new clients and run `rounds` local rounds for
/// them, returning each round's per-client balanced-test accuracy. The new
/// clients start every round from the frozen global extractor; the global
/// model itself is not updated, so this measures pure generalization of the
/// trained representation.
pub fn run_new_clients(
    state: &mut FederationState,
    datasets: &[LabeledDataset],
    fed: &FederationConfig,
    balanced_test: &LabeledDataset,
    rounds: usize,
) -> Result<Vec<Vec<f64>>> {
    let ids: Vec<usize> = datasets
        .iter()
        .map(|ds| state.init_new_client(ds))
        .collect::<Result<_>>()?;
    let mut per_round = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut accs = Vec::with_capacity(ids.len());
        for (&id, ds) in ids.iter().zip(datasets) {
            let (report, mut cs) = local_update(state, id, ds, fed)?;
            let predictor = match fed.loc_inference {
                LocInference::Prototype => Predictor::Prototype {
                    mu: &report.mu,
                    protos: report.protos.centroids(),
                },
                LocInference::Classifier => Predictor::Classifier {
                    mu: &report.mu,
                    nu: &cs.nu,
                },
            };
            accs.push(accuracy(&predictor, balanced_test)?);
            cs.local_mu = Some(report.mu.clone());
            state.clients[id] = cs;
        }
        state.round += 1;
        per_round.push(accs);
    }
    Ok(per_round)
}

/// Build a tiny sample for unit tests elsewhere; kept here so the harness
/// tests and the CLI tests share one fixture.
#[cfg(test)]
pub(crate) fn tiny_plan() -> ExperimentPlan {
    let mut plan = ExperimentPlan::default();
    plan.data.classes = 4;
    plan.data.dim = 6;
    plan.data.per_class = 40;
    plan.data.test_per_class = 10;
    plan.gamma = 0.5;
    plan.shards = 2;
    plan.fed.num_clients = 4;
    plan.fed.clients_per_round = 2;
    plan.fed.rounds = 2;
    plan.fed.schedule.t_shared = 2;
    plan.fed.schedule.s_personal = 1;
    plan.fed.schedule.lr = 0.05;
    plan.fed.schedule.batch_size = 16;
    plan.fed.hidden = vec![8, 8];
    plan.report_window = 2;
    plan
}
