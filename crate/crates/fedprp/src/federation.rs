//! Server-side orchestration: client selection, local updates, aggregation
//! of shared parameters and prototypes, per-round metrics, and the baseline
//! protocols sharing the same harness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassGroups, LabeledDataset};
use crate::error::{FedError, Result};
use crate::eval::{accuracy, predictions, group_report, Predictor};
use crate::model::{
    update_full_ce, update_personal, update_shared, LocalSchedule, LossBreakdown, LossTerms,
    PersonalParams, SharedParams, SharedUpdateCtx,
};
use crate::prototypes::{
    empirical_prototypes, DistanceKind, EmpiricalPrototypes, GlobalPrototypes,
};

/// Which protocol a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    /// Personalized heads, prototype rectification, prototype inference.
    FedPrp,
    /// Plain federated averaging of the full model, cross entropy only.
    FedAvgBaseline,
    /// Prototype aggregation and nearest-prototype inference without the
    /// discrimination/consistency losses; model parameters stay local.
    ProtoOnlyBaseline,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::FedPrp => "fedprp",
            Algorithm::FedAvgBaseline => "fedavg",
            Algorithm::ProtoOnlyBaseline => "proto",
        }
    }
}

/// How personalized models are evaluated for the balanced-test and
/// own-distribution metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocInference {
    /// Nearest-prototype with the client's empirical prototypes.
    Prototype,
    /// The personalized classifier head.
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub schedule: LocalSchedule,
    pub lambda: f64,
    pub beta: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub distance: DistanceKind,
    pub epsilon_prime: f64,
    /// Weight the shared-module mean by client sample counts (ablation;
    /// the protocol's own aggregation is unweighted).
    pub weighted_agg: bool,
    pub loc_inference: LocInference,
    /// Drop both prototype losses and train the shared module on cross
    /// entropy alone while keeping the rest of the protocol.
    pub ce_only: bool,
    /// Hidden widths of the extractor; the last entry is the embedding dim.
    pub hidden: Vec<usize>,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(FedError::Config(format!(
                "clients_per_round must be in [1, {}]",
                self.num_clients
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(FedError::Config("lambda must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(FedError::Config("beta must be in [0, 1]".into()));
        }
        if self.hidden.is_empty() {
            return Err(FedError::Config("hidden widths must be nonempty".into()));
        }
        self.schedule.validate()
    }
}

/// Per-client state the server tracks between rounds. Clients not selected
/// in a round keep their stale head and prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub nu: PersonalParams,
    pub epsilon: f64,
    pub protos: Option<EmpiricalPrototypes>,
    /// Persistent local extractor; used only by the prototype-only baseline,
    /// which never aggregates model parameters.
    pub local_mu: Option<SharedParams>,
}

/// Everything the server owns across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    pub global_mu: SharedParams,
    pub global_nu: PersonalParams,
    pub global_protos: GlobalPrototypes,
    pub round: u64,
    pub clients: Vec<ClientState>,
}

impl FederationState {
    pub fn init(config: &FederationConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, 0, RngStream::Init, 0);
        let global_mu = SharedParams::init(input_dim, &config.hidden, &mut rng)?;
        let embedding_dim = global_mu.embedding_dim();
        let clients = (0..config.num_clients)
            .map(|_| ClientState {
                nu: PersonalParams::zeros(num_classes, embedding_dim),
                epsilon: 0.0,
                protos: None,
                local_mu: None,
            })
            .collect();
        Ok(FederationState {
            global_nu: PersonalParams::zeros(num_classes, embedding_dim),
            global_mu,
            global_protos: GlobalPrototypes::new(),
            round: 0,
            clients,
        })
    }

    /// Register a client initialized from the trained global extractor:
    /// fresh zero head, prototypes computed from its data. Requires at least
    /// one completed round. Returns the new client id.
    pub fn init_new_client(&mut self, dataset: &LabeledDataset) -> Result<usize> {
        if self.round == 0 {
            return Err(FedError::Protocol(
                "new clients join after at least one round".into(),
            ));
        }
        if dataset.is_empty() {
            return Err(FedError::Input("new client dataset is empty".into()));
        }
        let id = self.clients.len();
        let protos = empirical_prototypes(&self.global_mu, dataset, id)?;
        self.clients.push(ClientState {
            nu: PersonalParams::zeros(self.global_nu.num_classes(), self.global_mu.embedding_dim()),
            epsilon: 0.0,
            protos: Some(protos),
            local_mu: None,
        });
        Ok(id)
    }
}

/// What a client uploads after a FedPRP local update: only the shared
/// module, its prototypes, scalar losses, and a sample count. The
/// personalized head and raw samples never leave the client.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: usize,
    pub mu: SharedParams,
    pub protos: EmpiricalPrototypes,
    pub losses: LossBreakdown,
    pub sample_count: usize,
}

/// The FedAvg baseline uploads the full model; kept as a distinct type so
/// the FedPRP report can never carry a head.
#[derive(Debug, Clone)]
pub struct FullModelReport {
    pub client_id: usize,
    pub mu: SharedParams,
    pub nu: PersonalParams,
    pub loss: f64,
    pub sample_count: usize,
}

/// A client's training split and its own-distribution test split.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Balanced test set and class grouping used for the per-round metrics.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub balanced_test: LabeledDataset,
    pub groups: ClassGroups,
}

/// One JSON-lines record per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub round: u64,
    pub acc_glo: f64,
    pub acc_loc: f64,
    pub acc_sel: f64,
    pub many: f64,
    pub medium: f64,
    pub few: f64,
    pub loss_ce: f64,
    pub loss_id: f64,
    pub loss_ic: f64,
}

#[derive(Debug, Clone, Copy)]
enum RngStream {
    Init,
    Selection,
    Personal,
    Shared,
    Full,
}

impl RngStream {
    fn tag(&self) -> u64 {
        match self {
            RngStream::Init => 0,
            RngStream::Selection => 1,
            RngStream::Personal => 2,
            RngStream::Shared => 3,
            RngStream::Full => 4,
        }
    }
}

/// Deterministic per-(seed, round, stream, client) generator; no RNG state
/// needs to live in `FederationState`, which keeps checkpoints trivially
/// bit-exact.
fn derive_rng(seed: u64, round: u64, stream: RngStream, client: u64) -> ChaCha8Rng {
    let mut x = seed
        ^ round.wrapping_mul(0x9e3779b97f4a7c15)
        ^ stream.tag().wrapping_mul(0xbf58476d1ce4e5b9)
        ^ client.wrapping_mul(0x94d049bb133111eb);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

/// Uniform sample of `clients_per_round` client ids without replacement,
/// deterministic in `(seed, round)`. Returned ascending.
pub fn select_clients(state: &FederationState, config: &FederationConfig) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..state.clients.len()).collect();
    let mut rng = derive_rng(config.seed, state.round, RngStream::Selection, 0);
    ids.shuffle(&mut rng);
    let mut chosen: Vec<usize> = ids
        .into_iter()
        .take(config.clients_per_round.min(state.clients.len()))
        .collect();
    chosen.sort_unstable();
    chosen
}

/// One FedPRP local update: overwrite the client's extractor with the global
/// one, train the head, then train the shared module under the combined
/// objective, and recompute prototypes with the final extractor.
pub fn local_update(
    state: &FederationState,
    client_id: usize,
    data: &LabeledDataset,
    config: &FederationConfig,
) -> Result<(ClientReport, ClientState)> {
    if data.is_empty() {
        return Err(FedError::Update(format!("client {client_id} has no data")));
    }
    let client = &state.clients[client_id];
    let mut mu = state.global_mu.clone();
    let mut nu = client.nu.clone();
    let mut epsilon = client.epsilon;
    let mut rng_p = derive_rng(config.seed, state.round, RngStream::Personal, client_id as u64);
    update_personal(&mu, &mut nu, data, &config.schedule, &mut rng_p)?;
    let terms = if config.ce_only {
        LossTerms::CeOnly
    } else {
        LossTerms::Full
    };
    let ctx = SharedUpdateCtx {
        global_protos: &state.global_protos,
        lambda: config.lambda,
        distance: config.distance,
        epsilon_prime: config.epsilon_prime,
        terms,
    };
    let mut rng_s = derive_rng(config.seed, state.round, RngStream::Shared, client_id as u64);
    let (losses, protos) = update_shared(
        &mut mu,
        &nu,
        data,
        &config.schedule,
        &ctx,
        &mut epsilon,
        client_id,
        &mut rng_s,
    )?;
    let report = ClientReport {
        client_id,
        mu,
        protos: protos.clone(),
        losses,
        sample_count: data.len(),
    };
    let new_state = ClientState {
        nu,
        epsilon,
        protos: Some(protos),
        local_mu: None,
    };
    Ok((report, new_state))
}

/// Coordinate-wise mean of the uploaded shared modules, accumulated in
/// ascending client-id order so concurrency or report order never changes
/// the result. Unweighted unless the config opts into sample-count weights.
pub fn aggregate_shared(reports: &[ClientReport], weighted: bool) -> Result<SharedParams> {
    if reports.is_empty() {
        return Err(FedError::Protocol("no reports to aggregate".into()));
    }
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    let template = &sorted[0].mu;
    let mut layers = template.layers().to_vec();
    for l in layers.iter_mut() {
        l.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        l.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    let total_weight: f64 = if weighted {
        sorted.iter().map(|r| r.sample_count as f64).sum()
    } else {
        sorted.len() as f64
    };
    for r in &sorted {
        if r.mu.layers().len() != layers.len() {
            return Err(FedError::Protocol("mismatched layer counts".into()));
        }
        let w = if weighted {
            r.sample_count as f64 / total_weight
        } else {
            1.0 / total_weight
        };
        for (acc, l) in layers.iter_mut().zip(r.mu.layers()) {
            if l.weight.rows() != acc.weight.rows() || l.weight.cols() != acc.weight.cols() {
                return Err(FedError::Protocol("mismatched layer dims".into()));
            }
            for (a, v) in acc.weight.data_mut().iter_mut().zip(l.weight.data()) {
                *a += w * v;
            }
            for (a, v) in acc.bias.iter_mut().zip(&l.bias) {
                *a += w * v;
            }
        }
    }
    SharedParams::from_layers(layers)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn personalized_predictor<'a>(
    config: &FederationConfig,
    mu: &'a SharedParams,
    nu: &'a PersonalParams,
    protos: &'a BTreeMap<usize, Vec<f64>>,
) -> Predictor<'a> {
    match config.loc_inference {
        LocInference::Prototype => Predictor::Prototype { mu, protos },
        LocInference::Classifier => Predictor::Classifier { mu, nu },
    }
}

/// Run one federated round: select, update in (conceptually parallel)
/// client-id order, rectify prototypes, aggregate the shared module, and
/// evaluate. Mutates the state in place and returns the round's record.
pub fn run_round(
    state: &mut FederationState,
    clients: &[ClientData],
    config: &FederationConfig,
    eval_ctx: &EvalContext,
) -> Result<RunRecord> {
    if clients.len() != state.clients.len() {
        return Err(FedError::Protocol(format!(
            "{} client datasets for {} registered clients",
            clients.len(),
            state.clients.len()
        )));
    }
    let selected = select_clients(state, config);
    match config.algorithm {
        Algorithm::FedPrp => run_round_fedprp(state, clients, config, eval_ctx, &selected),
        Algorithm::FedAvgBaseline => run_round_fedavg(state, clients, config, eval_ctx, &selected),
        Algorithm::ProtoOnlyBaseline => {
            run_round_proto_only(state, clients, config, eval_ctx, &selected)
        }
    }
}

fn run_round_fedprp(
    state: &mut FederationState,
    clients: &[ClientData],
    config: &FederationConfig,
    eval_ctx: &EvalContext,
    selected: &[usize],
) -> Result<RunRecord> {
    let mut reports = Vec::new();
    let mut new_states = Vec::new();
    for &id in selected {
        if clients[id].train.is_empty() {
            log::warn!("round {}: client {id} has no data, skipped", state.round);
            continue;
        }
        let (report, new_state) = local_update(state, id, &clients[id].train, config)?;
        reports.push(report);
        new_states.push((id, new_state));
    }
    if reports.is_empty() {
        return Err(FedError::Protocol(format!(
            "round {}: every selected client was empty",
            state.round
        )));
    }
    let contributed: Vec<EmpiricalPrototypes> = reports.iter().map(|r| r.protos.clone()).collect();
    state.global_protos.ema_update(&contributed, config.beta)?;
    state.global_mu = aggregate_shared(&reports, config.weighted_agg)?;
    for (id, cs) in new_states {
        state.clients[id] = cs;
    }
    state.round += 1;

    // Metrics.
    let global_predictor = Predictor::Prototype {
        mu: &state.global_mu,
        protos: state.global_protos.centroids(),
    };
    let preds = predictions(&global_predictor, &eval_ctx.balanced_test)?;
    let labels: Vec<usize> = eval_ctx.balanced_test.samples.iter().map(|s| s.label).collect();
    let group_acc = group_report(&preds, &labels, &eval_ctx.groups)?;
    let mut loc = Vec::new();
    let mut sel = Vec::new();
    for r in &reports {
        let cs = &state.clients[r.client_id];
        let predictor =
            personalized_predictor(config, &r.mu, &cs.nu, r.protos.centroids());
        loc.push(accuracy(&predictor, &eval_ctx.balanced_test)?);
        if !clients[r.client_id].test.is_empty() {
            sel.push(accuracy(&predictor, &clients[r.client_id].test)?);
        }
    }
    let losses: Vec<LossBreakdown> = reports.iter().map(|r| r.losses).collect();
    Ok(RunRecord {
        round: state.round,
        acc_glo: group_acc.all,
        acc_loc: mean(&loc),
        acc_sel: mean(&sel),
        many: group_acc.many,
        medium: group_acc.medium,
        few: group_acc.few,
        loss_ce: mean(&losses.iter().map(|l| l.ce).collect::<Vec<_>>()),
        loss_id: mean(&losses.iter().map(|l| l.id).collect::<Vec<_>>()),
        loss_ic: mean(&losses.iter().map(|l| l.ic).collect::<Vec<_>>()),
    })
}

fn run_round_fedavg(
    state: &mut FederationState,
    clients: &[ClientData],
    config: &FederationConfig,
    eval_ctx: &EvalContext,
    selected: &[usize],
) -> Result<RunRecord> {
    let epochs = config.schedule.t_shared + config.schedule.s_personal;
    let mut reports: Vec<FullModelReport> = Vec::new();
    for &id in selected {
        if clients[id].train.is_empty() {
            log::warn!("round {}: client {id} has no data, skipped", state.round);
            continue;
        }
        let mut mu = state.global_mu.clone();
        let mut nu = state.global_nu.clone();
        let mut rng = derive_rng(config.seed, state.round, RngStream::Full, id as u64);
        let loss = update_full_ce(
            &mut mu,
            &mut nu,
            &clients[id].train,
            epochs,
            config.schedule.lr,
            config.schedule.batch_size,
            &mut rng,
        )?;
        reports.push(FullModelReport {
            client_id: id,
            mu,
            nu,
            loss,
            sample_count: clients[id].train.len(),
        });
    }
    if reports.is_empty() {
        return Err(FedError::Protocol(format!(
            "round {}: every selected client was empty",
            state.round
        )));
    }
    reports.sort_by_key(|r| r.client_id);
    // Mean over both parameter blocks, fixed order.
    let shared_like: Vec<ClientReport> = reports
        .iter()
        .map(|r| ClientReport {
            client_id: r.client_id,
            mu: r.mu.clone(),
            protos: EmpiricalPrototypes::empty(r.client_id),
            losses: LossBreakdown {
                ce: r.loss,
                id: 0.0,
                ic: 0.0,
            },
            sample_count: r.sample_count,
        })
        .collect();
    state.global_mu = aggregate_shared(&shared_like, config.weighted_agg)?;
    let n = reports.len() as f64;
    let mut head = PersonalParams::zeros(
        state.global_nu.num_classes(),
        state.global_mu.embedding_dim(),
    );
    for r in &reports {
        for (a, v) in head.weight.data_mut().iter_mut().zip(r.nu.weight.data()) {
            *a += v / n;
        }
        for (a, v) in head.bias.iter_mut().zip(&r.nu.bias) {
            *a += v / n;
        }
    }
    state.global_nu = head;
    for r in &reports {
        state.clients[r.client_id].nu = r.nu.clone();
    }
    state.round += 1;

    let global_predictor = Predictor::Classifier {
        mu: &state.global_mu,
        nu: &state.global_nu,
    };
    let preds = predictions(&global_predictor, &eval_ctx.balanced_test)?;
    let labels: Vec<usize> = eval_ctx.balanced_test.samples.iter().map(|s| s.label).collect();
    let group_acc = group_report(&preds, &labels, &eval_ctx.groups)?;
    let mut loc = Vec::new();
    let mut sel = Vec::new();
    for r in &reports {
        let predictor = Predictor::Classifier { mu: &r.mu, nu: &r.nu };
        loc.push(accuracy(&predictor, &eval_ctx.balanced_test)?);
        if !clients[r.client_id].test.is_empty() {
            sel.push(accuracy(&predictor, &clients[r.client_id].test)?);
        }
    }
    Ok(RunRecord {
        round: state.round,
        acc_glo: group_acc.all,
        acc_loc: mean(&loc),
        acc_sel: mean(&sel),
        many: group_acc.many,
        medium: group_acc.medium,
        few: group_acc.few,
        loss_ce: mean(&reports.iter().map(|r| r.loss).collect::<Vec<_>>()),
        loss_id: 0.0,
        loss_ic: 0.0,
    })
}

fn run_round_proto_only(
    state: &mut FederationState,
    clients: &[ClientData],
    config: &FederationConfig,
    eval_ctx: &EvalContext,
    selected: &[usize],
) -> Result<RunRecord> {
    let mut round_protos = Vec::new();
    let mut evals: Vec<(usize, SharedParams)> = Vec::new();
    let mut losses = Vec::new();
    for &id in selected {
        if clients[id].train.is_empty() {
            log::warn!("round {}: client {id} has no data, skipped", state.round);
            continue;
        }
        // Model parameters never travel: each client keeps its own extractor.
        let mut mu = state.clients[id]
            .local_mu
            .clone()
            .unwrap_or_else(|| state.global_mu.clone());
        let mut nu = state.clients[id].nu.clone();
        let mut epsilon = state.clients[id].epsilon;
        let mut rng_p = derive_rng(config.seed, state.round, RngStream::Personal, id as u64);
        update_personal(&mu, &mut nu, &clients[id].train, &config.schedule, &mut rng_p)?;
        let ctx = SharedUpdateCtx {
            global_protos: &state.global_protos,
            lambda: config.lambda,
            distance: config.distance,
            epsilon_prime: config.epsilon_prime,
            terms: LossTerms::CeOnly,
        };
        let mut rng_s = derive_rng(config.seed, state.round, RngStream::Shared, id as u64);
        let (loss, protos) = update_shared(
            &mut mu,
            &nu,
            &clients[id].train,
            &config.schedule,
            &ctx,
            &mut epsilon,
            id,
            &mut rng_s,
        )?;
        round_protos.push(protos.clone());
        losses.push(loss);
        state.clients[id] = ClientState {
            nu,
            epsilon,
            protos: Some(protos),
            local_mu: Some(mu.clone()),
        };
        evals.push((id, mu));
    }
    if round_protos.is_empty() {
        return Err(FedError::Protocol(format!(
            "round {}: every selected client was empty",
            state.round
        )));
    }
    state.global_protos.ema_update(&round_protos, config.beta)?;
    state.round += 1;

    let global_predictor = Predictor::Prototype {
        mu: &state.global_mu,
        protos: state.global_protos.centroids(),
    };
    let preds = predictions(&global_predictor, &eval_ctx.balanced_test)?;
    let labels: Vec<usize> = eval_ctx.balanced_test.samples.iter().map(|s| s.label).collect();
    let group_acc = group_report(&preds, &labels, &eval_ctx.groups)?;
    let mut loc = Vec::new();
    let mut sel = Vec::new();
    for (id, mu) in &evals {
        let cs = &state.clients[*id];
        let protos = cs.protos.as_ref().expect("just updated");
        let predictor = Predictor::Prototype {
            mu,
            protos: protos.centroids(),
        };
        loc.push(accuracy(&predictor, &eval_ctx.balanced_test)?);
        if !clients[*id].test.is_empty() {
            sel.push(accuracy(&predictor, &clients[*id].test)?);
        }
    }
    Ok(RunRecord {
        round: state.round,
        acc_glo: group_acc.all,
        acc_loc: mean(&loc),
        acc_sel: mean(&sel),
        many: group_acc.many,
        medium: group_acc.medium,
        few: group_acc.few,
        loss_ce: mean(&losses.iter().map(|l| l.ce).collect::<Vec<_>>()),
        loss_id: 0.0,
        loss_ic: 0.0,
    })
}
