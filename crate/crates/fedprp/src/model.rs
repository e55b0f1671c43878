//! The decoupled local model: a shared perceptron feature extractor and a
//! personalized linear head, with the two-phase local update (head first,
//! then the shared module under the combined objective).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{FedError, Result};
use crate::numerics::{affine_forward, relu, softmax_ce, GradTape, Matrix};
use crate::prototypes::{
    empirical_prototypes, inter_class_discrimination_loss, intra_class_consistency_loss,
    DistanceKind, EmpiricalPrototypes, GlobalPrototypes, Margins, MARGIN_MAX,
};

/// One affine layer of the feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Shared representation parameters: a stack of affine layers with ReLU
/// between them (the final layer output is the embedding, no activation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    layers: Vec<AffineLayer>,
}

impl SharedParams {
    /// He-initialized extractor mapping `input_dim` through `widths`.
    /// The last width is the embedding dimension.
    pub fn init(input_dim: usize, widths: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.is_empty() {
            return Err(FedError::Config("extractor needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for &out in widths {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid normal");
            let data: Vec<f64> = (0..out * fan_in).map(|_| rng.sample(normal)).collect();
            layers.push(AffineLayer {
                weight: Matrix::from_vec(out, fan_in, data)?,
                bias: vec![0.0; out],
            });
            fan_in = out;
        }
        Ok(SharedParams { layers })
    }

    pub fn from_layers(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(FedError::Config("extractor needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[1].weight.cols() != w[0].weight.rows() {
                return Err(FedError::Config("extractor layer dims do not chain".into()));
            }
        }
        Ok(SharedParams { layers })
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    /// Deterministic forward pass through the extractor.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(FedError::Input(format!(
                "input dim {} != extractor input {}",
                x.len(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = affine_forward(&h, &layer.weight, &layer.bias, None)?;
            if i < last {
                h = relu(&h, None);
            }
        }
        Ok(h)
    }

    /// Forward pass that records a tape for the backward pass.
    pub fn embed_traced(&self, x: &[f64]) -> Result<(Vec<f64>, GradTape)> {
        if x.len() != self.input_dim() {
            return Err(FedError::Input(format!(
                "input dim {} != extractor input {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut tape = GradTape::new();
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = affine_forward(&h, &layer.weight, &layer.bias, Some(&mut tape))?;
            if i < last {
                h = relu(&h, Some(&mut tape));
            }
        }
        Ok((h, tape))
    }

    /// Backpropagate an embedding gradient through a recorded tape.
    pub fn backward(&self, tape: GradTape, d_embedding: &[f64]) -> Result<SharedGrads> {
        let weights: Vec<&Matrix> = self.layers.iter().map(|l| &l.weight).collect();
        let grads = tape.backward(&weights, d_embedding)?;
        Ok(SharedGrads {
            d_weights: grads.d_weights,
            d_biases: grads.d_biases,
        })
    }

    /// Hash of the raw parameter bits; used by phase-separation checks.
    pub fn param_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut feed = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for layer in &self.layers {
            layer.weight.data().iter().copied().for_each(&mut feed);
            layer.bias.iter().copied().for_each(&mut feed);
        }
        h
    }
}

/// Accumulated extractor gradients, same shape as the layer stack.
#[derive(Debug)]
pub struct SharedGrads {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
}

impl SharedGrads {
    pub fn zeros_like(mu: &SharedParams) -> Self {
        SharedGrads {
            d_weights: mu
                .layers()
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            d_biases: mu.layers().iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &SharedGrads, scale: f64) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

/// Personalized linear head: `num_classes x embedding_dim` plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl PersonalParams {
    pub fn zeros(num_classes: usize, embedding_dim: usize) -> Self {
        PersonalParams {
            weight: Matrix::zeros(num_classes, embedding_dim),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        affine_forward(embedding, &self.weight, &self.bias, None)
    }

    pub fn param_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut feed = |v: f64| {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        self.weight.data().iter().copied().for_each(&mut feed);
        self.bias.iter().copied().for_each(&mut feed);
        h
    }
}

/// Local training schedule: shared-module epochs, personalized-head epochs,
/// learning rate, batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalSchedule {
    pub t_shared: usize,
    pub s_personal: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl LocalSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(FedError::Config("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(FedError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Full forward pass: logits and the embedding they were computed from.
pub fn forward(mu: &SharedParams, nu: &PersonalParams, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let z = mu.embed(x)?;
    let logits = nu.logits(&z)?;
    Ok((logits, z))
}

/// Cross-entropy SGD on the head only; the extractor stays frozen, so all
/// embeddings are computed once up front. Returns the last epoch's mean loss.
pub fn update_personal(
    mu: &SharedParams,
    nu: &mut PersonalParams,
    data: &LabeledDataset,
    schedule: &LocalSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(FedError::Update("empty client dataset".into()));
    }
    let embeddings: Vec<Vec<f64>> = data
        .samples
        .iter()
        .map(|s| mu.embed(&s.features))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = 0.0;
    for _ in 0..schedule.s_personal {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut dw = Matrix::zeros(nu.weight.rows(), nu.weight.cols());
            let mut db = vec![0.0; nu.bias.len()];
            for &i in batch {
                let z = &embeddings[i];
                let logits = nu.logits(z)?;
                let (loss, dlogits) = softmax_ce(&logits, data.samples[i].label)?;
                epoch_loss += loss;
                for (r, dl) in dlogits.iter().enumerate() {
                    let g = scale * dl;
                    for (j, zj) in z.iter().enumerate() {
                        *dw.at_mut(r, j) += g * zj;
                    }
                    db[r] += g;
                }
            }
            for (w, g) in nu.weight.data_mut().iter_mut().zip(dw.data()) {
                *w -= schedule.lr * g;
            }
            for (b, g) in nu.bias.iter_mut().zip(&db) {
                *b -= schedule.lr * g;
            }
        }
        last_loss = epoch_loss / data.len() as f64;
    }
    if schedule.s_personal == 0 {
        // Report the standing loss without touching the head.
        let mut total = 0.0;
        for (z, s) in embeddings.iter().zip(&data.samples) {
            total += softmax_ce(&nu.logits(z)?, s.label)?.0;
        }
        last_loss = total / data.len() as f64;
    }
    Ok(last_loss)
}

/// Which loss terms the shared-module update optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossTerms {
    /// Cross entropy plus both prototype losses, weighted by lambda.
    Full,
    /// Cross entropy only (ablation / FedAvg-style local training).
    CeOnly,
}

/// Everything the shared-module update needs beyond the model itself.
pub struct SharedUpdateCtx<'a> {
    pub global_protos: &'a GlobalPrototypes,
    pub lambda: f64,
    pub distance: DistanceKind,
    pub epsilon_prime: f64,
    pub terms: LossTerms,
}

/// Mean per-term losses over the last shared epoch.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub id: f64,
    pub ic: f64,
}

impl LossBreakdown {
    /// The combined objective: `ce + lambda * id + (1 - lambda) * ic`.
    pub fn total(&self, lambda: f64) -> f64 {
        self.ce + lambda * self.id + (1.0 - lambda) * self.ic
    }
}

/// Minibatch SGD on the combined objective with respect to the extractor
/// (and the learnable margin), the head frozen. Empirical prototypes are
/// refreshed once per epoch and treated as constants within each step;
/// missing global prototypes fall back to the epoch's empirical ones.
pub fn update_shared(
    mu: &mut SharedParams,
    nu: &PersonalParams,
    data: &LabeledDataset,
    schedule: &LocalSchedule,
    ctx: &SharedUpdateCtx,
    epsilon: &mut f64,
    client_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, EmpiricalPrototypes)> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(FedError::Update("empty client dataset".into()));
    }
    if !(0.0..=1.0).contains(&ctx.lambda) {
        return Err(FedError::Config("lambda must be in [0, 1]".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut breakdown = LossBreakdown::default();
    for _ in 0..schedule.t_shared {
        let protos = empirical_prototypes(mu, data, client_id)?;
        // Global prototypes the IC term can actually use: the server snapshot
        // where available, this epoch's empirical prototypes for classes the
        // server has not initialized yet (round one).
        let mut effective_globals = ctx.global_protos.clone();
        for (class, centroid) in protos.centroids() {
            effective_globals.insert_if_absent(*class, centroid.clone());
        }
        order.shuffle(rng);
        let mut epoch = LossBreakdown::default();
        for batch in order.chunks(schedule.batch_size) {
            let bsize = batch.len();
            let scale = 1.0 / bsize as f64;
            let mut embeddings = Vec::with_capacity(bsize);
            let mut tapes = Vec::with_capacity(bsize);
            let mut labels = Vec::with_capacity(bsize);
            for &i in batch {
                let (z, tape) = mu.embed_traced(&data.samples[i].features)?;
                embeddings.push(z);
                tapes.push(tape);
                labels.push(data.samples[i].label);
            }
            // dz per sample accumulates contributions from every term.
            let mut dz = vec![vec![0.0; mu.embedding_dim()]; bsize];
            // Cross entropy through the frozen head.
            for (i, z) in embeddings.iter().enumerate() {
                let logits = nu.logits(z)?;
                let (loss, dlogits) = softmax_ce(&logits, labels[i])?;
                epoch.ce += loss;
                let back = nu.weight.matvec_transposed(&dlogits);
                for (g, v) in dz[i].iter_mut().zip(&back) {
                    *g += scale * v;
                }
            }
            let mut d_eps = 0.0;
            if ctx.terms == LossTerms::Full && ctx.lambda > 0.0 {
                let margins = Margins::clamped(*epsilon, ctx.epsilon_prime);
                let id =
                    inter_class_discrimination_loss(&embeddings, &labels, &protos, &margins, ctx.distance)?;
                epoch.id += id.loss;
                for (g, gi) in dz.iter_mut().zip(&id.grad_embeddings) {
                    for (a, b) in g.iter_mut().zip(gi) {
                        // The discrimination term is trained as a per-sample
                        // mean so its scale tracks the other terms.
                        *a += ctx.lambda * scale * b;
                    }
                }
                d_eps = ctx.lambda * scale * id.grad_epsilon;
            }
            if ctx.terms == LossTerms::Full && ctx.lambda < 1.0 {
                let ic =
                    intra_class_consistency_loss(&embeddings, &labels, &effective_globals, bsize)?;
                epoch.ic += ic.loss * bsize as f64; // re-expand to a sum for epoch averaging
                for (g, gi) in dz.iter_mut().zip(&ic.grad_embeddings) {
                    for (a, b) in g.iter_mut().zip(gi) {
                        *a += (1.0 - ctx.lambda) * b;
                    }
                }
            }
            // Backward through the extractor, one tape per sample.
            let mut total = SharedGrads::zeros_like(mu);
            for (tape, g) in tapes.into_iter().zip(&dz) {
                let grads = mu.backward(tape, g)?;
                total.add(&grads, 1.0);
            }
            for (layer, (dw, db)) in mu
                .layers
                .iter_mut()
                .zip(total.d_weights.iter().zip(&total.d_biases))
            {
                for (w, g) in layer.weight.data_mut().iter_mut().zip(dw.data()) {
                    *w -= schedule.lr * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(db) {
                    *b -= schedule.lr * g;
                }
            }
            *epsilon = (*epsilon - schedule.lr * d_eps).clamp(0.0, MARGIN_MAX);
        }
        let n = data.len() as f64;
        breakdown = LossBreakdown {
            ce: epoch.ce / n,
            id: epoch.id / n,
            ic: epoch.ic / n,
        };
        let total = breakdown.total(ctx.lambda);
        if !total.is_finite() {
            return Err(FedError::Update(format!(
                "client {client_id} diverged (loss {total}); lower the learning rate"
            )));
        }
    }
    // Fresh prototypes from the final extractor, whatever the epoch count.
    let protos = empirical_prototypes(mu, data, client_id)?;
    Ok((breakdown, protos))
}

/// Joint cross-entropy SGD on extractor and head together, the plain
/// federated-averaging local step. Returns the last epoch's mean loss.
pub fn update_full_ce(
    mu: &mut SharedParams,
    nu: &mut PersonalParams,
    data: &LabeledDataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(FedError::Update("empty client dataset".into()));
    }
    if batch_size == 0 || lr <= 0.0 {
        return Err(FedError::Config("bad schedule for full update".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = 0.0;
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut d_head_w = Matrix::zeros(nu.weight.rows(), nu.weight.cols());
            let mut d_head_b = vec![0.0; nu.bias.len()];
            let mut total = SharedGrads::zeros_like(mu);
            for &i in batch {
                let (z, tape) = mu.embed_traced(&data.samples[i].features)?;
                let logits = nu.logits(&z)?;
                let (loss, dlogits) = softmax_ce(&logits, data.samples[i].label)?;
                epoch_loss += loss;
                for (r, dl) in dlogits.iter().enumerate() {
                    let g = scale * dl;
                    for (j, zj) in z.iter().enumerate() {
                        *d_head_w.at_mut(r, j) += g * zj;
                    }
                    d_head_b[r] += g;
                }
                let dz: Vec<f64> = nu
                    .weight
                    .matvec_transposed(&dlogits)
                    .iter()
                    .map(|v| scale * v)
                    .collect();
                let grads = mu.backward(tape, &dz)?;
                total.add(&grads, 1.0);
            }
            for (layer, (dw, db)) in mu
                .layers
                .iter_mut()
                .zip(total.d_weights.iter().zip(&total.d_biases))
            {
                for (w, g) in layer.weight.data_mut().iter_mut().zip(dw.data()) {
                    *w -= lr * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(db) {
                    *b -= lr * g;
                }
            }
            for (w, g) in nu.weight.data_mut().iter_mut().zip(d_head_w.data()) {
                *w -= lr * g;
            }
            for (b, g) in nu.bias.iter_mut().zip(&d_head_b) {
                *b -= lr * g;
            }
        }
        last_loss = epoch_loss / data.len() as f64;
    }
    Ok(last_loss)
}
