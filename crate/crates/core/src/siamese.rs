//! Pair construction, contrastive loss and training of the Siamese subnet.
//!
//! Both branches of the Siamese network share one [`NetworkState`]; a pair
//! is scored by running the same network on each member.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    euclidean_distance, Gradients, NetworkSpec, NetworkState, Optimizer, OptimizerConfig, Tensor,
};
use crate::train::{
    check_finite, check_finite_grads, epoch_rng, shuffled_batches, sum_in_order,
    tail_non_increasing, TrainReport,
};

/// Pair label: `z = 0` for same-class pairs, `z = 1` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Similarity {
    Similar,
    Dissimilar,
}

impl Similarity {
    pub fn z(self) -> f64 {
        match self {
            Similarity::Similar => 0.0,
            Similarity::Dissimilar => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairExample {
    pub i: usize,
    pub j: usize,
    pub label: Similarity,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<PairExample>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, label: Similarity) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }
}

/// Draws, for every anchor, `pairs_per_anchor` same-class partners and
/// `pairs_per_anchor` other-class partners uniformly with replacement.
///
/// Pairs are emitted anchor by anchor, positives first.
pub fn build_pair_set(labels: &[usize], pairs_per_anchor: usize, seed: u64) -> Result<PairSet> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pair construction needs at least 2 classes, found {}",
            by_class.len()
        )));
    }
    if pairs_per_anchor > 0 {
        if let Some((&class, _)) = by_class.iter().find(|(_, members)| members.len() < 2) {
            return Err(Error::SingletonClass { class });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(labels.len() * pairs_per_anchor * 2);
    for (i, &y) in labels.iter().enumerate() {
        let same: Vec<usize> = by_class[&y].iter().copied().filter(|&j| j != i).collect();
        let other: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|&(_, &yj)| yj != y)
            .map(|(j, _)| j)
            .collect();
        for _ in 0..pairs_per_anchor {
            let j = *same.choose(&mut rng).unwrap();
            pairs.push(PairExample {
                i,
                j,
                label: Similarity::Similar,
            });
        }
        for _ in 0..pairs_per_anchor {
            let j = *other.choose(&mut rng).unwrap();
            pairs.push(PairExample {
                i,
                j,
                label: Similarity::Dissimilar,
            });
        }
    }
    Ok(PairSet { pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveParams {
    /// Margin `tau` for dissimilar pairs.
    pub tau: f64,
    /// Weight of the L2 penalty on the subnet weights.
    pub mu_reg: f64,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        Self {
            tau: 1.0,
            mu_reg: 0.0,
        }
    }
}

impl ContrastiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.mu_reg >= 0.0 && self.mu_reg.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mu_reg must be nonnegative, got {}",
                self.mu_reg
            )));
        }
        Ok(())
    }
}

/// Loss value for one pair plus its gradients w.r.t. both embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
}

/// `(1 - z) ||h_i - h_j||^2 + z max(0, tau - ||h_i - h_j||)^2`.
///
/// The hinge uses subgradient 0 at `||h_i - h_j|| == tau`, and the
/// dissimilar gradient is zero when the embeddings coincide.
pub fn contrastive_loss(h_i: &[f64], h_j: &[f64], label: Similarity, tau: f64) -> Result<PairLoss> {
    if h_i.len() != h_j.len() {
        return Err(Error::Shape(format!(
            "embedding lengths differ: {} vs {}",
            h_i.len(),
            h_j.len()
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let diff: Vec<f64> = h_i.iter().zip(h_j).map(|(a, b)| a - b).collect();
    let (value, grad_i): (f64, Vec<f64>) = match label {
        Similarity::Similar => (
            diff.iter().map(|d| d * d).sum(),
            diff.iter().map(|d| 2.0 * d).collect(),
        ),
        Similarity::Dissimilar => {
            let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            if dist >= tau {
                (0.0, vec![0.0; diff.len()])
            } else if dist == 0.0 {
                (tau * tau, vec![0.0; diff.len()])
            } else {
                let gap = tau - dist;
                let coef = -2.0 * gap / dist;
                (gap * gap, diff.iter().map(|d| coef * d).collect())
            }
        }
    };
    let grad_j = grad_i.iter().map(|g| -g).collect();
    Ok(PairLoss {
        value,
        grad_i,
        grad_j,
    })
}

/// The trained embedding map `f: R^m -> R^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SnnModel {
    pub subnet: NetworkState,
}

impl SnnModel {
    pub fn new(subnet: NetworkState) -> Result<Self> {
        if subnet.output_shape().len() != 1 {
            return Err(Error::Shape(format!(
                "embedding network must end in a flat output, got {:?}",
                subnet.output_shape()
            )));
        }
        Ok(Self { subnet })
    }

    pub fn embedding_dim(&self) -> usize {
        self.subnet.output_len()
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.subnet.predict(x)
    }

    /// Embeds each input independently; order of the output matches `xs`.
    pub fn embed_batch(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        xs.par_iter().map(|x| self.embed(x)).collect()
    }
}

/// `sum over pairs of l(x_i, x_j, z_ij) + mu_reg * R(W)` at the current parameters.
pub fn total_loss(
    model: &SnnModel,
    inputs: &[Tensor],
    pairs: &PairSet,
    params: &ContrastiveParams,
) -> Result<f64> {
    let embeddings = model.embed_batch(inputs)?;
    total_loss_from_embeddings(&embeddings, model, pairs, params)
}

fn total_loss_from_embeddings(
    embeddings: &[Tensor],
    model: &SnnModel,
    pairs: &PairSet,
    params: &ContrastiveParams,
) -> Result<f64> {
    let mut sum = 0.0;
    for p in &pairs.pairs {
        let (hi, hj) = (embeddings.get(p.i), embeddings.get(p.j));
        let (Some(hi), Some(hj)) = (hi, hj) else {
            return Err(Error::InvalidArgument(format!(
                "pair ({}, {}) out of range",
                p.i, p.j
            )));
        };
        sum += contrastive_loss(hi.data(), hj.data(), p.label, params.tau)?.value;
    }
    if params.mu_reg > 0.0 {
        sum += params.mu_reg * model.subnet.l2_regularizer().0;
    }
    Ok(sum)
}

/// Loss and parameter gradient of a single pair, both branches through
/// the same network.
pub fn pair_gradients(
    net: &NetworkState,
    x_i: &Tensor,
    x_j: &Tensor,
    label: Similarity,
    tau: f64,
) -> Result<(f64, Gradients)> {
    let acts_i = net.forward(&net.coerce_input(x_i)?)?;
    let acts_j = net.forward(&net.coerce_input(x_j)?)?;
    let loss = contrastive_loss(
        acts_i.last().unwrap().data(),
        acts_j.last().unwrap().data(),
        label,
        tau,
    )?;
    let mut grads = net.backward(&acts_i, &Tensor::from_vec(loss.grad_i))?;
    let gj = net.backward(&acts_j, &Tensor::from_vec(loss.grad_j))?;
    grads.add_scaled(&gj, 1.0)?;
    Ok((loss.value, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnnTrainConfig {
    pub contrastive: ContrastiveParams,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Minimizes the total contrastive objective with minibatch steps.
///
/// Each step follows the gradient of
/// `(1/B) sum_batch l + (mu_reg / P) R(W)` for `P` pairs in total, an
/// unbiased estimate of the full objective scaled by `1/P`. The network is
/// initialized from `optimizer.seed`. The report holds the full objective
/// after every epoch; `converged` is true when its last three values do not
/// increase.
pub fn train_snn(
    inputs: &[Tensor],
    pairs: &PairSet,
    spec: NetworkSpec,
    cfg: &SnnTrainConfig,
) -> Result<(SnnModel, TrainReport)> {
    cfg.contrastive.validate()?;
    cfg.optimizer.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be at least 1".into()));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty pair set".into()));
    }
    if let Some(p) = pairs
        .pairs
        .iter()
        .find(|p| p.i >= inputs.len() || p.j >= inputs.len())
    {
        return Err(Error::InvalidArgument(format!(
            "pair ({}, {}) refers past {} inputs",
            p.i,
            p.j,
            inputs.len()
        )));
    }
    let subnet = NetworkState::init(spec, cfg.optimizer.seed)?;
    if subnet.output_shape().len() != 1 || subnet.output_len() < 2 {
        return Err(Error::Shape(format!(
            "embedding output must be flat with D >= 2, got {:?}",
            subnet.output_shape()
        )));
    }
    let mut model = SnnModel::new(subnet)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &model.subnet)?;
    let mut rng = epoch_rng(cfg.optimizer.seed ^ 0x5157_ab1e);
    let reg_scale = cfg.contrastive.mu_reg / pairs.len() as f64;
    let tau = cfg.contrastive.tau;
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        for (b, batch) in shuffled_batches(pairs.len(), cfg.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let net = &model.subnet;
            let parts: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&k| {
                    let p = pairs.pairs[k];
                    pair_gradients(net, &inputs[p.i], &inputs[p.j], p.label, tau)
                })
                .collect::<Result<_>>()?;
            let batch_loss: f64 = parts.iter().map(|(v, _)| v).sum();
            check_finite(batch_loss, || {
                format!("contrastive loss (epoch {epoch}, batch {b})")
            })?;
            let grads: Vec<Gradients> = parts.into_iter().map(|(_, g)| g).collect();
            let mut step =
                sum_in_order(Gradients::zeros_like(net), &grads, 1.0 / batch.len() as f64)?;
            if reg_scale > 0.0 {
                step.add_scaled(&net.l2_regularizer().1, reg_scale)?;
            }
            check_finite_grads(&step, || {
                format!("contrastive loss (epoch {epoch}, batch {b})")
            })?;
            opt.step(&mut model.subnet, &step)?;
        }
        let loss = total_loss(&model, inputs, pairs, &cfg.contrastive)?;
        check_finite(loss, || {
            format!("total contrastive loss after epoch {epoch}")
        })?;
        log::debug!("snn epoch {epoch}: loss {loss:.6}");
        report.epoch_losses.push(loss);
    }
    report.converged = tail_non_increasing(&report.epoch_losses);
    if !report.converged {
        log::warn!("siamese training did not converge: loss increased over the last epochs");
    }
    Ok((model, report))
}

/// Mean pairwise Euclidean distance within classes and across classes,
/// over all unordered pairs.
pub fn intra_inter_distances(embeddings: &[Tensor], labels: &[usize]) -> (f64, f64) {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..embeddings.len() {
        for b in a + 1..embeddings.len() {
            let d = euclidean_distance(embeddings[a].data(), embeddings[b].data());
            if labels[a] == labels[b] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}
