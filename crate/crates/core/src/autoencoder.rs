//! Autoencoder whose code is tied to the Siamese embeddings.
//!
//! Training minimizes, summed over examples,
//! `gamma ||x - x_rec||^2 + mu_close ||h - h_code||^2 + lambda_reg R(W)`
//! where `h` is the Siamese embedding of `x` and `h_code` the encoder output.
//! The decoder then serves as an approximate inverse of the embedding map.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    squared_distance, Gradients, NetworkSpec, NetworkState, Optimizer, OptimizerConfig, Tensor,
};
use crate::train::{check_finite, check_finite_grads, epoch_rng, shuffled_batches, sum_in_order};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderLossWeights {
    pub gamma: f64,
    pub mu_close: f64,
    pub lambda_reg: f64,
}

impl Default for AutoencoderLossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            mu_close: 1.0,
            lambda_reg: 1e-4,
        }
    }
}

impl AutoencoderLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.mu_close, self.lambda_reg];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and nonnegative, got {all:?}"
            )));
        }
        if self.gamma + self.mu_close <= 0.0 {
            return Err(Error::InvalidArgument(
                "gamma + mu_close must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-example loss `gamma ||x - x_rec||^2 + mu_close ||h_snn - h_code||^2 + lambda_reg * reg_value`.
pub fn autoencoder_loss(
    x: &[f64],
    x_rec: &[f64],
    h_snn: &[f64],
    h_code: &[f64],
    w: &AutoencoderLossWeights,
    reg_value: f64,
) -> Result<f64> {
    if x.len() != x_rec.len() {
        return Err(Error::Shape(format!(
            "input has {} values, reconstruction {}",
            x.len(),
            x_rec.len()
        )));
    }
    if h_snn.len() != h_code.len() {
        return Err(Error::Shape(format!(
            "embedding has {} values, code {}",
            h_snn.len(),
            h_code.len()
        )));
    }
    Ok(w.gamma * squared_distance(x, x_rec)
        + w.mu_close * squared_distance(h_snn, h_code)
        + w.lambda_reg * reg_value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeModel {
    pub encoder: NetworkState,
    /// The reconstruction map from embeddings back to inputs.
    pub decoder: NetworkState,
}

impl AeModel {
    pub fn new(encoder: NetworkState, decoder: NetworkState) -> Result<Self> {
        if encoder.output_shape().len() != 1 || encoder.output_len() != decoder.input_len() {
            return Err(Error::Shape(format!(
                "encoder output {:?} does not feed decoder input {:?}",
                encoder.output_shape(),
                decoder.input_shape()
            )));
        }
        if encoder.input_len() != decoder.output_len() {
            return Err(Error::Shape(format!(
                "decoder output has {} values, encoder input {}",
                decoder.output_len(),
                encoder.input_len()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn init(encoder: NetworkSpec, decoder: NetworkSpec, seed: u64) -> Result<Self> {
        let encoder = NetworkState::init(encoder, seed)?;
        let decoder = NetworkState::init(decoder, seed.wrapping_add(1))?;
        Self::new(encoder, decoder)
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.output_len()
    }

    pub fn input_len(&self) -> usize {
        self.encoder.input_len()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.predict(x)
    }

    /// Decoder forward pass; returns a flat tensor of length `m`.
    pub fn decode(&self, h: &Tensor) -> Result<Tensor> {
        if h.len() != self.decoder.input_len() {
            return Err(Error::Shape(format!(
                "decoder expects {} code values, got {}",
                self.decoder.input_len(),
                h.len()
            )));
        }
        let y = self.decoder.predict(h)?;
        let n = y.len();
        y.reshape(&[n])
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    fn check_embeddings(&self, inputs: &[Tensor], embeddings: &[Tensor]) -> Result<()> {
        if inputs.len() != embeddings.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} embeddings",
                inputs.len(),
                embeddings.len()
            )));
        }
        if let Some(h) = embeddings.iter().find(|h| h.len() != self.code_dim()) {
            return Err(Error::Shape(format!(
                "embedding length {} differs from code length {}",
                h.len(),
                self.code_dim()
            )));
        }
        Ok(())
    }
}

/// Data-term loss of one example and the gradients of both networks.
pub fn example_gradients(
    ae: &AeModel,
    x: &Tensor,
    h: &Tensor,
    w: &AutoencoderLossWeights,
) -> Result<(f64, Gradients, Gradients)> {
    let enc_acts = ae.encoder.forward(&ae.encoder.coerce_input(x)?)?;
    let code = enc_acts.last().unwrap();
    let dec_acts = ae.decoder.forward(&ae.decoder.coerce_input(code)?)?;
    let x_rec = dec_acts.last().unwrap();
    let value = autoencoder_loss(x.data(), x_rec.data(), h.data(), code.data(), w, 0.0)?;

    let g_rec: Vec<f64> = x_rec
        .data()
        .iter()
        .zip(x.data())
        .map(|(r, t)| 2.0 * w.gamma * (r - t))
        .collect();
    let dec_grads = ae.decoder.backward(&dec_acts, &Tensor::from_vec(g_rec))?;
    let mut g_code = dec_grads.input.clone().reshape(&[code.len()])?;
    for ((g, c), t) in g_code.data_mut().iter_mut().zip(code.data()).zip(h.data()) {
        *g += 2.0 * w.mu_close * (c - t);
    }
    let enc_grads = ae.encoder.backward(&enc_acts, &g_code)?;
    Ok((value, enc_grads, dec_grads))
}

/// `sum_i ||h_i - encoder(x_i)||^2`.
pub fn alignment_error(ae: &AeModel, inputs: &[Tensor], embeddings: &[Tensor]) -> Result<f64> {
    let parts: Vec<f64> = inputs
        .par_iter()
        .zip(embeddings)
        .map(|(x, h)| ae.encode(x)?.squared_distance(h))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// `sum_i ||x_i - decoder(encoder(x_i))||^2`.
pub fn reconstruction_error(ae: &AeModel, inputs: &[Tensor]) -> Result<f64> {
    let parts: Vec<f64> = inputs
        .par_iter()
        .map(|x| ae.reconstruct(x)?.squared_distance(x))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// `sum_i ||x_i - decoder(h_i)||^2`, the decoder-only objective.
pub fn decoder_error(ae: &AeModel, inputs: &[Tensor], embeddings: &[Tensor]) -> Result<f64> {
    let parts: Vec<f64> = inputs
        .par_iter()
        .zip(embeddings)
        .map(|(x, h)| ae.decode(h)?.squared_distance(x))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

/// Full objective over a dataset, regularizer included.
pub fn total_loss(
    ae: &AeModel,
    inputs: &[Tensor],
    embeddings: &[Tensor],
    w: &AutoencoderLossWeights,
) -> Result<f64> {
    let reg = ae.encoder.l2_regularizer().0 + ae.decoder.l2_regularizer().0;
    let data = w.gamma * reconstruction_error(ae, inputs)?
        + w.mu_close * alignment_error(ae, inputs, embeddings)?;
    Ok(data + w.lambda_reg * reg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub weights: AutoencoderLossWeights,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeTrainReport {
    pub epoch_losses: Vec<f64>,
    pub alignment_initial: f64,
    pub alignment_final: f64,
    /// Alignment error fell to at most 20% of its initial value.
    pub converged: bool,
}

/// Trains encoder and decoder jointly on `(x_i, h_i)` pairs.
///
/// Minibatch steps follow `(1/B) sum_batch data terms + (lambda_reg / n) R(W)`.
/// Networks are initialized from `optimizer.seed`.
pub fn train_autoencoder(
    inputs: &[Tensor],
    embeddings: &[Tensor],
    encoder: NetworkSpec,
    decoder: NetworkSpec,
    cfg: &AeTrainConfig,
) -> Result<(AeModel, AeTrainReport)> {
    cfg.weights.validate()?;
    cfg.optimizer.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no training inputs".into()));
    }
    let mut ae = AeModel::init(encoder, decoder, cfg.optimizer.seed)?;
    ae.check_embeddings(inputs, embeddings)?;

    let mut enc_opt = Optimizer::new(cfg.optimizer.clone(), &ae.encoder)?;
    let mut dec_opt = Optimizer::new(cfg.optimizer.clone(), &ae.decoder)?;
    let mut rng = epoch_rng(cfg.optimizer.seed ^ 0xae_0001);
    let reg_scale = cfg.weights.lambda_reg / inputs.len() as f64;
    let mut report = AeTrainReport {
        alignment_initial: alignment_error(&ae, inputs, embeddings)?,
        ..Default::default()
    };

    for epoch in 0..cfg.epochs {
        for (b, batch) in shuffled_batches(inputs.len(), cfg.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let model = &ae;
            let parts: Vec<(f64, Gradients, Gradients)> = batch
                .par_iter()
                .map(|&i| example_gradients(model, &inputs[i], &embeddings[i], &cfg.weights))
                .collect::<Result<_>>()?;
            let loss: f64 = parts.iter().map(|p| p.0).sum();
            check_finite(loss, || {
                format!("autoencoder loss (epoch {epoch}, batch {b})")
            })?;
            let scale = 1.0 / batch.len() as f64;
            let (enc_parts, dec_parts): (Vec<Gradients>, Vec<Gradients>) =
                parts.into_iter().map(|(_, e, d)| (e, d)).unzip();
            let mut enc_step = sum_in_order(Gradients::zeros_like(&ae.encoder), &enc_parts, scale)?;
            let mut dec_step = sum_in_order(Gradients::zeros_like(&ae.decoder), &dec_parts, scale)?;
            if reg_scale > 0.0 {
                enc_step.add_scaled(&ae.encoder.l2_regularizer().1, reg_scale)?;
                dec_step.add_scaled(&ae.decoder.l2_regularizer().1, reg_scale)?;
            }
            check_finite_grads(&enc_step, || {
                format!("encoder loss (epoch {epoch}, batch {b})")
            })?;
            check_finite_grads(&dec_step, || {
                format!("decoder loss (epoch {epoch}, batch {b})")
            })?;
            enc_opt.step(&mut ae.encoder, &enc_step)?;
            dec_opt.step(&mut ae.decoder, &dec_step)?;
        }
        let loss = total_loss(&ae, inputs, embeddings, &cfg.weights)?;
        check_finite(loss, || {
            format!("autoencoder objective after epoch {epoch}")
        })?;
        log::debug!("autoencoder epoch {epoch}: loss {loss:.6}");
        report.epoch_losses.push(loss);
    }
    report.alignment_final = alignment_error(&ae, inputs, embeddings)?;
    report.converged =
        cfg.weights.mu_close == 0.0 || report.alignment_final <= 0.2 * report.alignment_initial;
    if !report.converged {
        log::warn!(
            "autoencoder code did not converge to the embeddings: alignment {:.4} -> {:.4}",
            report.alignment_initial,
            report.alignment_final
        );
    }
    Ok((ae, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// `sum_i ||x_i - decoder(h_i)||^2` before fine-tuning, then after each epoch.
    pub objective: Vec<f64>,
    /// Index into `objective` of the returned decoder (0 = unchanged).
    pub best: usize,
}

/// Retrains only the decoder to map Siamese embeddings `h_i` to `x_i`.
///
/// The decoder from the epoch with the lowest objective is kept, which may
/// be the starting decoder. The encoder is never touched.
pub fn finetune_decoder(
    ae: &AeModel,
    embeddings: &[Tensor],
    inputs: &[Tensor],
    cfg: &FinetuneConfig,
) -> Result<(AeModel, FinetuneReport)> {
    cfg.optimizer.validate()?;
    ae.check_embeddings(inputs, embeddings)?;
    let mut report = FinetuneReport {
        objective: vec![decoder_error(ae, inputs, embeddings)?],
        best: 0,
    };
    let mut best = ae.clone();
    if cfg.epochs == 0 {
        return Ok((best, report));
    }
    let mut current = ae.clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &current.decoder)?;
    let mut rng = epoch_rng(cfg.optimizer.seed ^ 0xdec_0001);
    for epoch in 0..cfg.epochs {
        for (b, batch) in shuffled_batches(inputs.len(), cfg.batch_size, &mut rng)
            .iter()
            .enumerate()
        {
            let dec = &current.decoder;
            let parts: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| {
                    let acts = dec.forward(&dec.coerce_input(&embeddings[i])?)?;
                    let out = acts.last().unwrap();
                    let x = inputs[i].data();
                    let g: Vec<f64> = out
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(r, t)| 2.0 * (r - t))
                        .collect();
                    let value = squared_distance(out.data(), x);
                    Ok((value, dec.backward(&acts, &Tensor::from_vec(g))?))
                })
                .collect::<Result<_>>()?;
            let loss: f64 = parts.iter().map(|p| p.0).sum();
            check_finite(loss, || format!("decoder loss (epoch {epoch}, batch {b})"))?;
            let grads: Vec<Gradients> = parts.into_iter().map(|(_, g)| g).collect();
            let step = sum_in_order(Gradients::zeros_like(dec), &grads, 1.0 / batch.len() as f64)?;
            check_finite_grads(&step, || format!("decoder loss (epoch {epoch}, batch {b})"))?;
            opt.step(&mut current.decoder, &step)?;
        }
        let objective = decoder_error(&current, inputs, embeddings)?;
        check_finite(objective, || {
            format!("decoder objective after epoch {epoch}")
        })?;
        log::debug!("finetune epoch {epoch}: objective {objective:.6}");
        if objective < report.objective[report.best] {
            report.best = report.objective.len();
            best.decoder = current.decoder.clone();
        }
        report.objective.push(objective);
    }
    Ok((best, report))
}
