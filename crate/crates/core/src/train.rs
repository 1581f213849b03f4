//! Minibatch plumbing shared by the trainers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Gradients;

/// Per-epoch objective values and whether the trainer's convergence
/// criterion held at the end.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub converged: bool,
}

pub(crate) fn epoch_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shuffles `0..n` and cuts it into batches of at most `batch_size`.
pub(crate) fn shuffled_batches(
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Sums gradients in slice order so the result does not depend on how the
/// per-example work was scheduled.
pub(crate) fn sum_in_order(
    mut acc: Gradients,
    parts: &[Gradients],
    scale: f64,
) -> Result<Gradients> {
    for g in parts {
        acc.add_scaled(g, scale)?;
    }
    Ok(acc)
}

pub(crate) fn check_finite(value: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{} evaluated to {value}", what())))
    }
}

pub(crate) fn check_finite_grads(grads: &Gradients, what: impl FnOnce() -> String) -> Result<()> {
    if grads.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient of {} is not finite",
            what()
        )))
    }
}

/// True when the last three recorded values never increase.
pub(crate) fn tail_non_increasing(losses: &[f64]) -> bool {
    let tail = &losses[losses.len().saturating_sub(3)..];
    tail.windows(2).all(|w| w[1] <= w[0])
}
