//! Prototype-directed perturbation explanations.
//!
//! For an input `x` with embedding `h`, the target class `k` is the nearest
//! class prototype `c_k`. The `s` embedding coordinates where `h` is already
//! closest to `c_k` form the important set `J`. Random perturbations on `J`,
//! pushed toward the prototype with half-normal magnitudes, are decoded back
//! to input space, and the `q` input features whose reconstruction changes
//! most on average form the explanation mask.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AeModel;
use crate::error::{Error, Result};
use crate::nn::{squared_distance, NetworkState, Tensor};
use crate::siamese::SnnModel;

/// Per-class mean embeddings, ordered by ascending class id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub classes: Vec<usize>,
    pub prototypes: Vec<Tensor>,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Tensor::len)
    }

    pub fn get(&self, class: usize) -> Option<&Tensor> {
        self.classes
            .binary_search(&class)
            .ok()
            .map(|i| &self.prototypes[i])
    }
}

/// `c_k = (1/n_k) sum_{i: y_i = k} h_i` for every class present in `labels`.
///
/// Each coordinate is summed in sorted order, so the result does not depend
/// on the order of the examples.
pub fn compute_prototypes(embeddings: &[Tensor], labels: &[usize]) -> Result<PrototypeSet> {
    if embeddings.is_empty() {
        return Err(Error::InvalidArgument("no embeddings to average".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = embeddings[0].len();
    if let Some(h) = embeddings.iter().find(|h| h.len() != dim) {
        return Err(Error::Shape(format!(
            "embedding lengths differ: {dim} vs {}",
            h.len()
        )));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        members.entry(y).or_default().push(i);
    }
    let mut set = PrototypeSet {
        classes: Vec::with_capacity(members.len()),
        prototypes: Vec::with_capacity(members.len()),
        counts: Vec::with_capacity(members.len()),
    };
    let mut column = Vec::new();
    for (class, idx) in members {
        let n = idx.len();
        let mean = (0..dim)
            .map(|d| {
                column.clear();
                column.extend(idx.iter().map(|&i| embeddings[i].data()[d]));
                column.sort_by(f64::total_cmp);
                column.iter().sum::<f64>() / n as f64
            })
            .collect();
        set.classes.push(class);
        set.prototypes.push(Tensor::from_vec(mean));
        set.counts.push(n);
    }
    Ok(set)
}

/// Class whose prototype is closest to `h` in Euclidean distance; ties go
/// to the smallest class id.
pub fn nearest_prototype(h: &Tensor, protos: &PrototypeSet) -> Result<usize> {
    if protos.is_empty() {
        return Err(Error::InvalidArgument("empty prototype set".into()));
    }
    if h.len() != protos.dim() {
        return Err(Error::Shape(format!(
            "embedding has {} values, prototypes {}",
            h.len(),
            protos.dim()
        )));
    }
    let mut best = (f64::INFINITY, protos.classes[0]);
    for (class, c) in protos.classes.iter().zip(&protos.prototypes) {
        let d = squared_distance(h.data(), c.data());
        if d < best.0 {
            best = (d, *class);
        }
    }
    Ok(best.1)
}

fn check_pair(h: &Tensor, c: &Tensor) -> Result<()> {
    if h.len() != c.len() {
        return Err(Error::Shape(format!(
            "embedding has {} values, prototype {}",
            h.len(),
            c.len()
        )));
    }
    Ok(())
}

/// Indices of the `s` smallest `|h_i - c_i|`, ties to the smaller index,
/// returned in ascending order.
pub fn select_important_features(h: &Tensor, c: &Tensor, s: usize) -> Result<Vec<usize>> {
    check_pair(h, c)?;
    if s == 0 || s > h.len() {
        return Err(Error::InvalidArgument(format!(
            "s must lie in 1..={}, got {s}",
            h.len()
        )));
    }
    let gaps: Vec<f64> = h
        .data()
        .iter()
        .zip(c.data())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&a, &b| gaps[a].total_cmp(&gaps[b]).then(a.cmp(&b)));
    let mut picked = order[..s].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// `max(sigma_factor * min_i |h_i - c_i|, sigma_floor)`.
pub fn perturbation_sigma(
    h: &Tensor,
    c: &Tensor,
    sigma_factor: f64,
    sigma_floor: f64,
) -> Result<f64> {
    check_pair(h, c)?;
    let min_gap = h
        .data()
        .iter()
        .zip(c.data())
        .map(|(a, b)| (a - b).abs())
        .fold(f64::INFINITY, f64::min);
    Ok((sigma_factor * min_gap).max(sigma_floor))
}

/// Draws `n_samples` sparse perturbations supported on `important`.
///
/// Coordinate `j` gets `sign(c_j - h_j) * |g|` with `g ~ N(0, sigma^2)`,
/// the sign taken as `+1` when `c_j == h_j`. Draws happen sample by sample,
/// coordinates in ascending order.
pub fn sample_perturbations(
    important: &[usize],
    sigma: f64,
    h: &Tensor,
    c: &Tensor,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    check_pair(h, c)?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "n_samples must be at least 1".into(),
        ));
    }
    if important.is_empty() {
        return Err(Error::InvalidArgument(
            "important feature set is empty".into(),
        ));
    }
    if let Some(&j) = important.iter().find(|&&j| j >= h.len()) {
        return Err(Error::InvalidArgument(format!(
            "feature index {j} out of range"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let normal = Normal::new(0.0, sigma).expect("positive finite sigma");
    let signs: Vec<f64> = important
        .iter()
        .map(|&j| {
            if c.data()[j] >= h.data()[j] {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples)
        .map(|_| {
            let mut delta = Tensor::zeros(&[h.len()]);
            for (&j, sign) in important.iter().zip(&signs) {
                let g: f64 = normal.sample(&mut rng);
                delta.data_mut()[j] = sign * g.abs();
            }
            delta
        })
        .collect())
}

const CHANGE_CHUNK: usize = 256;

/// `(1/N) sum_n |decoder(h + delta_n) - decoder(h)|` per output feature.
///
/// Decoder evaluations run in parallel; the sum is accumulated in sample
/// order so the result is identical for any thread count.
pub fn mean_feature_change(
    decoder: &NetworkState,
    h: &Tensor,
    deltas: &[Tensor],
) -> Result<Tensor> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("no perturbations".into()));
    }
    let decode = |v: &Tensor| -> Result<Vec<f64>> { Ok(decoder.predict(v)?.into_data()) };
    let base = decode(h)?;
    if base.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "decoder output for the unperturbed embedding".into(),
        ));
    }
    let mut total = vec![0.0; base.len()];
    for (chunk_idx, chunk) in deltas.chunks(CHANGE_CHUNK).enumerate() {
        let changes: Vec<Vec<f64>> = chunk
            .par_iter()
            .enumerate()
            .map(|(k, delta)| {
                let sample = chunk_idx * CHANGE_CHUNK + k;
                let mut moved = h.clone();
                moved.add_assign(delta)?;
                let out = decode(&moved)?;
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "decoder output for perturbation sample {sample}"
                    )));
                }
                Ok(out.iter().zip(&base).map(|(a, b)| (a - b).abs()).collect())
            })
            .collect::<Result<_>>()?;
        for change in &changes {
            for (t, c) in total.iter_mut().zip(change) {
                *t += c;
            }
        }
    }
    let n = deltas.len() as f64;
    Ok(Tensor::from_vec(total.into_iter().map(|t| t / n).collect()))
}

/// Binary mask with ones at the `q` largest entries, ties to the smaller index.
pub fn top_q_mask(mean_change: &Tensor, q: usize) -> Result<Tensor> {
    Ok(mask_from_indices(
        mean_change.len(),
        &top_q_indices(mean_change, q)?,
    ))
}

/// The `q` largest entries' indices in ascending order.
pub fn top_q_indices(mean_change: &Tensor, q: usize) -> Result<Vec<usize>> {
    let values = mean_change.data();
    if q == 0 || q > values.len() {
        return Err(Error::InvalidArgument(format!(
            "q must lie in 1..={}, got {q}",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut picked = order[..q].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn mask_from_indices(len: usize, indices: &[usize]) -> Tensor {
    let mut mask = Tensor::zeros(&[len]);
    for &i in indices {
        mask.data_mut()[i] = 1.0;
    }
    mask
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Number of important embedding features.
    pub s: usize,
    /// Number of input features in the mask.
    pub q: usize,
    pub n_samples: usize,
    pub sigma_factor: f64,
    pub sigma_floor: f64,
    pub seed: u64,
}

impl PerturbationConfig {
    /// `s = D/2` (at least 1), `q = ceil(m/20)`, 5000 samples, factor 0.1,
    /// floor 1e-6.
    pub fn defaults_for(embedding_dim: usize, input_len: usize) -> Self {
        Self {
            s: (embedding_dim / 2).max(1),
            q: input_len.div_ceil(20).max(1),
            n_samples: 5000,
            sigma_factor: 0.1,
            sigma_floor: 1e-6,
            seed: 0,
        }
    }

    pub fn validate(&self, embedding_dim: usize, input_len: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.s == 0 || self.s > embedding_dim {
            return fail(format!("s must lie in 1..={embedding_dim}, got {}", self.s));
        }
        if self.q == 0 || self.q > input_len {
            return fail(format!("q must lie in 1..={input_len}, got {}", self.q));
        }
        if self.n_samples == 0 {
            return fail("n_samples must be at least 1".into());
        }
        if !(self.sigma_factor > 0.0 && self.sigma_factor.is_finite()) {
            return fail(format!(
                "sigma_factor must be positive, got {}",
                self.sigma_factor
            ));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return fail(format!(
                "sigma_floor must be positive, got {}",
                self.sigma_floor
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationResult {
    /// Nearest-prototype class of the input, not its true label.
    pub target_class: usize,
    /// Important embedding features, ascending.
    pub important: Vec<usize>,
    pub sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Mean absolute reconstruction change per input feature.
    pub mean_change: Tensor,
    pub mask: Tensor,
    /// Positions of the ones in `mask`, ascending.
    pub mask_indices: Vec<usize>,
}

/// Runs the full pipeline for one input.
pub fn explain(
    x: &Tensor,
    snn: &SnnModel,
    ae: &AeModel,
    protos: &PrototypeSet,
    cfg: &PerturbationConfig,
) -> Result<ExplanationResult> {
    let d = snn.embedding_dim();
    if ae.code_dim() != d || protos.dim() != d {
        return Err(Error::Shape(format!(
            "embedding length {d}, decoder input {}, prototypes {}",
            ae.code_dim(),
            protos.dim()
        )));
    }
    cfg.validate(d, ae.decoder.output_len())?;
    let h = snn.embed(x)?;
    let target_class = nearest_prototype(&h, protos)?;
    let c = protos
        .get(target_class)
        .expect("nearest class has a prototype");
    let important = select_important_features(&h, c, cfg.s)?;
    let sigma = perturbation_sigma(&h, c, cfg.sigma_factor, cfg.sigma_floor)?;
    let deltas = sample_perturbations(&important, sigma, &h, c, cfg.n_samples, cfg.seed)?;
    let mean_change = mean_feature_change(&ae.decoder, &h, &deltas)?;
    let mask_indices = top_q_indices(&mean_change, cfg.q)?;
    Ok(ExplanationResult {
        target_class,
        important,
        sigma,
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        mask: mask_from_indices(mean_change.len(), &mask_indices),
        mean_change,
        mask_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v)
    }

    #[test]
    fn prototype_means() {
        let set = compute_prototypes(
            &[t(&[0.0, 0.0]), t(&[2.0, 4.0]), t(&[7.0, 7.0])],
            &[3, 3, 1],
        )
        .unwrap();
        assert_eq!(set.classes, vec![1, 3]);
        assert_eq!(set.counts, vec![1, 2]);
        assert_eq!(set.get(1).unwrap().data(), &[7.0, 7.0]);
        assert_eq!(set.get(3).unwrap().data(), &[1.0, 2.0]);
        assert!(compute_prototypes(&[], &[]).is_err());
    }

    #[test]
    fn nearest_with_ties() {
        let set = PrototypeSet {
            classes: vec![0, 1],
            prototypes: vec![t(&[0.0, 0.0]), t(&[4.0, 0.0])],
            counts: vec![1, 1],
        };
        assert_eq!(nearest_prototype(&t(&[1.0, 0.0]), &set).unwrap(), 0);
        assert_eq!(nearest_prototype(&t(&[4.0, 0.0]), &set).unwrap(), 1);
        assert_eq!(nearest_prototype(&t(&[2.0, 0.0]), &set).unwrap(), 0);
        let empty = PrototypeSet {
            classes: vec![],
            prototypes: vec![],
            counts: vec![],
        };
        assert!(nearest_prototype(&t(&[0.0]), &empty).is_err());
    }

    #[test]
    fn important_features() {
        let h = t(&[1.0, 5.0, 3.0]);
        assert_eq!(
            select_important_features(&h, &t(&[1.0, 0.0, 3.0]), 2).unwrap(),
            vec![0, 2]
        );
        assert_eq!(select_important_features(&h, &h, 2).unwrap(), vec![0, 1]);
        assert_eq!(
            select_important_features(&h, &t(&[9.0, 9.0, 9.0]), 3).unwrap(),
            vec![0, 1, 2]
        );
        assert!(select_important_features(&h, &h, 0).is_err());
        assert!(select_important_features(&h, &h, 4).is_err());
    }

    #[test]
    fn sigma_rule() {
        let h = t(&[1.0, 5.0, 3.0]);
        let s = perturbation_sigma(&h, &t(&[1.5, 0.0, 3.2]), 0.1, 1e-6).unwrap();
        assert!((s - 0.02).abs() < 1e-15, "{s}");
        assert_eq!(
            perturbation_sigma(&h, &t(&[1.0, 0.0, 0.0]), 0.1, 1e-6).unwrap(),
            1e-6
        );
    }

    #[test]
    fn config_validation() {
        let cfg = PerturbationConfig::defaults_for(10, 784);
        assert_eq!((cfg.s, cfg.q, cfg.n_samples), (5, 40, 5000));
        assert!(cfg.validate(10, 784).is_ok());
        let zero_factor = PerturbationConfig {
            sigma_factor: 0.0,
            ..cfg.clone()
        };
        assert!(zero_factor.validate(10, 784).is_err());
        assert!(PerturbationConfig {
            s: 11,
            ..cfg.clone()
        }
        .validate(10, 784)
        .is_err());
        assert!(PerturbationConfig { q: 0, ..cfg }
            .validate(10, 784)
            .is_err());
    }

    #[test]
    fn masks() {
        let m = top_q_mask(&t(&[0.1, 0.9, 0.9, 0.0]), 2).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(
            top_q_mask(&t(&[0.5; 4]), 1).unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(top_q_mask(&t(&[0.3, 0.1]), 2).unwrap().data(), &[1.0, 1.0]);
        assert!(top_q_mask(&t(&[0.3, 0.1]), 3).is_err());
    }

    #[test]
    fn sampler_errors() {
        let h = t(&[0.0, 1.0]);
        assert!(sample_perturbations(&[0], 0.1, &h, &h, 0, 1).is_err());
        assert!(sample_perturbations(&[], 0.1, &h, &h, 5, 1).is_err());
        assert!(sample_perturbations(&[0], 0.0, &h, &h, 5, 1).is_err());
        assert!(sample_perturbations(&[2], 0.1, &h, &h, 5, 1).is_err());
    }
}
