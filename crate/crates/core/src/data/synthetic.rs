//! Seeded toy datasets with known structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// `classes` isotropic Gaussians in `R^dim` centred at
    /// `0.5 + separation * u_k` for random unit vectors `u_k`, clipped to `[0, 1]`.
    GaussianBlobs {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        std: f64,
    },
    /// Two-class images whose label is carried only by the intensity of a
    /// fixed rectangular block: dark in class 0, bright in class 1. All other
    /// pixels are drawn from the same distribution for both classes.
    PlantedBlock {
        n: usize,
        height: usize,
        width: usize,
        /// `[row, col, block_height, block_width]`.
        block: [usize; 4],
    },
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *spec {
        SyntheticSpec::GaussianBlobs {
            n,
            dim,
            classes,
            separation,
            std,
        } => {
            if n == 0 || dim == 0 || classes < 2 {
                return Err(Error::InvalidArgument(
                    "gaussian_blobs needs n > 0, dim > 0 and at least 2 classes".into(),
                ));
            }
            if !(separation >= 0.0 && std >= 0.0 && separation.is_finite() && std.is_finite()) {
                return Err(Error::InvalidArgument(
                    "gaussian_blobs separation and std must be finite and nonnegative".into(),
                ));
            }
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = dir
                        .iter()
                        .map(|v: &f64| v * v)
                        .sum::<f64>()
                        .sqrt()
                        .max(1e-12);
                    dir.iter().map(|v| 0.5 + separation * v / norm).collect()
                })
                .collect();
            let noise = Normal::new(0.0, std).unwrap();
            let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            labels.shuffle(&mut rng);
            let inputs = labels
                .iter()
                .map(|&y| {
                    Tensor::from_vec(
                        centers[y]
                            .iter()
                            .map(|c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0))
                            .collect(),
                    )
                })
                .collect();
            Ok(Dataset {
                inputs,
                labels,
                spatial: None,
                ground_truth: None,
            })
        }
        SyntheticSpec::PlantedBlock {
            n,
            height,
            width,
            block,
        } => {
            let [r0, c0, bh, bw] = block;
            if n == 0 || bh == 0 || bw == 0 || r0 + bh > height || c0 + bw > width {
                return Err(Error::InvalidArgument(format!(
                    "planted block {block:?} does not fit a {height}x{width} image"
                )));
            }
            let region: Vec<usize> = (r0..r0 + bh)
                .flat_map(|r| (c0..c0 + bw).map(move |c| r * width + c))
                .collect();
            let mut in_block = vec![false; height * width];
            for &i in &region {
                in_block[i] = true;
            }
            let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            labels.shuffle(&mut rng);
            let inputs = labels
                .iter()
                .map(|&y| {
                    Tensor::from_vec(
                        in_block
                            .iter()
                            .map(|&b| match (b, y) {
                                (true, 0) => rng.random_range(0.0..0.15),
                                (true, _) => rng.random_range(0.85..1.0),
                                (false, _) => rng.random_range(0.25..0.75),
                            })
                            .collect(),
                    )
                })
                .collect();
            Ok(Dataset {
                inputs,
                labels,
                spatial: Some((height, width)),
                ground_truth: Some(region),
            })
        }
    }
}
