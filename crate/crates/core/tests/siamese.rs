use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamex::data::{gen_synthetic, SyntheticSpec};
use siamex::nn::{
    max_relative_error, numeric_gradient, LayerParams, LayerSpec, NetworkSpec, NetworkState,
    OptimizerConfig, Padding, Tensor,
};
use siamex::siamese::{
    build_pair_set, contrastive_loss, intra_inter_distances, pair_gradients, total_loss, train_snn,
    ContrastiveParams, Similarity, SnnModel, SnnTrainConfig,
};
use siamex::Error;

fn both() -> [Similarity; 2] {
    [Similarity::Similar, Similarity::Dissimilar]
}

fn toy_spec(m: usize, d: usize) -> NetworkSpec {
    NetworkSpec::new(
        vec![m],
        vec![
            LayerSpec::Dense { units: 64 },
            LayerSpec::ReLU,
            LayerSpec::Dense { units: d },
        ],
    )
}

fn numeric_loss_grad(
    h_i: &[f64],
    h_j: &[f64],
    label: Similarity,
    tau: f64,
    step: f64,
) -> (Vec<f64>, Vec<f64>) {
    let f = |a: &[f64], b: &[f64]| contrastive_loss(a, b, label, tau).unwrap().value;
    let mut gi = vec![0.0; h_i.len()];
    let mut gj = vec![0.0; h_j.len()];
    for k in 0..h_i.len() {
        let (mut p, mut m) = (h_i.to_vec(), h_i.to_vec());
        p[k] += step;
        m[k] -= step;
        gi[k] = (f(&p, h_j) - f(&m, h_j)) / (2.0 * step);
        let (mut p, mut m) = (h_j.to_vec(), h_j.to_vec());
        p[k] += step;
        m[k] -= step;
        gj[k] = (f(h_i, &p) - f(h_i, &m)) / (2.0 * step);
    }
    (gi, gj)
}

proptest! {
    #[test]
    fn loss_is_symmetric_and_nonnegative(
        a in proptest::collection::vec(-2.0f64..2.0, 4),
        b in proptest::collection::vec(-2.0f64..2.0, 4),
        tau in 0.1f64..3.0,
    ) {
        for label in both() {
            let ab = contrastive_loss(&a, &b, label, tau).unwrap();
            let ba = contrastive_loss(&b, &a, label, tau).unwrap();
            prop_assert_eq!(ab.value, ba.value);
            prop_assert_eq!(&ab.grad_i, &ba.grad_j);
            prop_assert!(ab.value >= 0.0);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences(
        a in proptest::collection::vec(-2.0f64..2.0, 3),
        b in proptest::collection::vec(-2.0f64..2.0, 3),
        tau in 0.1f64..3.0,
    ) {
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        prop_assume!((dist - tau).abs() > 1e-3 && dist > 1e-3);
        for label in both() {
            let l = contrastive_loss(&a, &b, label, tau).unwrap();
            let (gi, gj) = numeric_loss_grad(&a, &b, label, tau, 1e-5);
            let err = max_relative_error(&[l.grad_i.clone(), l.grad_j.clone()].concat(), &[gi, gj].concat());
            prop_assert!(err <= 1e-4, "rel err {}", err);
        }
    }
}

#[test]
fn zero_loss_exactly_in_the_stated_cases() {
    let h = [0.25, -1.5, 3.0];
    assert_eq!(
        contrastive_loss(&h, &h, Similarity::Similar, 1.0)
            .unwrap()
            .value,
        0.0
    );
    assert!(
        contrastive_loss(&h, &[0.25, -1.5, 3.1], Similarity::Similar, 1.0)
            .unwrap()
            .value
            > 0.0
    );
    assert_eq!(
        contrastive_loss(&[0.0, 0.0], &[1.0, 0.0], Similarity::Dissimilar, 1.0)
            .unwrap()
            .value,
        0.0
    );
    assert!(
        contrastive_loss(&[0.0, 0.0], &[0.5, 0.0], Similarity::Dissimilar, 1.0)
            .unwrap()
            .value
            > 0.0
    );
}

#[test]
fn pair_loss_parameter_gradients_match_finite_differences() {
    let spec = NetworkSpec::new(
        vec![4, 4, 1],
        vec![
            LayerSpec::Conv2D {
                filters: 2,
                kernel: [3, 3],
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::ReLU,
            LayerSpec::MaxPool2D {
                size: 2,
                padding: Padding::Valid,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 3 },
        ],
    );
    for seed in 0..5u64 {
        let net = NetworkState::init(spec.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let xi = Tensor::from_vec((0..16).map(|_| rng.random_range(0.0..1.0)).collect());
        let xj = Tensor::from_vec((0..16).map(|_| rng.random_range(0.0..1.0)).collect());
        for (label, tau) in [(Similarity::Similar, 1.0), (Similarity::Dissimilar, 5.0)] {
            let (_, grads) = pair_gradients(&net, &xi, &xj, label, tau).unwrap();
            let numeric = numeric_gradient(&net, 1e-5, |probe| {
                let hi = probe.predict(&xi)?;
                let hj = probe.predict(&xj)?;
                Ok(contrastive_loss(hi.data(), hj.data(), label, tau)?.value)
            })
            .unwrap();
            let err = max_relative_error(&grads.flatten_params(), &numeric);
            assert!(err <= 1e-4, "seed {seed} {label:?}: {err}");
        }
    }
}

fn identity_model(n: usize) -> SnnModel {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = 1.0;
    }
    let net = NetworkState::from_params(
        NetworkSpec::new(vec![n], vec![LayerSpec::Dense { units: n }]),
        vec![Some(LayerParams {
            weight: Tensor::new(vec![n, n], w).unwrap(),
            bias: Tensor::zeros(&[n]),
        })],
    )
    .unwrap();
    SnnModel::new(net).unwrap()
}

#[test]
fn embed_contracts() {
    let model = identity_model(3);
    let x = Tensor::from_vec(vec![0.1, 0.7, 0.3]);
    assert_eq!(model.embed(&x).unwrap(), x);

    let model = SnnModel::new(NetworkState::init(toy_spec(5, 2), 4).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs: Vec<Tensor> = (0..17)
        .map(|_| Tensor::from_vec((0..5).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect();
    let batch = model.embed_batch(&xs).unwrap();
    for (x, h) in xs.iter().zip(&batch) {
        assert_eq!(h, &model.embed(x).unwrap());
        assert_eq!(h, model.subnet.forward(x).unwrap().last().unwrap());
        assert_eq!(h.len(), model.embedding_dim());
    }
    assert!(model.embed(&Tensor::from_vec(vec![0.0; 4])).is_err());
}

#[test]
fn total_loss_at_initialization_is_sum_of_pair_terms() {
    let data = gen_synthetic(
        &SyntheticSpec::GaussianBlobs {
            n: 30,
            dim: 6,
            classes: 3,
            separation: 0.3,
            std: 0.1,
        },
        2,
    )
    .unwrap();
    let pairs = build_pair_set(&data.labels, 2, 8).unwrap();
    let model = SnnModel::new(NetworkState::init(toy_spec(6, 3), 1).unwrap()).unwrap();
    let params = ContrastiveParams {
        tau: 1.0,
        mu_reg: 0.0,
    };
    let mut expected = 0.0;
    for p in &pairs.pairs {
        let hi = model.embed(&data.inputs[p.i]).unwrap();
        let hj = model.embed(&data.inputs[p.j]).unwrap();
        expected += contrastive_loss(hi.data(), hj.data(), p.label, 1.0)
            .unwrap()
            .value;
    }
    assert_eq!(
        total_loss(&model, &data.inputs, &pairs, &params).unwrap(),
        expected
    );

    let with_reg = ContrastiveParams {
        tau: 1.0,
        mu_reg: 0.5,
    };
    let reg = model.subnet.l2_regularizer().0;
    let got = total_loss(&model, &data.inputs, &pairs, &with_reg).unwrap();
    assert!((got - (expected + 0.5 * reg)).abs() <= 1e-12 * got.abs());
}

fn toy_config(epochs: usize, seed: u64) -> SnnTrainConfig {
    SnnTrainConfig {
        contrastive: ContrastiveParams::default(),
        optimizer: OptimizerConfig {
            seed,
            ..OptimizerConfig::default()
        },
        epochs,
        batch_size: 16,
    }
}

#[test]
fn toy_blobs_separate_after_training() {
    let data = gen_synthetic(
        &SyntheticSpec::GaussianBlobs {
            n: 200,
            dim: 8,
            classes: 2,
            separation: 0.3,
            std: 0.1,
        },
        11,
    )
    .unwrap();
    let (train, _) = data.split(150);
    let pairs = build_pair_set(&train.labels, 1, 5).unwrap();
    let (model, report) =
        train_snn(&train.inputs, &pairs, toy_spec(8, 2), &toy_config(200, 3)).unwrap();
    assert_eq!(report.epoch_losses.len(), 200);
    assert!(report.epoch_losses.last().unwrap() < report.epoch_losses.first().unwrap());

    let emb = model.embed_batch(&train.inputs).unwrap();
    let (intra, inter) = intra_inter_distances(&emb, &train.labels);
    assert!(intra < inter, "intra {intra} inter {inter}");
}

#[test]
fn training_is_bit_reproducible() {
    let data = gen_synthetic(
        &SyntheticSpec::GaussianBlobs {
            n: 60,
            dim: 8,
            classes: 2,
            separation: 0.3,
            std: 0.1,
        },
        1,
    )
    .unwrap();
    let pairs = build_pair_set(&data.labels, 1, 2).unwrap();
    let (a, _) = train_snn(&data.inputs, &pairs, toy_spec(8, 2), &toy_config(5, 9)).unwrap();
    let (b, _) = train_snn(&data.inputs, &pairs, toy_spec(8, 2), &toy_config(5, 9)).unwrap();
    let bits = |m: &SnnModel| -> Vec<u64> {
        m.subnet
            .param_slices()
            .iter()
            .flat_map(|s| s.iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn training_rejects_bad_input() {
    let data = gen_synthetic(
        &SyntheticSpec::GaussianBlobs {
            n: 20,
            dim: 4,
            classes: 2,
            separation: 0.3,
            std: 0.1,
        },
        1,
    )
    .unwrap();
    let pairs = build_pair_set(&data.labels, 1, 2).unwrap();
    assert!(train_snn(&data.inputs, &pairs, toy_spec(4, 2), &toy_config(0, 0)).is_err());
    assert!(train_snn(&data.inputs, &pairs, toy_spec(4, 1), &toy_config(1, 0)).is_err());

    let mut poisoned = data.inputs.clone();
    poisoned[3].data_mut()[0] = f64::NAN;
    let err = train_snn(&poisoned, &pairs, toy_spec(4, 2), &toy_config(1, 0)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}
