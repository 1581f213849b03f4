use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamex::nn::{
    grad_check, max_relative_error, numeric_input_gradient, squared_error, LayerParams, LayerSpec,
    NetworkSpec, NetworkState, Padding, Tensor,
};
use siamex::Error;

fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units }
}

fn conv(filters: usize, k: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec::Conv2D {
        filters,
        kernel: [k, k],
        stride,
        padding,
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn single(spec: LayerSpec, input: Vec<usize>) -> NetworkState {
    NetworkState::init(NetworkSpec::new(input, vec![spec]), 0).unwrap()
}

fn identity_dense(n: usize) -> NetworkState {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = 1.0;
    }
    NetworkState::from_params(
        NetworkSpec::new(vec![n], vec![dense(n)]),
        vec![Some(LayerParams {
            weight: Tensor::new(vec![n, n], w).unwrap(),
            bias: Tensor::zeros(&[n]),
        })],
    )
    .unwrap()
}

#[test]
fn dense_identity_forward() {
    let net = identity_dense(2);
    let y = net.predict(&Tensor::from_vec(vec![3.0, 4.0])).unwrap();
    assert_eq!(y.data(), &[3.0, 4.0]);
}

#[test]
fn activation_values() {
    let relu = single(LayerSpec::ReLU, vec![3]);
    let y = relu
        .predict(&Tensor::from_vec(vec![-1.0, 2.0, 0.0]))
        .unwrap();
    assert_eq!(y.data(), &[0.0, 2.0, 0.0]);

    let sig = single(LayerSpec::Sigmoid, vec![1]);
    assert_eq!(
        sig.predict(&Tensor::from_vec(vec![0.0])).unwrap().data(),
        &[0.5]
    );
}

#[test]
fn pooling_and_upsampling_values() {
    let pool = single(
        LayerSpec::MaxPool2D {
            size: 2,
            padding: Padding::Valid,
        },
        vec![2, 2, 1],
    );
    let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = pool.forward(&x).unwrap().pop().unwrap();
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert_eq!(y.data(), &[4.0]);

    let up = single(LayerSpec::UpSample2D { factor: 2 }, vec![1, 1, 1]);
    let y = up
        .forward(&Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap())
        .unwrap()
        .pop()
        .unwrap();
    assert_eq!(y.shape(), &[2, 2, 1]);
    assert_eq!(y.data(), &[1.0; 4]);
}

#[test]
fn same_pooling_ignores_padding() {
    let pool = single(
        LayerSpec::MaxPool2D {
            size: 2,
            padding: Padding::Same,
        },
        vec![3, 3, 1],
    );
    let x = Tensor::new(
        vec![3, 3, 1],
        vec![-9.0, -8.0, -7.0, -6.0, -5.0, -4.0, -3.0, -2.0, -1.0],
    )
    .unwrap();
    let y = pool.forward(&x).unwrap().pop().unwrap();
    assert_eq!(y.shape(), &[2, 2, 1]);
    assert_eq!(y.data(), &[-5.0, -4.0, -2.0, -1.0]);
}

#[test]
fn forward_shape_error_names_layer() {
    let net = NetworkState::init(
        NetworkSpec::new(vec![4], vec![dense(3), LayerSpec::ReLU]),
        0,
    )
    .unwrap();
    let err = net.forward(&Tensor::from_vec(vec![1.0; 5])).unwrap_err();
    assert!(matches!(err, Error::Layer { index: 0, .. }), "{err}");

    let bad = NetworkSpec::new(
        vec![4],
        vec![dense(3), LayerSpec::Reshape { shape: vec![2, 2] }],
    );
    let err = NetworkState::init(bad, 0).unwrap_err();
    assert!(matches!(err, Error::Layer { index: 1, .. }), "{err}");
}

#[test]
fn dense_gradient_zero_at_optimum() {
    let net = NetworkState::init(NetworkSpec::new(vec![3], vec![dense(2)]), 3).unwrap();
    let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    let acts = net.forward(&x).unwrap();
    let target = acts.last().unwrap().clone();
    let (value, grad_out) = squared_error(&target)(acts.last().unwrap()).unwrap();
    assert_eq!(value, 0.0);
    let grads = net.backward(&acts, &grad_out).unwrap();
    assert!(grads.flatten_params().iter().all(|&g| g == 0.0));
}

#[test]
fn dense_sum_loss_gradient_is_outer_product() {
    let net = NetworkState::init(NetworkSpec::new(vec![3], vec![dense(2)]), 5).unwrap();
    let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    let acts = net.forward(&x).unwrap();
    let grads = net.backward(&acts, &Tensor::full(&[2], 1.0)).unwrap();
    let p = grads.params[0].as_ref().unwrap();
    assert_eq!(p.weight.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    assert_eq!(p.bias.data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_foreign_activations() {
    let net = NetworkState::init(NetworkSpec::new(vec![3], vec![dense(2)]), 5).unwrap();
    let other = NetworkState::init(NetworkSpec::new(vec![4], vec![dense(2)]), 5).unwrap();
    let acts = other.forward(&Tensor::from_vec(vec![1.0; 4])).unwrap();
    assert!(net.backward(&acts, &Tensor::zeros(&[2])).is_err());
    let acts = net.forward(&Tensor::from_vec(vec![1.0; 3])).unwrap();
    assert!(net.backward(&acts[..1], &Tensor::zeros(&[2])).is_err());
}

#[test]
fn grad_check_linear_is_exact() {
    let net = NetworkState::init(NetworkSpec::new(vec![4], vec![dense(3), dense(2)]), 11).unwrap();
    let x = Tensor::from_vec(vec![0.3, -0.2, 0.9, 1.4]);
    let sum_loss = |y: &Tensor| Ok((y.sum(), Tensor::full(y.shape(), 1.0)));
    // The loss is bilinear in consecutive weight matrices, so central
    // differences are exact up to rounding.
    for step in [1e-5, 1e-2, 0.5] {
        let err = grad_check(&net, sum_loss, &x, step).unwrap();
        assert!(err <= 1e-9, "step {step}: {err}");
    }
}

#[test]
fn grad_check_conv_relu_dense() {
    let spec = NetworkSpec::new(
        vec![5, 5, 2],
        vec![
            conv(3, 3, 1, Padding::Same),
            LayerSpec::ReLU,
            LayerSpec::Flatten,
            dense(4),
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let net = NetworkState::init(spec, 7).unwrap();
    let x = random_tensor(&[5, 5, 2], &mut rng);
    let target = random_tensor(&[4], &mut rng);
    let err = grad_check(&net, squared_error(&target), &x, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn grad_check_rejects_bad_step_and_nonfinite_loss() {
    let net = identity_dense(2);
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let loss = |y: &Tensor| Ok((y.sum(), Tensor::full(y.shape(), 1.0)));
    assert!(matches!(
        grad_check(&net, loss, &x, 0.0),
        Err(Error::InvalidArgument(_))
    ));
    let nan = |y: &Tensor| Ok((f64::NAN, Tensor::zeros(y.shape())));
    assert!(matches!(
        grad_check(&net, nan, &x, 1e-5),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn l2_regularizer_values() {
    let spec = NetworkSpec::new(vec![2], vec![dense(2)]);
    let make = |w: Vec<f64>, b: Vec<f64>| {
        NetworkState::from_params(
            spec.clone(),
            vec![Some(LayerParams {
                weight: Tensor::new(vec![2, 2], w).unwrap(),
                bias: Tensor::from_vec(b),
            })],
        )
        .unwrap()
    };
    let (zero, _) = make(vec![0.0; 4], vec![3.0, 1.0]).l2_regularizer();
    assert_eq!(zero, 0.0);

    let net = make(vec![1.0, 2.0, 0.0, -1.0], vec![0.0, 0.0]);
    let (value, grads) = net.l2_regularizer();
    assert_eq!(value, 6.0);
    let p = grads.params[0].as_ref().unwrap();
    assert_eq!(p.weight.data(), &[2.0, 4.0, 0.0, -2.0]);
    assert_eq!(p.bias.data(), &[0.0, 0.0]);

    let (shifted, _) = make(vec![1.0, 2.0, 0.0, -1.0], vec![5.0, -7.0]).l2_regularizer();
    assert_eq!(shifted, value);
}

/// Small networks exercising each layer kind, with trainable layers on
/// both sides so parameter gradients flow through the layer under test.
fn layer_probe_nets() -> Vec<(&'static str, NetworkSpec)> {
    vec![
        ("dense", NetworkSpec::new(vec![5], vec![dense(4), dense(3)])),
        (
            "conv2d-same",
            NetworkSpec::new(
                vec![5, 5, 2],
                vec![conv(3, 3, 1, Padding::Same), LayerSpec::Flatten, dense(2)],
            ),
        ),
        (
            "conv2d-valid",
            NetworkSpec::new(
                vec![4, 4, 2],
                vec![conv(2, 2, 1, Padding::Valid), LayerSpec::Flatten, dense(2)],
            ),
        ),
        (
            "conv2d-stride2",
            NetworkSpec::new(
                vec![5, 5, 1],
                vec![conv(2, 3, 2, Padding::Same), LayerSpec::Flatten, dense(2)],
            ),
        ),
        (
            "maxpool2d",
            NetworkSpec::new(
                vec![4, 4, 1],
                vec![
                    conv(2, 3, 1, Padding::Same),
                    LayerSpec::MaxPool2D {
                        size: 2,
                        padding: Padding::Valid,
                    },
                    LayerSpec::Flatten,
                    dense(2),
                ],
            ),
        ),
        (
            "maxpool2d-same",
            NetworkSpec::new(
                vec![5, 5, 1],
                vec![
                    conv(2, 3, 1, Padding::Same),
                    LayerSpec::MaxPool2D {
                        size: 2,
                        padding: Padding::Same,
                    },
                    LayerSpec::Flatten,
                    dense(2),
                ],
            ),
        ),
        (
            "upsample2d",
            NetworkSpec::new(
                vec![3, 3, 1],
                vec![
                    conv(2, 3, 1, Padding::Same),
                    LayerSpec::UpSample2D { factor: 2 },
                    conv(1, 3, 1, Padding::Same),
                    LayerSpec::Flatten,
                    dense(2),
                ],
            ),
        ),
        (
            "flatten+reshape",
            NetworkSpec::new(
                vec![6],
                vec![
                    dense(8),
                    LayerSpec::Reshape {
                        shape: vec![2, 2, 2],
                    },
                    conv(2, 2, 1, Padding::Same),
                    LayerSpec::Flatten,
                    dense(3),
                ],
            ),
        ),
        (
            "relu",
            NetworkSpec::new(vec![5], vec![dense(6), LayerSpec::ReLU, dense(3)]),
        ),
        (
            "sigmoid",
            NetworkSpec::new(vec![5], vec![dense(6), LayerSpec::Sigmoid, dense(3)]),
        ),
    ]
}

#[test]
fn every_layer_kind_matches_finite_differences() {
    for (name, spec) in layer_probe_nets() {
        for seed in 0..5u64 {
            let net = NetworkState::init(spec.clone(), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = random_tensor(&spec.input_shape, &mut rng);
            let target = random_tensor(net.output_shape(), &mut rng);
            let err = grad_check(&net, squared_error(&target), &x, 1e-5).unwrap();
            assert!(err <= 1e-4, "{name} seed {seed}: max rel err {err}");

            // Input gradient too.
            let acts = net.forward(&x).unwrap();
            let (_, g) = squared_error(&target)(acts.last().unwrap()).unwrap();
            let analytic = net.backward(&acts, &g).unwrap().input;
            let numeric = numeric_input_gradient(&x, 1e-5, |xp| {
                Ok(squared_error(&target)(&net.predict(xp)?)?.0)
            })
            .unwrap();
            let err = max_relative_error(analytic.data(), numeric.data());
            assert!(err <= 1e-4, "{name} seed {seed}: input grad rel err {err}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let (_, spec) = layer_probe_nets().swap_remove(6);
    let a = NetworkState::init(spec.clone(), 42).unwrap();
    let b = NetworkState::init(spec.clone(), 42).unwrap();
    assert_eq!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&spec.input_shape, &mut rng);
    let ya = a.predict(&x).unwrap();
    let yb = b.predict(&x).unwrap();
    assert!(ya
        .data()
        .iter()
        .zip(yb.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn table_one_autoencoder_shapes() {
    let encoder = NetworkSpec::new(
        vec![28, 28, 1],
        vec![
            conv(16, 3, 1, Padding::Same),
            LayerSpec::ReLU,
            LayerSpec::MaxPool2D {
                size: 2,
                padding: Padding::Same,
            },
            conv(8, 3, 1, Padding::Same),
            LayerSpec::ReLU,
            LayerSpec::MaxPool2D {
                size: 2,
                padding: Padding::Same,
            },
            conv(8, 3, 1, Padding::Same),
            LayerSpec::ReLU,
            LayerSpec::MaxPool2D {
                size: 2,
                padding: Padding::Same,
            },
            LayerSpec::Flatten,
            dense(40),
            LayerSpec::ReLU,
            dense(20),
        ],
    );
    let shapes = encoder.shapes().unwrap();
    let expect: [&[usize]; 7] = [
        &[28, 28, 16],
        &[14, 14, 16],
        &[14, 14, 8],
        &[7, 7, 8],
        &[4, 4, 8],
        &[128],
        &[20],
    ];
    let got: Vec<&[usize]> = [1, 3, 4, 6, 9, 10, 13]
        .iter()
        .map(|&i| shapes[i].as_slice())
        .collect();
    assert_eq!(got, expect);

    let decoder = NetworkSpec::new(
        vec![20],
        vec![
            dense(40),
            LayerSpec::ReLU,
            dense(128),
            LayerSpec::ReLU,
            LayerSpec::Reshape {
                shape: vec![4, 4, 8],
            },
            LayerSpec::UpSample2D { factor: 2 },
            conv(8, 2, 1, Padding::Valid),
            LayerSpec::ReLU,
            LayerSpec::UpSample2D { factor: 2 },
            conv(16, 3, 1, Padding::Same),
            LayerSpec::ReLU,
            LayerSpec::UpSample2D { factor: 2 },
            conv(1, 3, 1, Padding::Same),
            LayerSpec::Sigmoid,
        ],
    );
    let shapes = decoder.shapes().unwrap();
    let got: Vec<&[usize]> = [1, 3, 5, 6, 7, 9, 10, 12, 13]
        .iter()
        .map(|&i| shapes[i].as_slice())
        .collect();
    let expect: [&[usize]; 9] = [
        &[40],
        &[128],
        &[4, 4, 8],
        &[8, 8, 8],
        &[7, 7, 8],
        &[14, 14, 8],
        &[14, 14, 16],
        &[28, 28, 16],
        &[28, 28, 1],
    ];
    assert_eq!(got, expect);
}

proptest! {
    #[test]
    fn unit_conv_is_identity(h in 1usize..6, w in 1usize..6, vals in proptest::collection::vec(-5.0f64..5.0, 36)) {
        let spec = NetworkSpec::new(vec![h, w, 1], vec![conv(1, 1, 1, Padding::Same)]);
        let net = NetworkState::from_params(spec, vec![Some(LayerParams {
            weight: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        })]).unwrap();
        let x = Tensor::new(vec![h, w, 1], vals[..h * w].to_vec()).unwrap();
        prop_assert_eq!(net.predict(&x).unwrap(), x);
    }

    #[test]
    fn pool_then_upsample_keeps_shape(k in 1usize..4, hb in 1usize..5, wb in 1usize..5, c in 1usize..4) {
        let shape = vec![hb * k, wb * k, c];
        let spec = NetworkSpec::new(shape.clone(), vec![
            LayerSpec::MaxPool2D { size: k, padding: Padding::Valid },
            LayerSpec::UpSample2D { factor: k },
        ]);
        prop_assert_eq!(spec.output_shape().unwrap(), shape);
    }

    #[test]
    fn flatten_then_reshape_is_identity(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let shape = vec![h, w, c];
        let net = NetworkState::init(NetworkSpec::new(shape.clone(), vec![
            LayerSpec::Flatten,
            LayerSpec::Reshape { shape: shape.clone() },
        ]), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&shape, &mut rng);
        prop_assert_eq!(net.predict(&x).unwrap(), x);
    }
}
