use std::fs;

use proptest::prelude::*;
use siamex::autoencoder::AeModel;
use siamex::data::{
    gen_synthetic, load_autoencoder, load_idx_dataset, load_snn, parse_idx, read_pgm,
    save_autoencoder, save_snn, write_mask_images, Dataset, Idx, SyntheticSpec, CHECKPOINT_VERSION,
};
use siamex::nn::{LayerSpec, NetworkSpec, NetworkState, Padding, Tensor};
use siamex::siamese::SnnModel;
use siamex::Error;

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec())
}

#[test]
fn idx_examples() {
    let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    bytes.extend([0, 255, 10, 20, 30, 40, 50, 60]);
    match parse_idx(&bytes).unwrap() {
        Idx::Images { rows, cols, pixels } => {
            assert_eq!((rows, cols, pixels.len()), (2, 2, 8));
        }
        other => panic!("{other:?}"),
    }
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    fs::write(&img, &bytes).unwrap();
    fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 2, 7, 3]).unwrap();
    let data = load_idx_dataset(&img, &lab, None).unwrap();
    assert_eq!(
        data.inputs[0],
        Tensor::new(vec![4], vec![0.0, 1.0, 10.0 / 255.0, 20.0 / 255.0]).unwrap()
    );
    assert_eq!(data.labels, vec![7, 3]);
    assert_eq!(data.spatial, Some((2, 2)));

    assert_eq!(
        parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2, 3]).unwrap(),
        Idx::Labels(vec![1, 2, 3])
    );
    match parse_idx(&[0, 0, 8, 2, 0, 0, 0, 0]).unwrap_err() {
        Error::IdxMagic { observed, .. } => assert_eq!(observed, 0x802),
        e => panic!("{e}"),
    }
    match parse_idx(&bytes[..20]).unwrap_err() {
        Error::IdxTruncated { expected, actual } => assert_eq!((expected, actual), (24, 20)),
        e => panic!("{e}"),
    }
}

proptest! {
    #[test]
    fn idx_round_trips_byte_for_byte(
        rows in 1usize..6, cols in 1usize..6, count in 0usize..5, seed in any::<u64>(),
    ) {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = vec![0u8; rows * cols * count];
        rng.fill_bytes(&mut pixels);
        let images = Idx::Images { rows, cols, pixels };
        let bytes = images.to_bytes();
        prop_assert_eq!(&parse_idx(&bytes).unwrap(), &images);
        prop_assert_eq!(parse_idx(&bytes).unwrap().to_bytes(), bytes);

        let mut labels = vec![0u8; count];
        rng.fill_bytes(&mut labels);
        let bytes = Idx::Labels(labels).to_bytes();
        prop_assert_eq!(parse_idx(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn planted_block_admits_a_threshold_classifier(seed in any::<u64>(), n in 2usize..200) {
        let spec = SyntheticSpec::PlantedBlock { n, height: 6, width: 5, block: [1, 2, 2, 3] };
        let data = gen_synthetic(&spec, seed).unwrap();
        let block = data.ground_truth.clone().unwrap();
        prop_assert_eq!(block.len(), 6);
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            let mean = block.iter().map(|&i| x.data()[i]).sum::<f64>() / block.len() as f64;
            prop_assert_eq!(usize::from(mean > 0.5), y);
        }
    }
}

fn class_means(data: &Dataset) -> [Vec<f64>; 2] {
    let m = data.input_len();
    let mut sums = [vec![0.0; m], vec![0.0; m]];
    let mut counts = [0.0; 2];
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        for (s, v) in sums[y].iter_mut().zip(x.data()) {
            *s += v;
        }
        counts[y] += 1.0;
    }
    for (s, n) in sums.iter_mut().zip(counts) {
        s.iter_mut().for_each(|v| *v /= n);
    }
    sums
}

#[test]
fn planted_block_classes_differ_only_inside_the_block() {
    let spec = SyntheticSpec::PlantedBlock {
        n: 4000,
        height: 4,
        width: 4,
        block: [0, 0, 2, 2],
    };
    let data = gen_synthetic(&spec, 9).unwrap();
    data.validate().unwrap();
    assert_eq!(data.ground_truth.as_deref(), Some(&[0, 1, 4, 5][..]));
    assert_eq!(data.spatial, Some((4, 4)));
    let [m0, m1] = class_means(&data);
    for i in 0..16 {
        let gap = (m1[i] - m0[i]).abs();
        if [0, 1, 4, 5].contains(&i) {
            assert!(gap > 0.6, "pixel {i}: {gap}");
        } else {
            // Standard error of the difference is about 0.15 / sqrt(1000).
            assert!(gap < 0.03, "pixel {i}: {gap}");
        }
    }
    assert_eq!(gen_synthetic(&spec, 9).unwrap(), data);
    assert_ne!(gen_synthetic(&spec, 10).unwrap(), data);
}

#[test]
fn zero_separation_blobs_are_identically_distributed() {
    let spec = SyntheticSpec::GaussianBlobs {
        n: 4000,
        dim: 6,
        classes: 2,
        separation: 0.0,
        std: 0.1,
    };
    let data = gen_synthetic(&spec, 3).unwrap();
    data.validate().unwrap();
    let [m0, m1] = class_means(&data);
    for i in 0..6 {
        assert!((m0[i] - 0.5).abs() < 0.01 && (m1[i] - 0.5).abs() < 0.01);
        assert!((m1[i] - m0[i]).abs() < 0.015, "feature {i}");
    }
    assert_eq!(data.labels.iter().filter(|&&y| y == 0).count(), 2000);
    assert!(gen_synthetic(
        &SyntheticSpec::GaussianBlobs {
            n: 10,
            dim: 2,
            classes: 1,
            separation: 0.1,
            std: 0.1
        },
        0
    )
    .is_err());
}

fn small_conv() -> NetworkSpec {
    NetworkSpec::new(
        vec![6, 6, 1],
        vec![
            LayerSpec::Conv2D {
                filters: 3,
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
            LayerSpec::Dense { units: 4 },
        ],
    )
}

fn bits(net: &NetworkState) -> Vec<u64> {
    net.param_slices()
        .iter()
        .flat_map(|s| s.iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let snn = SnnModel::new(NetworkState::init(small_conv(), 3).unwrap()).unwrap();
    let probe = Tensor::from_vec((0..36).map(|i| (i as f64 * 0.37).sin().abs()).collect());
    let config = serde_json::json!({"tau": 1.0, "epochs": 3});

    let p1 = dir.path().join("a.ckpt");
    save_snn(&snn, config.clone(), 42, &p1).unwrap();
    let (loaded, ckpt) = load_snn(&p1).unwrap();
    assert_eq!(bits(&loaded.subnet), bits(&snn.subnet));
    assert_eq!((ckpt.seed, ckpt.config.clone()), (42, config.clone()));
    let same = snn
        .embed(&probe)
        .unwrap()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect::<Vec<_>>()
        == loaded
            .embed(&probe)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>();
    assert!(same);

    // A second cycle keeps both the parameters and the file bytes.
    let p2 = dir.path().join("b.ckpt");
    save_snn(&loaded, config, 42, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert_eq!(bits(&load_snn(&p2).unwrap().0.subnet), bits(&snn.subnet));

    let dec = NetworkSpec::new(
        vec![4],
        vec![LayerSpec::Dense { units: 36 }, LayerSpec::Sigmoid],
    );
    let ae = AeModel::init(small_conv(), dec, 5).unwrap();
    let p3 = dir.path().join("ae.ckpt");
    save_autoencoder(&ae, serde_json::Value::Null, 5, &p3).unwrap();
    let (ae2, _) = load_autoencoder(&p3).unwrap();
    assert_eq!(bits(&ae2.encoder), bits(&ae.encoder));
    assert_eq!(bits(&ae2.decoder), bits(&ae.decoder));
}

#[test]
fn checkpoint_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let snn = SnnModel::new(NetworkState::init(small_conv(), 3).unwrap()).unwrap();
    let path = dir.path().join("snn.ckpt");
    save_snn(&snn, serde_json::Value::Null, 0, &path).unwrap();

    assert!(matches!(
        load_autoencoder(&path).unwrap_err(),
        Error::CheckpointRole { .. }
    ));

    let bytes = fs::read(&path).unwrap();
    for cut in [0, 5, 30, bytes.len() / 2, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{cut}.ckpt"));
        fs::write(&p, &bytes[..cut]).unwrap();
        let err = load_snn(&p).unwrap_err();
        assert!(
            matches!(err, Error::CorruptCheckpoint { .. }),
            "cut {cut}: {err}"
        );
    }

    let mut flipped = bytes.clone();
    let mid = flipped.len() - 100;
    flipped[mid] ^= 1;
    let p = dir.path().join("flip.ckpt");
    fs::write(&p, &flipped).unwrap();
    assert!(matches!(
        load_snn(&p).unwrap_err(),
        Error::CorruptCheckpoint { .. }
    ));

    let mut future = bytes;
    future[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let p = dir.path().join("future.ckpt");
    fs::write(&p, &future).unwrap();
    match load_snn(&p).unwrap_err() {
        Error::CheckpointVersion {
            found, expected, ..
        } => {
            assert_eq!(
                (found, expected),
                (CHECKPOINT_VERSION + 1, CHECKPOINT_VERSION)
            )
        }
        e => panic!("{e}"),
    }

    assert!(matches!(
        load_snn(&dir.path().join("missing.ckpt")).unwrap_err(),
        Error::Io { .. }
    ));
}

#[test]
fn mask_image_examples() {
    let dir = tempfile::tempdir().unwrap();
    let original = t(&[0.0, 0.2, 0.6, 1.0]);
    let recon = t(&[0.1, 0.1, 0.5, 0.9]);

    let p = write_mask_images(
        &original,
        &recon,
        &t(&[0.0; 4]),
        (2, 2),
        dir.path(),
        "empty",
    )
    .unwrap();
    assert_eq!(
        read_pgm(&p.overlay).unwrap(),
        read_pgm(&p.original).unwrap()
    );
    assert_eq!(
        fs::read(&p.overlay).unwrap(),
        fs::read(&p.original).unwrap()
    );
    assert_eq!(read_pgm(&p.mask).unwrap().2, vec![0; 4]);

    let p =
        write_mask_images(&original, &recon, &t(&[1.0; 4]), (2, 2), dir.path(), "full").unwrap();
    assert_eq!(read_pgm(&p.mask).unwrap().2, vec![255; 4]);

    let p = write_mask_images(
        &original,
        &recon,
        &t(&[1.0, 0.0, 0.0, 0.0]),
        (2, 2),
        dir.path(),
        "one",
    )
    .unwrap();
    assert_eq!(read_pgm(&p.mask).unwrap(), (2, 2, vec![255, 0, 0, 0]));
    assert_eq!(read_pgm(&p.overlay).unwrap().2, vec![255, 51, 153, 255]);
    assert_eq!(
        read_pgm(&p.reconstruction).unwrap().2,
        vec![26, 26, 128, 230]
    );

    // Raster order: index 1 is row 0, column 1 on a 2-row, 3-column image.
    let wide = t(&[0.0; 6]);
    let p = write_mask_images(
        &wide,
        &wide,
        &t(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        (2, 3),
        dir.path(),
        "wide",
    )
    .unwrap();
    assert_eq!(read_pgm(&p.mask).unwrap(), (3, 2, vec![0, 255, 0, 0, 0, 0]));

    assert!(
        write_mask_images(&original, &recon, &t(&[0.0; 3]), (2, 2), dir.path(), "bad").is_err()
    );
    assert!(
        write_mask_images(&original, &recon, &t(&[0.0; 4]), (1, 3), dir.path(), "bad").is_err()
    );
}
