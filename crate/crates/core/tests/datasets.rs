use aetlab_core::datasets::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimal reader written against the format description alone: magic,
/// big-endian dims, raw bytes.
fn reference_idx_images(bytes: &[u8]) -> (Vec<usize>, Vec<u8>) {
    assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
    let dims: Vec<usize> = bytes[4..16]
        .chunks(4)
        .map(|c| ((c[0] as usize) << 24) | ((c[1] as usize) << 16) | ((c[2] as usize) << 8) | c[3] as usize)
        .collect();
    (dims, bytes[16..].to_vec())
}

#[test]
fn idx_image_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw: Vec<u8> = (0..3 * 28 * 28).map(|_| rng.random()).collect();
    let bytes = write_idx_images(3, 28, 28, &raw);
    let Idx::Images { count, rows, cols, pixels } = parse_idx(&bytes).unwrap() else {
        panic!("expected images");
    };
    assert_eq!((count, rows, cols), (3, 28, 28));
    let back: Vec<u8> = pixels.iter().map(|p| (p * 255.0).round() as u8).collect();
    assert_eq!(back, raw);
}

#[test]
fn idx_two_by_two_example_matches_reference_reader() {
    let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    bytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 1, 2]);
    let (dims, payload) = reference_idx_images(&bytes);
    let Idx::Images { count, rows, cols, pixels } = parse_idx(&bytes).unwrap() else {
        panic!("expected images");
    };
    assert_eq!(vec![count, rows, cols], dims);
    assert_eq!(count, 2);
    let expected: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    assert_eq!(pixels, expected);
}

#[test]
fn idx_errors_are_distinct() {
    let good = write_idx_images(2, 2, 2, &[0; 8]);
    assert_eq!(
        parse_idx(&good[..good.len() - 1]),
        Err(DataError::Truncated { expected: 8, got: 7 })
    );
    let mut long = good.clone();
    long.push(0);
    assert_eq!(parse_idx(&long), Err(DataError::TrailingBytes { extra: 1 }));
    let mut bad = good.clone();
    bad[3] = 9;
    assert!(matches!(parse_idx(&bad), Err(DataError::BadMagic(0x0809))));
    assert!(matches!(parse_idx(&good[..10]), Err(DataError::TruncatedHeader { needed: 16, .. })));
}

#[test]
fn idx_labels_and_mnist_assembly() {
    let images = write_idx_images(2, 2, 2, &[255; 8]);
    let labels = write_idx_labels(&[3, 9]);
    let d = mnist_from_idx(&images, &labels, Split::Test).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.labels(), &[3, 9]);
    assert_eq!(d.image_shape(), [1, 2, 2]);
    assert!(d.images().iter().all(|&p| p == 1.0));
    let short = write_idx_labels(&[3]);
    assert!(matches!(
        mnist_from_idx(&images, &short, Split::Test),
        Err(DataError::CountMismatch { .. })
    ));
    let bad_label = write_idx_labels(&[3, 10]);
    assert!(matches!(
        mnist_from_idx(&images, &bad_label, Split::Test),
        Err(DataError::LabelRange { .. })
    ));
}

#[test]
fn cifar_constant_record() {
    let bytes = write_cifar10_bin(&[7], &[255; 3072]);
    assert_eq!(bytes.len(), 3073);
    let d = parse_cifar10_bin(&bytes, Split::Train).unwrap();
    assert_eq!(d.labels(), &[7]);
    assert_eq!(d.image_shape(), [3, 32, 32]);
    assert!(d.image(0).iter().all(|&p| p == 1.0));
}

#[test]
fn cifar_two_record_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pixels: Vec<u8> = (0..2 * 3072).map(|_| rng.random()).collect();
    let bytes = write_cifar10_bin(&[1, 4], &pixels);
    let d = parse_cifar10_bin(&bytes, Split::Train).unwrap();
    let back: Vec<u8> = d.images().iter().map(|p| (p * 255.0).round() as u8).collect();
    assert_eq!(back, pixels);
    assert_eq!(write_cifar10_bin(&[1, 4], &back), bytes);
}

#[test]
fn cifar_length_and_label_errors() {
    assert_eq!(parse_cifar10_bin(&[0; 3072], Split::Train), Err(DataError::CifarLength(3072)));
    let bytes = write_cifar10_bin(&[10], &[0; 3072]);
    assert_eq!(
        parse_cifar10_bin(&bytes, Split::Train),
        Err(DataError::LabelRange { record: 0, label: 10 })
    );
}

#[test]
fn gz_files_are_inflated() {
    use std::io::Write;
    let dir = tempfile::tempdir().unwrap();
    let images = write_idx_images(1, 2, 2, &[0, 255, 0, 255]);
    let labels = write_idx_labels(&[5]);
    let ip = dir.path().join("img.gz");
    let mut enc = flate2::write::GzEncoder::new(std::fs::File::create(&ip).unwrap(), flate2::Compression::default());
    enc.write_all(&images).unwrap();
    enc.finish().unwrap();
    let lp = dir.path().join("lab");
    std::fs::write(&lp, &labels).unwrap();
    let d = load_mnist(&ip, &lp, Split::Train).unwrap();
    assert_eq!(d.labels(), &[5]);
    assert_eq!(d.image(0), &[0.0, 1.0, 0.0, 1.0]);
    assert!(matches!(
        load_mnist(&dir.path().join("missing"), &lp, Split::Train),
        Err(DataError::Io(_))
    ));
}

fn check_invariants(d: &Dataset) {
    assert_eq!(d.images().len(), d.len() * d.image_len());
    assert!(d.images().iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(d.labels().iter().all(|&l| l < d.num_classes()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn parsers_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = parse_idx(&bytes);
        if let Ok(d) = parse_cifar10_bin(&bytes, Split::Train) {
            check_invariants(&d);
        }
    }

    #[test]
    fn idx_with_valid_magic_never_panics(dims in proptest::collection::vec(0u32..6, 3), tail in proptest::collection::vec(any::<u8>(), 0..200)) {
        let mut bytes = vec![0, 0, 8, 3];
        for d in &dims {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(&tail);
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        match parse_idx(&bytes) {
            Ok(Idx::Images { pixels, .. }) => {
                prop_assert_eq!(pixels.len(), expected);
                prop_assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            }
            Ok(Idx::Labels(_)) => prop_assert!(false, "image magic decoded as labels"),
            Err(e) => {
                let expected_kind = matches!(e, DataError::Truncated { .. } | DataError::TrailingBytes { .. });
                prop_assert!(expected_kind, "unexpected error {:?}", e);
            }
        }
        let labels = write_idx_labels(&tail[..tail.len().min(dims[0] as usize)]);
        if let Ok(d) = mnist_from_idx(&bytes, &labels, Split::Train) {
            check_invariants(&d);
        }
    }

    #[test]
    fn cifar_fuzz_records(n in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes: Vec<u8> = (0..n * 3073).map(|_| rng.random()).collect();
        match parse_cifar10_bin(&bytes, Split::Train) {
            Ok(d) => check_invariants(&d),
            Err(e) => {
                let expected_kind = matches!(e, DataError::LabelRange { .. });
                prop_assert!(expected_kind, "unexpected error {:?}", e);
            }
        }
    }
}

fn gaussians(separation: f64, noise: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        kind: SyntheticKind::TwoGaussians,
        n_per_class: 100,
        dim: 4,
        separation,
        noise,
        seed,
    }
}

/// Fisher discriminant on the generated points: pooled covariance, direction
/// `S^-1 (mu1 - mu0)`, threshold halfway between the projected means.
fn lda_accuracy(d: &Dataset) -> f64 {
    let dim = d.image_len();
    let mut means = [DVector::zeros(dim), DVector::zeros(dim)];
    let mut counts = [0.0; 2];
    for i in 0..d.len() {
        means[d.labels()[i]] += DVector::from_column_slice(d.image(i));
        counts[d.labels()[i]] += 1.0;
    }
    for c in 0..2 {
        means[c] /= counts[c];
    }
    let mut s = DMatrix::<f64>::identity(dim, dim) * 1e-9;
    for i in 0..d.len() {
        let v = DVector::from_column_slice(d.image(i)) - &means[d.labels()[i]];
        s += &v * v.transpose();
    }
    let w = s.try_inverse().unwrap() * (&means[1] - &means[0]);
    let t = (w.dot(&means[0]) + w.dot(&means[1])) / 2.0;
    let correct = (0..d.len())
        .filter(|&i| (w.dot(&DVector::from_column_slice(d.image(i))) > t) == (d.labels()[i] == 1))
        .count();
    correct as f64 / d.len() as f64
}

#[test]
fn separated_gaussians_are_linearly_separable() {
    let d = gen_synthetic(&gaussians(10.0, 0.01, 7)).unwrap();
    assert_eq!(lda_accuracy(&d), 1.0);
    check_invariants(&d);
    assert_eq!(d.labels().iter().filter(|&&l| l == 0).count(), 100);
}

#[test]
fn zero_noise_collapses_to_means() {
    let spec = gaussians(10.0, 0.0, 1);
    let d = gen_synthetic(&spec).unwrap();
    let means = spec.class_means();
    for i in 0..d.len() {
        assert_eq!(d.image(i), means[d.labels()[i]].as_slice());
    }
}

#[test]
fn synthetic_is_deterministic() {
    for kind in [SyntheticKind::TwoGaussians, SyntheticKind::TwoMoons] {
        let spec = SyntheticSpec {
            kind,
            ..gaussians(2.0, 0.1, 11)
        };
        let a = gen_synthetic(&spec).unwrap();
        assert_eq!(a, gen_synthetic(&spec).unwrap());
        check_invariants(&a);
        assert_ne!(a, gen_synthetic(&SyntheticSpec { seed: 12, ..spec }).unwrap());
    }
}

#[test]
fn synthetic_spec_validation() {
    assert!(gen_synthetic(&SyntheticSpec {
        n_per_class: 0,
        ..gaussians(1.0, 0.1, 0)
    })
    .is_err());
    assert!(gen_synthetic(&gaussians(1.0, -0.1, 0)).is_err());
    let moons = SyntheticSpec {
        kind: SyntheticKind::TwoMoons,
        dim: 1,
        ..gaussians(1.0, 0.1, 0)
    };
    assert!(gen_synthetic(&moons).is_err());
}

fn random_image(shape: [usize; 3], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shape.iter().product()).map(|_| rng.random::<f64>()).collect()
}

#[test]
fn augment_identity_cases() {
    let shape = [3, 8, 8];
    let img = random_image(shape, 2);
    let none = AugmentConfig {
        pad: 0,
        crop: 8,
        horizontal_flip: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(augment(&img, shape, &none, &mut rng).unwrap(), img);
    let once = augment_at(&img, shape, &none, (0, 0), true).unwrap();
    assert_ne!(once, img);
    assert_eq!(augment_at(&once, shape, &none, (0, 0), true).unwrap(), img);
}

/// Builds the padded image explicitly, then slices the crop window.
fn reference_pad_crop(img: &[f64], [c, h, w]: [usize; 3], pad: usize, crop: usize, off: (usize, usize)) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                padded[(ch * ph + r + pad) * pw + col + pad] = img[(ch * h + r) * w + col];
            }
        }
    }
    let mut out = Vec::new();
    for ch in 0..c {
        for r in 0..crop {
            for col in 0..crop {
                out.push(padded[(ch * ph + r + off.0) * pw + col + off.1]);
            }
        }
    }
    out
}

#[test]
fn pad_four_top_left_band_is_zero() {
    let shape = [3, 32, 32];
    let img: Vec<f64> = random_image(shape, 4).iter().map(|v| 0.01 + 0.98 * v).collect();
    let cfg = AugmentConfig::cifar();
    let out = augment_at(&img, shape, &cfg, (0, 0), false).unwrap();
    assert_eq!(out, reference_pad_crop(&img, shape, 4, 32, (0, 0)));
    for ch in 0..3 {
        for r in 0..32 {
            for col in 0..32 {
                let v = out[(ch * 32 + r) * 32 + col];
                assert_eq!(v == 0.0, r < 4 || col < 4, "({ch},{r},{col})");
            }
        }
    }
    for off in [(3, 5), (8, 8), (0, 7)] {
        assert_eq!(
            augment_at(&img, shape, &cfg, off, false).unwrap(),
            reference_pad_crop(&img, shape, 4, 32, off)
        );
    }
}

#[test]
fn augment_rejects_oversized_crop() {
    let shape = [1, 4, 4];
    let cfg = AugmentConfig {
        pad: 1,
        crop: 7,
        horizontal_flip: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        augment(&random_image(shape, 0), shape, &cfg, &mut rng),
        Err(DataError::Spec(_))
    ));
}

proptest! {
    #[test]
    fn augment_stays_in_range(seed in any::<u64>(), flip in any::<bool>()) {
        let shape = [1, 28, 28];
        let img = random_image(shape, seed);
        let cfg = AugmentConfig { horizontal_flip: flip, ..AugmentConfig::mnist() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&img, shape, &cfg, &mut rng).unwrap();
        prop_assert_eq!(out.len(), 28 * 28);
        prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn stratified_subsets() {
    let spec = SyntheticSpec {
        n_per_class: 50,
        ..gaussians(3.0, 0.2, 9)
    };
    let d = gen_synthetic(&spec).unwrap();
    let s = d.stratified_subset(10, 1);
    assert_eq!(s.len(), 20);
    assert_eq!(s.labels().iter().filter(|&&l| l == 1).count(), 10);
    assert_eq!(s, d.stratified_subset(10, 1));
    let (train, test) = d.stratified_split(30, 20, 4);
    assert_eq!((train.len(), test.len()), (60, 40));
    assert_eq!(test.split, Split::Test);
    let rows = |x: &Dataset| (0..x.len()).map(|i| x.image(i).to_vec()).collect::<Vec<_>>();
    let tr = rows(&train);
    assert!(rows(&test).iter().all(|r| !tr.contains(r)));
}
