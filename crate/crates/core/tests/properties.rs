use proptest::prelude::*;

use pden::autograd::{instance_stats, Tape};
use pden::data::{apply_shift, decode_idx_images, encode_idx_images, DomainDataset, Provenance, ShiftKind, ShiftSpec};
use pden::losses::{info_nce, info_nce2};
use pden::nn::{Checkpoint, TaskArch, TaskModel};
use pden::{Rng, Tensor};

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let mut t = Tensor::randn(&[rows, dim], 1.0, &mut rng);
    for r in t.data_mut().chunks_mut(dim) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn loss_value(z: &Tensor, f: fn(&Tape, pden::autograd::Var) -> pden::Result<pden::autograd::Var>) -> f64 {
    let tape = Tape::new();
    let v = f(&tape, tape.constant(z.clone())).unwrap();
    tape.value(v).item()
}

fn permute_pairs(z: &Tensor, perm: &[usize]) -> Tensor {
    let half = perm.len();
    let d = z.shape()[1];
    let mut out = Vec::with_capacity(z.len());
    for block in 0..2 {
        for &p in perm {
            let r = block * half + p;
            out.extend_from_slice(&z.data()[r * d..(r + 1) * d]);
        }
    }
    Tensor::new(z.shape().to_vec(), out).unwrap()
}

fn shift_kind() -> impl Strategy<Value = ShiftKind> {
    prop_oneof![
        Just(ShiftKind::Invert),
        Just(ShiftKind::GaussianNoise),
        Just(ShiftKind::Contrast),
        Just(ShiftKind::Brightness),
        Just(ShiftKind::Blur),
        Just(ShiftKind::Pixelate),
        Just(ShiftKind::Speckle),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 2usize..12, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let tape = Tape::new();
        let x = Tensor::randn(&[rows, cols], scale, &mut Rng::new(seed));
        let p = tape.value(tape.softmax(tape.constant(x)).unwrap());
        for r in p.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>()) {
        let tape = Tape::new();
        let x = Tensor::randn(&[rows, cols], 3.0, &mut Rng::new(seed));
        let y = tape.value(tape.l2_normalize(tape.constant(x)).unwrap());
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_losses_ignore_pair_order(pairs in 1usize..7, dim in 2usize..6, seed in any::<u64>()) {
        let z = unit_rows(2 * pairs, dim, seed);
        let mut perm: Vec<usize> = (0..pairs).collect();
        Rng::new(seed ^ 1).shuffle(&mut perm);
        let zp = permute_pairs(&z, &perm);
        prop_assert!((loss_value(&z, info_nce) - loss_value(&zp, info_nce)).abs() < 1e-12);
        prop_assert!((loss_value(&z, info_nce2) - loss_value(&zp, info_nce2)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_losses_have_fixed_signs(pairs in 1usize..7, dim in 2usize..6, seed in any::<u64>()) {
        let z = unit_rows(2 * pairs, dim, seed);
        prop_assert!(loss_value(&z, info_nce) >= -1e-12);
        prop_assert!(loss_value(&z, info_nce2) <= 1e-12);
    }

    #[test]
    fn info_nce_is_rotation_invariant(pairs in 1usize..6, seed in any::<u64>(), theta in 0.0f64..std::f64::consts::TAU) {
        let z = unit_rows(2 * pairs, 2, seed);
        let (c, s) = (theta.cos(), theta.sin());
        let rotated: Vec<f64> = z.data().chunks(2).flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
        let zr = Tensor::new(z.shape().to_vec(), rotated).unwrap();
        prop_assert!((loss_value(&z, info_nce) - loss_value(&zr, info_nce)).abs() < 1e-10);
    }

    #[test]
    fn instance_norm_standardizes_planes(n in 1usize..3, c in 1usize..4, hw in 2usize..6, seed in any::<u64>()) {
        let tape = Tape::new();
        let x = Tensor::randn(&[n, c, hw, hw], 2.0, &mut Rng::new(seed));
        let y = tape.value(tape.instance_norm(tape.constant(x)).unwrap());
        let (mu, sigma) = instance_stats(&y).unwrap();
        prop_assert!(mu.data().iter().all(|m| m.abs() < 1e-9));
        prop_assert!(sigma.data().iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn idx_images_round_trip(m in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut bytes = vec![0, 0, 0x08, 3];
        for d in [m, h, w] {
            bytes.extend_from_slice(&(d as u32).to_be_bytes());
        }
        bytes.extend((0..m * h * w).map(|_| rng.below(256) as u8));
        let decoded = decode_idx_images(&bytes, None).unwrap();
        prop_assert_eq!(encode_idx_images(&decoded), bytes);
    }

    #[test]
    fn shifts_keep_labels_shape_and_range(kind in shift_kind(), severity in 1u8..=5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut x = Tensor::randn(&[6, 1, 8, 8], 1.0, &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        let ds = DomainDataset::new("p", x, vec![0, 1, 2, 0, 1, 2], 3, Provenance::Source).unwrap();
        let out = apply_shift(&ds, &ShiftSpec::new(kind, severity, seed).unwrap()).unwrap();
        prop_assert_eq!(&out.labels, &ds.labels);
        prop_assert_eq!(out.images.shape(), ds.images.shape());
        prop_assert!(out.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), step in any::<u64>()) {
        let arch = TaskArch { in_channels: 1, image_size: 8, conv_channels: vec![3], hidden: 4, classes: 3, proj_dim: 2 };
        let model = TaskModel::init(arch, &mut Rng::new(seed)).unwrap();
        let ckpt = Checkpoint::from_task(&model, seed, step);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.to_task().unwrap(), model);
    }
}
