//! Cross-module invariants checked on random inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deeptn::experiments::ImageRunConfig;
use deeptn::io::{self, Checkpoint, ImageDataset};
use deeptn::mpo::{MpoInit, MpoLayer};
use deeptn::mps::{ensemble_logits, MpsHeadConfig};
use deeptn::{decode, embed, oracle, Activation, MpoConfig, MpsHead};

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Linear),
        Just(Activation::Sigmoid),
        Just(Activation::MatrixExp)
    ]
}

fn pixels(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_agrees_with_dense_contraction(
        seed in any::<u64>(),
        x in (2usize..=6).prop_flat_map(pixels),
        bond_dim in 1usize..=4,
        act in activation(),
        flags in any::<(bool, bool, bool, bool)>(),
    ) {
        let (residual, normalize_output, normalize_contexts, per_site) = flags;
        let config = MpoConfig {
            residual,
            normalize_output,
            normalize_contexts,
            sites: per_site.then_some(x.len()),
            ..MpoConfig::uniform(bond_dim, act)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = MpoLayer::init(config, MpoInit { identity_scale: 1.0, noise_std: 0.3 }, &mut rng).unwrap();
        let emb = embed(&x).unwrap();
        let got = layer.forward(&emb).unwrap();
        let want = oracle::dense_layer_forward(&layer, &emb);
        for (g, w) in got.as_tensor().data().iter().zip(want.as_tensor().data()) {
            prop_assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()), "{g} vs {w}");
        }
    }

    #[test]
    fn head_agrees_with_dense_contraction(
        seed in any::<u64>(),
        x in (1usize..=7).prop_flat_map(pixels),
        bond_dim in 1usize..=4,
        classes in 2usize..=5,
        per_site in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = MpsHeadConfig::new(bond_dim, classes, per_site.then_some(x.len()));
        let head = MpsHead::init(config, 0.3, &mut rng).unwrap();
        let emb = embed(&x).unwrap();
        let got = head.logits(&emb).unwrap();
        let want = oracle::dense_mps_logits(&head, &emb);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn identity_linear_layer_preserves_decoded_values(x in (1usize..=12).prop_flat_map(pixels), bond_dim in 1usize..=3) {
        let layer = MpoLayer::identity(MpoConfig::uniform(bond_dim, Activation::Linear)).unwrap();
        let emb = embed(&x).unwrap();
        let back = decode(&layer.forward(&emb).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_of_copies_matches_member(seed in any::<u64>(), x in (2usize..=6).prop_flat_map(pixels), copies in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = MpsHead::init(MpsHeadConfig::new(3, 3, None), 0.3, &mut rng).unwrap();
        let logits = head.logits(&embed(&x).unwrap()).unwrap();
        let avg = ensemble_logits(&vec![logits.clone(); copies]).unwrap();
        for (a, b) in avg.iter().zip(&logits) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn idx_round_trip(raw in prop::collection::vec(prop::collection::vec(any::<u8>(), 12), 1..6), labels in prop::collection::vec(0usize..10, 6)) {
        let images: Vec<Vec<f64>> = raw.iter().map(|im| im.iter().map(|&p| f64::from(p) / 255.0).collect()).collect();
        let data = ImageDataset::new(3, 4, images, labels[..raw.len()].to_vec()).unwrap();
        let (img_bytes, lbl_bytes) = io::to_idx(&data);
        let (count, rows, cols, pixels) = io::parse_idx_images(&img_bytes).unwrap();
        prop_assert_eq!((count, rows, cols), (raw.len(), 3, 4));
        prop_assert_eq!(pixels, raw.concat());
        let labels_back: Vec<usize> = io::parse_idx_labels(&lbl_bytes).unwrap().into_iter().map(usize::from).collect();
        prop_assert_eq!(labels_back, data.labels);
    }

    #[test]
    fn pixel_permutation_inverts(len in 1usize..200, seed in any::<u64>()) {
        let p = io::permutation(len, seed);
        let inv = io::invert_permutation(&p);
        for (i, &j) in p.iter().enumerate() {
            prop_assert_eq!(inv[j], i);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_is_bit_identical(seed in any::<u64>(), layers in 0usize..=2, uniform in any::<bool>()) {
        let config = ImageRunConfig { layers, uniform, mpo_bond_dim: 2, mps_bond_dim: 3, ..ImageRunConfig::default() };
        let net = config.build_network(9, 4, seed).unwrap();
        let mut bytes = Vec::new();
        io::write_checkpoint(&Checkpoint { net: net.clone(), config: None, seed }, &mut bytes).unwrap();
        let back = io::read_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.seed, seed);
        let (a, b) = (net.parameters(), back.net.parameters());
        prop_assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            prop_assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
