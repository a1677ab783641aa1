use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reasonedit_core::alignment::{hybrid_loss, LossWeights};
use reasonedit_core::diffusion::{forward_mask, mask_region_with_rate, sample_edit, DiffusionState, NoiseSchedule, SamplerConfig};
use reasonedit_core::microworld::{World, WorldConfig};
use reasonedit_core::tokenization::{dequantize, quantize, Codebook, TokenGrid};
use reasonedit_core::{Graph, Tensor};

fn grid_strategy(k: u32) -> impl Strategy<Value = TokenGrid> {
    (1usize..7, 1usize..7).prop_flat_map(move |(h, w)| {
        proptest::collection::vec(0..k, h * w).prop_map(move |ids| TokenGrid::new(h, w, ids).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.01f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(rows, cols, data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = g.value(y).row_slice(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sampler_never_touches_background(
        source in grid_strategy(5),
        mask_seed in any::<u64>(),
        steps in 1usize..6,
        temperature in prop_oneof![Just(0.0), 0.1f64..2.0],
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let mask: Vec<bool> = (0..source.len()).map(|_| rng.random_bool(0.4)).collect();
        let den = |s: &DiffusionState| Ok(Tensor::full(&[s.grid().len(), 5], 0.0));
        let cfg = SamplerConfig { steps, temperature };
        let (out, commits) = sample_edit(&den, &source, &mask, &NoiseSchedule::cosine(8), &cfg, &mut rng).unwrap();
        prop_assert!(!out.has_mask());
        prop_assert_eq!(commits.len(), mask.iter().filter(|&&m| m).count());
        for c in 0..source.len() {
            if !mask[c] {
                prop_assert_eq!(out.ids()[c], source.ids()[c]);
            }
        }
    }

    #[test]
    fn region_corruption_stays_inside_region(source in grid_strategy(4), seed in any::<u64>(), rate in 0.0f64..=1.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let region: Vec<bool> = (0..source.len()).map(|_| rng.random_bool(0.5)).collect();
        let st = mask_region_with_rate(&source, &region, rate, 1, &mut rng).unwrap();
        for c in 0..source.len() {
            if !region[c] {
                prop_assert!(!st.mask()[c]);
                prop_assert_eq!(st.grid().ids()[c], source.ids()[c]);
            }
        }
        if region.iter().any(|&r| r) {
            prop_assert!(st.masked_count() >= 1);
        }
    }

    #[test]
    fn quantize_inverts_dequantize(grid in grid_strategy(6), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // well-separated codes, so every code is its own nearest neighbour
        let codes: Vec<f64> = (0..6 * 3).map(|i| (i / 3) as f64 * 10.0 + rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::new(Tensor::matrix(6, 3, codes).unwrap()).unwrap();
        let feats = dequantize(&grid, &cb).unwrap();
        prop_assert_eq!(quantize(&feats, &cb).unwrap(), grid);
    }

    #[test]
    fn hybrid_weights_sum_to_one(alpha in 0.0f64..=1.0, con in -5.0f64..5.0, rec in -5.0f64..5.0) {
        let w = LossWeights::new(alpha).unwrap();
        prop_assert!((w.lambda_con + w.lambda_recon - 1.0).abs() <= f64::EPSILON);
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(con));
        let b = g.constant(Tensor::scalar(rec));
        let l = hybrid_loss(&mut g, a, b, alpha).unwrap();
        prop_assert!((g.value(l).item() - (w.lambda_con * con + w.lambda_recon * rec)).abs() < 1e-12);
    }
}

#[test]
fn forward_mask_is_monotone_in_the_schedule() {
    let s = NoiseSchedule::cosine(10);
    let mut prev = -1.0;
    for tau in 0..=10 {
        let r = s.rate(tau).unwrap();
        assert!(r > prev);
        prev = r;
    }
    assert_eq!(s.rate(0).unwrap(), 0.0);
    assert_eq!(s.rate(10).unwrap(), 1.0);
    let grid = TokenGrid::filled(4, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(forward_mask(&grid, 0, &s, &mut rng).unwrap().masked_count(), 0);
    assert_eq!(forward_mask(&grid, 10, &s, &mut rng).unwrap().masked_count(), 16);
    assert!(forward_mask(&grid, 11, &s, &mut rng).is_err());
}

#[test]
fn dataset_generation_is_seed_deterministic() {
    let wc = WorldConfig::desk();
    let a = World::new(wc.clone(), 4).unwrap().build_dataset(4, 30, 10).unwrap();
    let b = World::new(wc, 4).unwrap().build_dataset(4, 30, 10).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.val, b.val);
    for s in a.train.iter().chain(&a.val) {
        for c in 0..s.mask.len() {
            if !s.mask[c] {
                assert_eq!(s.source.ids()[c], s.target.ids()[c]);
            }
        }
    }
}
