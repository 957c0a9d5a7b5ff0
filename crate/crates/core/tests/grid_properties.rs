use proptest::prelude::*;
use windscale_core::grid::{crop, validate_pair, FieldGrid, SamplePair, VariableId, FACTOR};

fn pair(h_lr: usize, w_lr: usize, seed: u64) -> SamplePair {
    let (h, w) = (h_lr * FACTOR, w_lr * FACTOR);
    let f = |n: usize, k: u64| -> Vec<f64> {
        (0..n).map(|i| (((i as u64).wrapping_mul(2654435761) ^ (seed + k)) % 1000) as f64 / 100.0).collect()
    };
    let mut cov = f(3 * h * w, 3);
    for v in &mut cov[h * w..2 * h * w] {
        *v /= 10.0;
    }
    SamplePair {
        low: FieldGrid::new(VariableId::PREDICTORS.to_vec(), h_lr, w_lr, f(7 * h_lr * w_lr, 1), 20.0).unwrap(),
        high: FieldGrid::new(VariableId::PREDICTANDS.to_vec(), h, w, f(2 * h * w, 2), 2.5).unwrap(),
        covariates: FieldGrid::new(VariableId::COVARIATES.to_vec(), h, w, cov, 2.5).unwrap(),
        timestamp: format!("hour-{seed}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn crops_of_valid_pairs_are_valid_and_aligned(
        h_lr in 2usize..8, w_lr in 2usize..8, seed in 0u64..1000,
        size_lr in 1usize..4, ti in 0usize..8, li in 0usize..8,
    ) {
        let p = pair(h_lr, w_lr, seed);
        prop_assume!(size_lr <= h_lr && size_lr <= w_lr);
        let top_lr = ti % (h_lr - size_lr + 1);
        let left_lr = li % (w_lr - size_lr + 1);
        let c = crop(&p, top_lr * FACTOR, left_lr * FACTOR, size_lr * FACTOR).unwrap();
        prop_assert!(validate_pair(&p).is_empty());
        prop_assert!(validate_pair(&c).is_empty());
        for ch in 0..7 {
            for i in 0..size_lr {
                for j in 0..size_lr {
                    prop_assert_eq!(c.low.get(ch, i, j), p.low.get(ch, top_lr + i, left_lr + j));
                }
            }
        }
    }

    #[test]
    fn crop_commutes_with_channel_selection(seed in 0u64..1000, ti in 0usize..3, li in 0usize..3) {
        let p = pair(4, 4, seed);
        let c = crop(&p, ti * FACTOR, li * FACTOR, 16).unwrap();
        for id in VariableId::PREDICTORS {
            let a = c.low.select(&[id]).unwrap();
            let b = p.low.select(&[id]).unwrap().window(ti, li, 2, 2).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
        for id in VariableId::PREDICTANDS {
            let a = c.high.select(&[id]).unwrap();
            let b = p.high.select(&[id]).unwrap().window(ti * FACTOR, li * FACTOR, 16, 16).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
