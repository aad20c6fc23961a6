use cotformer_core::autodiff::Tape;
use cotformer_core::cost::macs_model;
use cotformer_core::routing::{capacity_k, select_top_k};
use cotformer_core::{CapacitySchedule, ModelConfig, Tensor, Variant};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in matrix(4, 7, 1e3)) {
        let mut t = Tape::new();
        let v = t.leaf(x);
        let s = t.softmax_rows(v).unwrap();
        for r in 0..4 {
            let row = t.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix(3, 16, 50.0)) {
        let mut t = Tape::new();
        let spread: Vec<f64> = (0..3)
            .map(|r| {
                let row = x.row(r);
                let m = row.iter().sum::<f64>() / 16.0;
                row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0
            })
            .collect();
        prop_assume!(spread.iter().all(|&v| v > 1.0));
        let v = t.leaf(x);
        let g = t.leaf(Tensor::new([16], vec![1.0; 16]).unwrap());
        let b = t.leaf(Tensor::zeros(vec![16]));
        let y = t.layer_norm(v, g, b, 1e-5).unwrap();
        for r in 0..3 {
            let row = t.value(y).row(r);
            let m = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn primitives_stay_finite(x in matrix(2, 8, 1e3)) {
        let mut t = Tape::new();
        let v = t.leaf(x);
        let a = t.gelu(v).unwrap();
        let b = t.sigmoid(v).unwrap();
        let c = t.softmax_rows(v).unwrap();
        for out in [a, b, c] {
            prop_assert!(t.value(out).data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn top_k_picks_highest_scores(scores in prop::collection::vec(0.0f64..1.0, 1..24), c in 0.0f64..=1.0) {
        let n = scores.len();
        let eligible: Vec<usize> = (0..n).collect();
        let kept = select_top_k(&eligible, &scores, c, n);
        prop_assert_eq!(kept.len(), capacity_k(c, n).min(n));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        if let Some(worst) = kept.iter().map(|&i| scores[i]).reduce(f64::min) {
            prop_assert!((0..n).filter(|i| !kept.contains(i)).all(|i| scores[i] <= worst));
        }
    }

    #[test]
    fn macs_grow_with_every_dimension(
        s in 1usize..64,
        r in 1usize..5,
        caps in prop::collection::vec(0.0f64..=1.0, 4),
        bump in 0usize..5,
    ) {
        let mut c = caps;
        c.sort_by(|a, b| b.total_cmp(a));
        c[0] = 1.0;
        c.truncate(r);
        for variant in [Variant::Cotformer, Variant::BlockUniversal] {
            let cfg = ModelConfig::new(variant, (1, 2, 1), r, 16, 2, 64, 128);
            let sched = CapacitySchedule::new(c.clone()).unwrap();
            let base = macs_model(&cfg, s, Some(&sched)).unwrap().total;
            let mut bigger = cfg.clone();
            match bump {
                0 => bigger.d_model = 32,
                1 => bigger.d_ff = 128,
                2 => bigger.n_repeat = r + 1,
                _ => {}
            }
            let sched2 = if bump == 2 {
                let mut v = c.clone();
                v.push(*c.last().unwrap());
                CapacitySchedule::new(v).unwrap()
            } else {
                sched.clone()
            };
            let s2 = if bump == 3 { s + 1 } else { s };
            prop_assert!(macs_model(&bigger, s2, Some(&sched2)).unwrap().total >= base);
            if bump == 4 && r > 1 {
                let mut up = c.clone();
                up[r - 1] = (up[r - 1] + 0.25).min(up[r - 2]);
                let hi = macs_model(&cfg, s, Some(&CapacitySchedule::new(up).unwrap())).unwrap().total;
                prop_assert!(hi >= base);
            }
        }
    }
}
