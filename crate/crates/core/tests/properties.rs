use polysemy::dedup::{chi, exhaustive_select, select_queries, SelectionProblem};
use polysemy::features::{read_feature_bank, write_feature_bank, FeatureBank};
use polysemy::matching::accumulate_counts;
use polysemy::mil::{forward_bag, Aggregator, Bag, MilModel};
use polysemy::saliency::{otsu_threshold, Grid};
use proptest::prelude::*;

fn vectors(dim: usize, max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), 1..max)
}

fn selection_problem() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (2usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(-2.0f64..1.0, n * (n - 1) / 2),
        )
            .prop_map(move |(phi, upper)| {
                let mut d = vec![vec![0.0; n]; n];
                let mut k = 0;
                for i in 0..n {
                    for j in (i + 1)..n {
                        d[i][j] = upper[k];
                        d[j][i] = upper[k];
                        k += 1;
                    }
                }
                (phi, d)
            })
    })
}

proptest! {
    #[test]
    fn bank_round_trips(dim in 1usize..12, rows in prop::collection::vec(prop::collection::vec(any::<f32>(), 12), 0..20)) {
        let mut bank = FeatureBank::new(dim).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let row: Vec<f64> = row[..dim].iter().map(|&v| if v.is_finite() { v as f64 } else { 0.5 }).collect();
            bank.insert(format!("id-{i}"), row).unwrap();
        }
        let mut buf = Vec::new();
        write_feature_bank(&bank, &mut buf).unwrap();
        let back = read_feature_bank(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), bank.len());
        for ((a, x), (b, y)) in bank.iter().zip(back.iter()) {
            prop_assert_eq!(a, b);
            let xb: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(xb, yb);
        }
    }

    #[test]
    fn counts_fall_as_tau_rises(q in vectors(4, 6), pool in vectors(4, 30), lo in -1.0f64..1.0, hi in -1.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let a = accumulate_counts(&q, &pool, lo).unwrap();
        let b = accumulate_counts(&q, &pool, hi).unwrap();
        prop_assert!(b.total <= a.total);
        for (x, y) in a.per_image.iter().zip(&b.per_image) {
            prop_assert!(y <= x);
        }
    }

    #[test]
    fn counts_ignore_pool_order(q in vectors(3, 5), pool in vectors(3, 20), tau in -1.0f64..1.0, seed in any::<u64>()) {
        let mut shuffled = pool.clone();
        let mut rng = polysemy::math::rng(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        prop_assert_eq!(accumulate_counts(&q, &pool, tau).unwrap().total, accumulate_counts(&q, &shuffled, tau).unwrap().total);
    }

    #[test]
    fn bag_probabilities_ignore_instance_order(
        inst in vectors(3, 7),
        w in prop::collection::vec(-2.0f64..2.0, 9),
        b in prop::collection::vec(-1.0f64..1.0, 3),
        agg in prop::sample::select(Aggregator::ALL.to_vec()),
    ) {
        let names = vec!["a".into(), "b".into(), "c".into()];
        let model = MilModel::from_parts(names, 3, agg, w, b).unwrap();
        let mut rev = inst.clone();
        rev.reverse();
        let p = forward_bag(&model, &Bag { bag_id: "x".into(), instances: inst, label: 0 }).unwrap().probabilities;
        let q = forward_bag(&model, &Bag { bag_id: "x".into(), instances: rev, label: 0 }).unwrap().probabilities;
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() <= 1e-12, "{:?} vs {:?}", p, q);
        }
    }

    #[test]
    fn chi_is_increasing(a in 0.0f64..1.0, b in 0.0f64..1.0, alpha in 0.0f64..1.0, beta in 0.1f64..50.0) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(chi(hi, alpha, beta) >= chi(lo, alpha, beta));
        prop_assert!(chi(hi, alpha, beta) <= 1.0);
    }

    #[test]
    fn otsu_ignores_positive_affine_maps(
        cells in prop::collection::vec(0u32..64, 16..100),
        scale_exp in -4i32..5,
        shift in -64i32..64,
    ) {
        // dyadic values keep the min-max normalization exact
        prop_assume!(cells.iter().any(|&c| c != cells[0]));
        let n = cells.len();
        let base: Vec<f64> = cells.iter().map(|&c| c as f64 / 8.0).collect();
        let scale = 2f64.powi(scale_exp);
        let moved: Vec<f64> = base.iter().map(|v| v * scale + shift as f64 / 4.0).collect();
        let a = otsu_threshold(&Grid::new(1, n, base).unwrap()).unwrap();
        let b = otsu_threshold(&Grid::new(1, n, moved).unwrap()).unwrap();
        prop_assert_eq!(a.bin, b.bin);
    }

    #[test]
    fn selection_ignores_positive_scaling((phi, d) in selection_problem(), lambda in 0.25f64..4.0, exp in -3i32..4, seed in any::<u64>()) {
        // scaling lambda and D together scales the objective
        let c = 2f64.powi(exp);
        let p = SelectionProblem::new(phi.clone(), d.clone(), lambda).unwrap();
        let scaled_d: Vec<Vec<f64>> = d.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let q = SelectionProblem::new(phi, scaled_d, lambda * c).unwrap();
        prop_assert_eq!(select_queries(&p, 4, seed).gamma, select_queries(&q, 4, seed).gamma);
        prop_assert_eq!(exhaustive_select(&p).unwrap().gamma, exhaustive_select(&q).unwrap().gamma);
    }
}
