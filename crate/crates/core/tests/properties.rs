use std::path::Path;

use hvcl::checkpoint;
use hvcl::config::RunConfig;
use hvcl::diversity::{entropy_cost, kernel_matrix, w2_diag_gaussian};
use hvcl::harness::AccuracyMatrix;
use hvcl::mixture::top_k_route;
use hvcl::model::{Architecture, LayerKind, Model};
use hvcl::variational::{kl_diag_gaussian, GaussianMeanField};
use hvcl::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gaussian(len: usize) -> impl Strategy<Value = GaussianMeanField> {
    (
        prop::collection::vec(-3.0..3.0f64, len),
        prop::collection::vec(0.05..3.0f64, len),
    )
        .prop_map(|(mu, std)| GaussianMeanField::from_mean_std(Tensor::vector(mu), &std).unwrap())
}

fn prob_rows(max_rows: usize, m: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::collection::vec(-8.0..8.0f64, m), 1..max_rows).prop_map(move |rows| {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        let p = tape.softmax(logits, 1).unwrap();
        tape.value(p).clone()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in gaussian(6), q in gaussian(6)) {
        prop_assert!(kl_diag_gaussian(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_diag_gaussian(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn w2_is_a_squared_metric(p in gaussian(5), q in gaussian(5), r in gaussian(5)) {
        let d = |a: &GaussianMeanField, b: &GaussianMeanField| w2_diag_gaussian(a, b).unwrap();
        prop_assert!(d(&p, &p).abs() < 1e-12);
        prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-12);
        prop_assert!(d(&p, &r).sqrt() <= d(&p, &q).sqrt() + d(&q, &r).sqrt() + 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(p in prob_rows(16, 5)) {
        for i in 0..p.shape()[0] {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn entropy_terms_are_ordered(p in prob_rows(32, 4)) {
        let (cost, r) = entropy_cost(&p).unwrap();
        prop_assert!(r.conditional_entropy >= -1e-12);
        prop_assert!(r.conditional_entropy <= r.marginal_entropy + 1e-12);
        prop_assert!(r.marginal_entropy <= 4f64.ln() + 1e-12);
        prop_assert!((cost - (r.conditional_entropy - r.marginal_entropy)).abs() < 1e-12);
    }

    #[test]
    fn top_k_picks_the_largest_distinct_experts(p in prob_rows(8, 6), k in 1usize..=6) {
        let routes = top_k_route(&p, k).unwrap();
        for (i, sel) in routes.iter().enumerate() {
            prop_assert_eq!(sel.len(), k);
            let mut uniq = sel.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), k);
            let worst_kept = sel.iter().map(|&e| p.at(i, e)).fold(f64::INFINITY, f64::min);
            for e in (0..6).filter(|e| !sel.contains(e)) {
                prop_assert!(p.at(i, e) <= worst_kept);
            }
        }
    }

    #[test]
    fn kernel_matrix_is_psd(experts in prop::collection::vec(gaussian(4), 2..7), width in 0.2..4.0f64) {
        let k = kernel_matrix(&experts, width).unwrap();
        prop_assert_eq!(k.max_asymmetry(), 0.0);
        prop_assert!(k.min_eigenvalue() >= -1e-8);
        for i in 0..k.size() {
            prop_assert_eq!(k.get(i, i), 1.0);
        }
    }

    #[test]
    fn accuracy_metrics_stay_in_range(cells in prop::collection::vec(0.0..=1.0f64, 10)) {
        // lower-triangular 4x4 matrix from 10 cells
        let mut rows = Vec::new();
        let mut it = cells.into_iter();
        for t in 0..4 {
            rows.push((0..=t).map(|_| it.next().unwrap()).collect::<Vec<_>>());
        }
        let m = AccuracyMatrix::from_rows(rows, vec![100; 4]).unwrap();
        let (acc, forgetting) = m.forgetting_metrics().unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((0.0..=1.0).contains(&forgetting));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_roundtrip_exactly(
        seed in any::<u64>(),
        hidden in prop::collection::vec(1usize..6, 0..3),
        experts in 1usize..4,
        kind in 0usize..3,
        meta in "[a-z =.\n]{0,40}",
    ) {
        let arch = Architecture { input_dim: 3, hidden, output_dim: 2, experts, top_k: 1 };
        let kind = [LayerKind::Mixture, LayerKind::Variational, LayerKind::Dense][kind];
        let model = Model::new(&arch, kind, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let back = checkpoint::decode(&checkpoint::encode(&model, &meta), Path::new("mem")).unwrap();
        prop_assert_eq!(back.model, model);
        prop_assert_eq!(back.metadata, meta);
    }

    #[test]
    fn config_text_roundtrips(
        lr in 1e-6..1.0f64,
        beta2 in 0.0..10.0f64,
        epochs in 0usize..100,
        hidden in prop::collection::vec(1usize..1024, 1..4),
        seeds in prop::collection::vec(any::<u64>(), 1..4),
    ) {
        let mut c = RunConfig::default();
        c.train.learning_rate = lr;
        c.train.betas.weight_kl = beta2;
        c.train.epochs = epochs;
        c.hidden = hidden;
        c.seeds = seeds;
        prop_assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
