use proptest::prelude::*;

use satm::autodiff::Tape;
use satm::cohort::{split_indices, Split};
use satm::graph::{correlation_matrix, normalized_adjacency, spectral_radius, threshold_by_density};
use satm::metrics::{self, oracle};
use satm::model::{fuse, GateConfig, TargetScaler, GATE_BIAS, GATE_WEIGHT};
use satm::params::ParamStore;
use satm::tensor::{self, Tensor};

fn adjacency(n: usize, bits: &[bool]) -> Tensor {
    let mut a = Tensor::zeros([n, n]);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            if bits[k] {
                a.set(&[i, j], 1.0);
                a.set(&[j, i], 1.0);
            }
            k += 1;
        }
    }
    a
}

fn graph_strategy() -> impl Strategy<Value = (usize, Vec<bool>)> {
    (1usize..=8).prop_flat_map(|n| (Just(n), prop::collection::vec(any::<bool>(), n * (n - 1) / 2)))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn normalized_adjacency_is_symmetric_and_contractive((n, bits) in graph_strategy()) {
        let a = normalized_adjacency(&adjacency(n, &bits));
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a.get(&[i, j]), a.get(&[j, i]));
                prop_assert!(a.get(&[i, j]) >= 0.0);
            }
        }
        prop_assert!(spectral_radius(&a) <= 1.0 + 1e-9);
    }

    #[test]
    fn threshold_edges_nest_as_density_grows(obs in matrix(20, 6), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let corr = correlation_matrix(&obs).unwrap();
        let sparse = threshold_by_density(&corr, lo).unwrap();
        let dense = threshold_by_density(&corr, hi).unwrap();
        prop_assert!(sparse.edges().iter().all(|e| dense.has_edge(e.i, e.j)));
        prop_assert!(sparse.edges().len() <= dense.edges().len());
    }

    #[test]
    fn softmax_rows_are_a_simplex(x in matrix(4, 7)) {
        let s = tensor::softmax_rows(&x.map(|v| 100.0 * v));
        for row in s.data().chunks(7) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive(a in matrix(3, 5), b in matrix(5, 4)) {
        let fast = tensor::matmul(&a, &b).unwrap();
        let slow = tensor::matmul_naive(&a, &b).unwrap();
        prop_assert!(fast.max_abs_diff(&slow) <= 1e-12);
    }

    #[test]
    fn learned_gate_output_is_convex(g in matrix(6, 4), h in matrix(6, 4), w in matrix(8, 4), b in matrix(1, 4)) {
        let mut params = ParamStore::new();
        params.insert(GATE_WEIGHT, w.map(|v| 5.0 * v)).unwrap();
        params.insert(GATE_BIAS, b.reshape([4]).unwrap()).unwrap();
        let mut t = Tape::new();
        let (gv, hv) = (t.leaf(g.clone()), t.leaf(h.clone()));
        let (z, _) = fuse(&mut t, gv, hv, &GateConfig::default(), &params).unwrap();
        for (i, &zi) in t.value(z).data().iter().enumerate() {
            let (x, y) = (g.data()[i], h.data()[i]);
            prop_assert!(zi >= x.min(y) && zi <= x.max(y));
        }
    }

    #[test]
    fn auc_agrees_with_pairwise_count(
        scores in prop::collection::vec(0u8..5, 2..40),
        labels in prop::collection::vec(0u8..2, 2..40),
    ) {
        let n = scores.len().min(labels.len());
        let scores: Vec<f64> = scores[..n].iter().map(|&s| s as f64).collect();
        let labels = &labels[..n];
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        prop_assert_eq!(metrics::auc(&scores, labels).unwrap(), oracle::auc_pairwise(&scores, labels));
    }

    #[test]
    fn auc_is_invariant_to_monotone_maps(scores in prop::collection::vec(-5.0f64..5.0, 10), labels in prop::collection::vec(0u8..2, 10)) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let mapped: Vec<f64> = scores.iter().map(|s| 3.0 * s.exp() + 1.0).collect();
        prop_assert_eq!(metrics::auc(&scores, &labels).unwrap(), metrics::auc(&mapped, &labels).unwrap());
    }

    #[test]
    fn ipw_f1_agrees_with_confusion_counts(pred in prop::collection::vec(0u8..2, 30), truth in prop::collection::vec(0u8..2, 30)) {
        prop_assume!(truth.contains(&0) && truth.contains(&1));
        let got = metrics::ipw_f1(&pred, &truth).unwrap();
        prop_assert!((got - oracle::ipw_f1_confusion(&pred, &truth)).abs() <= 1e-12);
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn rmse_is_non_negative_and_zero_on_self(y in prop::collection::vec(-50.0f64..50.0, 1..30)) {
        prop_assert_eq!(metrics::rmse(&y, &y).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + 2.0).collect();
        prop_assert!((metrics::rmse(&shifted, &y).unwrap() - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn splits_partition_patients(n in 3usize..300, seed in any::<u64>()) {
        let s = split_indices(n, seed);
        let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().flat_map(|&k| s.get(k).to_vec()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn target_scaler_round_trips(y in prop::collection::vec(-100.0f64..100.0, 2..20)) {
        let s = TargetScaler::fit(&y);
        for &v in &y {
            prop_assert!((s.decode(s.encode(v)) - v).abs() <= 1e-9);
        }
    }
}
