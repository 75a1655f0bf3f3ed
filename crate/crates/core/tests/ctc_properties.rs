//! CTC forward-backward against the exhaustive oracle on random items.

mod common;

use proptest::prelude::*;
use speechlm::ctc::{self, CtcItem};
use speechlm::numcore::{kernels, Tensor};

fn item(seed: u64, u: usize, v: usize, labels: Vec<usize>, spread: f64) -> CtcItem<f64> {
    let mut lp: Tensor<f64> = common::randn(seed, &[u, v + 1]);
    lp.data_mut().iter_mut().for_each(|x| *x *= spread);
    for row in lp.data_mut().chunks_mut(v + 1) {
        kernels::log_softmax_in_place(row);
    }
    CtcItem { log_probs: lp, labels }
}

fn cases() -> impl Strategy<Value = (u64, usize, usize, Vec<usize>, f64)> {
    (1usize..=4, 1usize..=7).prop_flat_map(|(v, u)| {
        (
            any::<u64>(),
            Just(u),
            Just(v),
            prop::collection::vec(1..=v, 0..=4),
            0.1f64..6.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn loss_matches_brute_force((seed, u, v, labels, spread) in cases()) {
        let it = item(seed, u, v, labels, spread);
        let fast = ctc::ctc_loss(&it).unwrap();
        let brute = ctc::ctc_brute_force(&it).unwrap();
        prop_assert_eq!(fast.feasible, brute.is_finite());
        prop_assert_eq!(fast.feasible, ctc::is_feasible(u, &it.labels));
        if fast.feasible {
            prop_assert!((fast.loss - brute).abs() <= 1e-9 * brute.abs().max(1.0), "{} vs {}", fast.loss, brute);
        }
    }

    /// The gradient w.r.t. each log-prob is minus the posterior occupancy, so
    /// every frame's gradient row sums to -1 when feasible.
    #[test]
    fn gradient_rows_are_negative_posteriors((seed, u, v, labels, spread) in cases()) {
        let it = item(seed, u, v, labels, spread);
        let out = ctc::ctc_loss(&it).unwrap();
        for row in out.grad.data().chunks(v + 1) {
            let s: f64 = row.iter().sum();
            if out.feasible {
                prop_assert!((s + 1.0).abs() < 1e-9, "row sum {}", s);
                prop_assert!(row.iter().all(|g| *g <= 1e-12));
            } else {
                prop_assert!(row.iter().all(|g| *g == 0.0));
            }
        }
    }

    #[test]
    fn batch_is_order_stable(seeds in prop::collection::vec(any::<u64>(), 1..12)) {
        let items: Vec<CtcItem<f64>> = seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| item(s, 1 + i % 6, 3, vec![1 + i % 3; i % 3], 2.0))
            .collect();
        let par = ctc::batch_ctc_loss(&items).unwrap();
        let seq = ctc::batch_ctc_loss_sequential(&items).unwrap();
        prop_assert_eq!(par.mean_loss.to_bits(), seq.mean_loss.to_bits());
        prop_assert_eq!((par.used, par.skipped), (seq.used, seq.skipped));
    }
}

#[test]
fn greedy_decode_collapses_best_path() {
    let mut lp = Tensor::new(&[6, 3], vec![-9.0; 18]).unwrap();
    for (t, k) in [1, 1, 0, 1, 2, 2].into_iter().enumerate() {
        lp.data_mut()[t * 3 + k] = 0.0;
    }
    assert_eq!(ctc::ctc_greedy_decode(&lp), vec![1, 1, 2]);
}
