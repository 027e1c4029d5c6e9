use proptest::prelude::*;
use resadapt::bleu::corpus_bleu;
use resadapt::checkpoint::Checkpoint;
use resadapt::data::{subsample, temperature_distribution};
use resadapt::optim::lr_schedule;
use resadapt::{count_adapter_params, AdapterModule, Tensor};

proptest! {
    #[test]
    fn temperature_distribution_is_a_flattening(
        sizes in prop::collection::vec(1usize..10_000, 1..6),
        t in 1.0f64..200.0,
    ) {
        let p = temperature_distribution(&sizes, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let raw = temperature_distribution(&sizes, 1.0).unwrap();
        let max_raw = raw.iter().cloned().fold(0.0, f64::max);
        let max_t = p.iter().cloned().fold(0.0, f64::max);
        prop_assert!(max_t <= max_raw + 1e-12);
        // order of task sizes is preserved
        for i in 0..sizes.len() {
            for j in 0..sizes.len() {
                if sizes[i] < sizes[j] {
                    prop_assert!(p[i] <= p[j]);
                }
            }
        }
    }

    #[test]
    fn bleu_is_bounded(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..4, 0..8), prop::collection::vec(0u8..4, 0..8)),
            1..5,
        )
    ) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let b = corpus_bleu(&hyps, &refs, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert_eq!(corpus_bleu(&refs, &refs, 4).unwrap() == 1.0, refs.iter().any(|r| r.len() >= 4));
    }

    #[test]
    fn lr_decreases_after_warmup(warmup in 1u64..1000, step in 1u64..5000) {
        let at = |s| lr_schedule(s, 1.0, warmup, 64).unwrap();
        if step >= warmup {
            prop_assert!(at(step + 1) < at(step));
        } else {
            prop_assert!(at(step + 1) > at(step));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact(
        values in prop::collection::vec(prop::num::f64::ANY, 1..40),
        key in "[a-z]{1,8}",
        value in "[ -~]{0,20}",
    ) {
        let mut ck = Checkpoint::new();
        ck.set(&key, &value);
        ck.tensors.insert("x".into(), Tensor::vector(values.clone()));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let got: Vec<u64> = back.tensors["x"].data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn subsample_keeps_order_and_size(n in 1usize..500, f in 0.001f64..=1.0, seed in any::<u64>()) {
        let xs: Vec<usize> = (0..n).collect();
        let s = subsample(&xs, f, seed).unwrap();
        prop_assert_eq!(s.len(), ((f * n as f64).round() as usize).clamp(1, n));
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn module_size_matches_count(d in 1usize..40, b in 1usize..20, sites in 1usize..8) {
        let m = AdapterModule {
            ln_gain: Tensor::zeros(&[d]),
            ln_bias: Tensor::zeros(&[d]),
            w_down: Tensor::zeros(&[b, d]),
            w_up: Tensor::zeros(&[d, b]),
        };
        prop_assert_eq!(count_adapter_params(d, b, sites), sites * m.param_count());
        prop_assert_eq!(count_adapter_params(d, 0, sites), 0);
    }
}
