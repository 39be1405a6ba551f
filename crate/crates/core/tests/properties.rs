mod common;

use std::collections::{BTreeMap, HashSet};

use amag::checkpoint::{decode_checkpoint, encode_checkpoint};
use amag::corpus::{encode_utterances, Corpus, CorpusSpec};
use amag::experiment::{ExperimentReport, RunResult};
use amag::metrics::{average_and_reduction, relative_reduction};
use amag::mtl::mtl_loss;
use common::*;
use proptest::prelude::*;

fn tiny_spec(seed: u64) -> CorpusSpec {
    CorpusSpec { seed, baseline_utts: 12, adapt_utts: 3, eval_utts: 2, ..CorpusSpec::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corpus_is_deterministic_and_splits_are_disjoint(seed in any::<u64>()) {
        let a = Corpus::generate(&tiny_spec(seed)).unwrap();
        let b = Corpus::generate(&tiny_spec(seed)).unwrap();
        let mut ids = HashSet::new();
        let mut total = 0;
        for split in ["train", "adapt", "eval", "unseen"] {
            let (sa, sb) = (a.split(split).unwrap(), b.split(split).unwrap());
            prop_assert_eq!(encode_utterances(sa), encode_utterances(sb));
            total += sa.len();
            ids.extend(sa.iter().map(|u| u.id));
        }
        prop_assert_eq!(ids.len(), total);
    }

    #[test]
    fn ave_is_the_exact_mean(values in prop::collection::vec(0.0..100.0f64, 1..8), reference in 1.0..100.0f64) {
        let (avg, red) = average_and_reduction(&values, reference).unwrap();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert_eq!(avg, mean);
        prop_assert_eq!(red, 100.0 * (reference - mean) / reference);
        let run = RunResult {
            seed: 0,
            method: "m".into(),
            seen: values.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect(),
            unseen: BTreeMap::new(),
            accent_accuracy: None,
            lambda: None,
        };
        prop_assert_eq!(run.ave(), mean);
    }

    #[test]
    fn reduction_sign_follows_the_change(reference in 1.0..100.0f64, value in 0.0..100.0f64) {
        let r = relative_reduction(reference, value);
        prop_assert_eq!(r > 0.0, value < reference);
        prop_assert_eq!(relative_reduction(reference, reference), 0.0);
    }

    #[test]
    fn mtl_loss_is_linear_in_lambda(lp in 0.0..10.0f64, ls in 0.0..10.0f64, lambda in 0.0..=1.0f64) {
        let l = mtl_loss(lp, ls, lambda).unwrap();
        prop_assert!((l - ((1.0 - lambda) * lp + lambda * ls)).abs() <= 1e-12 * (1.0 + lp + ls));
        prop_assert_eq!(mtl_loss(lp, ls, 0.0).unwrap(), lp);
        prop_assert_eq!(mtl_loss(lp, ls, 1.0).unwrap(), ls);
    }

    #[test]
    fn lambda_outside_unit_interval_is_rejected(lambda in prop_oneof![-5.0..-1e-9f64, 1.0 + 1e-9..5.0f64]) {
        prop_assert!(mtl_loss(1.0, 2.0, lambda).is_err());
    }

    #[test]
    fn checkpoints_round_trip_to_f32(seed in any::<u64>()) {
        let model = baseline(seed);
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.groups(), model.groups());
        for (name, t) in model.params().iter() {
            let expect: Vec<f64> = t.data().iter().map(|&v| v as f32 as f64).collect();
            prop_assert_eq!(back.params().get(name).unwrap().data(), &expect[..]);
        }
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }
}

#[test]
fn csv_keeps_full_precision() {
    let run = RunResult {
        seed: 3,
        method: "astg".into(),
        seen: BTreeMap::from([(0, 1.0 / 3.0), (1, 2.0f64.sqrt())]),
        unseen: BTreeMap::new(),
        accent_accuracy: None,
        lambda: None,
    };
    let names = BTreeMap::from([(0, "AH".to_string()), (1, "BJ".to_string())]);
    let report = ExperimentReport { accent_names: names.clone(), methods: vec!["astg".into()], runs: vec![run.clone()] };
    let back = ExperimentReport::from_csv(&report.to_csv(), names).unwrap();
    assert_eq!(back.runs, vec![run]);
}
