use amag::corpus::{Corpus, CorpusSpec};
use amag::experiment::holdout;
use amag::metrics::fer_by_accent;
use amag::model::{build_baseline, ModelConfig};
use amag::train::{train_baseline, TrainHyper};

const DEVIATIONS: [f64; 4] = [0.0, 0.4, 0.8, 1.2];
const SEEDS: [u64; 3] = [1, 2, 3];

/// Baseline FER on accents of increasing deviation, one row per corpus seed.
fn fer_grid() -> Vec<Vec<f64>> {
    SEEDS
        .iter()
        .map(|&seed| {
            let spec = CorpusSpec {
                seed,
                seen_deviations: DEVIATIONS.to_vec(),
                baseline_utts: 400,
                adapt_utts: 1,
                eval_utts: 60,
                ..CorpusSpec::default()
            };
            let corpus = Corpus::generate(&spec).unwrap();
            let cfg = ModelConfig { input_dim: spec.feature_dim, num_layers: 2, hidden: 12, num_states: spec.num_states, num_accents: DEVIATIONS.len(), seed };
            let mut model = build_baseline(&cfg).unwrap();
            let (train, valid) = holdout(corpus.split("train").unwrap(), 0.1);
            let hyper = TrainHyper { epochs: 3, seed, ..TrainHyper::default() };
            train_baseline(&mut model, &train, &valid, &hyper, 2).unwrap();
            let eval: Vec<_> = corpus.split("eval").unwrap().iter().filter(|u| (u.accent as usize) < DEVIATIONS.len()).cloned().collect();
            fer_by_accent(&model, &eval).unwrap().into_values().collect()
        })
        .collect()
}

#[test]
fn baseline_error_grows_with_accent_deviation() {
    let grid = fer_grid();
    let mean: Vec<f64> = (0..DEVIATIONS.len()).map(|j| grid.iter().map(|row| row[j]).sum::<f64>() / grid.len() as f64).collect();
    println!("per-seed FER {grid:?}\nmean FER {mean:?}");
    for w in mean.windows(2) {
        assert!(w[1] > w[0], "mean FER not increasing: {mean:?}");
    }
    // Least-squares slope of FER on δ, per seed.
    let xbar = DEVIATIONS.iter().sum::<f64>() / DEVIATIONS.len() as f64;
    for row in &grid {
        let ybar = row.iter().sum::<f64>() / row.len() as f64;
        let slope: f64 = DEVIATIONS.iter().zip(row).map(|(x, y)| (x - xbar) * (y - ybar)).sum::<f64>()
            / DEVIATIONS.iter().map(|x| (x - xbar).powi(2)).sum::<f64>();
        assert!(slope > 0.0, "seed trend not positive: {row:?}");
    }
}
