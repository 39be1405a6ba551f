#![allow(dead_code)]

use amag::corpus::Utterance;
use amag::model::{build_baseline, AcousticModel, ModelConfig};
use amag::rng;
use amag::tensor::Tensor;
use rand::Rng as _;

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig { input_dim: 4, num_layers: 3, hidden: 5, num_states: 6, num_accents: 4, seed }
}

pub fn baseline(seed: u64) -> AcousticModel {
    build_baseline(&small_config(seed)).unwrap()
}

/// Random utterances cycling through `accents`, `frames` long.
pub fn utterances(cfg: &ModelConfig, n: usize, frames: usize, accents: &[u32], seed: u64) -> Vec<Utterance> {
    let mut r = rng::stream(seed, &[rng::tag("test-utterances")]);
    (0..n)
        .map(|i| Utterance {
            id: i as u64,
            accent: accents[i % accents.len()],
            features: Tensor::uniform(&[frames, cfg.input_dim], 1.5, &mut r),
            labels: (0..frames).map(|_| r.gen_range(0..cfg.num_states as u32)).collect(),
        })
        .collect()
}

/// Gradient buffers after one forward/backward pass, keyed by parameter name.
pub fn gradients(model: &mut AcousticModel, batch: &[Utterance], spec: amag::model::LossSpec) -> std::collections::BTreeMap<String, Vec<f64>> {
    model.params_mut().clear_grads();
    model.forward_backward(batch, spec).unwrap();
    let out = model.params().iter().filter_map(|(n, t)| t.grad().map(|g| (n.clone(), g.to_vec()))).collect();
    model.params_mut().clear_grads();
    out
}

/// Values of every parameter in `group`.
pub fn group_values(model: &AcousticModel, group: &str) -> Vec<(String, Vec<f64>)> {
    let g = model.group(group).unwrap_or_else(|| panic!("no group {group}"));
    g.params.iter().map(|p| (p.clone(), model.params().get(p).unwrap().data().to_vec())).collect()
}
