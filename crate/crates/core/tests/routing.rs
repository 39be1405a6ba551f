mod common;

use amag::adapt::{prepare, AccentTopConfig, FineTuneDepth, LinearAdapterKind, Method};
use amag::gates::{GateConfig, GateInit, GateKind};
use amag::model::LossSpec;
use amag::mtl::{attach_secondary, MtlConfig};
use amag::optim::{Sgd, SgdConfig};
use amag::train::{epoch_batches, run_epochs, Batching, TrainHyper};
use common::*;

fn hyper() -> TrainHyper {
    TrainHyper { base_lr: 0.05, epochs: 2, batch_size: 3, momentum: 0.9, clip_norm: Some(5.0), seed: 5 }
}

fn gate(n_layers: usize) -> GateConfig {
    GateConfig { kind: GateKind::GateI, n_layers, init: GateInit::RandomUniform(0.1), lr_factor: 5.0 }
}

fn plans() -> Vec<(&'static str, Method)> {
    let top = |update_shared| AccentTopConfig { update_shared, ..AccentTopConfig::new(vec![0, 1, 2]) };
    vec![
        ("fine-tune:1", Method::FineTune(FineTuneDepth::Layers(1))),
        ("fine-tune:2", Method::FineTune(FineTuneDepth::Layers(2))),
        ("lin", Method::Linear(LinearAdapterKind::Lin)),
        ("lhn:2", Method::Linear(LinearAdapterKind::Lhn(2))),
        ("lon", Method::Linear(LinearAdapterKind::Lon)),
        ("accent-top, shared frozen", Method::AccentTop(top(false))),
        ("astg, shared frozen", Method::AstG(gate(2), top(false))),
    ]
}

#[test]
fn branch_of_one_accent_is_untouched_by_other_accents_batches() {
    let cfg = small_config(1);
    let data = utterances(&cfg, 18, 6, &[0, 1, 2], 2);
    for top_blstm in [false, true] {
        let method = Method::AccentTop(AccentTopConfig { top_blstm, ..AccentTopConfig::new(vec![0, 1, 2]) });
        let mut model = prepare(baseline(1), &method, 3).unwrap();
        let mut opt = Sgd::new(SgdConfig { momentum: 0.9, clip_norm: Some(5.0) });
        for epoch in 0..2 {
            for idx in epoch_batches(&data, Batching::AccentRoundRobin, 3, 4, epoch) {
                let batch: Vec<_> = idx.iter().map(|&i| data[i].clone()).collect();
                let a = batch[0].accent;
                let others: Vec<_> = [0u32, 1, 2].iter().filter(|&&b| b != a).map(|b| group_values(&model, &format!("head.{b}"))).collect();
                let own = group_values(&model, &format!("head.{a}"));
                model.forward_backward(&batch, LossSpec::primary()).unwrap();
                let groups = model.groups().to_vec();
                opt.step(model.params_mut(), &groups, 0.05).unwrap();
                let after: Vec<_> = [0u32, 1, 2].iter().filter(|&&b| b != a).map(|b| group_values(&model, &format!("head.{b}"))).collect();
                assert_eq!(others, after, "accent {a} batch moved another branch");
                assert_ne!(own, group_values(&model, &format!("head.{a}")), "own branch must train");
            }
        }
    }
}

#[test]
fn frozen_groups_are_bit_identical_under_every_plan() {
    let cfg = small_config(4);
    let data = utterances(&cfg, 12, 6, &[0, 1, 2], 5);
    for (name, method) in plans() {
        let before = prepare(baseline(4), &method, 6).unwrap();
        let mut after = before.clone();
        run_epochs(&mut after, &data, &hyper(), method.batching(), LossSpec::primary()).unwrap();
        let mut frozen = 0;
        for g in before.groups() {
            if g.frozen {
                frozen += 1;
                assert_eq!(group_values(&before, &g.name), group_values(&after, &g.name), "{name}: group {} moved", g.name);
            } else {
                assert_ne!(group_values(&before, &g.name), group_values(&after, &g.name), "{name}: group {} did not train", g.name);
            }
        }
        assert!(frozen > 0, "{name} freezes nothing");
    }
}

fn mtl_model(seed: u64) -> amag::model::AcousticModel {
    let cfg = MtlConfig { gate: gate(2), secondary_hidden: 3, secondary_dense: 3, ..MtlConfig::default() };
    attach_secondary(baseline(seed), &cfg, seed).unwrap()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn mtl_gradient_endpoints_and_linearity() {
    let mut model = mtl_model(7);
    let batch = utterances(model.config(), 4, 7, &[0, 1, 2, 3], 8);
    let g0 = gradients(&mut model, &batch, LossSpec::mtl(0.0));
    let g1 = gradients(&mut model, &batch, LossSpec::mtl(1.0));

    for (name, g) in &g0 {
        if name.starts_with("secondary.") {
            assert_eq!(max_abs(g), 0.0, "λ=0 moved {name}");
        }
    }
    for (name, g) in &g1 {
        if name.starts_with("output.") || name.starts_with("gate.") || name.starts_with("blstm.") {
            assert_eq!(max_abs(g), 0.0, "λ=1 moved {name}");
        }
    }
    assert!(g1.iter().any(|(n, g)| n.starts_with("secondary.") && max_abs(g) > 0.0));

    for lambda in [0.1, 0.37, 0.5, 0.9] {
        let gl = gradients(&mut model, &batch, LossSpec::mtl(lambda));
        for (name, g) in &gl {
            let expect: Vec<f64> = g0[name].iter().zip(&g1[name]).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
            let diff = g.iter().zip(&expect).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(diff <= 1e-10, "λ={lambda} {name}: {diff:e}");
        }
    }
}

#[test]
fn stop_gradient_keeps_secondary_loss_out_of_shared_layers() {
    let mut model = mtl_model(9);
    let batch = utterances(model.config(), 4, 7, &[0, 1, 2, 3], 10);
    let g0 = gradients(&mut model, &batch, LossSpec::mtl(0.0));
    let gh = gradients(&mut model, &batch, LossSpec::mtl(0.5));
    for (name, g) in &gh {
        if name.starts_with("blstm.") {
            let rel = g.iter().zip(&g0[name]).fold(0.0f64, |m, (h, z)| m.max((h / 0.5 - z).abs() / z.abs().max(1e-300)));
            assert!(rel <= 1e-12, "{name}: {rel:e}");
        }
    }

    let open = MtlConfig { stop_grad_secondary_into_shared: false, gate: gate(2), secondary_hidden: 3, secondary_dense: 3, ..MtlConfig::default() };
    let mut leaky = attach_secondary(baseline(9), &open, 9).unwrap();
    let g1 = gradients(&mut leaky, &batch, LossSpec::mtl(1.0));
    assert!(max_abs(&g1["blstm.1.fwd.wx"]) > 0.0, "without stop-gradient the secondary loss reaches layer 1");
    assert_eq!(max_abs(&g1["blstm.2.fwd.wx"]), 0.0, "layers above the tap never see the secondary loss");
}

#[test]
fn soft_label_stop_gradient_keeps_primary_loss_out_of_secondary() {
    let batch = utterances(&small_config(11), 4, 7, &[0, 1, 2, 3], 12);
    let mut blocked = mtl_model(11);
    let g = gradients(&mut blocked, &batch, LossSpec::mtl(0.0));
    assert!(g.iter().filter(|(n, _)| n.starts_with("secondary.")).all(|(_, v)| max_abs(v) == 0.0));

    let open = MtlConfig { stop_grad_softlabel_into_secondary: false, gate: gate(2), secondary_hidden: 3, secondary_dense: 3, ..MtlConfig::default() };
    let mut leaky = attach_secondary(baseline(11), &open, 11).unwrap();
    let g = gradients(&mut leaky, &batch, LossSpec::mtl(0.0));
    assert!(max_abs(&g["secondary.out.w"]) > 0.0);
}
