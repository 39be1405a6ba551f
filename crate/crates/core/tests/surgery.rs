mod common;

use amag::adapt::{add_accent_top_layers, compose_astg, insert_linear_adapter, AccentTopConfig, LinearAdapterKind};
use amag::gates::{insert_gates, GateConfig, GateInit, GateKind};
use amag::model::AcousticModel;
use amag::mtl::{attach_secondary, mtl_forward, zero_gate_config};
use common::*;

const TOL: f64 = 1e-12;

fn zero_gate(kind: GateKind, n_layers: usize) -> GateConfig {
    GateConfig { kind, n_layers, init: GateInit::Zeros, lr_factor: 5.0 }
}

fn max_posterior_diff(a: &AcousticModel, b: &AcousticModel, seed: u64) -> f64 {
    utterances(a.config(), 20, 9, &[0, 1, 2, 3], seed)
        .iter()
        .map(|u| {
            let pa = a.forward(&u.features, Some(u.accent)).unwrap();
            let pb = b.forward(&u.features, Some(u.accent)).unwrap();
            pa.max_abs_diff(&pb)
        })
        .fold(0.0, f64::max)
}

#[test]
fn surgery_preserves_posteriors() {
    let base = baseline(21);
    let top = |top_blstm| AccentTopConfig { top_blstm, ..AccentTopConfig::new(vec![0, 1, 2, 3]) };
    let cases: Vec<(&str, AcousticModel)> = vec![
        ("GATE I", insert_gates(base.clone(), &zero_gate(GateKind::GateI, 1), 1).unwrap()),
        ("GATE I (3)", insert_gates(base.clone(), &zero_gate(GateKind::GateI, 3), 1).unwrap()),
        ("GATE II", insert_gates(base.clone(), &zero_gate(GateKind::GateII, 2), 1).unwrap()),
        ("LIN", insert_linear_adapter(base.clone(), LinearAdapterKind::Lin).unwrap()),
        ("LHN(1)", insert_linear_adapter(base.clone(), LinearAdapterKind::Lhn(1)).unwrap()),
        ("LHN(3)", insert_linear_adapter(base.clone(), LinearAdapterKind::Lhn(3)).unwrap()),
        ("LON", insert_linear_adapter(base.clone(), LinearAdapterKind::Lon).unwrap()),
        ("accent-top", add_accent_top_layers(base.clone(), &top(false)).unwrap()),
        ("accent-top + BLSTM", add_accent_top_layers(base.clone(), &top(true)).unwrap()),
        ("AST-G", compose_astg(base.clone(), &zero_gate(GateKind::GateI, 2), &top(false), 1).unwrap()),
    ];
    for (name, model) in cases {
        let d = max_posterior_diff(&base, &model, 22);
        assert!(d <= TOL, "{name}: {d:e}");
    }
}

#[test]
fn zero_gated_mtl_model_matches_baseline_without_labels() {
    let base = baseline(23);
    let model = attach_secondary(base.clone(), &zero_gate_config(), 23).unwrap();
    assert!(!model.requires_accent_label());
    for u in utterances(base.config(), 20, 9, &[0, 1, 2, 3], 24) {
        let (post, accent) = mtl_forward(&model, &u.features).unwrap();
        let d = post.max_abs_diff(&base.forward(&u.features, None).unwrap());
        assert!(d <= TOL, "{d:e}");
        let total: f64 = accent.utterance.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn nonzero_gates_do_change_posteriors() {
    let base = baseline(25);
    let cfg = GateConfig { kind: GateKind::GateI, n_layers: 1, init: GateInit::RandomUniform(0.5), lr_factor: 5.0 };
    let gated = insert_gates(base.clone(), &cfg, 1).unwrap();
    assert!(max_posterior_diff(&base, &gated, 26) > 1e-6);
}
