//! Adaptation surgery and the adaptation training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::gates::{insert_gates, GateConfig, GateKind};
use crate::model::{cell_names, AcousticModel, Head, LossSpec};
use crate::tensor::{ParamGroup, Tensor};
use crate::train::{run_epochs, Batching, TrainHyper, TrainLog};

/// Depth argument of fine-tune(n).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneDepth {
    /// The first `n` BLSTM layers; the output layer stays frozen.
    Layers(usize),
    All,
}

/// Frozen flag per group name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    pub frozen: BTreeMap<String, bool>,
}

impl FreezeMask {
    pub fn is_frozen(&self, group: &str) -> Option<bool> {
        self.frozen.get(group).copied()
    }

    pub fn trainable_groups(&self) -> Vec<&str> {
        self.frozen.iter().filter(|(_, &f)| !f).map(|(g, _)| g.as_str()).collect()
    }

    /// Sets every group's flag; the mask must cover exactly the model's groups.
    pub fn apply(&self, model: &mut AcousticModel) -> Result<()> {
        let names: BTreeSet<&str> = model.groups().iter().map(|g| g.name.as_str()).collect();
        let mask: BTreeSet<&str> = self.frozen.keys().map(String::as_str).collect();
        if names != mask {
            return Err(Error::config("freeze mask does not match the model's groups"));
        }
        for g in &mut model.groups {
            g.frozen = self.frozen[&g.name];
        }
        Ok(())
    }
}

/// Mask for fine-tune(n): BLSTM groups `1..=n` trainable, everything else frozen.
pub fn plan_fine_tune(model: &AcousticModel, depth: FineTuneDepth) -> Result<FreezeMask> {
    let layers = model.config().num_layers;
    if let FineTuneDepth::Layers(n) = depth {
        if n == 0 || n > layers {
            return Err(Error::config(format!("fine-tune({n}) on a {layers}-layer model")));
        }
    }
    let frozen = model
        .groups()
        .iter()
        .map(|g| {
            let trainable = match depth {
                FineTuneDepth::All => true,
                FineTuneDepth::Layers(n) => (1..=n).any(|l| g.name == format!("blstm.{l}")),
            };
            (g.name.clone(), !trainable)
        })
        .collect();
    Ok(FreezeMask { frozen })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearAdapterKind {
    /// `D × D` after the input.
    Lin,
    /// Two `H × H` transforms, one per direction, after BLSTM layer `i`.
    Lhn(usize),
    /// `K × K` between the output weights and the softmax.
    Lon,
}

impl LinearAdapterKind {
    pub fn group_name(self) -> String {
        match self {
            LinearAdapterKind::Lin => "adapter.lin".into(),
            LinearAdapterKind::Lhn(i) => format!("adapter.lhn.{i}"),
            LinearAdapterKind::Lon => "adapter.lon".into(),
        }
    }
}

fn identity_dense(model: &mut AcousticModel, prefix: &str, n: usize) -> Result<Vec<String>> {
    let (w, b) = (format!("{prefix}.w"), format!("{prefix}.b"));
    model.store.insert(&w, Tensor::identity(n))?;
    model.store.insert(&b, Tensor::zeros(&[n]))?;
    Ok(vec![w, b])
}

/// Inserts an identity-initialised linear adapter and freezes every other group.
pub fn insert_linear_adapter(mut model: AcousticModel, kind: LinearAdapterKind) -> Result<AcousticModel> {
    let cfg = model.config.clone();
    let names = match kind {
        LinearAdapterKind::Lin => {
            if model.lin {
                return Err(Error::config("model already has a LIN adapter"));
            }
            model.lin = true;
            identity_dense(&mut model, "adapter.lin", cfg.input_dim)?
        }
        LinearAdapterKind::Lhn(i) => {
            if i == 0 || i > cfg.num_layers {
                return Err(Error::config(format!("LHN after layer {i} of a {}-layer model", cfg.num_layers)));
            }
            if !model.lhn.insert(i) {
                return Err(Error::config(format!("model already has an LHN adapter after layer {i}")));
            }
            let mut names = identity_dense(&mut model, &format!("adapter.lhn.{i}.fwd"), cfg.hidden)?;
            names.extend(identity_dense(&mut model, &format!("adapter.lhn.{i}.bwd"), cfg.hidden)?);
            names
        }
        LinearAdapterKind::Lon => {
            if model.lon {
                return Err(Error::config("model already has a LON adapter"));
            }
            model.lon = true;
            identity_dense(&mut model, "adapter.lon", cfg.num_states)?
        }
    };
    for g in &mut model.groups {
        g.frozen = true;
    }
    model.push_group(ParamGroup::new(kind.group_name(), names, 1.0));
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccentTopConfig {
    pub accents: Vec<u32>,
    pub lr_factor: f64,
    /// Train the shared layers along with the branches.
    pub update_shared: bool,
    /// Duplicate the topmost BLSTM layer into each branch as well.
    pub top_blstm: bool,
}

impl AccentTopConfig {
    pub fn new(accents: Vec<u32>) -> Self {
        AccentTopConfig { accents, lr_factor: 10.0, update_shared: true, top_blstm: false }
    }
}

/// Replaces the output layer with one clone per accent.
pub fn add_accent_top_layers(mut model: AcousticModel, cfg: &AccentTopConfig) -> Result<AcousticModel> {
    if model.head != Head::Single {
        return Err(Error::config("model already has accent-specific top layers"));
    }
    let distinct: BTreeSet<u32> = cfg.accents.iter().copied().collect();
    if distinct.len() < 2 || distinct.len() != cfg.accents.len() {
        return Err(Error::config("accent-specific top layers need at least 2 distinct accents"));
    }
    if !(cfg.lr_factor > 0.0) {
        return Err(Error::config("branch lr_factor must be positive"));
    }
    if let Some(bad) = cfg.accents.iter().find(|&&a| a as usize >= model.config.num_accents) {
        return Err(Error::config(format!("accent {bad} outside the model's accent classes")));
    }
    if model.secondary.is_some() {
        return Err(Error::config("branch heads and the secondary network are not combined"));
    }

    let top = model.config.num_layers;
    let mut top_params = Vec::new();
    if cfg.top_blstm {
        for dir in ["fwd", "bwd"] {
            for name in cell_names(&format!("blstm.{top}.{dir}")) {
                let suffix = name.trim_start_matches(&format!("blstm.{top}.")).to_string();
                top_params.push((suffix, model.store.remove(&name).expect("baseline layer")));
            }
        }
        model.remove_group(&format!("blstm.{top}"));
    }
    let w = model.store.remove("output.w").ok_or_else(|| Error::config("model has no output layer"))?;
    let b = model.store.remove("output.b").ok_or_else(|| Error::config("model has no output layer"))?;
    model.remove_group("output");

    for &a in &cfg.accents {
        let prefix = format!("head.{a}");
        let mut names = vec![format!("{prefix}.w"), format!("{prefix}.b")];
        model.store.insert(&names[0], w.clone())?;
        model.store.insert(&names[1], b.clone())?;
        for (suffix, t) in &top_params {
            let name = format!("{prefix}.blstm.{suffix}");
            model.store.insert(&name, t.clone())?;
            names.push(name);
        }
        model.push_group(ParamGroup::new(prefix, names, cfg.lr_factor));
    }
    if !cfg.update_shared {
        for g in &mut model.groups {
            g.frozen = !g.name.starts_with("head.");
        }
    }
    model.head = Head::Branched { accents: cfg.accents.clone(), top_blstm: cfg.top_blstm };
    model.validate()?;
    Ok(model)
}

/// Gates fed by the hard accent label, then accent-specific top layers.
pub fn compose_astg(model: AcousticModel, gate_cfg: &GateConfig, top_cfg: &AccentTopConfig, seed: u64) -> Result<AcousticModel> {
    if model.has_gates() || model.head != Head::Single || model.secondary.is_some() || model.lin || model.lon || !model.lhn.is_empty() {
        return Err(Error::config("AST-G composes onto an unmodified baseline"));
    }
    let model = insert_gates(model, gate_cfg, seed)?;
    add_accent_top_layers(model, top_cfg)
}

/// Gate configuration used by AST-G by default.
pub fn astg_gate_defaults() -> GateConfig {
    GateConfig { kind: GateKind::GateI, n_layers: 3, lr_factor: 1.0, ..GateConfig::default() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    FineTune(FineTuneDepth),
    Linear(LinearAdapterKind),
    AccentTop(AccentTopConfig),
    Gated(GateConfig),
    AstG(GateConfig, AccentTopConfig),
}

impl Method {
    pub fn batching(&self) -> Batching {
        match self {
            Method::AccentTop(_) | Method::AstG(..) => Batching::AccentRoundRobin,
            _ => Batching::Mixed,
        }
    }

    /// Accent ids the method routes on.
    pub fn accents(&self) -> &[u32] {
        match self {
            Method::AccentTop(c) | Method::AstG(_, c) => &c.accents,
            _ => &[],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::FineTune(FineTuneDepth::All) => f.write_str("fine-tune:all"),
            Method::FineTune(FineTuneDepth::Layers(n)) => write!(f, "fine-tune:{n}"),
            Method::Linear(LinearAdapterKind::Lin) => f.write_str("lin"),
            Method::Linear(LinearAdapterKind::Lhn(i)) => write!(f, "lhn:{i}"),
            Method::Linear(LinearAdapterKind::Lon) => f.write_str("lon"),
            Method::AccentTop(_) => f.write_str("accent-top"),
            Method::Gated(g) => write!(f, "gate:{}:{}", g.kind.numeral(), g.n_layers),
            Method::AstG(..) => f.write_str("astg"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationPlan {
    pub method: Method,
    pub hyper: TrainHyper,
}

/// Applies the plan's surgery and freeze mask without training.
pub fn prepare(model: AcousticModel, method: &Method, seed: u64) -> Result<AcousticModel> {
    let mut model = match method {
        Method::FineTune(depth) => {
            let mut m = model;
            plan_fine_tune(&m, *depth)?.apply(&mut m)?;
            m
        }
        Method::Linear(kind) => insert_linear_adapter(model, *kind)?,
        Method::AccentTop(cfg) => add_accent_top_layers(model, cfg)?,
        Method::Gated(cfg) => insert_gates(model, cfg, seed)?,
        Method::AstG(gate, top) => compose_astg(model, gate, top, seed)?,
    };
    model.store.clear_grads();
    model.validate()?;
    Ok(model)
}

/// Surgery per the plan, then training on `data` (mixed accents, or
/// single-accent round-robin batches for branched plans).
pub fn adapt(model: AcousticModel, plan: &AdaptationPlan, data: &[Utterance]) -> Result<(AcousticModel, TrainLog)> {
    let present: BTreeSet<u32> = data.iter().map(|u| u.accent).collect();
    if let Some(missing) = plan.method.accents().iter().find(|a| !present.contains(a)) {
        return Err(Error::config(format!("plan references accent {missing} but the data has none")));
    }
    let mut model = prepare(model, &plan.method, plan.hyper.seed)?;
    if let Head::Branched { accents, .. } = &model.head {
        if let Some(u) = data.iter().find(|u| !accents.contains(&u.accent)) {
            return Err(Error::config(format!("utterance {} has accent {} with no branch", u.id, u.accent)));
        }
    }
    let log = run_epochs(&mut model, data, &plan.hyper, plan.method.batching(), LossSpec::primary())?;
    Ok((model, log))
}

/// Accent-specific arm: one fine-tune(all) model per accent, each on its own data.
pub fn adapt_per_accent(
    model: &AcousticModel,
    data: &[Utterance],
    hyper: &TrainHyper,
) -> Result<BTreeMap<u32, AcousticModel>> {
    let mut by_accent: BTreeMap<u32, Vec<Utterance>> = BTreeMap::new();
    for u in data {
        by_accent.entry(u.accent).or_default().push(u.clone());
    }
    let plan = AdaptationPlan { method: Method::FineTune(FineTuneDepth::All), hyper: hyper.clone() };
    by_accent
        .into_iter()
        .map(|(a, utts)| Ok((a, adapt(model.clone(), &plan, &utts)?.0)))
        .collect()
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::config(format!("bad {what} {s:?}")))
}

/// Parses the command-line method syntax (`fine-tune:N`, `lhn:I`, `gate:KIND:N`, ...).
///
/// `accents` fills branch configurations; `gate` supplies init and lr for
/// `gate:` methods and the gate part of `astg`; `top` supplies branch settings.
pub fn parse_method(s: &str, gate: &GateConfig, astg_gate: &GateConfig, top: &AccentTopConfig) -> Result<Method> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    match parts.as_slice() {
        ["fine-tune", "all"] => Ok(Method::FineTune(FineTuneDepth::All)),
        ["fine-tune", n] => Ok(Method::FineTune(FineTuneDepth::Layers(parse_usize(n, "layer count")?))),
        ["lin"] => Ok(Method::Linear(LinearAdapterKind::Lin)),
        ["lhn", i] => Ok(Method::Linear(LinearAdapterKind::Lhn(parse_usize(i, "layer")?))),
        ["lon"] => Ok(Method::Linear(LinearAdapterKind::Lon)),
        ["gate", kind, n] => Ok(Method::Gated(GateConfig {
            kind: GateKind::from_str(kind)?,
            n_layers: parse_usize(n, "layer count")?,
            ..gate.clone()
        })),
        ["accent-top"] => Ok(Method::AccentTop(top.clone())),
        ["astg"] => Ok(Method::AstG(astg_gate.clone(), top.clone())),
        _ => Err(Error::config(format!("unknown adaptation method {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::GateInit;
    use crate::model::{build_baseline, ModelConfig};
    use crate::rng;

    fn small() -> ModelConfig {
        ModelConfig { input_dim: 3, num_layers: 4, hidden: 3, num_states: 5, num_accents: 4, seed: 7 }
    }

    fn utts(accents: &[u32]) -> Vec<Utterance> {
        let mut r = rng::seeded(5);
        accents
            .iter()
            .enumerate()
            .map(|(i, &a)| Utterance {
                id: i as u64,
                accent: a,
                features: Tensor::uniform(&[4, 3], 1.0, &mut r),
                labels: vec![0, 1, 2, (i % 5) as u32],
            })
            .collect()
    }

    #[test]
    fn fine_tune_two_of_four() {
        let m = build_baseline(&small()).unwrap();
        let mask = plan_fine_tune(&m, FineTuneDepth::Layers(2)).unwrap();
        assert_eq!(mask.trainable_groups(), vec!["blstm.1", "blstm.2"]);
        assert_eq!(mask.is_frozen("output"), Some(true));
        assert_eq!(mask.is_frozen("blstm.4"), Some(true));
        assert!(plan_fine_tune(&m, FineTuneDepth::All).unwrap().frozen.values().all(|f| !f));
        assert!(plan_fine_tune(&m, FineTuneDepth::Layers(5)).is_err());
        assert!(plan_fine_tune(&m, FineTuneDepth::Layers(0)).is_err());
    }

    #[test]
    fn adapters_are_identity_at_insertion() {
        let base = build_baseline(&small()).unwrap();
        let x = Tensor::uniform(&[5, 3], 1.0, &mut rng::seeded(1));
        let reference = base.forward(&x, None).unwrap();
        for kind in [LinearAdapterKind::Lin, LinearAdapterKind::Lhn(4), LinearAdapterKind::Lon] {
            let m = insert_linear_adapter(base.clone(), kind).unwrap();
            assert_eq!(m.forward(&x, None).unwrap(), reference, "{kind:?}");
            let added = m.scalar_param_count() - base.scalar_param_count();
            let expect = match kind {
                LinearAdapterKind::Lin => 3 * 3 + 3,
                LinearAdapterKind::Lhn(_) => 2 * (3 * 3 + 3),
                LinearAdapterKind::Lon => 5 * 5 + 5,
            };
            assert_eq!(added, expect);
            let trainable: Vec<&str> = m.groups().iter().filter(|g| !g.frozen).map(|g| g.name.as_str()).collect();
            assert_eq!(trainable, vec![kind.group_name()]);
            assert!(insert_linear_adapter(m, kind).is_err(), "duplicate {kind:?}");
        }
        assert!(insert_linear_adapter(base, LinearAdapterKind::Lhn(5)).is_err());
    }

    #[test]
    fn branch_heads_start_identical() {
        let base = build_baseline(&small()).unwrap();
        let x = Tensor::uniform(&[5, 3], 1.0, &mut rng::seeded(2));
        let reference = base.forward(&x, None).unwrap();
        for top_blstm in [false, true] {
            let cfg = AccentTopConfig { top_blstm, ..AccentTopConfig::new(vec![0, 1, 2, 3]) };
            let m = add_accent_top_layers(base.clone(), &cfg).unwrap();
            for a in 0..4 {
                assert_eq!(m.forward(&x, Some(a)).unwrap(), reference);
            }
            assert!(matches!(m.forward(&x, None), Err(Error::LabelRequired(_))));
            assert_eq!(m.group("head.2").unwrap().lr_factor, 10.0);
            assert!(add_accent_top_layers(m, &cfg).is_err());
        }
        assert!(add_accent_top_layers(base, &AccentTopConfig::new(vec![1])).is_err());
    }

    #[test]
    fn astg_defaults() {
        let base = build_baseline(&small()).unwrap();
        let m = compose_astg(base.clone(), &astg_gate_defaults(), &AccentTopConfig::new(vec![0, 1, 2, 3]), 0).unwrap();
        let kinds: Vec<_> = m.gate_kinds().to_vec();
        assert_eq!(kinds, vec![Some(GateKind::GateI), Some(GateKind::GateI), Some(GateKind::GateI), None]);
        assert_eq!(m.groups().iter().filter(|g| g.name.starts_with("head.")).count(), 4);
        assert_eq!(m.group("gate").unwrap().lr_factor, 1.0);
        assert_eq!(m.group("head.0").unwrap().lr_factor, 10.0);
        assert!(compose_astg(m, &astg_gate_defaults(), &AccentTopConfig::new(vec![0, 1]), 0).is_err());

        let zero = GateConfig { init: GateInit::Zeros, ..astg_gate_defaults() };
        let z = compose_astg(base.clone(), &zero, &AccentTopConfig::new(vec![0, 1, 2, 3]), 0).unwrap();
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng::seeded(3));
        let reference = base.forward(&x, None).unwrap();
        for a in 0..4 {
            assert!(z.forward(&x, Some(a)).unwrap().max_abs_diff(&reference) <= 1e-12);
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let base = build_baseline(&small()).unwrap();
        let plan = AdaptationPlan {
            method: Method::FineTune(FineTuneDepth::All),
            hyper: TrainHyper { epochs: 0, ..TrainHyper::default() },
        };
        let (m, log) = adapt(base.clone(), &plan, &utts(&[0, 1])).unwrap();
        assert_eq!(m, base);
        assert!(log.epoch_loss.is_empty());
    }

    #[test]
    fn plan_accent_missing_from_data() {
        let plan = AdaptationPlan {
            method: Method::AccentTop(AccentTopConfig::new(vec![0, 1, 2])),
            hyper: TrainHyper { epochs: 1, ..TrainHyper::default() },
        };
        let base = build_baseline(&small()).unwrap();
        assert!(matches!(adapt(base, &plan, &utts(&[0, 1])), Err(Error::Config(_))));
    }

    #[test]
    fn shared_layers_frozen_without_update_shared() {
        let base = build_baseline(&small()).unwrap();
        let cfg = AccentTopConfig { update_shared: false, ..AccentTopConfig::new(vec![0, 1]) };
        let plan = AdaptationPlan {
            method: Method::AccentTop(cfg),
            hyper: TrainHyper { epochs: 2, batch_size: 2, ..TrainHyper::default() },
        };
        let (m, _) = adapt(base.clone(), &plan, &utts(&[0, 0, 1, 1])).unwrap();
        for (name, t) in base.params().iter() {
            if name.starts_with("blstm.") {
                assert_eq!(m.params().get(name).unwrap(), t, "{name}");
            }
        }
        assert_ne!(m.params().get("head.0.w").unwrap(), base.params().get("output.w").unwrap());
    }

    #[test]
    fn method_syntax_round_trips() {
        let g = GateConfig::default();
        let a = astg_gate_defaults();
        let t = AccentTopConfig::new(vec![0, 1, 2, 3]);
        for s in ["fine-tune:all", "fine-tune:2", "lin", "lhn:4", "lon", "gate:III:2", "accent-top", "astg"] {
            assert_eq!(parse_method(s, &g, &a, &t).unwrap().to_string(), s);
        }
        assert_eq!(parse_method("gate:3:2", &g, &a, &t).unwrap().to_string(), "gate:III:2");
        assert!(parse_method("fine-tune:x", &g, &a, &t).is_err());
        assert!(parse_method("mtlg", &g, &a, &t).is_err());
    }
}
