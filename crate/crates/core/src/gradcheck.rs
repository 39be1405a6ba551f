//! Central-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::adapt::{add_accent_top_layers, insert_linear_adapter, AccentTopConfig, LinearAdapterKind};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::gates::{build_gate, insert_gates, GateConfig, GateInit, GateKind};
use crate::graph::{Graph, NodeId};
use crate::layers::BlstmLayer;
use crate::model::{blstm_node, build_baseline, insert_blstm, AcousticModel, LossSpec, ModelConfig};
use crate::mtl::{attach_secondary, Granularity, MtlConfig};
use crate::rng::{self, Rng};
use crate::tensor::{ParamStore, Tensor};

/// Finite-difference step of the standard suite.
pub const SUITE_EPSILON: f64 = 1e-5;
/// Relative-error bound of the standard suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Every parameter is checked when the trainable total is at most this.
pub const FULL_CHECK_LIMIT: usize = 5000;
/// Entries sampled when the model is larger than [`FULL_CHECK_LIMIT`].
pub const SAMPLED_ENTRIES: usize = 600;

/// Anything with a scalar loss over named parameters.
pub trait Objective {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Names of the parameters to differentiate.
    fn trainable(&self) -> Vec<String>;
    fn loss(&self) -> Result<f64>;
    /// Analytic gradients; missing entries mean zero.
    fn gradients(&mut self) -> Result<BTreeMap<String, Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error seen in each checked parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub checked_entries: usize,
    pub pass: bool,
}

impl GradCheckReport {
    /// Parameters whose error exceeds the tolerance, worst first.
    pub fn failing(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self
            .per_param
            .iter()
            .filter(|(_, &e)| !(e <= self.tolerance))
            .map(|(n, &e)| (n.as_str(), e))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param.iter().map(|(n, &e)| (n.as_str(), e)).max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Denominator floor of [`relative_error`]. Central differences carry
/// roundoff near `1e-16·|L|/ε`; below this magnitude the bare ratio measures it.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares analytic gradients with `(L(w+ε) − L(w−ε)) / 2ε`.
///
/// All entries are checked when the trainable total is at most
/// [`FULL_CHECK_LIMIT`]; otherwise a seeded sample proportional to tensor
/// size, with at least a few entries from every tensor.
pub fn check_objective(obj: &mut dyn Objective, epsilon: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let names = obj.trainable();
    let analytic = obj.gradients()?;
    let sizes: Vec<usize> = names.iter().map(|n| obj.store().get(n).map(|t| t.len())).collect::<Result<_>>()?;
    let total: usize = sizes.iter().sum();
    let mut r = rng::stream(seed, &[rng::tag("gradcheck")]);

    let mut per_param = BTreeMap::new();
    let mut checked = 0;
    for (name, &len) in names.iter().zip(&sizes) {
        let indices: Vec<usize> = if total <= FULL_CHECK_LIMIT {
            (0..len).collect()
        } else {
            let want = ((SAMPLED_ENTRIES * len).div_ceil(total)).max(4).min(len);
            let mut idx = sample(&mut r, len, want).into_vec();
            idx.sort_unstable();
            idx
        };
        let grad = analytic.get(name);
        let mut worst: f64 = 0.0;
        for i in indices {
            let orig = obj.store().get(name)?.data()[i];
            obj.store_mut().get_mut(name)?.data_mut()[i] = orig + epsilon;
            let up = obj.loss();
            obj.store_mut().get_mut(name)?.data_mut()[i] = orig - epsilon;
            let down = obj.loss();
            obj.store_mut().get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * epsilon);
            let a = grad.map_or(0.0, |g| g[i]);
            let e = relative_error(a, numeric);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
            checked += 1;
        }
        per_param.insert(name.clone(), worst);
    }
    let max_rel_error = per_param.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        epsilon,
        tolerance,
        checked_entries: checked,
        pass: max_rel_error <= tolerance,
    })
}

struct ModelObjective<'a> {
    model: &'a mut AcousticModel,
    batch: &'a [Utterance],
    spec: LossSpec,
}

impl Objective for ModelObjective<'_> {
    fn store(&self) -> &ParamStore {
        self.model.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn trainable(&self) -> Vec<String> {
        let mut v: Vec<String> = self.model.trainable_params().into_iter().collect();
        v.sort();
        v
    }

    fn loss(&self) -> Result<f64> {
        self.model.loss(self.batch, self.spec)
    }

    fn gradients(&mut self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.model.params_mut().clear_grads();
        self.model.forward_backward(self.batch, self.spec)?;
        let out = self
            .model
            .params()
            .iter()
            .filter_map(|(n, t)| t.grad().map(|g| (n.clone(), g.to_vec())))
            .collect();
        self.model.params_mut().clear_grads();
        Ok(out)
    }
}

/// Gradient check of a model's loss on `batch` over its unfrozen parameters.
pub fn finite_diff_check(
    model: &mut AcousticModel,
    batch: &[Utterance],
    spec: LossSpec,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let seed = model.config().seed;
    check_objective(&mut ModelObjective { model, batch, spec }, epsilon, tolerance, seed)
}

/// Loss of a tape recorded by `build`; every parameter in `store` is differentiated.
pub struct GraphObjective<F> {
    pub store: ParamStore,
    pub build: F,
}

impl<F: Fn(&mut Graph) -> Result<NodeId>> Objective for GraphObjective<F> {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn trainable(&self) -> Vec<String> {
        self.store.names().cloned().collect()
    }

    fn loss(&self) -> Result<f64> {
        let mut g = Graph::inference(&self.store);
        let root = (self.build)(&mut g)?;
        Ok(g.scalar(root))
    }

    fn gradients(&mut self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut g = Graph::new(&self.store);
        let root = (self.build)(&mut g)?;
        g.backward(root)
    }
}

const SUITE_FRAMES: usize = 10;
const SUITE_STATES: usize = 4;

fn suite_model_config(seed: u64) -> ModelConfig {
    ModelConfig { input_dim: 3, num_layers: 2, hidden: 3, num_states: SUITE_STATES, num_accents: 3, seed }
}

fn random_labels(n: usize, r: &mut Rng) -> Vec<usize> {
    use rand::Rng as _;
    (0..n).map(|_| r.gen_range(0..SUITE_STATES)).collect()
}

/// Two random 10-frame utterances of accents 0 and 1.
fn suite_batch(cfg: &ModelConfig, r: &mut Rng) -> Vec<Utterance> {
    (0..2)
        .map(|a| Utterance {
            id: a as u64,
            accent: a,
            features: Tensor::uniform(&[SUITE_FRAMES, cfg.input_dim], 1.5, r),
            labels: random_labels(SUITE_FRAMES, r).into_iter().map(|l| l as u32).collect(),
        })
        .collect()
}

/// Unfreezes every group and moves every parameter off its initial value,
/// so identity adapters and zero gates are checked at a generic point.
fn perturbed(mut model: AcousticModel, r: &mut Rng) -> AcousticModel {
    for g in &mut model.groups {
        g.frozen = false;
    }
    for (_, t) in model.params_mut().iter_mut() {
        let noise = Tensor::uniform(t.dims(), 0.1, r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
    model
}

fn layer_checks(seed: u64, r: &mut Rng) -> Result<Vec<(String, GradCheckReport)>> {
    let (t, d, h, m, a) = (SUITE_FRAMES, 3, 3, 4, 3);
    let x = Tensor::uniform(&[t, d], 1.5, r);
    let labels = random_labels(t, r);
    let scale = 1.0 / t as f64;
    let mut out = Vec::new();
    let mut run = |name: &str, store: ParamStore, build: &dyn Fn(&mut Graph) -> Result<NodeId>| -> Result<()> {
        let report = check_objective(&mut GraphObjective { store, build }, SUITE_EPSILON, SUITE_TOLERANCE, seed)?;
        out.push((name.to_string(), report));
        Ok(())
    };
    let head = |store: &mut ParamStore, fan_in: usize, r: &mut Rng| -> Result<()> {
        store.insert("out.w", Tensor::uniform(&[SUITE_STATES, fan_in], 0.8, r))?;
        store.insert("out.b", Tensor::uniform(&[SUITE_STATES], 0.8, r))
    };
    let ce = |g: &mut Graph, hidden: NodeId| -> Result<NodeId> {
        let w = g.param("out.w")?;
        let b = g.param("out.b")?;
        let logits = g.linear(hidden, w, Some(b))?;
        g.cross_entropy(logits, &labels, scale)
    };

    let mut store = ParamStore::new();
    store.insert("logits", Tensor::uniform(&[t, SUITE_STATES], 2.0, r))?;
    run("softmax-ce", store, &|g| {
        let l = g.param("logits")?;
        g.cross_entropy(l, &labels, scale)
    })?;

    let mut store = ParamStore::new();
    head(&mut store, d, r)?;
    run("dense", store, &|g| {
        let x = g.constant(x.clone());
        ce(g, x)
    })?;

    for reverse in [false, true] {
        let mut store = ParamStore::new();
        store.insert("lstm.wx", Tensor::uniform(&[4 * h, d], 0.6, r))?;
        store.insert("lstm.wh", Tensor::uniform(&[4 * h, h], 0.6, r))?;
        store.insert("lstm.b", Tensor::uniform(&[4 * h], 0.6, r))?;
        head(&mut store, h, r)?;
        let name = if reverse { "lstm-reverse" } else { "lstm" };
        run(name, store, &|g| {
            let x = g.constant(x.clone());
            let (wx, wh, b) = (g.param("lstm.wx")?, g.param("lstm.wh")?, g.param("lstm.b")?);
            let y = g.lstm(x, wx, wh, b, reverse)?;
            ce(g, y)
        })?;
    }

    let mut store = ParamStore::new();
    insert_blstm(&mut store, "blstm", BlstmLayer::init(d, h, r))?;
    head(&mut store, 2 * h, r)?;
    run("blstm", store, &|g| {
        let x = g.constant(x.clone());
        let y = blstm_node(g, x, "blstm")?;
        ce(g, y)
    })?;

    // Soft accent rows exercise every column of V.
    let v = {
        let raw = Tensor::uniform(&[t, a], 1.0, r);
        let rows: Vec<f64> = (0..t)
            .flat_map(|i| {
                let e: Vec<f64> = raw.row(i).iter().map(|z| z.exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(move |z| z / s)
            })
            .collect();
        Tensor::matrix(t, a, rows)?
    };
    for kind in GateKind::ALL {
        let mut store = ParamStore::new();
        store.insert("h", Tensor::uniform(&[t, m], 1.0, r))?;
        store.insert("gate.V", Tensor::uniform(&[m, a], 0.5, r))?;
        store.insert("gate.b", Tensor::uniform(&[m], 0.5, r))?;
        if kind == GateKind::GateII {
            store.insert("gate.U", Tensor::uniform(&[m, m], 0.5, r))?;
        }
        head(&mut store, m, r)?;
        run(&format!("gate-{}", kind.numeral()), store, &|g| {
            let hn = g.param("h")?;
            let vn = g.constant(v.clone());
            let y = build_gate(g, kind, "gate", hn, vn)?;
            ce(g, y)
        })?;
    }
    Ok(out)
}

fn model_checks(seed: u64, r: &mut Rng) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = suite_model_config(seed);
    let batch = suite_batch(&cfg, r);
    let base = build_baseline(&cfg)?;
    let gate = |kind| GateConfig { kind, n_layers: 2, init: GateInit::RandomUniform(0.3), lr_factor: 1.0 };
    let top = |top_blstm| AccentTopConfig { top_blstm, ..AccentTopConfig::new(vec![0, 1, 2]) };
    let mtl = |granularity| MtlConfig {
        lambda: 0.3,
        gate: gate(GateKind::GateI),
        stop_grad_secondary_into_shared: false,
        stop_grad_softlabel_into_secondary: false,
        granularity,
        secondary_hidden: 3,
        secondary_dense: 3,
        ..MtlConfig::default()
    };
    let models: Vec<(&str, AcousticModel, LossSpec)> = vec![
        ("model-baseline", base.clone(), LossSpec::primary()),
        ("model-lin", insert_linear_adapter(base.clone(), LinearAdapterKind::Lin)?, LossSpec::primary()),
        ("model-lhn", insert_linear_adapter(base.clone(), LinearAdapterKind::Lhn(1))?, LossSpec::primary()),
        ("model-lon", insert_linear_adapter(base.clone(), LinearAdapterKind::Lon)?, LossSpec::primary()),
        ("model-gate-II", insert_gates(base.clone(), &gate(GateKind::GateII), seed)?, LossSpec::primary()),
        ("model-branch-heads", add_accent_top_layers(base.clone(), &top(false))?, LossSpec::primary()),
        ("model-branch-heads-blstm", add_accent_top_layers(base.clone(), &top(true))?, LossSpec::primary()),
        (
            "model-ast-g",
            add_accent_top_layers(insert_gates(base.clone(), &gate(GateKind::GateI), seed)?, &top(false))?,
            LossSpec::primary(),
        ),
        ("model-mtl-g", attach_secondary(base.clone(), &mtl(Granularity::Frame), seed)?, LossSpec::mtl(0.3)),
        (
            "model-mtl-g-utterance",
            attach_secondary(base.clone(), &mtl(Granularity::UtteranceAverage), seed)?,
            LossSpec::mtl(0.3),
        ),
    ];
    models
        .into_iter()
        .map(|(name, model, spec)| {
            let mut model = perturbed(model, r);
            let report = finite_diff_check(&mut model, &batch, spec, SUITE_EPSILON, SUITE_TOLERANCE)?;
            Ok((name.to_string(), report))
        })
        .collect()
}

/// Gradient checks of every layer kind and every model architecture on
/// random 10-frame inputs at [`SUITE_EPSILON`] and [`SUITE_TOLERANCE`].
/// The MTL-G entries run with both stop-gradients off, since finite
/// differences see the whole graph.
pub fn standard_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut r = rng::stream(seed, &[rng::tag("gradcheck-suite")]);
    let mut out = layer_checks(seed, &mut r)?;
    out.extend(model_checks(seed, &mut r)?);
    Ok(out)
}
