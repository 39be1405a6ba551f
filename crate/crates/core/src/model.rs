//! The BLSTM acoustic model and its training-time forward/backward pass.
//!
//! A model is a stack of bidirectional LSTM layers followed by a dense softmax
//! head over tied-state classes. Adaptation surgery (gates, linear adapters,
//! accent-branched heads, the secondary accent classifier) attaches further
//! named parameters; the forward graph is assembled from whatever is present.
//!
//! Parameter names:
//!
//! | part | names |
//! |------|-------|
//! | BLSTM layer `l` (1-based) | `blstm.<l>.{fwd,bwd}.{wx,wh,b}` |
//! | output head | `output.{w,b}` |
//! | gate after layer `l` | `gate.<l>.{V,b,U}` |
//! | accent branch `a` | `head.<a>.{w,b}`, optionally `head.<a>.blstm.{fwd,bwd}.*` |
//! | adapters | `adapter.lin.*`, `adapter.lhn.<l>.{fwd,bwd}.{w,b}`, `adapter.lon.*` |
//! | secondary network | `secondary.*` |

use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::gates::{build_gate, GateKind};
use crate::graph::{Graph, NodeId, ParamGrads};
use crate::layers::{BlstmLayer, LstmCellParams};
use crate::mtl::{build_secondary, MtlConfig};
use crate::rng;
use crate::tensor::{validate_groups, ParamGroup, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    pub num_states: usize,
    pub num_accents: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { input_dim: 8, num_layers: 4, hidden: 32, num_states: 20, num_accents: 4, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("num_states", self.num_states),
            ("num_accents", self.num_accents),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("model {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of every layer boundary, input first, output last.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat(2 * self.hidden).take(self.num_layers));
        dims.push(self.num_states);
        dims
    }
}

/// Output-head configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Single,
    /// One dense head per accent id; with `top_blstm` the topmost BLSTM
    /// layer is duplicated per accent as well.
    Branched { accents: Vec<u32>, top_blstm: bool },
}

/// Where gates get their accent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateSource {
    /// One-hot of the utterance's accent id.
    HardLabel,
    /// Posterior of the secondary accent classifier.
    Secondary,
}

/// Which losses enter the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    /// Interpolation weight of the secondary (accent) loss.
    pub lambda: f64,
}

impl LossSpec {
    pub fn primary() -> Self {
        LossSpec { lambda: 0.0 }
    }

    pub fn mtl(lambda: f64) -> Self {
        LossSpec { lambda }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    pub(crate) config: ModelConfig,
    pub(crate) store: ParamStore,
    pub(crate) groups: Vec<ParamGroup>,
    pub(crate) lin: bool,
    pub(crate) lhn: BTreeSet<usize>,
    pub(crate) lon: bool,
    /// Gate kind after layer `l` at index `l - 1`.
    pub(crate) gates: Vec<Option<GateKind>>,
    pub(crate) gate_source: GateSource,
    pub(crate) head: Head,
    pub(crate) secondary: Option<MtlConfig>,
    fault: Option<String>,
}

pub(crate) fn cell_names(prefix: &str) -> [String; 3] {
    [format!("{prefix}.wx"), format!("{prefix}.wh"), format!("{prefix}.b")]
}

pub(crate) fn insert_cell(store: &mut ParamStore, prefix: &str, cell: LstmCellParams) -> Result<Vec<String>> {
    let names = cell_names(prefix);
    store.insert(&names[0], cell.wx)?;
    store.insert(&names[1], cell.wh)?;
    store.insert(&names[2], cell.b)?;
    Ok(names.to_vec())
}

/// Registers a BLSTM under `prefix.{fwd,bwd}` and returns the parameter names.
pub(crate) fn insert_blstm(store: &mut ParamStore, prefix: &str, layer: BlstmLayer) -> Result<Vec<String>> {
    let mut names = insert_cell(store, &format!("{prefix}.fwd"), layer.forward)?;
    names.extend(insert_cell(store, &format!("{prefix}.bwd"), layer.backward)?);
    Ok(names)
}

/// Dense layer weights uniform(−r, r), `r = 1/sqrt(fan_in)`, zero bias.
pub(crate) fn init_dense(out: usize, fan_in: usize, rng: &mut rng::Rng) -> (Tensor, Tensor) {
    let r = 1.0 / (fan_in as f64).sqrt();
    (Tensor::uniform(&[out, fan_in], r, rng), Tensor::zeros(&[out]))
}

/// BLSTM over `x` reading parameters under `prefix`.
pub(crate) fn blstm_node(g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
    let [wx, wh, b] = cell_names(&format!("{prefix}.fwd"));
    let (wx, wh, b) = (g.param(&wx)?, g.param(&wh)?, g.param(&b)?);
    let fw = g.lstm(x, wx, wh, b, false)?;
    let [wx, wh, b] = cell_names(&format!("{prefix}.bwd"));
    let (wx, wh, b) = (g.param(&wx)?, g.param(&wh)?, g.param(&b)?);
    let bw = g.lstm(x, wx, wh, b, true)?;
    g.concat(fw, bw)
}

pub(crate) fn dense_node(g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

/// Graph nodes produced by one utterance's forward pass.
pub(crate) struct ForwardNodes {
    pub logits: NodeId,
    pub accent_logits: Option<NodeId>,
    pub accent_posterior: Option<NodeId>,
}

/// Builds the baseline: stacked BLSTMs and a dense softmax head.
pub fn build_baseline(config: &ModelConfig) -> Result<AcousticModel> {
    config.validate()?;
    let mut r = rng::stream(config.seed, &[rng::tag("baseline-init")]);
    let mut store = ParamStore::new();
    let mut groups = Vec::new();
    let mut in_dim = config.input_dim;
    for l in 1..=config.num_layers {
        let layer = BlstmLayer::init(in_dim, config.hidden, &mut r);
        in_dim = layer.output_dim();
        let names = insert_blstm(&mut store, &format!("blstm.{l}"), layer)?;
        groups.push(ParamGroup::new(format!("blstm.{l}"), names, 1.0));
    }
    let (w, b) = init_dense(config.num_states, in_dim, &mut r);
    store.insert("output.w", w)?;
    store.insert("output.b", b)?;
    groups.push(ParamGroup::new("output", vec!["output.w".into(), "output.b".into()], 1.0));
    Ok(AcousticModel {
        config: config.clone(),
        store,
        groups,
        lin: false,
        lhn: BTreeSet::new(),
        lon: false,
        gates: vec![None; config.num_layers],
        gate_source: GateSource::HardLabel,
        head: Head::Single,
        secondary: None,
        fault: None,
    })
}

impl AcousticModel {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        config: ModelConfig,
        store: ParamStore,
        groups: Vec<ParamGroup>,
        lin: bool,
        lhn: BTreeSet<usize>,
        lon: bool,
        gates: Vec<Option<GateKind>>,
        gate_source: GateSource,
        head: Head,
        secondary: Option<MtlConfig>,
    ) -> Self {
        AcousticModel { config, store, groups, lin, lhn, lon, gates, gate_source, head, secondary, fault: None }
    }

    /// Runs a one-frame forward pass per branch so mis-shaped or missing
    /// parameters surface as errors.
    pub(crate) fn check_shapes(&self) -> Result<()> {
        let x = Tensor::zeros(&[1, self.config.input_dim]);
        let accents: Vec<Option<u32>> = match &self.head {
            Head::Branched { accents, .. } => accents.iter().map(|&a| Some(a)).collect(),
            Head::Single => vec![Some(0)],
        };
        for a in accents {
            let mut g = Graph::inference(&self.store);
            self.build_forward(&mut g, &x, a)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn gate_kinds(&self) -> &[Option<GateKind>] {
        &self.gates
    }

    pub fn gate_source(&self) -> GateSource {
        self.gate_source
    }

    pub fn mtl_config(&self) -> Option<&MtlConfig> {
        self.secondary.as_ref()
    }

    pub fn has_gates(&self) -> bool {
        self.gates.iter().any(Option::is_some)
    }

    pub fn has_lin(&self) -> bool {
        self.lin
    }

    pub fn lhn_layers(&self) -> &BTreeSet<usize> {
        &self.lhn
    }

    pub fn has_lon(&self) -> bool {
        self.lon
    }

    pub fn scalar_param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// True when inference needs an accent id.
    pub fn requires_accent_label(&self) -> bool {
        (self.has_gates() && self.gate_source == GateSource::HardLabel) || matches!(self.head, Head::Branched { .. })
    }

    pub(crate) fn push_group(&mut self, group: ParamGroup) {
        self.groups.push(group);
    }

    pub(crate) fn remove_group(&mut self, name: &str) -> Option<ParamGroup> {
        let idx = self.groups.iter().position(|g| g.name == name)?;
        Some(self.groups.remove(idx))
    }

    pub fn validate(&self) -> Result<()> {
        validate_groups(&self.store, &self.groups)
    }

    /// Names of parameters in unfrozen groups.
    pub fn trainable_params(&self) -> HashSet<String> {
        self.groups
            .iter()
            .filter(|g| !g.frozen)
            .flat_map(|g| g.params.iter().cloned())
            .collect()
    }

    /// Scales the analytic gradient of every parameter whose name starts with
    /// `prefix`. Exists so gradient checks can be shown to catch a broken backward pass.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, prefix: &str) {
        self.fault = Some(prefix.to_string());
    }

    fn check_utterance(&self, utt: &Utterance) -> Result<()> {
        if utt.features.cols() != self.config.input_dim {
            return Err(Error::config(format!(
                "utterance {} has {} feature dims, model expects {}",
                utt.id,
                utt.features.cols(),
                self.config.input_dim
            )));
        }
        if utt.labels.len() != utt.features.rows() {
            return Err(Error::config(format!("utterance {} label count mismatch", utt.id)));
        }
        if let Some(&bad) = utt.labels.iter().find(|&&y| y as usize >= self.config.num_states) {
            return Err(Error::config(format!("utterance {} has state label {bad} out of range", utt.id)));
        }
        Ok(())
    }

    fn branch_prefix(&self, accent: Option<u32>) -> Result<Option<String>> {
        match &self.head {
            Head::Single => Ok(None),
            Head::Branched { accents, .. } => {
                let a = accent.ok_or_else(|| Error::LabelRequired("model has accent-specific heads".into()))?;
                if !accents.contains(&a) {
                    return Err(Error::config(format!("model has no head for accent {a}")));
                }
                Ok(Some(format!("head.{a}")))
            }
        }
    }

    pub(crate) fn one_hot(&self, accent: u32, rows: usize) -> Result<Tensor> {
        let n = self.config.num_accents;
        if accent as usize >= n {
            return Err(Error::config(format!("accent {accent} outside the model's {n} accent classes")));
        }
        let mut t = Tensor::zeros(&[rows, n]);
        for r in 0..rows {
            t.data_mut()[r * n + accent as usize] = 1.0;
        }
        Ok(t)
    }

    /// Records the forward computation for one utterance.
    pub(crate) fn build_forward(&self, g: &mut Graph, features: &Tensor, accent: Option<u32>) -> Result<ForwardNodes> {
        let rows = features.rows();
        let branch = self.branch_prefix(accent)?;
        let mut hard_label = None;
        if self.has_gates() && self.gate_source == GateSource::HardLabel {
            let a = accent.ok_or_else(|| Error::LabelRequired("model has accent-label gates".into()))?;
            hard_label = Some(g.constant(self.one_hot(a, rows)?));
        }

        let mut x = g.constant(features.clone());
        g.tag(x, "input");
        if self.lin {
            x = dense_node(g, x, "adapter.lin")?;
            g.tag(x, "adapter.lin");
        }

        let mut soft_label = None;
        let mut accent_logits = None;
        let mut accent_posterior = None;
        let top_branched = matches!(self.head, Head::Branched { top_blstm: true, .. });
        let layers = self.config.num_layers;
        for l in 1..=layers {
            let prefix = match (&branch, top_branched && l == layers) {
                (Some(b), true) => format!("{b}.blstm"),
                _ => format!("blstm.{l}"),
            };
            let mut h = blstm_node(g, x, &prefix)?;
            g.tag(h, format!("blstm.{l}"));

            if let Some(cfg) = &self.secondary {
                if cfg.tap_layer == l {
                    let sec = build_secondary(g, h, cfg)?;
                    accent_logits = Some(sec.logits);
                    accent_posterior = Some(sec.posterior);
                    soft_label = Some(sec.soft_label);
                }
            }

            if let Some(kind) = self.gates[l - 1] {
                let v = match self.gate_source {
                    GateSource::HardLabel => hard_label,
                    GateSource::Secondary => soft_label,
                }
                .ok_or_else(|| Error::config(format!("gate after layer {l} has no accent vector")))?;
                h = build_gate(g, kind, &format!("gate.{l}"), h, v)?;
                g.tag(h, format!("gate.{l}"));
            }

            if self.lhn.contains(&l) {
                let hidden = self.config.hidden;
                let fw = g.slice_cols(h, 0, hidden)?;
                let bw = g.slice_cols(h, hidden, hidden)?;
                let fw = dense_node(g, fw, &format!("adapter.lhn.{l}.fwd"))?;
                let bw = dense_node(g, bw, &format!("adapter.lhn.{l}.bwd"))?;
                h = g.concat(fw, bw)?;
                g.tag(h, format!("adapter.lhn.{l}"));
            }
            x = h;
        }

        let head_prefix = branch.unwrap_or_else(|| "output".to_string());
        let mut logits = dense_node(g, x, &head_prefix)?;
        g.tag(logits, head_prefix);
        if self.lon {
            logits = dense_node(g, logits, "adapter.lon")?;
            g.tag(logits, "adapter.lon");
        }
        Ok(ForwardNodes { logits, accent_logits, accent_posterior })
    }

    /// State posteriors (`T × num_states`) for one utterance.
    ///
    /// `accent` selects the branch head and feeds hard-label gates; models
    /// that need it fail with [`Error::LabelRequired`] when it is `None`.
    pub fn forward(&self, features: &Tensor, accent: Option<u32>) -> Result<Tensor> {
        if features.cols() != self.config.input_dim {
            return Err(Error::config(format!(
                "features have {} dims, model expects {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        let mut g = Graph::inference(&self.store);
        let nodes = self.build_forward(&mut g, features, accent)?;
        let post = g.softmax_rows(nodes.logits);
        if let Some(layer) = g.first_non_finite() {
            return Err(Error::Divergence { layer: layer.to_string() });
        }
        Ok(g.value(post).clone())
    }

    /// One utterance's contribution: (loss, gradients) with losses already
    /// divided by the batch frame count.
    fn utterance_objective(
        &self,
        utt: &Utterance,
        spec: LossSpec,
        frames: f64,
        trainable: Option<&HashSet<String>>,
    ) -> Result<(f64, Option<ParamGrads>)> {
        let is_trainable = |n: &str| trainable.is_some_and(|t| t.contains(n));
        let mut g = Graph::with_trainable(&self.store, &is_trainable);
        let nodes = self.build_forward(&mut g, &utt.features, Some(utt.accent))?;
        let labels: Vec<usize> = utt.labels.iter().map(|&y| y as usize).collect();
        let primary = g.cross_entropy(nodes.logits, &labels, (1.0 - spec.lambda) / frames)?;
        let mut terms = vec![primary];
        if let Some(acc_logits) = nodes.accent_logits {
            if utt.accent as usize >= self.config.num_accents {
                return Err(Error::config(format!(
                    "utterance {} has no seen-accent label (accent {})",
                    utt.id, utt.accent
                )));
            }
            let targets = vec![utt.accent as usize; labels.len()];
            terms.push(g.cross_entropy(acc_logits, &targets, spec.lambda / frames)?);
        }
        let root = g.sum(&terms)?;
        let loss = g.scalar(root);
        if !loss.is_finite() {
            let layer = g.first_non_finite().unwrap_or("loss").to_string();
            return Err(Error::Divergence { layer });
        }
        let grads = match trainable {
            Some(_) => Some(g.backward(root)?),
            None => None,
        };
        Ok((loss, grads))
    }

    fn check_batch(&self, batch: &[Utterance], spec: LossSpec) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        if !(0.0..=1.0).contains(&spec.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", spec.lambda)));
        }
        if spec.lambda > 0.0 && self.secondary.is_none() {
            return Err(Error::config("secondary loss weight set but no secondary network attached"));
        }
        for u in batch {
            self.check_utterance(u)?;
        }
        Ok(batch.iter().map(|u| u.labels.len()).sum::<usize>() as f64)
    }

    /// Mean per-frame loss over the batch without touching gradients.
    pub fn loss(&self, batch: &[Utterance], spec: LossSpec) -> Result<f64> {
        let frames = self.check_batch(batch, spec)?;
        let parts: Vec<f64> = batch
            .par_iter()
            .map(|u| self.utterance_objective(u, spec, frames, None).map(|(l, _)| l))
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum())
    }

    /// Mean per-frame loss over `batch`; adds `∂loss/∂param` into the gradient
    /// buffer of every parameter in an unfrozen group.
    pub fn forward_backward(&mut self, batch: &[Utterance], spec: LossSpec) -> Result<f64> {
        let frames = self.check_batch(batch, spec)?;
        let trainable = self.trainable_params();
        let parts: Vec<(f64, Option<ParamGrads>)> = batch
            .par_iter()
            .map(|u| self.utterance_objective(u, spec, frames, Some(&trainable)))
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        for (l, grads) in parts {
            loss += l;
            for (name, g) in grads.into_iter().flatten() {
                self.store.get_mut(&name)?.accumulate_grad(&g);
            }
        }
        if let Some(prefix) = &self.fault {
            for (name, t) in self.store.iter_mut() {
                if name.starts_with(prefix.as_str()) {
                    if let Some(g) = t.grad_mut() {
                        g.iter_mut().for_each(|v| *v *= 1.5);
                    }
                }
            }
        }
        Ok(loss)
    }
}
