//! MTL-G: a secondary accent classifier whose posterior feeds the gates.
//!
//! The secondary network reads the output of shared layer `tap_layer` and
//! predicts the accent per frame. Its posterior replaces the one-hot accent
//! label as the gates' `v`, so inference needs no accent id. Training
//! minimises `(1 − λ)·L_primary + λ·L_secondary`.

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::gates::{add_gates, GateConfig, GateInit};
use crate::graph::{Graph, NodeId};
use crate::layers::BlstmLayer;
use crate::metrics::argmax;
use crate::model::{blstm_node, dense_node, init_dense, insert_blstm, AcousticModel, GateSource, Head, LossSpec};
use crate::rng;
use crate::tensor::{ParamGroup, Tensor};
use crate::train::{run_epochs, Batching, TrainHyper, TrainLog};

/// How the secondary posterior is turned into the gates' accent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Frame,
    /// Every frame gets the utterance mean.
    UtteranceAverage,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "frame" => Ok(Granularity::Frame),
            "utterance" => Ok(Granularity::UtteranceAverage),
            other => Err(Error::config(format!("unknown label granularity {other:?} (frame|utterance)"))),
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::Frame => "frame",
            Granularity::UtteranceAverage => "utterance",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlConfig {
    /// Weight of the secondary loss.
    pub lambda: f64,
    pub gate: GateConfig,
    /// Shared BLSTM layer (1-based) whose output the secondary network reads.
    pub tap_layer: usize,
    /// Block secondary-loss gradients from reaching the shared layers.
    pub stop_grad_secondary_into_shared: bool,
    /// Block primary-loss gradients from reaching the secondary through the soft label.
    pub stop_grad_softlabel_into_secondary: bool,
    pub granularity: Granularity,
    /// Secondary BLSTM units per direction.
    pub secondary_hidden: usize,
    /// Width of the secondary sigmoid layer.
    pub secondary_dense: usize,
    /// LR factor of the secondary network's group.
    pub secondary_lr_factor: f64,
}

impl Default for MtlConfig {
    fn default() -> Self {
        MtlConfig {
            lambda: 0.1,
            gate: GateConfig::default(),
            tap_layer: 1,
            stop_grad_secondary_into_shared: true,
            stop_grad_softlabel_into_secondary: true,
            granularity: Granularity::Frame,
            secondary_hidden: 16,
            secondary_dense: 8,
            secondary_lr_factor: 10.0,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        check_lambda(self.lambda)?;
        self.gate.validate(num_layers)?;
        if self.secondary_hidden == 0 || self.secondary_dense == 0 {
            return Err(Error::config("secondary network widths must be positive"));
        }
        if !(self.secondary_lr_factor > 0.0) {
            return Err(Error::config("secondary lr_factor must be positive"));
        }
        // Gates sit after layers 1..=n, so the lowest gate follows layer 1.
        // The secondary must read a layer output no later than that gate's input.
        let lowest_gate = 1;
        if self.tap_layer == 0 || self.tap_layer > lowest_gate {
            return Err(Error::config(format!(
                "secondary taps layer {} but the lowest gate follows layer {lowest_gate}; the soft label would depend on itself",
                self.tap_layer
            )));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 − λ)·l_primary + λ·l_secondary`
pub fn mtl_loss(l_primary: f64, l_secondary: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if !l_primary.is_finite() || !l_secondary.is_finite() {
        return Err(Error::config("mtl_loss of a non-finite loss"));
    }
    if lambda == 0.0 {
        return Ok(l_primary);
    }
    if lambda == 1.0 {
        return Ok(l_secondary);
    }
    Ok((1.0 - lambda) * l_primary + lambda * l_secondary)
}

pub(crate) struct SecondaryNodes {
    pub logits: NodeId,
    pub posterior: NodeId,
    /// What the gates consume.
    pub soft_label: NodeId,
}

pub(crate) fn build_secondary(g: &mut Graph, h: NodeId, cfg: &MtlConfig) -> Result<SecondaryNodes> {
    let input = if cfg.stop_grad_secondary_into_shared { g.detach(h) } else { h };
    let s = blstm_node(g, input, "secondary.blstm")?;
    let d = dense_node(g, s, "secondary.hidden")?;
    let d = g.sigmoid(d);
    let logits = dense_node(g, d, "secondary.out")?;
    g.tag(logits, "secondary");
    let posterior = g.softmax_rows(logits);
    let v = match cfg.granularity {
        Granularity::Frame => posterior,
        Granularity::UtteranceAverage => {
            let rows = g.value(posterior).rows();
            let mean = g.mean_rows(posterior);
            g.broadcast_rows(mean, rows)?
        }
    };
    let soft_label = if cfg.stop_grad_softlabel_into_secondary { g.detach(v) } else { v };
    Ok(SecondaryNodes { logits, posterior, soft_label })
}

/// Adds the secondary network and soft-label gates to a baseline model.
pub fn attach_secondary(mut model: AcousticModel, cfg: &MtlConfig, seed: u64) -> Result<AcousticModel> {
    cfg.validate(model.config.num_layers)?;
    if model.secondary.is_some() || model.has_gates() || model.head != Head::Single {
        return Err(Error::config("secondary network attaches to a baseline model without gates or branch heads"));
    }
    let mut r = rng::stream(seed, &[rng::tag("secondary-init")]);
    let width = 2 * model.config.hidden;
    let blstm = BlstmLayer::init(width, cfg.secondary_hidden, &mut r);
    let mut names = insert_blstm(&mut model.store, "secondary.blstm", blstm)?;
    let (w, b) = init_dense(cfg.secondary_dense, 2 * cfg.secondary_hidden, &mut r);
    model.store.insert("secondary.hidden.w", w)?;
    model.store.insert("secondary.hidden.b", b)?;
    let (w, b) = init_dense(model.config.num_accents, cfg.secondary_dense, &mut r);
    model.store.insert("secondary.out.w", w)?;
    model.store.insert("secondary.out.b", b)?;
    names.extend(["secondary.hidden.w", "secondary.hidden.b", "secondary.out.w", "secondary.out.b"].map(String::from));
    model.push_group(ParamGroup::new("secondary", names, cfg.secondary_lr_factor));
    let mut model = add_gates(model, &cfg.gate, seed, GateSource::Secondary)?;
    model.secondary = Some(cfg.clone());
    model.validate()?;
    Ok(model)
}

/// Scalar count `attach_secondary` adds, from dimensions alone.
pub fn secondary_param_count(model_hidden: usize, num_accents: usize, cfg: &MtlConfig) -> usize {
    let (d, s, q, a) = (2 * model_hidden, cfg.secondary_hidden, cfg.secondary_dense, num_accents);
    let blstm = 2 * (4 * s * d + 4 * s * s + 4 * s);
    let dense = q * 2 * s + q + a * q + a;
    let gate_one = d * a + d + if cfg.gate.kind == crate::gates::GateKind::GateII { d * d } else { 0 };
    blstm + dense + cfg.gate.n_layers * gate_one
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccentPosterior {
    /// `T × num_accents`
    pub frames: Tensor,
    /// Mean of the frame rows.
    pub utterance: Vec<f64>,
}

impl AccentPosterior {
    fn from_frames(frames: Tensor) -> Self {
        let (t, n) = (frames.rows(), frames.cols());
        let mut utterance = vec![0.0; n];
        for r in 0..t {
            for (u, p) in utterance.iter_mut().zip(frames.row(r)) {
                *u += p / t as f64;
            }
        }
        AccentPosterior { frames, utterance }
    }

    /// Argmax of the utterance posterior; ties go to the lowest id.
    pub fn accent(&self) -> u32 {
        argmax(&self.utterance) as u32
    }
}

/// State and accent posteriors of an MTL-G model. Takes no accent id.
pub fn mtl_forward(model: &AcousticModel, features: &Tensor) -> Result<(Tensor, AccentPosterior)> {
    if model.secondary.is_none() {
        return Err(Error::config("model has no secondary network"));
    }
    if features.cols() != model.config.input_dim {
        return Err(Error::config(format!(
            "features have {} dims, model expects {}",
            features.cols(),
            model.config.input_dim
        )));
    }
    let mut g = Graph::inference(&model.store);
    let nodes = model.build_forward(&mut g, features, None)?;
    let post = g.softmax_rows(nodes.logits);
    if let Some(layer) = g.first_non_finite() {
        return Err(Error::Divergence { layer: layer.to_string() });
    }
    let accent = nodes.accent_posterior.expect("secondary attached");
    Ok((g.value(post).clone(), AccentPosterior::from_frames(g.value(accent).clone())))
}

/// Predicted accent id and the posterior behind it.
pub fn classify_accent(model: &AcousticModel, features: &Tensor) -> Result<(u32, AccentPosterior)> {
    let (_, p) = mtl_forward(model, features)?;
    Ok((p.accent(), p))
}

/// Fraction of `utts` whose predicted accent matches the label.
pub fn accent_accuracy(model: &AcousticModel, utts: &[Utterance]) -> Result<f64> {
    use rayon::prelude::*;
    if utts.is_empty() {
        return Err(Error::config("accent accuracy of an empty split"));
    }
    let hits: Vec<bool> = utts
        .par_iter()
        .map(|u| classify_accent(model, &u.features).map(|(a, _)| a == u.accent))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / utts.len() as f64)
}

/// Attaches the secondary network when missing, then trains every group on
/// mixed accent data under the interpolated loss.
pub fn mtl_adapt(
    model: AcousticModel,
    data: &[Utterance],
    cfg: &MtlConfig,
    hyper: &TrainHyper,
) -> Result<(AcousticModel, TrainLog)> {
    let mut model = match &model.secondary {
        Some(existing) if existing == cfg => model,
        Some(_) => return Err(Error::config("model already carries a different secondary configuration")),
        None => attach_secondary(model, cfg, hyper.seed)?,
    };
    let n = model.config.num_accents as u32;
    if let Some(u) = data.iter().find(|u| u.accent >= n) {
        return Err(Error::config(format!("utterance {} has no seen-accent label (accent {})", u.id, u.accent)));
    }
    let log = run_epochs(&mut model, data, hyper, Batching::Mixed, LossSpec::mtl(cfg.lambda))?;
    Ok((model, log))
}

/// Default MTL configuration with zero-initialised gates.
pub fn zero_gate_config() -> MtlConfig {
    MtlConfig { gate: GateConfig { init: GateInit::Zeros, ..GateConfig::default() }, ..MtlConfig::default() }
}
