//! Experiment configuration files.
//!
//! `key = value` lines under `[section]` headers; `#` and `;` start comments.
//! Every key is optional and falls back to [`ExperimentConfig::default`].
//! Unknown sections or keys are configuration errors.

use std::collections::BTreeMap;
use std::path::Path;

use ini::Ini;

use crate::adapt::{astg_gate_defaults, AccentTopConfig};
use crate::checkpoint::parse_gate_init;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::gates::{GateConfig, GateInit};
use crate::model::ModelConfig;
use crate::mtl::MtlConfig;
use crate::train::TrainHyper;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSettings {
    pub hyper: TrainHyper,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of the training split held out for early stopping.
    pub valid_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlSettings {
    pub config: MtlConfig,
    /// λ values tried; empty means use `config.lambda` as is.
    pub lambda_grid: Vec<f64>,
    /// Share of each accent's adaptation data held out to pick λ.
    pub dev_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub num_layers: usize,
    pub hidden: usize,
    pub baseline: BaselineSettings,
    pub adapt: TrainHyper,
    /// Init and LR factor for `gate:KIND:N` methods.
    pub gate: GateConfig,
    pub astg_gate: GateConfig,
    /// Branch settings; accents are filled from the corpus.
    pub accent_top: AccentTopConfig,
    pub mtl: MtlSettings,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
    /// Also evaluate label-free models on the unseen accents.
    pub eval_unseen: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSpec::default(),
            num_layers: 4,
            hidden: 32,
            baseline: BaselineSettings {
                hyper: TrainHyper { base_lr: 0.1, epochs: 3, batch_size: 8, momentum: 0.9, clip_norm: Some(5.0), seed: 0 },
                patience: 2,
                valid_fraction: 0.1,
            },
            adapt: TrainHyper { base_lr: 0.02, epochs: 4, batch_size: 8, momentum: 0.9, clip_norm: Some(5.0), seed: 0 },
            gate: GateConfig::default(),
            astg_gate: astg_gate_defaults(),
            accent_top: AccentTopConfig::new(Vec::new()),
            mtl: MtlSettings { config: MtlConfig::default(), lambda_grid: vec![0.05, 0.1, 0.2, 0.5], dev_fraction: 0.1 },
            seeds: vec![1, 2, 3],
            methods: ["baseline", "fine-tune:all", "accent-specific", "astg", "mtlg"].map(String::from).to_vec(),
            eval_unseen: true,
        }
    }
}

impl ExperimentConfig {
    /// Model dimensions implied by the corpus.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: self.corpus.feature_dim,
            num_layers: self.num_layers,
            hidden: self.hidden,
            num_states: self.corpus.num_states,
            num_accents: self.corpus.num_seen(),
            seed,
        }
    }

    /// Branch settings covering every seen accent.
    pub fn accent_top_config(&self) -> AccentTopConfig {
        AccentTopConfig { accents: (0..self.corpus.num_seen() as u32).collect(), ..self.accent_top.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config(0).validate()?;
        self.baseline.hyper.validate()?;
        self.adapt.validate()?;
        self.gate.validate(self.num_layers)?;
        self.astg_gate.validate(self.num_layers)?;
        self.mtl.config.validate(self.num_layers)?;
        for &l in &self.mtl.lambda_grid {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(format!("lambda_grid value {l} outside [0, 1]")));
            }
        }
        for (name, f) in [("baseline valid_fraction", self.baseline.valid_fraction), ("mtl dev_fraction", self.mtl.dev_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.baseline.patience == 0 {
            return Err(Error::config("baseline patience must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("experiment needs at least one seed"));
        }
        if !(self.accent_top.lr_factor > 0.0) {
            return Err(Error::config("accent_top lr_factor must be positive"));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| Error::config(format!("config syntax: {e}")))?;
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in &ini {
            let entries = sections.entry(name.unwrap_or("").to_string()).or_default();
            for (k, v) in props.iter() {
                if entries.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(Error::config(format!("duplicate key {k} in [{}]", name.unwrap_or(""))));
                }
            }
        }
        let mut cfg = ExperimentConfig::default();
        for (section, entries) in &sections {
            for (key, value) in entries {
                cfg.set(section, key, value)
                    .map_err(|e| Error::config(format!("[{section}] {key} = {value}: {}", inner(e))))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let c = &mut self.corpus;
        match (section, key) {
            ("corpus", "seed") => c.seed = num(v)?,
            ("corpus", "num_states") => c.num_states = num(v)?,
            ("corpus", "feature_dim") => c.feature_dim = num(v)?,
            ("corpus", "noise") => c.noise = num(v)?,
            ("corpus", "mean_scale") => c.mean_scale = num(v)?,
            ("corpus", "shared_deviation") => c.shared_deviation = num(v)?,
            ("corpus", "min_segment_frames") => c.min_segment_frames = num(v)?,
            ("corpus", "max_segment_frames") => c.max_segment_frames = num(v)?,
            ("corpus", "min_segments") => c.min_segments = num(v)?,
            ("corpus", "max_segments") => c.max_segments = num(v)?,
            ("corpus", "baseline_utts") => c.baseline_utts = num(v)?,
            ("corpus", "adapt_utts") => c.adapt_utts = num(v)?,
            ("corpus", "eval_utts") => c.eval_utts = num(v)?,
            ("corpus", "seen_deviations") => c.seen_deviations = list(v)?,
            ("corpus", "unseen_deviations") => c.unseen_deviations = list(v)?,

            ("model", "num_layers") => self.num_layers = num(v)?,
            ("model", "hidden") => self.hidden = num(v)?,

            ("baseline", "patience") => self.baseline.patience = num(v)?,
            ("baseline", "valid_fraction") => self.baseline.valid_fraction = num(v)?,
            ("baseline", k) => set_hyper(&mut self.baseline.hyper, k, v)?,
            ("adapt", k) => set_hyper(&mut self.adapt, k, v)?,

            ("gate", k) => set_gate(&mut self.gate, k, v)?,
            ("astg", k) => set_gate(&mut self.astg_gate, k, v)?,

            ("accent_top", "lr_factor") => self.accent_top.lr_factor = num(v)?,
            ("accent_top", "update_shared") => self.accent_top.update_shared = num(v)?,
            ("accent_top", "top_blstm") => self.accent_top.top_blstm = num(v)?,

            ("mtl", "lambda") => self.mtl.config.lambda = num(v)?,
            ("mtl", "lambda_grid") => self.mtl.lambda_grid = list(v)?,
            ("mtl", "dev_fraction") => self.mtl.dev_fraction = num(v)?,
            ("mtl", "tap_layer") => self.mtl.config.tap_layer = num(v)?,
            ("mtl", "stop_grad_secondary_into_shared") => self.mtl.config.stop_grad_secondary_into_shared = num(v)?,
            ("mtl", "stop_grad_softlabel_into_secondary") => self.mtl.config.stop_grad_softlabel_into_secondary = num(v)?,
            ("mtl", "granularity") => self.mtl.config.granularity = v.parse()?,
            ("mtl", "secondary_hidden") => self.mtl.config.secondary_hidden = num(v)?,
            ("mtl", "secondary_dense") => self.mtl.config.secondary_dense = num(v)?,
            ("mtl", "secondary_lr_factor") => self.mtl.config.secondary_lr_factor = num(v)?,
            ("mtl", k) if k.starts_with("gate_") => set_gate(&mut self.mtl.config.gate, &k["gate_".len()..], v)?,

            ("experiment", "seeds") => self.seeds = list(v)?,
            ("experiment", "methods") => self.methods = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            ("experiment", "eval_unseen") => self.eval_unseen = num(v)?,

            ("", _) => return Err(Error::config("keys must sit under a [section]")),
            _ => return Err(Error::config("unknown key")),
        }
        Ok(())
    }
}

fn inner(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::config("malformed value"))
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(num).collect()
}

fn set_hyper(h: &mut TrainHyper, key: &str, v: &str) -> Result<()> {
    match key {
        "lr" => h.base_lr = num(v)?,
        "epochs" => h.epochs = num(v)?,
        "batch_size" => h.batch_size = num(v)?,
        "momentum" => h.momentum = num(v)?,
        "clip_norm" => h.clip_norm = if v.trim() == "none" { None } else { Some(num(v)?) },
        _ => return Err(Error::config("unknown key")),
    }
    Ok(())
}

fn set_gate(g: &mut GateConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "kind" => g.kind = v.parse()?,
        "n_layers" | "layers" => g.n_layers = num(v)?,
        "init" => g.init = parse_gate_init(v)?,
        "lr_factor" => g.lr_factor = num(v)?,
        _ => return Err(Error::config("unknown key")),
    }
    if let GateInit::RandomUniform(s) = g.init {
        if !(s >= 0.0) {
            return Err(Error::config("gate init scale must be non-negative"));
        }
    }
    Ok(())
}
