//! SGD over parameter groups.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    /// Heavy-ball momentum; 0 disables it.
    pub momentum: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.0, clip_norm: Some(5.0) }
    }
}

/// SGD with per-group learning-rate factors and freezing.
///
/// Only parameters holding a gradient are updated; a parameter that took no
/// part in the last forward pass (another accent's head, say) keeps both its
/// value and its momentum untouched.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd { config, velocity: HashMap::new() }
    }

    /// `param ← param − base_lr · lr_factor · grad` for unfrozen groups, then clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore, groups: &[ParamGroup], base_lr: f64) -> Result<()> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::config(format!("learning rate {base_lr} must be positive")));
        }
        let live: Vec<(&str, f64)> = groups
            .iter()
            .filter(|g| !g.frozen)
            .flat_map(|g| g.params.iter().map(move |p| (p.as_str(), g.lr_factor)))
            .filter(|(p, _)| store.get(p).is_ok_and(|t| t.grad().is_some()))
            .collect();
        if live.is_empty() {
            store.clear_grads();
            return Err(Error::State("optimizer step without gradients".into()));
        }

        let mut scale = 1.0;
        if let Some(clip) = self.config.clip_norm {
            let sq: f64 = live
                .iter()
                .map(|(p, _)| store.get(p).map_or(0.0, |t| t.grad().unwrap_or(&[]).iter().map(|g| g * g).sum()))
                .sum();
            let norm = sq.sqrt();
            if !norm.is_finite() {
                store.clear_grads();
                return Err(Error::Divergence { layer: "gradient norm".into() });
            }
            if norm > clip {
                scale = clip / norm;
            }
        }

        let momentum = self.config.momentum;
        for (name, factor) in live {
            let t = store.get_mut(name)?;
            let grad: Vec<f64> = t.grad().expect("filtered on grad").iter().map(|g| g * scale).collect();
            let lr = base_lr * factor;
            if momentum > 0.0 {
                let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
                for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            } else {
                for (p, g) in t.data_mut().iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
        }
        store.clear_grads();
        Ok(())
    }
}

/// One plain SGD step (no momentum, no clipping).
pub fn sgd_step(store: &mut ParamStore, groups: &[ParamGroup], base_lr: f64) -> Result<()> {
    Sgd::new(SgdConfig { momentum: 0.0, clip_norm: None }).step(store, groups, base_lr)
}
