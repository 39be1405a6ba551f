//! Gate units that modulate a layer's activations with an accent vector.
//!
//! For a layer output `h` (width `M`) and accent vector `v` (width `N`):
//!
//! | kind | output |
//! |------|--------|
//! | I    | `h + Vv + b` |
//! | II   | `Uh + Vv + b` |
//! | III  | `σ(h + Vv + b)` |
//! | IV   | `h ⊙ Vv + b` |
//! | V    | `h ⊙ (h + Vv + b)` |
//!
//! `v` is a one-hot accent label or a soft posterior; it is applied
//! independently at each time step.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, NodeId};
use crate::model::{AcousticModel, GateSource};
use crate::rng;
use crate::tensor::{ParamGroup, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    GateI,
    GateII,
    GateIII,
    GateIV,
    GateV,
}

impl GateKind {
    pub const ALL: [GateKind; 5] = [GateKind::GateI, GateKind::GateII, GateKind::GateIII, GateKind::GateIV, GateKind::GateV];

    pub fn numeral(self) -> &'static str {
        match self {
            GateKind::GateI => "I",
            GateKind::GateII => "II",
            GateKind::GateIII => "III",
            GateKind::GateIV => "IV",
            GateKind::GateV => "V",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GATE {}", self.numeral())
    }
}

impl FromStr for GateKind {
    type Err = Error;

    /// Accepts roman (`III`) or arabic (`3`) numerals, case-insensitive.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(GateKind::GateI),
            "II" | "2" => Ok(GateKind::GateII),
            "III" | "3" => Ok(GateKind::GateIII),
            "IV" | "4" => Ok(GateKind::GateIV),
            "V" | "5" => Ok(GateKind::GateV),
            other => Err(Error::config(format!("unknown gate kind {other:?}"))),
        }
    }
}

/// A gate's parameters, detached from any model.
#[derive(Debug, Clone, PartialEq)]
pub struct GateUnit {
    pub kind: GateKind,
    /// `M × N`
    pub v: Tensor,
    /// `M`
    pub b: Tensor,
    /// `M × M`, GATE II only.
    pub u: Option<Tensor>,
}

impl GateUnit {
    pub fn new(kind: GateKind, v: Tensor, b: Tensor, u: Option<Tensor>) -> Result<Self> {
        let m = v.rows();
        if v.dims().len() != 2 || b.len() != m {
            return Err(Error::config(format!("gate V {:?} and b {:?} disagree", v.dims(), b.dims())));
        }
        match (&u, kind) {
            (Some(u), GateKind::GateII) if u.dims() == [m, m] => {}
            (None, k) if k != GateKind::GateII => {}
            _ => return Err(Error::config("U must be present (M × M) exactly for GATE II")),
        }
        Ok(GateUnit { kind, v, b, u })
    }

    /// `V = 0`, `b = 0` and, for GATE II, `U = I`.
    pub fn zeros(kind: GateKind, m: usize, n: usize) -> Self {
        let u = (kind == GateKind::GateII).then(|| Tensor::identity(m));
        GateUnit { kind, v: Tensor::zeros(&[m, n]), b: Tensor::zeros(&[m]), u }
    }

    pub fn output_dim(&self) -> usize {
        self.v.rows()
    }

    pub fn accent_dim(&self) -> usize {
        self.v.cols()
    }
}

/// Applies `gate` to one frame.
pub fn gate_forward(gate: &GateUnit, h: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = (gate.output_dim(), gate.accent_dim());
    if h.len() != m || v.len() != n {
        return Err(Error::config(format!(
            "gate expects h[{m}], v[{n}]; got h[{}], v[{}]",
            h.len(),
            v.len()
        )));
    }
    let vv: Vec<f64> = (0..m).map(|r| gate.v.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect();
    let b = gate.b.data();
    let out = match gate.kind {
        GateKind::GateI => (0..m).map(|r| h[r] + vv[r] + b[r]).collect(),
        GateKind::GateII => {
            let u = gate.u.as_ref().expect("GATE II carries U");
            (0..m)
                .map(|r| u.row(r).iter().zip(h).map(|(a, x)| a * x).sum::<f64>() + vv[r] + b[r])
                .collect()
        }
        GateKind::GateIII => (0..m).map(|r| sigmoid(h[r] + vv[r] + b[r])).collect(),
        GateKind::GateIV => (0..m).map(|r| h[r] * vv[r] + b[r]).collect(),
        GateKind::GateV => (0..m).map(|r| h[r] * (h[r] + vv[r] + b[r])).collect(),
    };
    Ok(out)
}

/// Records a gate on the tape; parameters are read from `prefix.{V,b,U}`.
pub(crate) fn build_gate(g: &mut Graph, kind: GateKind, prefix: &str, h: NodeId, v: NodeId) -> Result<NodeId> {
    let vw = g.param(&format!("{prefix}.V"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    match kind {
        GateKind::GateI | GateKind::GateIII | GateKind::GateV => {
            let shift = g.linear(v, vw, Some(b))?;
            let s = g.add(h, shift)?;
            match kind {
                GateKind::GateI => Ok(s),
                GateKind::GateIII => Ok(g.sigmoid(s)),
                _ => g.mul(h, s),
            }
        }
        GateKind::GateII => {
            let u = g.param(&format!("{prefix}.U"))?;
            let uh = g.linear(h, u, None)?;
            let shift = g.linear(v, vw, Some(b))?;
            g.add(uh, shift)
        }
        GateKind::GateIV => {
            let scale = g.linear(v, vw, None)?;
            let prod = g.mul(h, scale)?;
            g.add_row(prod, b)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateInit {
    Zeros,
    /// Uniform(−scale, scale) for `V` and `b`.
    RandomUniform(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub kind: GateKind,
    /// Gates follow each of the first `n_layers` BLSTM layers.
    pub n_layers: usize,
    pub init: GateInit,
    pub lr_factor: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { kind: GateKind::GateI, n_layers: 1, init: GateInit::RandomUniform(0.01), lr_factor: 5.0 }
    }
}

impl GateConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.n_layers == 0 || self.n_layers > num_layers {
            return Err(Error::config(format!(
                "gates after the first {} layers of a {num_layers}-layer model",
                self.n_layers
            )));
        }
        if !(self.lr_factor > 0.0) {
            return Err(Error::config("gate lr_factor must be positive"));
        }
        if let GateInit::RandomUniform(s) = self.init {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config("gate init scale must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Adds gate parameters for the first `cfg.n_layers` layers, fed by `source`.
pub(crate) fn add_gates(mut model: AcousticModel, cfg: &GateConfig, seed: u64, source: GateSource) -> Result<AcousticModel> {
    cfg.validate(model.config.num_layers)?;
    if model.has_gates() {
        return Err(Error::config("model already has gates"));
    }
    let m = 2 * model.config.hidden;
    let n = model.config.num_accents;
    let mut r = rng::stream(seed, &[rng::tag("gate-init")]);
    let mut names = Vec::new();
    for l in 1..=cfg.n_layers {
        let mut unit = GateUnit::zeros(cfg.kind, m, n);
        if let GateInit::RandomUniform(scale) = cfg.init {
            unit.v = Tensor::uniform(&[m, n], scale, &mut r);
            unit.b = Tensor::uniform(&[m], scale, &mut r);
        }
        let prefix = format!("gate.{l}");
        model.store.insert(format!("{prefix}.V"), unit.v)?;
        model.store.insert(format!("{prefix}.b"), unit.b)?;
        names.push(format!("{prefix}.V"));
        names.push(format!("{prefix}.b"));
        if let Some(u) = unit.u {
            model.store.insert(format!("{prefix}.U"), u)?;
            names.push(format!("{prefix}.U"));
        }
        model.gates[l - 1] = Some(cfg.kind);
    }
    model.gate_source = source;
    model.push_group(ParamGroup::new("gate", names, cfg.lr_factor));
    Ok(model)
}

/// Inserts hard-label gates after each of the first `cfg.n_layers` layers.
pub fn insert_gates(model: AcousticModel, cfg: &GateConfig, seed: u64) -> Result<AcousticModel> {
    add_gates(model, cfg, seed, GateSource::HardLabel)
}

/// The gate after layer `layer` (1-based), copied out of the model.
pub fn gate_unit(model: &AcousticModel, layer: usize) -> Option<GateUnit> {
    let kind = (*model.gates.get(layer.checked_sub(1)?)?)?;
    let p = |s: &str| model.store.get(&format!("gate.{layer}.{s}")).ok().cloned();
    GateUnit::new(kind, p("V")?, p("b")?, p("U")).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_baseline, ModelConfig};
    use proptest::prelude::*;

    fn gate(kind: GateKind, v: Vec<f64>, b: Vec<f64>) -> GateUnit {
        let m = b.len();
        let n = v.len() / m;
        let u = (kind == GateKind::GateII).then(|| Tensor::identity(m));
        GateUnit::new(kind, Tensor::matrix(m, n, v).unwrap(), Tensor::vector(b).unwrap(), u).unwrap()
    }

    #[test]
    fn gate_one_identity_with_zero_params() {
        let g = GateUnit::zeros(GateKind::GateI, 2, 3);
        assert_eq!(gate_forward(&g, &[1.0, 2.0], &[0.2, 0.3, 0.5]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn gate_one_hand_evaluated() {
        let g = gate(GateKind::GateI, vec![0.5, 0.0, 0.0, -1.0], vec![0.1, 0.1]);
        let out = gate_forward(&g, &[1.0, 2.0], &[1.0, 0.0]).unwrap();
        assert!((out[0] - 1.6).abs() < 1e-12);
        assert!((out[1] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn gate_three_of_zero_is_half() {
        let g = GateUnit::zeros(GateKind::GateIII, 2, 2);
        assert_eq!(gate_forward(&g, &[0.0, 0.0], &[1.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn gate_four_with_unit_scale_is_identity() {
        let g = gate(GateKind::GateIV, vec![1.0, 1.0, 1.0, 1.0], vec![0.0, 0.0]);
        assert_eq!(gate_forward(&g, &[3.0, -2.0], &[0.0, 1.0]).unwrap(), vec![3.0, -2.0]);
    }

    #[test]
    fn gate_five_squares_with_zero_params() {
        let g = GateUnit::zeros(GateKind::GateV, 2, 2);
        assert_eq!(gate_forward(&g, &[2.0, 3.0], &[1.0, 0.0]).unwrap(), vec![4.0, 9.0]);
    }

    #[test]
    fn u_only_for_gate_two() {
        let v = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(GateUnit::new(GateKind::GateI, v.clone(), b.clone(), Some(Tensor::identity(2))).is_err());
        assert!(GateUnit::new(GateKind::GateII, v.clone(), b.clone(), None).is_err());
        assert!(GateUnit::new(GateKind::GateII, v, b, Some(Tensor::identity(2))).is_ok());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let g = GateUnit::zeros(GateKind::GateI, 2, 3);
        assert!(gate_forward(&g, &[1.0], &[0.0; 3]).is_err());
        assert!(gate_forward(&g, &[1.0, 2.0], &[0.0; 2]).is_err());
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("iii".parse::<GateKind>().unwrap(), GateKind::GateIII);
        assert_eq!("5".parse::<GateKind>().unwrap(), GateKind::GateV);
        assert!("VI".parse::<GateKind>().is_err());
    }

    #[test]
    fn insert_after_first_three_layers() {
        let m = build_baseline(&ModelConfig::default()).unwrap();
        let cfg = GateConfig { n_layers: 3, ..GateConfig::default() };
        let m = insert_gates(m, &cfg, 1).unwrap();
        assert_eq!(m.gate_kinds(), &[Some(GateKind::GateI), Some(GateKind::GateI), Some(GateKind::GateI), None]);
        assert!(m.params().contains("gate.3.V") && !m.params().contains("gate.4.V"));
        assert_eq!(m.group("gate").unwrap().lr_factor, 5.0);
        m.validate().unwrap();
        assert!(insert_gates(m, &cfg, 1).is_err(), "second insertion must fail");
    }

    #[test]
    fn too_many_gate_layers_rejected() {
        let m = build_baseline(&ModelConfig::default()).unwrap();
        let cfg = GateConfig { n_layers: 5, ..GateConfig::default() };
        assert!(matches!(insert_gates(m, &cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn gate_two_u_starts_at_identity() {
        let m = build_baseline(&ModelConfig::default()).unwrap();
        let cfg = GateConfig { kind: GateKind::GateII, ..GateConfig::default() };
        let m = insert_gates(m, &cfg, 1).unwrap();
        assert_eq!(m.params().get("gate.1.U").unwrap(), &Tensor::identity(64));
        assert!(m.group("gate").unwrap().params.contains(&"gate.1.U".to_string()));
    }

    fn arb_gate(kind: GateKind) -> impl Strategy<Value = (GateUnit, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (
            prop::collection::vec(-2.0..2.0f64, 6),
            prop::collection::vec(-1.0..1.0f64, 3),
            prop::collection::vec(-3.0..3.0f64, 3),
            prop::collection::vec(0.0..1.0f64, 2),
            prop::collection::vec(0.0..1.0f64, 2),
            0.0..1.0f64,
        )
            .prop_map(move |(v, b, h, p, q, a)| {
                let norm = |x: Vec<f64>| {
                    let s: f64 = x.iter().sum::<f64>() + 1e-9;
                    x.into_iter().map(|e| e / s).collect::<Vec<_>>()
                };
                (gate(kind, v, b), h, norm(p), norm(q), a)
            })
    }

    proptest! {
        #[test]
        fn every_kind_preserves_width(h in prop::collection::vec(-3.0..3.0f64, 4), v in prop::collection::vec(0.0..1.0f64, 3)) {
            for kind in GateKind::ALL {
                let g = GateUnit::zeros(kind, 4, 3);
                prop_assert_eq!(gate_forward(&g, &h, &v).unwrap().len(), 4);
            }
        }

        #[test]
        fn gate_two_with_identity_u_equals_gate_one((g1, h, p, _, _) in arb_gate(GateKind::GateI)) {
            let g2 = GateUnit { kind: GateKind::GateII, u: Some(Tensor::identity(3)), ..g1.clone() };
            let a = gate_forward(&g1, &h, &p).unwrap();
            let b = gate_forward(&g2, &h, &p).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn additive_gates_are_affine_in_the_accent_vector((g, h, p, q, a) in arb_gate(GateKind::GateI)) {
            for gate in [g.clone(), GateUnit { kind: GateKind::GateII, u: Some(Tensor::identity(3)), ..g }] {
                let mix: Vec<f64> = p.iter().zip(&q).map(|(x, y)| a * x + (1.0 - a) * y).collect();
                let lhs = gate_forward(&gate, &h, &mix).unwrap();
                let gp = gate_forward(&gate, &h, &p).unwrap();
                let gq = gate_forward(&gate, &h, &q).unwrap();
                for i in 0..3 {
                    prop_assert!((lhs[i] - (a * gp[i] + (1.0 - a) * gq[i])).abs() < 1e-12);
                }
            }
        }
    }
}
