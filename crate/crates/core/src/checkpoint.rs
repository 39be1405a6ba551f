//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AMAG" | version u32 | tensor count u32
//! per tensor, sorted by name: name len u32 | name | rank u32 | dims u32… | data f32…
//! metadata len u32 | UTF-8 "key=value\n" lines, sorted by key
//! ```
//!
//! Metadata carries the model dimensions, every parameter group and the
//! architecture (adapters, gates, heads, MTL configuration), so a checkpoint
//! alone rebuilds the model. Values are stored as f32 and widened on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::corpus::cursor;
use crate::error::{Error, Result};
use crate::gates::{GateConfig, GateInit, GateKind};
use crate::model::{AcousticModel, GateSource, Head, ModelConfig};
use crate::mtl::MtlConfig;
use crate::tensor::{ParamGroup, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMAG";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn gate_init_str(init: GateInit) -> String {
    match init {
        GateInit::Zeros => "zeros".into(),
        GateInit::RandomUniform(s) => format!("uniform:{s}"),
    }
}

pub(crate) fn parse_gate_init(s: &str) -> Result<GateInit> {
    match s.trim() {
        "zeros" => Ok(GateInit::Zeros),
        other => other
            .strip_prefix("uniform:")
            .and_then(|v| v.parse().ok())
            .map(GateInit::RandomUniform)
            .ok_or_else(|| Error::config(format!("bad gate init {other:?} (zeros|uniform:SCALE)"))),
    }
}

fn metadata(model: &AcousticModel) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    let c = &model.config;
    put("model.input_dim", c.input_dim.to_string());
    put("model.num_layers", c.num_layers.to_string());
    put("model.hidden", c.hidden.to_string());
    put("model.num_states", c.num_states.to_string());
    put("model.num_accents", c.num_accents.to_string());
    put("model.seed", c.seed.to_string());
    for (i, g) in model.groups.iter().enumerate() {
        put(&format!("group.{i:03}.name"), g.name.clone());
        put(&format!("group.{i:03}.lr_factor"), g.lr_factor.to_string());
        put(&format!("group.{i:03}.frozen"), g.frozen.to_string());
        put(&format!("group.{i:03}.params"), g.params.join(","));
    }
    put("arch.lin", model.lin.to_string());
    put("arch.lhn", join(&model.lhn));
    put("arch.lon", model.lon.to_string());
    put("arch.gates", join(model.gates.iter().map(|g| g.map_or("-", GateKind::numeral))));
    put(
        "arch.gate_source",
        match model.gate_source {
            GateSource::HardLabel => "label",
            GateSource::Secondary => "secondary",
        }
        .into(),
    );
    match &model.head {
        Head::Single => put("arch.head", "single".into()),
        Head::Branched { accents, top_blstm } => {
            put("arch.head", "branched".into());
            put("arch.head.accents", join(accents));
            put("arch.head.top_blstm", top_blstm.to_string());
        }
    }
    if let Some(s) = &model.secondary {
        put("mtl.lambda", s.lambda.to_string());
        put("mtl.gate.kind", s.gate.kind.numeral().into());
        put("mtl.gate.n_layers", s.gate.n_layers.to_string());
        put("mtl.gate.init", gate_init_str(s.gate.init));
        put("mtl.gate.lr_factor", s.gate.lr_factor.to_string());
        put("mtl.tap_layer", s.tap_layer.to_string());
        put("mtl.stop_grad_secondary_into_shared", s.stop_grad_secondary_into_shared.to_string());
        put("mtl.stop_grad_softlabel_into_secondary", s.stop_grad_softlabel_into_secondary.to_string());
        put("mtl.granularity", s.granularity.to_string());
        put("mtl.secondary_hidden", s.secondary_hidden.to_string());
        put("mtl.secondary_dense", s.secondary_dense.to_string());
        put("mtl.secondary_lr_factor", s.secondary_lr_factor.to_string());
    }
    m
}

/// Serialises `model` to checkpoint bytes.
pub fn encode_checkpoint(model: &AcousticModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, model.store.len())?;
    // ParamStore iterates in ascending byte order of names.
    for (name, t) in model.store.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.dims().len())?;
        for &d in t.dims() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let meta: String = metadata(model).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut out, meta.len())?;
    out.extend_from_slice(meta.as_bytes());
    Ok(out)
}

struct Meta(BTreeMap<String, String>);

impl Meta {
    fn get(&self, key: &str) -> Result<&str> {
        self.0.get(key).map(String::as_str).ok_or_else(|| Error::format(format!("checkpoint metadata lacks {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::format(format!("checkpoint metadata {key}={v:?} is malformed")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key)?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.parse().map_err(|_| Error::format(format!("checkpoint metadata {key}={v:?} is malformed"))))
            .collect()
    }
}

fn decode_mtl(meta: &Meta) -> Result<Option<MtlConfig>> {
    if !meta.0.contains_key("mtl.lambda") {
        return Ok(None);
    }
    let fmt_err = |e: Error| Error::format(e.to_string());
    Ok(Some(MtlConfig {
        lambda: meta.parse("mtl.lambda")?,
        gate: GateConfig {
            kind: meta.get("mtl.gate.kind")?.parse().map_err(fmt_err)?,
            n_layers: meta.parse("mtl.gate.n_layers")?,
            init: parse_gate_init(meta.get("mtl.gate.init")?).map_err(fmt_err)?,
            lr_factor: meta.parse("mtl.gate.lr_factor")?,
        },
        tap_layer: meta.parse("mtl.tap_layer")?,
        stop_grad_secondary_into_shared: meta.parse("mtl.stop_grad_secondary_into_shared")?,
        stop_grad_softlabel_into_secondary: meta.parse("mtl.stop_grad_softlabel_into_secondary")?,
        granularity: meta.get("mtl.granularity")?.parse().map_err(fmt_err)?,
        secondary_hidden: meta.parse("mtl.secondary_hidden")?,
        secondary_dense: meta.parse("mtl.secondary_dense")?,
        secondary_lr_factor: meta.parse("mtl.secondary_lr_factor")?,
    }))
}

/// Rebuilds a model from checkpoint bytes.
pub fn decode_checkpoint(buf: &[u8]) -> Result<AcousticModel> {
    let mut c = cursor(buf);
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let count = c.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| Error::format("tensor name is not UTF-8"))?.to_string();
        let rank = c.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| c.f32().map(f64::from)).collect::<Result<_>>()?;
        let t = Tensor::new(dims, data).map_err(|e| Error::format(format!("tensor {name}: {e}")))?;
        store.insert(name, t).map_err(|e| Error::format(e.to_string()))?;
    }
    let len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(len)?).map_err(|_| Error::format("metadata is not UTF-8"))?;
    if !c.at_end() {
        return Err(Error::format("trailing bytes after checkpoint metadata"));
    }
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(format!("bad metadata line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let meta = Meta(map);

    let config = ModelConfig {
        input_dim: meta.parse("model.input_dim")?,
        num_layers: meta.parse("model.num_layers")?,
        hidden: meta.parse("model.hidden")?,
        num_states: meta.parse("model.num_states")?,
        num_accents: meta.parse("model.num_accents")?,
        seed: meta.parse("model.seed")?,
    };
    config.validate()?;

    let mut groups = Vec::new();
    for i in 0.. {
        let key = format!("group.{i:03}.name");
        if !meta.0.contains_key(&key) {
            break;
        }
        let mut g = ParamGroup::new(meta.get(&key)?, meta.list(&format!("group.{i:03}.params"))?, meta.parse(&format!("group.{i:03}.lr_factor"))?);
        g.frozen = meta.parse(&format!("group.{i:03}.frozen"))?;
        groups.push(g);
    }

    let gates: Vec<Option<GateKind>> = meta
        .get("arch.gates")?
        .split(',')
        .map(|s| if s == "-" { Ok(None) } else { s.parse().map(Some).map_err(|e: Error| Error::format(e.to_string())) })
        .collect::<Result<_>>()?;
    if gates.len() != config.num_layers {
        return Err(Error::format("gate list length disagrees with the layer count"));
    }
    let gate_source = match meta.get("arch.gate_source")? {
        "label" => GateSource::HardLabel,
        "secondary" => GateSource::Secondary,
        other => return Err(Error::format(format!("unknown gate source {other:?}"))),
    };
    let head = match meta.get("arch.head")? {
        "single" => Head::Single,
        "branched" => Head::Branched { accents: meta.list("arch.head.accents")?, top_blstm: meta.parse("arch.head.top_blstm")? },
        other => return Err(Error::format(format!("unknown head {other:?}"))),
    };
    let lhn: BTreeSet<usize> = meta.list::<usize>("arch.lhn")?.into_iter().collect();

    let model = AcousticModel::assemble(
        config,
        store,
        groups,
        meta.parse("arch.lin")?,
        lhn,
        meta.parse("arch.lon")?,
        gates,
        gate_source,
        head,
        decode_mtl(&meta)?,
    );
    model.validate().map_err(|e| Error::format(e.to_string()))?;
    model.check_shapes().map_err(|e| Error::format(e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint(model: &AcousticModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AcousticModel> {
    decode_checkpoint(&fs::read(path)?)
}

/// The model as it reads back from a checkpoint: every value rounded to f32.
pub fn round_trip(model: &AcousticModel) -> Result<AcousticModel> {
    decode_checkpoint(&encode_checkpoint(model)?)
}
