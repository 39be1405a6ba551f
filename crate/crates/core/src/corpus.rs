//! Synthetic multi-accent corpus.
//!
//! Each of `K` tied states owns a mean vector `μ_k ~ N(0, s²I)`. An accent is
//! an affine map `(A, c)` on those means, with `A = I + δ·G/√D` and
//! `c = δ·s·z/2`, so the deviation `δ` controls how far the accent drifts
//! from standard speech. The direction `(G, z)` blends a component common to
//! all accents with one of the accent's own:
//! `G = √ρ·G₀ + √(1−ρ)·G_a`, likewise `z`, all entries standard normal.
//! An utterance is a run of state segments; every frame is
//! `A μ_k + c + σ ε` with `ε ~ N(0, I)`.
//!
//! Splits mirror an adaptation study: a large standard-accent training set,
//! small per-accent adaptation sets, per-accent evaluation sets (plus a
//! standard-accent one), and evaluation sets for accents never seen during
//! adaptation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 4] = b"AMCO";
pub const CORPUS_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

pub const TRAIN: &str = "train";
pub const ADAPT: &str = "adapt";
pub const EVAL: &str = "eval";
pub const UNSEEN: &str = "unseen";

const SEEN_NAMES: [&str; 4] = ["AH", "BJ", "SX", "YN"];
const UNSEEN_NAMES: [&str; 3] = ["GZ", "SC", "ZJ"];
pub const STANDARD_NAME: &str = "STD";

/// A labelled frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub accent: u32,
    /// `T × D`
    pub features: Tensor,
    /// One state id per frame.
    pub labels: Vec<u32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccentKind {
    Standard,
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccentInfo {
    pub id: u32,
    pub name: String,
    pub kind: AccentKind,
}

/// Affine distortion of the state means for one accent.
#[derive(Debug, Clone, PartialEq)]
pub struct AccentTransform {
    pub accent: u32,
    pub deviation: f64,
    /// `D × D`
    pub a: Tensor,
    pub c: Vec<f64>,
}

/// Unscaled direction of an accent's drift.
#[derive(Debug, Clone, PartialEq)]
pub struct AccentDirection {
    /// `D × D`
    pub g: Tensor,
    pub z: Vec<f64>,
}

impl AccentDirection {
    pub fn sample(dim: usize, rng: &mut Rng) -> Self {
        let mut g = Tensor::zeros(&[dim, dim]);
        for v in g.data_mut() {
            *v = rng.sample(StandardNormal);
        }
        let z = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        AccentDirection { g, z }
    }

    /// `√ρ·shared + √(1−ρ)·self`
    pub fn blend(&self, shared: &AccentDirection, rho: f64) -> AccentDirection {
        let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
        let g = self.g.data().iter().zip(shared.g.data()).map(|(o, s)| a * s + b * o).collect();
        AccentDirection {
            g: Tensor::new(self.g.dims().to_vec(), g).expect("same shape"),
            z: self.z.iter().zip(&shared.z).map(|(o, s)| a * s + b * o).collect(),
        }
    }
}

impl AccentTransform {
    pub fn standard(accent: u32, dim: usize) -> Self {
        AccentTransform { accent, deviation: 0.0, a: Tensor::identity(dim), c: vec![0.0; dim] }
    }

    /// `A = I + δ·G/√D`, `c = δ·s·z/2` for means of scale `s`.
    pub fn from_direction(accent: u32, deviation: f64, dir: &AccentDirection, mean_scale: f64) -> Self {
        let dim = dir.z.len();
        let scale = deviation / (dim as f64).sqrt();
        let mut a = Tensor::identity(dim);
        for (v, g) in a.data_mut().iter_mut().zip(dir.g.data()) {
            *v += scale * g;
        }
        let c = dir.z.iter().map(|z| 0.5 * deviation * mean_scale * z).collect();
        AccentTransform { accent, deviation, a, c }
    }

    /// An accent with its own direction only and unit-scale means.
    pub fn sample(accent: u32, deviation: f64, dim: usize, rng: &mut Rng) -> Self {
        Self::from_direction(accent, deviation, &AccentDirection::sample(dim, rng), 1.0)
    }

    pub fn apply(&self, mean: &[f64]) -> Vec<f64> {
        (0..mean.len())
            .map(|r| self.c[r] + self.a.row(r).iter().zip(mean).map(|(x, y)| x * y).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub num_states: usize,
    pub feature_dim: usize,
    pub noise: f64,
    /// Standard deviation `s` of the state means.
    pub mean_scale: f64,
    /// Share `ρ` of every accent's drift that is common to all accents.
    pub shared_deviation: f64,
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub baseline_utts: usize,
    pub adapt_utts: usize,
    pub eval_utts: usize,
    pub seen_deviations: Vec<f64>,
    pub unseen_deviations: Vec<f64>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_states: 20,
            feature_dim: 8,
            noise: 0.3,
            mean_scale: 0.5,
            shared_deviation: 0.6,
            min_segment_frames: 3,
            max_segment_frames: 10,
            min_segments: 5,
            max_segments: 15,
            baseline_utts: 2000,
            adapt_utts: 100,
            eval_utts: 50,
            seen_deviations: vec![0.4, 0.5, 0.6, 0.7],
            unseen_deviations: vec![0.45, 0.8, 0.35],
            seed: 2024,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_states", self.num_states),
            ("feature_dim", self.feature_dim),
            ("min_segment_frames", self.min_segment_frames),
            ("min_segments", self.min_segments),
            ("baseline_utts", self.baseline_utts),
            ("adapt_utts", self.adapt_utts),
            ("eval_utts", self.eval_utts),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("corpus {name} must be positive")));
            }
        }
        if self.max_segment_frames < self.min_segment_frames || self.max_segments < self.min_segments {
            return Err(Error::config("corpus ranges need min <= max"));
        }
        if self.seen_deviations.is_empty() {
            return Err(Error::config("corpus needs at least one seen accent"));
        }
        if !(self.mean_scale > 0.0) || !(0.0..=1.0).contains(&self.shared_deviation) {
            return Err(Error::config("mean_scale must be positive and shared_deviation in [0, 1]"));
        }
        if !(self.noise >= 0.0) || self.seen_deviations.iter().chain(&self.unseen_deviations).any(|d| !(*d >= 0.0)) {
            return Err(Error::config("noise and deviations must be non-negative"));
        }
        Ok(())
    }

    pub fn num_seen(&self) -> usize {
        self.seen_deviations.len()
    }

    /// Accent table: seen accents first, then unseen, then the standard accent.
    pub fn accents(&self) -> Vec<AccentInfo> {
        accent_table(self.seen_deviations.len(), self.unseen_deviations.len())
    }

    /// Class means `μ_k` (`K × D`).
    pub fn state_means(&self) -> Tensor {
        let mut r = rng::stream(self.seed, &[rng::tag("state-means")]);
        let mut t = Tensor::zeros(&[self.num_states, self.feature_dim]);
        for v in t.data_mut() {
            *v = self.mean_scale * r.sample::<f64, _>(StandardNormal);
        }
        t
    }

    /// Transform for every accent id. The accents' own directions come from
    /// disjoint seed streams for seen and unseen accents.
    pub fn transforms(&self) -> Vec<AccentTransform> {
        let d = self.feature_dim;
        let n_seen = self.seen_deviations.len();
        let shared = AccentDirection::sample(d, &mut rng::stream(self.seed, &[rng::tag("shared-accent")]));
        let make = |id: usize, dev: f64, stream: &str, i: usize| {
            let own = AccentDirection::sample(d, &mut rng::stream(self.seed, &[rng::tag(stream), i as u64]));
            AccentTransform::from_direction(id as u32, dev, &own.blend(&shared, self.shared_deviation), self.mean_scale)
        };
        let mut out = Vec::new();
        for (i, &dev) in self.seen_deviations.iter().enumerate() {
            out.push(make(i, dev, "seen-accent", i));
        }
        for (i, &dev) in self.unseen_deviations.iter().enumerate() {
            out.push(make(n_seen + i, dev, "unseen-accent", i));
        }
        out.push(AccentTransform::standard(out.len() as u32, d));
        out
    }
}

pub fn accent_table(n_seen: usize, n_unseen: usize) -> Vec<AccentInfo> {
    let name = |names: &[&str], prefix: char, i: usize| {
        names.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("{prefix}{}", i + 1))
    };
    let mut out = Vec::new();
    for i in 0..n_seen {
        out.push(AccentInfo { id: i as u32, name: name(&SEEN_NAMES, 'S', i), kind: AccentKind::Seen });
    }
    for i in 0..n_unseen {
        out.push(AccentInfo {
            id: (n_seen + i) as u32,
            name: name(&UNSEEN_NAMES, 'U', i),
            kind: AccentKind::Unseen,
        });
    }
    out.push(AccentInfo { id: (n_seen + n_unseen) as u32, name: STANDARD_NAME.into(), kind: AccentKind::Standard });
    out
}

/// Split name to its utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub accents: Vec<AccentInfo>,
    pub splits: BTreeMap<String, Vec<Utterance>>,
}

fn split_code(split: &str) -> u64 {
    match split {
        TRAIN => 1,
        ADAPT => 2,
        EVAL => 3,
        UNSEEN => 4,
        _ => 9,
    }
}

fn sample_utterance(
    spec: &CorpusSpec,
    means: &Tensor,
    transform: &AccentTransform,
    split: &str,
    index: usize,
) -> Utterance {
    let code = split_code(split);
    let mut r = rng::stream(spec.seed, &[code, transform.accent as u64, index as u64]);
    let shifted: Vec<Vec<f64>> = (0..spec.num_states).map(|k| transform.apply(means.row(k))).collect();
    let segments = r.gen_range(spec.min_segments..=spec.max_segments);
    let mut labels = Vec::new();
    let mut feats = Vec::new();
    for _ in 0..segments {
        let state = r.gen_range(0..spec.num_states);
        let len = r.gen_range(spec.min_segment_frames..=spec.max_segment_frames);
        for _ in 0..len {
            labels.push(state as u32);
            for &m in &shifted[state] {
                let e: f64 = r.sample(StandardNormal);
                // stored as f32 on disk; round now so in-memory and loaded corpora agree
                feats.push((m + spec.noise * e) as f32 as f64);
            }
        }
    }
    let t = labels.len();
    Utterance {
        id: (code << 48) | ((transform.accent as u64) << 32) | index as u64,
        accent: transform.accent,
        features: Tensor::matrix(t, spec.feature_dim, feats).expect("utterance shape"),
        labels,
    }
}

impl Corpus {
    /// Builds every split in memory. Deterministic in `spec.seed`.
    pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
        spec.validate()?;
        let means = spec.state_means();
        let transforms = spec.transforms();
        let accents = spec.accents();
        let n_seen = spec.num_seen();
        let standard = transforms.last().expect("standard accent");
        let seen = &transforms[..n_seen];
        let unseen = &transforms[n_seen..transforms.len() - 1];

        let build = |split: &str, parts: Vec<(&AccentTransform, usize)>| -> Vec<Utterance> {
            parts
                .into_iter()
                .flat_map(|(tr, n)| (0..n).map(move |i| (tr, i)))
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|(tr, i)| sample_utterance(spec, &means, tr, split, i))
                .collect()
        };

        let mut splits = BTreeMap::new();
        splits.insert(TRAIN.to_string(), build(TRAIN, vec![(standard, spec.baseline_utts)]));
        splits.insert(ADAPT.to_string(), build(ADAPT, seen.iter().map(|t| (t, spec.adapt_utts)).collect()));
        let mut eval_parts = vec![(standard, spec.eval_utts)];
        eval_parts.extend(seen.iter().map(|t| (t, spec.eval_utts)));
        splits.insert(EVAL.to_string(), build(EVAL, eval_parts));
        if !unseen.is_empty() {
            splits.insert(UNSEEN.to_string(), build(UNSEEN, unseen.iter().map(|t| (t, spec.eval_utts)).collect()));
        }
        Ok(Corpus { accents, splits })
    }

    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config(format!("corpus has no split {name:?}")))
    }

    pub fn accent(&self, id: u32) -> Option<&AccentInfo> {
        self.accents.iter().find(|a| a.id == id)
    }

    pub fn accent_name(&self, id: u32) -> String {
        self.accent(id).map_or_else(|| format!("A{id}"), |a| a.name.clone())
    }

    pub fn accent_id(&self, name: &str) -> Option<u32> {
        self.accents.iter().find(|a| a.name == name).map(|a| a.id)
    }

    pub fn seen_accents(&self) -> Vec<u32> {
        self.accents.iter().filter(|a| a.kind == AccentKind::Seen).map(|a| a.id).collect()
    }

    pub fn unseen_accents(&self) -> Vec<u32> {
        self.accents.iter().filter(|a| a.kind == AccentKind::Unseen).map(|a| a.id).collect()
    }

    pub fn standard_accent(&self) -> u32 {
        self.accents.iter().find(|a| a.kind == AccentKind::Standard).map_or(0, |a| a.id)
    }

    /// Utterances of one accent within a split.
    pub fn by_accent(&self, split: &str, accent: u32) -> Result<Vec<Utterance>> {
        Ok(self.split(split)?.iter().filter(|u| u.accent == accent).cloned().collect())
    }

    /// Writes one `AMCO` file per split plus the manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (split, utts) in &self.splits {
            let file = format!("{split}.amco");
            write_utterances(&dir.join(&file), utts)?;
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for u in utts {
                *counts.entry(u.accent).or_default() += 1;
            }
            for (accent, count) in counts {
                manifest.push_str(&format!("{split},{},{count},{file}\n", self.accent_name(accent)));
            }
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    /// Reads a directory written by [`Corpus::write`].
    pub fn load(dir: &Path) -> Result<Corpus> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::config(format!("cannot read corpus manifest in {}: {e}", dir.display())))?;
        let mut files: BTreeMap<String, String> = BTreeMap::new();
        let mut seen_names = Vec::new();
        let mut unseen_names = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 || f[2].parse::<usize>().is_err() {
                return Err(Error::format(format!("manifest line {}: {line:?}", n + 1)));
            }
            files.insert(f[0].to_string(), f[3].to_string());
            match f[0] {
                ADAPT => seen_names.push(f[1].to_string()),
                UNSEEN => unseen_names.push(f[1].to_string()),
                _ => {}
            }
        }
        let accents = accent_table(seen_names.len(), unseen_names.len());
        let mut splits = BTreeMap::new();
        for (split, file) in files {
            splits.insert(split, read_utterances(&dir.join(file))?);
        }
        Ok(Corpus { accents, splits })
    }
}

/// Writes the spec to `dir` and returns the generated corpus.
pub fn generate_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Corpus> {
    let corpus = Corpus::generate(spec)?;
    corpus.write(dir)?;
    Ok(corpus)
}

pub fn encode_utterances(utts: &[Utterance]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&(utts.len() as u32).to_le_bytes());
    for u in utts {
        out.extend_from_slice(&u.id.to_le_bytes());
        out.extend_from_slice(&u.accent.to_le_bytes());
        out.extend_from_slice(&(u.features.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(u.features.cols() as u32).to_le_bytes());
        for &v in u.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &y in &u.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::format("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub(crate) fn cursor(buf: &[u8]) -> Cursor<'_> {
    Cursor { buf, pos: 0 }
}

impl Cursor<'_> {
    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_utterances(buf: &[u8]) -> Result<Vec<Utterance>> {
    let mut c = cursor(buf);
    if c.take(4)? != CORPUS_MAGIC {
        return Err(Error::format("not a corpus file (bad magic)"));
    }
    let version = c.u32()?;
    if version != CORPUS_VERSION {
        return Err(Error::format(format!("corpus version {version}, expected {CORPUS_VERSION}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = c.u64()?;
        let accent = c.u32()?;
        let t = c.u32()? as usize;
        let d = c.u32()? as usize;
        let n = t.checked_mul(d).ok_or_else(|| Error::format("utterance size overflow"))?;
        let feats = (0..n).map(|_| c.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        let labels = (0..t).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let features = Tensor::matrix(t, d, feats).map_err(|e| Error::format(format!("utterance {id}: {e}")))?;
        out.push(Utterance { id, accent, features, labels });
    }
    if !c.at_end() {
        return Err(Error::format("trailing bytes after last utterance"));
    }
    Ok(out)
}

pub fn write_utterances(path: &Path, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_utterances(utts))?;
    w.flush()?;
    Ok(())
}

pub fn read_utterances(path: &Path) -> Result<Vec<Utterance>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode_utterances(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn small_spec() -> CorpusSpec {
        CorpusSpec { baseline_utts: 20, adapt_utts: 6, eval_utts: 4, ..CorpusSpec::default() }
    }

    #[test]
    fn default_split_sizes() {
        let spec = CorpusSpec { baseline_utts: 10, ..CorpusSpec::default() };
        let c = Corpus::generate(&spec).unwrap();
        for a in c.seen_accents() {
            assert_eq!(c.by_accent(ADAPT, a).unwrap().len(), 100);
            assert_eq!(c.by_accent(EVAL, a).unwrap().len(), 50);
        }
        assert_eq!(c.unseen_accents().len(), 3);
        for a in c.unseen_accents() {
            assert_eq!(c.by_accent(UNSEEN, a).unwrap().len(), 50);
        }
        assert_eq!(c.split(TRAIN).unwrap().len(), 10);
    }

    #[test]
    fn ids_are_unique_across_splits() {
        let c = Corpus::generate(&small_spec()).unwrap();
        let mut ids = HashSet::new();
        for utts in c.splits.values() {
            for u in utts {
                assert!(ids.insert(u.id), "duplicate id {}", u.id);
            }
        }
    }

    #[test]
    fn utterance_shapes_follow_spec() {
        let spec = small_spec();
        let c = Corpus::generate(&spec).unwrap();
        for u in c.splits.values().flatten() {
            let t = u.frames();
            assert!((15..=150).contains(&t));
            assert_eq!(u.features.dims(), &[t, 8]);
            assert!(u.labels.iter().all(|&y| y < 20));
        }
    }

    #[test]
    fn zero_deviation_is_the_identity_transform() {
        let tr = AccentTransform::sample(0, 0.0, 4, &mut rng::seeded(1));
        assert_eq!(tr.a, Tensor::identity(4));
        assert_eq!(tr.apply(&[1.0, -2.0, 0.5, 3.0]), vec![1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn seen_and_unseen_transforms_differ() {
        let spec = CorpusSpec { seen_deviations: vec![0.5], unseen_deviations: vec![0.5], ..small_spec() };
        let t = spec.transforms();
        assert_ne!(t[0].a, t[1].a);
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&small_spec(), dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(c, back);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.lines().any(|l| l == "adapt,AH,6,adapt.amco"));
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_corpus(&small_spec(), a.path()).unwrap();
        generate_corpus(&small_spec(), b.path()).unwrap();
        for f in ["train.amco", "adapt.amco", "eval.amco", "unseen.amco", MANIFEST] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn decode_rejects_corruption() {
        let c = Corpus::generate(&small_spec()).unwrap();
        let bytes = encode_utterances(c.split(EVAL).unwrap());
        assert!(decode_utterances(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_utterances(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_utterances(&extra).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn encoding_round_trips(t in 1usize..6, d in 1usize..4, seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let feats: Vec<f64> = (0..t * d).map(|_| r.gen_range(-5.0f32..5.0) as f64).collect();
            let u = Utterance {
                id: seed,
                accent: (seed % 8) as u32,
                features: Tensor::matrix(t, d, feats).unwrap(),
                labels: (0..t as u32).collect(),
            };
            let back = decode_utterances(&encode_utterances(std::slice::from_ref(&u))).unwrap();
            prop_assert_eq!(back, vec![u]);
        }
    }
}
