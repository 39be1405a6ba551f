//! End-to-end experiment runner: baseline per seed, each adaptation method,
//! evaluation, CSV and markdown tables.
//!
//! Every trained model is written to `<out>/seed-<s>/<method>.ckpt` and
//! evaluated as read back from disk, so an interrupted run resumes from its
//! checkpoints and reproduces the uninterrupted numbers exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adapt::{adapt, adapt_per_accent, parse_method, AdaptationPlan, Method};
use crate::checkpoint::{load_checkpoint, round_trip, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::corpus::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{fer_by_accent, frame_error_rate, relative_reduction, round1};
use crate::model::{build_baseline, AcousticModel};
use crate::mtl::{accent_accuracy, mtl_adapt, MtlConfig};
use crate::train::{train_baseline, TrainHyper};

pub const RESULTS_CSV: &str = "results.csv";
pub const SEEN_TABLE: &str = "seen.md";
pub const UNSEEN_TABLE: &str = "unseen.md";

/// A method as named in experiment configs and on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    Baseline,
    Plan(Method),
    /// One fine-tune(all) model per seen accent.
    AccentSpecific,
    MtlG,
}

impl MethodSpec {
    pub fn parse(s: &str, cfg: &ExperimentConfig) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(MethodSpec::Baseline),
            "accent-specific" => Ok(MethodSpec::AccentSpecific),
            "mtlg" => Ok(MethodSpec::MtlG),
            other => parse_method(other, &cfg.gate, &cfg.astg_gate, &cfg.accent_top_config()).map(MethodSpec::Plan),
        }
    }
}

/// File-name form of a method name.
pub fn slug(method: &str) -> String {
    method.trim().replace(':', "-")
}

/// First `1 − fraction` of `utts` for training, the rest held out.
pub fn holdout(utts: &[Utterance], fraction: f64) -> (Vec<Utterance>, Vec<Utterance>) {
    let held = ((utts.len() as f64 * fraction).ceil() as usize).clamp(1, utts.len().saturating_sub(1).max(1));
    let cut = utts.len() - held;
    (utts[..cut].to_vec(), utts[cut..].to_vec())
}

/// [`holdout`] applied within each accent, so every accent keeps both parts.
pub fn holdout_per_accent(utts: &[Utterance], fraction: f64) -> (Vec<Utterance>, Vec<Utterance>) {
    let mut by_accent: BTreeMap<u32, Vec<Utterance>> = BTreeMap::new();
    for u in utts {
        by_accent.entry(u.accent).or_default().push(u.clone());
    }
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for group in by_accent.values() {
        let (t, d) = holdout(group, fraction);
        train.extend(t);
        dev.extend(d);
    }
    (train, dev)
}

fn with_seed(h: &TrainHyper, seed: u64) -> TrainHyper {
    TrainHyper { seed, ..h.clone() }
}

/// Trains the baseline on the standard-accent split with early stopping.
pub fn train_baseline_model(cfg: &ExperimentConfig, corpus: &Corpus, seed: u64) -> Result<AcousticModel> {
    let mut model = build_baseline(&cfg.model_config(seed))?;
    let (train, valid) = holdout(corpus.split("train")?, cfg.baseline.valid_fraction);
    train_baseline(&mut model, &train, &valid, &with_seed(&cfg.baseline.hyper, seed), cfg.baseline.patience)?;
    Ok(model)
}

/// Adapts `baseline` with a plan method on `data`.
pub fn adapt_with(cfg: &ExperimentConfig, baseline: &AcousticModel, method: &Method, data: &[Utterance], seed: u64) -> Result<AcousticModel> {
    let plan = AdaptationPlan { method: method.clone(), hyper: with_seed(&cfg.adapt, seed) };
    Ok(adapt(baseline.clone(), &plan, data)?.0)
}

/// MTL-G adaptation. With a λ grid, each λ is trained on the data minus a
/// per-accent dev hold-out; the λ with the lowest dev FER is retrained on all data.
pub fn adapt_mtlg(cfg: &ExperimentConfig, baseline: &AcousticModel, data: &[Utterance], seed: u64) -> Result<AcousticModel> {
    let hyper = with_seed(&cfg.adapt, seed);
    let mut lambda = cfg.mtl.config.lambda;
    if !cfg.mtl.lambda_grid.is_empty() {
        let (train, dev) = holdout_per_accent(data, cfg.mtl.dev_fraction);
        let mut best = (f64::INFINITY, lambda);
        for &l in &cfg.mtl.lambda_grid {
            let c = MtlConfig { lambda: l, ..cfg.mtl.config.clone() };
            let (m, _) = mtl_adapt(baseline.clone(), &train, &c, &hyper)?;
            let fer = frame_error_rate(&m, &dev)?;
            if fer < best.0 {
                best = (fer, l);
            }
        }
        lambda = best.1;
    }
    let c = MtlConfig { lambda, ..cfg.mtl.config.clone() };
    Ok(mtl_adapt(baseline.clone(), data, &c, &hyper)?.0)
}

/// Loads `path` when present, otherwise trains, saves, and reloads it.
fn cached(path: &Path, train: impl FnOnce() -> Result<AcousticModel>) -> Result<(AcousticModel, bool)> {
    if path.exists() {
        return Ok((load_checkpoint(path)?, true));
    }
    let model = train()?;
    save_checkpoint(&model, path)?;
    Ok((round_trip(&model)?, false))
}

/// FERs of one (seed, method) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub method: String,
    pub seen: BTreeMap<u32, f64>,
    pub unseen: BTreeMap<u32, f64>,
    /// Seen-accent classification accuracy of MTL-G models.
    pub accent_accuracy: Option<f64>,
    /// λ chosen for MTL-G models.
    pub lambda: Option<f64>,
}

impl RunResult {
    /// Mean over seen accents.
    pub fn ave(&self) -> f64 {
        self.seen.values().sum::<f64>() / self.seen.len() as f64
    }

    pub fn unseen_ave(&self) -> Option<f64> {
        (!self.unseen.is_empty()).then(|| self.unseen.values().sum::<f64>() / self.unseen.len() as f64)
    }
}

/// Median-over-seeds summary of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub seeds: Vec<u64>,
    pub seen: BTreeMap<u32, f64>,
    pub ave: f64,
    pub unseen: BTreeMap<u32, f64>,
    /// Relative AVE reduction (percent) against the baseline row.
    pub reduction: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub accent_names: BTreeMap<u32, String>,
    pub methods: Vec<String>,
    pub runs: Vec<RunResult>,
}

impl ExperimentReport {
    pub fn runs_of<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.method == method)
    }

    /// Median AVE over seeds.
    pub fn median_ave(&self, method: &str) -> Option<f64> {
        let v: Vec<f64> = self.runs_of(method).map(RunResult::ave).collect();
        (!v.is_empty()).then(|| median(&v))
    }

    pub fn summary(&self, method: &str) -> Option<EvalReport> {
        let runs: Vec<&RunResult> = self.runs_of(method).collect();
        if runs.is_empty() {
            return None;
        }
        let per = |pick: &dyn Fn(&RunResult) -> &BTreeMap<u32, f64>| -> BTreeMap<u32, f64> {
            let mut acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            for r in &runs {
                for (&a, &f) in pick(r) {
                    acc.entry(a).or_default().push(f);
                }
            }
            acc.into_iter().map(|(a, v)| (a, median(&v))).collect()
        };
        let ave = self.median_ave(method)?;
        let reduction = self.median_ave("baseline").filter(|&b| b > 0.0).map(|b| relative_reduction(b, ave));
        Some(EvalReport {
            method: method.to_string(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            seen: per(&|r| &r.seen),
            ave,
            unseen: per(&|r| &r.unseen),
            reduction,
        })
    }

    fn name(&self, a: u32) -> String {
        self.accent_names.get(&a).cloned().unwrap_or_else(|| a.to_string())
    }

    /// Seen-accent table: median FER per accent, AVE, relative reduction.
    pub fn seen_table(&self) -> String {
        let rows: Vec<EvalReport> = self.methods.iter().filter_map(|m| self.summary(m)).collect();
        let accents: Vec<u32> = rows.iter().flat_map(|r| r.seen.keys().copied()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let mut out = String::from("| Method |");
        for &a in &accents {
            let _ = write!(out, " {} |", self.name(a));
        }
        out.push_str(" AVE | Rel. red. (%) |\n|---|");
        out.push_str(&"---:|".repeat(accents.len() + 2));
        out.push('\n');
        for r in &rows {
            let _ = write!(out, "| {} |", r.method);
            for a in &accents {
                match r.seen.get(a) {
                    Some(f) => {
                        let _ = write!(out, " {:.1} |", round1(*f));
                    }
                    None => out.push_str(" - |"),
                }
            }
            let red = r.reduction.map_or("-".to_string(), |x| format!("{:.1}", round1(x)));
            let _ = writeln!(out, " {:.1} | {red} |", round1(r.ave));
        }
        out
    }

    /// Unseen-accent table for methods evaluated there; `None` when there are none.
    pub fn unseen_table(&self) -> Option<String> {
        let rows: Vec<EvalReport> = self.methods.iter().filter_map(|m| self.summary(m)).filter(|r| !r.unseen.is_empty()).collect();
        let first = rows.first()?;
        let accents: Vec<u32> = first.unseen.keys().copied().collect();
        let mut out = String::from("| Method |");
        for &a in &accents {
            let _ = write!(out, " {} |", self.name(a));
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(accents.len()));
        out.push('\n');
        for r in &rows {
            let _ = write!(out, "| {} |", r.method);
            for a in &accents {
                match r.unseen.get(a) {
                    Some(f) => {
                        let _ = write!(out, " {:.1} |", round1(*f));
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        Some(out)
    }

    /// Long-format CSV, full precision: `seed,method,metric,accent,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,method,metric,accent,value\n");
        for r in &self.runs {
            for (a, f) in &r.seen {
                let _ = writeln!(out, "{},{},seen_fer,{},{}", r.seed, r.method, self.name(*a), f);
            }
            for (a, f) in &r.unseen {
                let _ = writeln!(out, "{},{},unseen_fer,{},{}", r.seed, r.method, self.name(*a), f);
            }
            if let Some(x) = r.accent_accuracy {
                let _ = writeln!(out, "{},{},accent_accuracy,,{}", r.seed, r.method, x);
            }
            if let Some(x) = r.lambda {
                let _ = writeln!(out, "{},{},lambda,,{}", r.seed, r.method, x);
            }
        }
        out
    }

    /// Reads back [`Self::to_csv`] output. Accent names map to ids through `accent_names`.
    pub fn from_csv(text: &str, accent_names: BTreeMap<u32, String>) -> Result<Self> {
        let ids: BTreeMap<&str, u32> = accent_names.iter().map(|(&i, n)| (n.as_str(), i)).collect();
        let mut methods: Vec<String> = Vec::new();
        let mut runs: Vec<RunResult> = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let bad = || Error::format(format!("results line {}: {line:?}", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            let [seed, method, metric, accent, value] = f.as_slice() else { return Err(bad()) };
            let seed: u64 = seed.parse().map_err(|_| bad())?;
            let value: f64 = value.parse().map_err(|_| bad())?;
            if !methods.iter().any(|m| m == method) {
                methods.push(method.to_string());
            }
            let idx = match runs.iter().position(|r| r.seed == seed && r.method == *method) {
                Some(i) => i,
                None => {
                    runs.push(RunResult { seed, method: method.to_string(), seen: BTreeMap::new(), unseen: BTreeMap::new(), accent_accuracy: None, lambda: None });
                    runs.len() - 1
                }
            };
            let r = &mut runs[idx];
            let accent = || ids.get(accent).copied().ok_or_else(bad);
            match *metric {
                "seen_fer" => {
                    r.seen.insert(accent()?, value);
                }
                "unseen_fer" => {
                    r.unseen.insert(accent()?, value);
                }
                "accent_accuracy" => r.accent_accuracy = Some(value),
                "lambda" => r.lambda = Some(value),
                _ => return Err(bad()),
            }
        }
        Ok(ExperimentReport { accent_names, methods, runs })
    }

    /// Writes the CSV and the markdown tables into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESULTS_CSV), self.to_csv())?;
        fs::write(dir.join(SEEN_TABLE), self.seen_table())?;
        if let Some(t) = self.unseen_table() {
            fs::write(dir.join(UNSEEN_TABLE), t)?;
        }
        Ok(())
    }
}

fn accent_names(corpus: &Corpus) -> BTreeMap<u32, String> {
    corpus.accents.iter().map(|a| (a.id, a.name.clone())).collect()
}

/// Seen-accent eval utterances grouped by accent.
fn eval_sets(corpus: &Corpus, accents: &[u32], split: &str) -> Result<BTreeMap<u32, Vec<Utterance>>> {
    accents.iter().map(|&a| Ok((a, corpus.by_accent(split, a)?))).collect()
}

fn fer_on(model: &AcousticModel, sets: &BTreeMap<u32, Vec<Utterance>>) -> Result<BTreeMap<u32, f64>> {
    let all: Vec<Utterance> = sets.values().flatten().cloned().collect();
    fer_by_accent(model, &all)
}

/// Runs every configured (seed, method) cell; checkpoints and tables go to `out`.
pub fn run_experiment(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate()?;
    if corpus.seen_accents().len() != cfg.corpus.num_seen() {
        return Err(Error::config("corpus accents do not match the experiment config"));
    }
    let specs: Vec<(String, MethodSpec)> =
        cfg.methods.iter().map(|m| Ok((m.trim().to_string(), MethodSpec::parse(m, cfg)?))).collect::<Result<_>>()?;
    if specs.is_empty() {
        return Err(Error::config("experiment lists no methods"));
    }
    let seen = corpus.seen_accents();
    let unseen = corpus.unseen_accents();
    let seen_eval = eval_sets(corpus, &seen, "eval")?;
    let unseen_eval = if cfg.eval_unseen { eval_sets(corpus, &unseen, "unseen")? } else { BTreeMap::new() };
    let adapt_data = corpus.split("adapt")?;

    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let dir: PathBuf = out.join(format!("seed-{seed}"));
        let (baseline, resumed) = cached(&dir.join("baseline.ckpt"), || train_baseline_model(cfg, corpus, seed))?;
        progress(&format!("seed {seed}: baseline {}", if resumed { "loaded" } else { "trained" }));
        for (name, spec) in &specs {
            let path = dir.join(format!("{}.ckpt", slug(name)));
            let mut result = RunResult { seed, method: name.clone(), seen: BTreeMap::new(), unseen: BTreeMap::new(), accent_accuracy: None, lambda: None };
            let model = match spec {
                MethodSpec::Baseline => Some(baseline.clone()),
                MethodSpec::Plan(m) => Some(cached(&path, || adapt_with(cfg, &baseline, m, adapt_data, seed))?.0),
                MethodSpec::MtlG => Some(cached(&path, || adapt_mtlg(cfg, &baseline, adapt_data, seed))?.0),
                MethodSpec::AccentSpecific => {
                    for (&a, utts) in &seen_eval {
                        let p = dir.join(format!("accent-specific-{a}.ckpt"));
                        let (m, _) = cached(&p, || {
                            let data: Vec<Utterance> = adapt_data.iter().filter(|u| u.accent == a).cloned().collect();
                            let mut models = adapt_per_accent(&baseline, &data, &with_seed(&cfg.adapt, seed))?;
                            models.remove(&a).ok_or_else(|| Error::config(format!("no adaptation data for accent {a}")))
                        })?;
                        result.seen.insert(a, frame_error_rate(&m, utts)?);
                    }
                    None
                }
            };
            if let Some(model) = model {
                result.seen = fer_on(&model, &seen_eval)?;
                if !model.requires_accent_label() && !unseen_eval.is_empty() {
                    result.unseen = fer_on(&model, &unseen_eval)?;
                }
                if let Some(c) = model.mtl_config() {
                    result.lambda = Some(c.lambda);
                    let all: Vec<Utterance> = seen_eval.values().flatten().cloned().collect();
                    result.accent_accuracy = Some(accent_accuracy(&model, &all)?);
                }
            }
            progress(&format!("seed {seed}: {name} AVE {:.2}", result.ave()));
            runs.push(result);
        }
    }
    let report = ExperimentReport { accent_names: accent_names(corpus), methods: specs.into_iter().map(|(n, _)| n).collect(), runs };
    report.write(out)?;
    Ok(report)
}
