//! `amag`: corpus generation, baseline training, adaptation, evaluation and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use amag::checkpoint::{load_checkpoint, save_checkpoint};
use amag::config::ExperimentConfig;
use amag::corpus::{generate_corpus, Corpus};
use amag::experiment::{adapt_mtlg, adapt_with, run_experiment, slug, train_baseline_model, MethodSpec};
use amag::gradcheck::{standard_suite, SUITE_EPSILON, SUITE_TOLERANCE};
use amag::metrics::{average_and_reduction, fer_by_accent};
use amag::mtl::accent_accuracy;
use amag::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "amag", version, about = "Multi-accent acoustic model adaptation on a synthetic corpus")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the corpus seed (gen-data) or the model seed (everything else).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "amag-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into OUT/corpus.
    GenData,
    /// Train the standard-accent baseline into OUT/baseline.ckpt.
    TrainBaseline {
        /// Corpus directory [default: OUT/corpus].
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
    },
    /// Adapt a baseline checkpoint to accented data.
    Adapt {
        /// fine-tune:N | fine-tune:all | lin | lhn:I | lon | gate:KIND:N | accent-top | astg | mtlg
        #[arg(long)]
        method: String,
        /// Adapt on this seen accent's data only (accent-specific adaptation).
        #[arg(long, value_name = "ID")]
        accent: Option<u32>,
        /// Corpus directory [default: OUT/corpus].
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Baseline checkpoint [default: OUT/baseline.ckpt].
        #[arg(long, value_name = "PATH")]
        baseline: Option<PathBuf>,
    },
    /// Per-accent frame error rates of a checkpoint on one split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// train | adapt | eval | unseen
        #[arg(long, value_name = "NAME")]
        split: String,
        /// Corpus directory [default: OUT/corpus].
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
    },
    /// Run every configured (seed, method) cell and write tables to OUT.
    Report {
        /// Corpus directory; generated from the config when omitted.
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference check of every layer kind and architecture.
    Gradcheck,
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_dir(common: &Common, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| common.out.join("corpus"))
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    if !dir.exists() {
        return Err(Error::Config(format!("no corpus at {} (run gen-data first)", dir.display())).into());
    }
    Ok(Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))?)
}

fn model_seed(common: &Common, cfg: &ExperimentConfig) -> u64 {
    common.seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    amag::init_threads()?;
    let common = &cli.common;
    let mut cfg = load_config(common)?;
    match &cli.command {
        Command::GenData => {
            if let Some(seed) = common.seed {
                cfg.corpus.seed = seed;
            }
            let dir = common.out.join("corpus");
            let corpus = generate_corpus(&cfg.corpus, &dir)?;
            for split in ["train", "adapt", "eval", "unseen"] {
                println!("{split}: {} utterances", corpus.split(split)?.len());
            }
            println!("wrote {}", dir.display());
        }
        Command::TrainBaseline { corpus } => {
            let corpus = load_corpus(&corpus_dir(common, corpus))?;
            let seed = model_seed(common, &cfg);
            let model = train_baseline_model(&cfg, &corpus, seed)?;
            let path = common.out.join("baseline.ckpt");
            save_checkpoint(&model, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Adapt { method, accent, corpus, baseline } => {
            let corpus = load_corpus(&corpus_dir(common, corpus))?;
            let seed = model_seed(common, &cfg);
            let base_path = baseline.clone().unwrap_or_else(|| common.out.join("baseline.ckpt"));
            let base = load_checkpoint(&base_path).with_context(|| format!("loading {}", base_path.display()))?;
            let mut data = corpus.split("adapt")?.to_vec();
            if let Some(a) = accent {
                if !corpus.seen_accents().contains(a) {
                    return Err(Error::Config(format!("accent {a} is not a seen accent")).into());
                }
                data.retain(|u| u.accent == *a);
            }
            let model = match MethodSpec::parse(method, &cfg)? {
                MethodSpec::Plan(m) => adapt_with(&cfg, &base, &m, &data, seed)?,
                MethodSpec::MtlG => adapt_mtlg(&cfg, &base, &data, seed)?,
                MethodSpec::Baseline | MethodSpec::AccentSpecific => {
                    bail!(Error::Config(format!("{method:?} is not an adaptation method (use --accent for accent-specific runs)")))
                }
            };
            let name = match accent {
                Some(a) => format!("{}-accent-{a}.ckpt", slug(method)),
                None => format!("{}.ckpt", slug(method)),
            };
            let path = common.out.join(name);
            save_checkpoint(&model, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { checkpoint, split, corpus } => {
            let corpus = load_corpus(&corpus_dir(common, corpus))?;
            let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let utts = corpus.split(split)?;
            let fers = fer_by_accent(&model, utts)?;
            for (a, f) in &fers {
                println!("{}\t{f:.2}", corpus.accent_name(*a));
            }
            let values: Vec<f64> = fers.values().copied().collect();
            let (ave, _) = average_and_reduction(&values, 1.0)?;
            println!("AVE\t{ave:.2}");
            let classes = model.config().num_accents as u32;
            let labelled: Vec<_> = utts.iter().filter(|u| u.accent < classes).cloned().collect();
            if model.mtl_config().is_some() && !labelled.is_empty() {
                println!("accent accuracy\t{:.3}", accent_accuracy(&model, &labelled)?);
            }
        }
        Command::Report { corpus } => {
            if let Some(seed) = common.seed {
                cfg.seeds = vec![seed];
            }
            let corpus = match corpus {
                Some(dir) => load_corpus(dir)?,
                None => Corpus::generate(&cfg.corpus)?,
            };
            let report = run_experiment(&cfg, &corpus, &common.out, &mut |m| eprintln!("{m}"))?;
            println!("{}", report.seen_table());
            if let Some(t) = report.unseen_table() {
                println!("{t}");
            }
        }
        Command::Gradcheck => {
            let mut failed = Vec::new();
            for (name, report) in standard_suite(model_seed(common, &cfg))? {
                let status = if report.pass { "ok" } else { "FAIL" };
                println!("{status:<4} {name:<26} max rel err {:.2e} over {} entries", report.max_rel_error, report.checked_entries);
                if !report.pass {
                    failed.push(name);
                }
            }
            println!("epsilon {SUITE_EPSILON:e}, tolerance {SUITE_TOLERANCE:e}");
            if !failed.is_empty() {
                bail!("gradient check failed: {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::LabelRequired(_)) => EXIT_CONFIG,
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into()).into()), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Divergence { layer: "blstm.1".into() }.into()), EXIT_DIVERGENCE);
        assert_eq!(exit_code(&Error::Format("x".into()).into()), EXIT_FAILURE);
        let wrapped = anyhow::Error::from(Error::Config("x".into())).context("reading cfg");
        assert_eq!(exit_code(&wrapped), EXIT_CONFIG);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
