use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use demspec::corpus::{load_corpus_strict, make_split_with, write_corpus, Dimension, LabeledDocument, SplitManifest, SplitOptions, SplitTask};
use demspec::experiments::{run_grid, write_report, EncoderTemplate, ExperimentGrid, Registry, RunOptions};
use demspec::finetune::{append_records, evaluate_detailed, finetune, read_records, BaseModel, FineTuneConfig, ResultRecord, SpecDomain, Subset, Task};
use demspec::metaanalysis::{meta_analysis, write_meta_tsv};
use demspec::model::Checkpoint;
use demspec::probe::{probe, write_points_csv, ProbeLabel, TsneConfig};
use demspec::specialize::{corpus_digest, specialize, Method, SpecializationConfig};
use demspec::synthetic::{bayes_optimal_ac, generate_corpus, SyntheticSpec};
use demspec::training::derive_seed;
use demspec::{Error, Result};

/// Demographic specialization experiments on small transformer encoders.
#[derive(Parser)]
#[command(name = "demspec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a leak-free split of a corpus.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dimension: Dimension,
        #[arg(long)]
        task: SplitTask,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cap on fine-tuning documents per demographic class.
        #[arg(long)]
        max_per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a base encoder on the specialization partition.
    Specialize {
        /// Checkpoint directory, or `fresh` for a random encoder.
        #[arg(long)]
        base: String,
        #[arg(long)]
        method: Method,
        /// Training config; flags given here take precedence over it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a classifier on the train partition.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a classifier on a test subset and append the result.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "multilingual")]
        base_model: BaseModel,
        /// Defaults to `none` for unspecialized models, `in-domain` otherwise.
        #[arg(long)]
        spec_domain: Option<SpecDomain>,
    },
    /// Run an experiment grid, skipping cells already in the results store.
    Grid {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Cache for specialized checkpoints; defaults to `<out>.work`.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
    /// Regress specialization gains on experiment features.
    Meta {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score label separation in a checkpoint's embedding space.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        label: ProbeLabel,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        shuffles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
    },
    /// Write F1 and delta tables from a results store.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Specialization config file: training settings plus the shape of a fresh
/// base encoder.
#[derive(Deserialize)]
struct SpecializeFile {
    #[serde(flatten)]
    training: SpecializationConfig,
    #[serde(default)]
    encoder: EncoderTemplate,
    /// Documents drawn per demographic class; all when unset.
    #[serde(default)]
    docs_per_class: Option<usize>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{what} {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// A prepared data directory: the split manifest and its corpus.
struct Prepared {
    manifest: SplitManifest,
    docs: Vec<LabeledDocument>,
}

impl Prepared {
    fn load(dir: &Path) -> Result<Self> {
        let split_path = dir.join("split.json");
        if !split_path.exists() {
            return Err(Error::Missing(format!("split manifest {}", split_path.display())));
        }
        let manifest = SplitManifest::load(&split_path)?;
        let docs = load_corpus_strict(&dir.join("corpus.jsonl"))?;
        let digest = corpus_digest(&docs);
        if digest != manifest.corpus_digest {
            return Err(Error::DigestMismatch(format!("corpus in {} does not match its split manifest", dir.display())));
        }
        Ok(Self { manifest, docs })
    }

    fn select(&self, ids: &[String]) -> Vec<LabeledDocument> {
        let keep: HashSet<&String> = ids.iter().collect();
        self.docs.iter().filter(|d| keep.contains(&d.id)).cloned().collect()
    }
}

fn cmd_synth(spec: &Path, out: &Path) -> Result<serde_json::Value> {
    let spec: SyntheticSpec = read_json(spec, "synthetic spec")?;
    let docs = generate_corpus(&spec)?;
    let ceiling = bayes_optimal_ac(&spec)?;
    create_dir(out)?;
    write_corpus(&out.join("corpus.jsonl"), &docs)?;
    let digest = corpus_digest(&docs);
    write_json(&out.join("spec.json"), &json!({ "spec": spec, "bayes_optimal_ac": ceiling, "corpus_digest": digest }))?;
    Ok(json!({ "documents": docs.len(), "bayes_optimal_ac": ceiling, "corpus_digest": digest }))
}

fn cmd_prepare(corpus: &Path, dimension: Dimension, task: SplitTask, seed: u64, max_per_class: Option<usize>, out: &Path) -> Result<serde_json::Value> {
    let docs = load_corpus_strict(corpus)?;
    let options = SplitOptions { max_per_class, ..SplitOptions::default() };
    let split = make_split_with(&docs, dimension, task, seed, &options)?;
    let manifest = SplitManifest::new(split, corpus_digest(&docs));
    create_dir(out)?;
    write_corpus(&out.join("corpus.jsonl"), &docs)?;
    manifest.save(&out.join("split.json"))?;
    let s = &manifest.split;
    Ok(json!({
        "specialization": s.specialization.len(), "train": s.train.len(), "dev": s.dev.len(), "test": s.test.len(),
        "corpus_digest": manifest.corpus_digest,
    }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_specialize(base: &str, method: Method, config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, epochs: Option<usize>) -> Result<serde_json::Value> {
    let prepared = Prepared::load(data)?;
    let file = match config {
        Some(p) => read_json::<SpecializeFile>(p, "specialization config")?,
        None => SpecializeFile {
            training: SpecializationConfig::new(method, prepared.manifest.split.dimension),
            encoder: EncoderTemplate::default(),
            docs_per_class: None,
        },
    };
    let mut cfg = file.training;
    cfg.method = method;
    cfg.dimension = prepared.manifest.split.dimension;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let base_ckpt = if base == "fresh" {
        file.encoder.fresh(prepared.docs.iter().map(|d| d.text.as_str()), "fresh", derive_seed(cfg.seed, "base"))?
    } else {
        Checkpoint::load(Path::new(base))?
    };
    let mut docs = prepared.select(&prepared.manifest.split.specialization);
    if let Some(n) = file.docs_per_class {
        docs = demspec::corpus::sample_specialization(&docs, cfg.dimension, n, derive_seed(cfg.seed, "spec-sample"))?;
    }
    let outcome = specialize(&base_ckpt, &docs, &cfg)?;
    outcome.save(out)?;
    let w = outcome.winner();
    Ok(json!({
        "checkpoint": outcome.checkpoint.digest(), "documents": docs.len(), "lr": w.lr,
        "best_epoch": w.best_epoch, "best_dev_objective": w.best_dev_objective,
    }))
}

fn cmd_finetune(base: &Path, task: Task, config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, epochs: Option<usize>) -> Result<serde_json::Value> {
    let prepared = Prepared::load(data)?;
    let mut cfg = match config {
        Some(p) => read_json::<FineTuneConfig>(p, "fine-tuning config")?,
        None => FineTuneConfig::new(task),
    };
    cfg.task = task;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let base_ckpt = Checkpoint::load(base)?;
    let outcome = finetune(&base_ckpt, &prepared.docs, &prepared.manifest.split, &cfg)?;
    outcome.classifier.save(out)?;
    let mut log = String::new();
    for e in &outcome.log {
        log.push_str(&serde_json::to_string(e)?);
        log.push('\n');
    }
    let log_path = out.join("finetune_log.jsonl");
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    write_json(&out.join("finetune.json"), &json!({ "config": cfg, "trials": outcome.trials, "corpus_digest": prepared.manifest.corpus_digest }))?;
    let info = outcome.classifier.classifier.as_ref().expect("classifier info");
    Ok(json!({ "checkpoint": outcome.classifier.digest(), "lr": info.learning_rate, "dev_f1": info.dev_f1 }))
}

fn cmd_evaluate(model: &Path, data: &Path, subset: Subset, out: &Path, base_model: BaseModel, spec_domain: Option<SpecDomain>) -> Result<serde_json::Value> {
    let prepared = Prepared::load(data)?;
    let ckpt = Checkpoint::load(model)?;
    let info = ckpt.classifier.clone().ok_or_else(|| Error::InvalidArgument("model has no classification head".into()))?;
    let split = &prepared.manifest.split;
    if info.dimension != Some(split.dimension) || !info.task.accepts(split.task) {
        return Err(Error::InvalidArgument(format!("model was trained for {} but the data is a {} {} split", info.task, split.dimension, split.task)));
    }
    let test = prepared.select(&split.test);
    let eval = evaluate_detailed(&ckpt, &test, subset)?;
    let method = ckpt.lineage.method;
    let spec_domain = spec_domain.unwrap_or(if method == Method::Vanilla { SpecDomain::None } else { SpecDomain::InDomain });
    let first = test.first().expect("non-empty after evaluation");
    let record = ResultRecord {
        country: first.country.clone(),
        language: first.language.clone(),
        task: info.task,
        dataset: split.task,
        method,
        dimension: split.dimension,
        base_model,
        spec_domain,
        subset,
        seed: ckpt.lineage.seed,
        f1: eval.f1,
        accuracy: eval.accuracy,
        n_test: eval.n,
        corpus_digest: prepared.manifest.corpus_digest.clone(),
        cell: String::new(),
    };
    append_records(out, std::slice::from_ref(&record))?;
    Ok(serde_json::to_value(&record)?)
}

fn cmd_grid(spec: &Path, registry: &Path, out: &Path, workers: usize, work_dir: Option<PathBuf>) -> Result<serde_json::Value> {
    let grid = ExperimentGrid::load(spec)?;
    let registry = Registry::load(registry)?;
    let work_dir = work_dir.unwrap_or_else(|| PathBuf::from(format!("{}.work", out.display())));
    let run = run_grid(&grid, &registry, &RunOptions { results: out.to_path_buf(), work_dir, workers })?;
    let failures = PathBuf::from(format!("{}.failures.json", out.display()));
    write_json(&failures, &run.failures)?;
    Ok(json!({
        "executed": run.executed, "skipped": run.skipped, "records": run.records.len(),
        "failed": run.failures.len(), "failure_report": failures,
    }))
}

fn cmd_meta(results: &Path, out: &Path, threshold: f64) -> Result<serde_json::Value> {
    let records = read_records(results)?;
    demspec::experiments::check_digests(&records)?;
    let rows = meta_analysis(&records, threshold)?;
    write_meta_tsv(out, &rows)?;
    Ok(json!({ "rows": rows.len() }))
}

fn cmd_probe(model: &Path, data: &Path, label: ProbeLabel, out: &Path, shuffles: usize, seed: u64, iterations: usize) -> Result<serde_json::Value> {
    let ckpt = Checkpoint::load(model)?;
    let docs = load_corpus_strict(data)?;
    let tsne = TsneConfig { iterations, ..TsneConfig::default() };
    let (mut summary, points, labels) = probe(&ckpt, &docs, label, shuffles, seed, &tsne)?;
    summary.checkpoint = model.display().to_string();
    create_dir(out)?;
    write_points_csv(&out.join("points.csv"), &points, &labels)?;
    write_json(&out.join("score.json"), &summary)?;
    Ok(serde_json::to_value(&summary)?)
}

fn cmd_report(results: &Path, out: &Path) -> Result<serde_json::Value> {
    let records = read_records(results)?;
    let files = write_report(&records, out)?;
    Ok(json!({ "files": files }))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Prepare { corpus, dimension, task, seed, max_per_class, out } => cmd_prepare(&corpus, dimension, task, seed, max_per_class, &out),
        Command::Specialize { base, method, config, data, out, seed, epochs } => cmd_specialize(&base, method, config.as_deref(), &data, &out, seed, epochs),
        Command::Finetune { base, task, config, data, out, seed, epochs } => cmd_finetune(&base, task, config.as_deref(), &data, &out, seed, epochs),
        Command::Evaluate { model, data, subset, out, base_model, spec_domain } => cmd_evaluate(&model, &data, subset, &out, base_model, spec_domain),
        Command::Grid { spec, registry, out, workers, work_dir } => cmd_grid(&spec, &registry, &out, workers, work_dir),
        Command::Meta { results, out, threshold } => cmd_meta(&results, &out, threshold),
        Command::Probe { model, data, label, out, shuffles, seed, iterations } => cmd_probe(&model, &data, label, &out, shuffles, seed, iterations),
        Command::Report { results, out } => cmd_report(&results, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "code": "USAGE", "message": e.to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "code": e.code(), "message": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
