//! The experimental grid: specialize base encoders per cell, fine-tune on
//! each task, score every subset and append the results to a JSONL store.

mod delta;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use delta::{delta_table, delta_table_by, Baseline, CellKey, DeltaRow, DeltaTable};
pub use report::{check_digests, write_report};

use crate::corpus::{load_corpus_strict, make_split_with, sample_specialization, Dimension, LabeledDocument, SplitOptions, SplitTask, Tokenizer};
use crate::digest::digest_parts;
use crate::error::{Error, Result};
use crate::finetune::{append_records, evaluate_detailed, finetune, read_records, BaseModel, FineTuneConfig, ResultRecord, SpecDomain, Subset, Task};
use crate::model::{Checkpoint, EncoderConfig};
use crate::specialize::{corpus_digest, specialize, Method, SpecializationConfig};
use crate::training::derive_seed;

fn default_subsets() -> Vec<Subset> {
    Subset::ALL.to_vec()
}
fn default_ac_dataset() -> SplitTask {
    SplitTask::AcSa
}
fn default_spec() -> SpecializationConfig {
    SpecializationConfig::new(Method::Mlm, Dimension::Gender)
}
fn default_finetune() -> FineTuneConfig {
    FineTuneConfig::new(Task::Ac)
}

/// Axes of the grid plus the training templates shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub methods: Vec<Method>,
    pub dimensions: Vec<Dimension>,
    pub countries: Vec<String>,
    pub base_models: Vec<BaseModel>,
    pub spec_domains: Vec<SpecDomain>,
    pub tasks: Vec<Task>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_subsets")]
    pub subsets: Vec<Subset>,
    /// The split is shared by every method and seed so deltas compare
    /// models on identical test documents.
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub split: SplitOptions,
    /// Which collection attribute classification is trained on.
    #[serde(default = "default_ac_dataset")]
    pub ac_dataset: SplitTask,
    /// Specialization documents drawn per demographic class; all when unset.
    #[serde(default)]
    pub specialization_docs_per_class: Option<usize>,
    /// Method, dimension and seed are overwritten per cell.
    #[serde(default = "default_spec")]
    pub specialization: SpecializationConfig,
    /// Task and seed are overwritten per cell.
    #[serde(default = "default_finetune")]
    pub finetune: FineTuneConfig,
}

impl ExperimentGrid {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let grid: Self = serde_json::from_str(&text).map_err(|e| Error::format(format!("grid spec {}", path.display()), e))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("methods", self.methods.is_empty()),
            ("dimensions", self.dimensions.is_empty()),
            ("countries", self.countries.is_empty()),
            ("base_models", self.base_models.is_empty()),
            ("tasks", self.tasks.is_empty()),
            ("seeds", self.seeds.is_empty()),
            ("subsets", self.subsets.is_empty()),
        ];
        if let Some((name, _)) = axes.iter().find(|(_, empty)| *empty) {
            return Err(Error::InvalidArgument(format!("grid axis `{name}` is empty")));
        }
        let specialized = self.methods.iter().any(|m| *m != Method::Vanilla);
        if specialized && self.spec_domains.is_empty() {
            return Err(Error::InvalidArgument("grid axis `spec_domains` is empty".into()));
        }
        if self.spec_domains.contains(&SpecDomain::None) {
            return Err(Error::InvalidArgument("spec_domains lists `none`; vanilla cells need no domain".into()));
        }
        if !matches!(self.ac_dataset, SplitTask::AcSa | SplitTask::AcTd) {
            return Err(Error::InvalidArgument(format!("ac_dataset {} is not an AC collection", self.ac_dataset)));
        }
        let mut probe = self.specialization.clone();
        probe.method = Method::Mlm;
        probe.validate()?;
        self.finetune.validate()
    }

    pub fn dataset_for(&self, task: Task) -> SplitTask {
        match task {
            Task::Ac => self.ac_dataset,
            Task::Sa => SplitTask::Sa,
            Task::Td => SplitTask::Td,
        }
    }

    /// Every (cell, seed) combination, in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for country in &self.countries {
            for &dimension in &self.dimensions {
                for &base_model in &self.base_models {
                    for &method in &self.methods {
                        let domains =
                            if method == Method::Vanilla { vec![SpecDomain::None] } else { self.spec_domains.clone() };
                        for spec_domain in domains {
                            for &task in &self.tasks {
                                for &seed in &self.seeds {
                                    out.push(Cell {
                                        country: country.clone(),
                                        dimension,
                                        base_model,
                                        method,
                                        spec_domain,
                                        task,
                                        dataset: self.dataset_for(task),
                                        seed,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One trained classifier: it yields one record per subset.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub country: String,
    pub dimension: Dimension,
    pub base_model: BaseModel,
    pub method: Method,
    pub spec_domain: SpecDomain,
    pub task: Task,
    pub dataset: SplitTask,
    pub seed: u64,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/{}/{}/seed{}",
            self.country,
            self.dimension,
            self.base_model.as_str(),
            self.method,
            self.spec_domain.as_str(),
            self.dataset,
            self.seed
        )
    }
}

/// Shape of randomly initialised base encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTemplate {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub has_sequence_token: bool,
    pub max_vocab: usize,
}

impl Default for EncoderTemplate {
    fn default() -> Self {
        let r = EncoderConfig::reference(0);
        Self {
            hidden_dim: r.hidden_dim,
            num_layers: r.num_layers,
            num_heads: r.num_heads,
            feedforward_dim: r.feedforward_dim,
            max_seq_len: r.max_seq_len,
            dropout: r.dropout,
            has_sequence_token: r.has_sequence_token,
            max_vocab: 5000,
        }
    }
}

impl EncoderTemplate {
    pub fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            feedforward_dim: self.feedforward_dim,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            has_sequence_token: self.has_sequence_token,
        }
    }

    /// Random encoder with a tokenizer built from `texts`.
    pub fn fresh<'a>(&self, texts: impl IntoIterator<Item = &'a str>, name: &str, seed: u64) -> Result<Checkpoint> {
        let tokenizer = Tokenizer::build(texts, self.max_vocab);
        Checkpoint::fresh(&self.config(tokenizer.vocab_size()), tokenizer, name, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountryEntry {
    /// Fine-tuning corpus (JSONL).
    pub corpus: PathBuf,
    #[serde(default)]
    pub language: Option<String>,
    /// Separate in-domain specialization corpus. Without one, each task's
    /// split supplies its own specialization partition.
    #[serde(default)]
    pub specialization: Option<PathBuf>,
    /// Mismatched-domain specialization corpus.
    #[serde(default)]
    pub out_of_domain: Option<PathBuf>,
}

/// `"fresh"`, a checkpoint directory, or a per-country map of either.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseEntry {
    Shared(String),
    PerCountry(BTreeMap<String, String>),
}

pub const FRESH: &str = "fresh";

/// Where every corpus and base checkpoint of a grid lives. Relative paths
/// resolve against the registry file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub countries: BTreeMap<String, CountryEntry>,
    #[serde(default)]
    pub base_models: BTreeMap<BaseModel, BaseEntry>,
    #[serde(default)]
    pub encoder: EncoderTemplate,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reg: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("registry {}", path.display()), e))?;
        reg.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(reg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn country(&self, country: &str) -> Result<&CountryEntry> {
        self.countries.get(country).ok_or_else(|| Error::Missing(format!("registry entry for country `{country}`")))
    }

    /// `"fresh"` or a checkpoint path for `base` in `country`.
    fn base_source(&self, base: BaseModel, country: &str) -> Result<String> {
        let missing = || Error::Missing(format!("registry base model `{}` for `{country}`", base.as_str()));
        let source = match self.base_models.get(&base) {
            // unregistered base models default to random initialisation
            None => FRESH.to_string(),
            Some(BaseEntry::Shared(s)) => s.clone(),
            Some(BaseEntry::PerCountry(m)) => m.get(country).cloned().ok_or_else(missing)?,
        };
        if source == FRESH {
            Ok(source)
        } else {
            Ok(self.resolve(Path::new(&source)).display().to_string())
        }
    }

    /// Corpora whose text builds the tokenizer of a fresh base model.
    fn vocabulary_sources(&self, base: BaseModel, country: &str) -> Result<Vec<PathBuf>> {
        let entries: Vec<&CountryEntry> = match base {
            BaseModel::Multilingual => self.countries.values().collect(),
            BaseModel::Monolingual => vec![self.country(country)?],
        };
        let mut out = Vec::new();
        for e in entries {
            out.push(self.resolve(&e.corpus));
            out.extend(e.specialization.iter().chain(&e.out_of_domain).map(|p| self.resolve(p)));
        }
        Ok(out)
    }
}

struct LoadedCorpus {
    docs: Vec<LabeledDocument>,
    digest: String,
}

#[derive(Default)]
struct CorpusCache {
    loaded: Mutex<HashMap<PathBuf, Arc<LoadedCorpus>>>,
}

impl CorpusCache {
    fn get(&self, path: &Path) -> Result<Arc<LoadedCorpus>> {
        if let Some(c) = self.loaded.lock().expect("cache lock").get(path) {
            return Ok(c.clone());
        }
        if !path.exists() {
            return Err(Error::Missing(format!("corpus {}", path.display())));
        }
        let docs = load_corpus_strict(path)?;
        let digest = corpus_digest(&docs);
        let c = Arc::new(LoadedCorpus { docs, digest });
        self.loaded.lock().expect("cache lock").insert(path.to_path_buf(), c.clone());
        Ok(c)
    }
}

/// A cell that could not be run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    /// Records appended by this run.
    pub records: Vec<ResultRecord>,
    /// Cells whose results were already in the store.
    pub skipped: usize,
    /// Cells trained and evaluated by this run.
    pub executed: usize,
    pub failures: Vec<CellFailure>,
}

/// Everything a cell needs, resolved up front.
struct Plan {
    cell: Cell,
    digest: String,
    language: String,
    corpus: Arc<LoadedCorpus>,
    spec_key: Option<String>,
}

struct SpecJob {
    key: String,
    cell: Cell,
    base: BaseJob,
    docs: Vec<LabeledDocument>,
    config: SpecializationConfig,
}

#[derive(Clone)]
struct BaseJob {
    source: String,
    vocabulary: Vec<PathBuf>,
    name: String,
    seed: u64,
}

impl BaseJob {
    fn key(&self, cache: &CorpusCache) -> Result<String> {
        let mut parts = vec![self.source.clone(), self.name.clone(), self.seed.to_string()];
        if self.source == FRESH {
            for p in &self.vocabulary {
                parts.push(cache.get(p)?.digest.clone());
            }
        }
        Ok(digest_parts(parts))
    }

    fn build(&self, cache: &CorpusCache, template: &EncoderTemplate) -> Result<Checkpoint> {
        if self.source != FRESH {
            return Checkpoint::load(Path::new(&self.source));
        }
        let corpora = self.vocabulary.iter().map(|p| cache.get(p)).collect::<Result<Vec<_>>>()?;
        let texts = corpora.iter().flat_map(|c| c.docs.iter().map(|d| d.text.as_str()));
        template.fresh(texts, &self.name, self.seed)
    }
}

fn record_error(failures: &Mutex<Vec<CellFailure>>, cell: &Cell, e: &Error) {
    failures.lock().expect("failure lock").push(CellFailure { cell: cell.clone(), code: e.code().to_string(), message: e.to_string() });
}

/// Runs `f` over `jobs` on up to `workers` threads.
fn parallel<T: Sync>(jobs: &[T], workers: usize, f: impl Fn(&T) + Sync) {
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                match jobs.get(i) {
                    Some(job) => f(job),
                    None => break,
                }
            });
        }
    });
}

/// Options for [`run_grid`].
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// JSONL results store; existing records mark their cells complete.
    pub results: PathBuf,
    /// Specialized checkpoints are cached here across runs.
    pub work_dir: PathBuf,
    pub workers: usize,
}

/// Runs every cell of `grid` that has no records in the store yet. A cell
/// whose inputs cannot be resolved or whose training fails is reported and
/// skipped; the rest of the grid proceeds.
pub fn run_grid(grid: &ExperimentGrid, registry: &Registry, options: &RunOptions) -> Result<GridRun> {
    grid.validate()?;
    let done: HashSet<String> = if options.results.exists() {
        read_records(&options.results)?.into_iter().map(|r| r.cell).filter(|c| !c.is_empty()).collect()
    } else {
        HashSet::new()
    };
    let cache = CorpusCache::default();
    let failures = Mutex::new(Vec::new());
    let mut run = GridRun::default();

    let mut plans = Vec::new();
    let mut spec_jobs: BTreeMap<String, SpecJob> = BTreeMap::new();
    for cell in grid.cells() {
        match plan_cell(grid, registry, &cache, &cell) {
            Ok((plan, job)) => {
                if done.contains(&plan.digest) {
                    run.skipped += 1;
                    continue;
                }
                if let Some(job) = job {
                    spec_jobs.entry(job.key.clone()).or_insert(job);
                }
                plans.push(plan);
            }
            Err(e) => record_error(&failures, &cell, &e),
        }
    }

    let spec_dir = options.work_dir.join("specialized");
    let specialized: Mutex<HashMap<String, std::result::Result<Arc<Checkpoint>, Error>>> = Mutex::new(HashMap::new());
    let jobs: Vec<&SpecJob> = spec_jobs.values().collect();
    parallel(&jobs, options.workers, |job| {
        let out = run_specialization(job, &cache, &registry.encoder, &spec_dir.join(&job.key)).map(Arc::new);
        specialized.lock().expect("spec lock").insert(job.key.clone(), out);
    });
    let specialized = specialized.into_inner().expect("spec lock");

    let store = Mutex::new(Vec::new());
    let executed = AtomicUsize::new(0);
    parallel(&plans, options.workers, |plan| {
        let result = (|| {
            let model = match &plan.spec_key {
                Some(key) => match specialized.get(key).expect("every key was scheduled") {
                    Ok(ckpt) => ckpt.clone(),
                    Err(e) => return Err(Error::InvalidArgument(format!("specialization failed: {e}"))),
                },
                None => Arc::new(base_job(registry, &plan.cell)?.build(&cache, &registry.encoder)?),
            };
            let records = run_cell(grid, plan, &model)?;
            append_records(&options.results, &records)?;
            Ok(records)
        })();
        match result {
            Ok(records) => {
                executed.fetch_add(1, Ordering::Relaxed);
                store.lock().expect("store lock").extend(records);
            }
            Err(e) => record_error(&failures, &plan.cell, &e),
        }
    });
    run.executed = executed.into_inner();
    run.records = store.into_inner().expect("store lock");
    run.records.sort_by(|a, b| (&a.country, a.dimension, a.method, a.spec_domain, a.task, a.seed, a.subset).cmp(&(&b.country, b.dimension, b.method, b.spec_domain, b.task, b.seed, b.subset)));
    run.failures = failures.into_inner().expect("failure lock");
    run.failures.sort_by(|a, b| a.cell.cmp(&b.cell));
    Ok(run)
}

fn base_job(registry: &Registry, cell: &Cell) -> Result<BaseJob> {
    let source = registry.base_source(cell.base_model, &cell.country)?;
    let (vocabulary, name) = if source == FRESH {
        let name = match cell.base_model {
            BaseModel::Multilingual => "fresh-multilingual".to_string(),
            BaseModel::Monolingual => format!("fresh-monolingual-{}", cell.country),
        };
        (registry.vocabulary_sources(cell.base_model, &cell.country)?, name)
    } else {
        (Vec::new(), source.clone())
    };
    Ok(BaseJob { source, vocabulary, name, seed: derive_seed(cell.seed, "base") })
}

fn plan_cell(grid: &ExperimentGrid, registry: &Registry, cache: &CorpusCache, cell: &Cell) -> Result<(Plan, Option<SpecJob>)> {
    let entry = registry.country(&cell.country)?;
    let corpus = cache.get(&registry.resolve(&entry.corpus))?;
    let language = entry
        .language
        .clone()
        .or_else(|| corpus.docs.first().map(|d| d.language.clone()))
        .unwrap_or_default();
    let base = base_job(registry, cell)?;
    let base_key = base.key(cache)?;
    if base.source != FRESH && !Path::new(&base.source).is_dir() {
        return Err(Error::Missing(format!("base checkpoint {}", base.source)));
    }

    let mut ft = grid.finetune.clone();
    ft.task = cell.task;
    let mut parts = vec![
        serde_json::to_string(cell)?,
        corpus.digest.clone(),
        base_key.clone(),
        serde_json::to_string(&ft)?,
        serde_json::to_string(&(&grid.subsets, grid.split_seed, &grid.split))?,
    ];

    let job = if cell.method == Method::Vanilla {
        None
    } else {
        let pool: Vec<LabeledDocument> = match (cell.spec_domain, &entry.specialization, &entry.out_of_domain) {
            (SpecDomain::InDomain, Some(p), _) => cache.get(&registry.resolve(p))?.docs.clone(),
            (SpecDomain::InDomain, None, _) => {
                let split = make_split_with(&corpus.docs, cell.dimension, cell.dataset, grid.split_seed, &grid.split)?;
                let keep: HashSet<&String> = split.specialization.iter().collect();
                corpus.docs.iter().filter(|d| keep.contains(&d.id)).cloned().collect()
            }
            (SpecDomain::OutOfDomain, _, Some(p)) => cache.get(&registry.resolve(p))?.docs.clone(),
            (SpecDomain::OutOfDomain, _, None) => {
                return Err(Error::Missing(format!("registry out-of-domain corpus for `{}`", cell.country)))
            }
            (SpecDomain::None, ..) => unreachable!("validated grid"),
        };
        let docs = match grid.specialization_docs_per_class {
            Some(n) => sample_specialization(&pool, cell.dimension, n, derive_seed(cell.seed, "spec-sample"))?,
            None => pool.into_iter().filter(|d| d.demographic(cell.dimension).is_some()).collect(),
        };
        let mut config = grid.specialization.clone();
        config.method = cell.method;
        config.dimension = cell.dimension;
        config.seed = derive_seed(cell.seed, "specialize");
        let key = digest_parts([base_key, corpus_digest(&docs), serde_json::to_string(&config)?]);
        parts.push(key.clone());
        Some(SpecJob { key, cell: cell.clone(), base, docs, config })
    };
    let plan = Plan {
        cell: cell.clone(),
        digest: digest_parts(parts),
        language,
        corpus,
        spec_key: job.as_ref().map(|j| j.key.clone()),
    };
    Ok((plan, job))
}

fn run_specialization(job: &SpecJob, cache: &CorpusCache, template: &EncoderTemplate, dir: &Path) -> Result<Checkpoint> {
    if dir.join("config.json").exists() {
        if let Ok(ckpt) = Checkpoint::load(dir) {
            return Ok(ckpt);
        }
    }
    let base = job.base.build(cache, template)?;
    let outcome = specialize(&base, &job.docs, &job.config)
        .map_err(|e| Error::InvalidArgument(format!("specializing {}: {e}", job.cell)))?;
    outcome.save(dir)?;
    Ok(outcome.checkpoint)
}

fn run_cell(grid: &ExperimentGrid, plan: &Plan, model: &Checkpoint) -> Result<Vec<ResultRecord>> {
    let cell = &plan.cell;
    let split = make_split_with(&plan.corpus.docs, cell.dimension, cell.dataset, grid.split_seed, &grid.split)?;
    let mut config = grid.finetune.clone();
    config.task = cell.task;
    config.seed = derive_seed(cell.seed, "finetune");
    let outcome = finetune(model, &plan.corpus.docs, &split, &config)?;
    let test: HashSet<&String> = split.test.iter().collect();
    let test_docs: Vec<LabeledDocument> = plan.corpus.docs.iter().filter(|d| test.contains(&d.id)).cloned().collect();
    let mut subsets: Vec<Subset> = grid.subsets.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    subsets.sort();
    subsets
        .into_iter()
        .map(|subset| {
            let eval = evaluate_detailed(&outcome.classifier, &test_docs, subset)?;
            Ok(ResultRecord {
                country: cell.country.clone(),
                language: plan.language.clone(),
                task: cell.task,
                dataset: cell.dataset,
                method: cell.method,
                dimension: cell.dimension,
                base_model: cell.base_model,
                spec_domain: cell.spec_domain,
                subset,
                seed: cell.seed,
                f1: eval.f1,
                accuracy: eval.accuracy,
                n_test: eval.n,
                corpus_digest: plan.corpus.digest.clone(),
                cell: plan.digest.clone(),
            })
        })
        .collect()
}
