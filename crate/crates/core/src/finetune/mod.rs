//! Supervised fine-tuning for attribute classification, sentiment and
//! topic detection, and macro-F1 evaluation on demographic subsets.

mod metrics;
mod records;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, DemClass, Dimension, LabeledDocument, MaskedBatch, SplitTask};
use crate::digest::digest_parts;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ClassifierHead, ClassifierInfo, Encoder, Mode, ParamSet, MLM_HEAD};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::training::{derive_seed, encode_all, pad_rows, sequential_batches, shuffled_batches, EarlyStopping, Goal, Verdict};

pub use metrics::{accuracy, macro_f1};
pub use records::{append_records, read_records, BaseModel, ResultRecord, SpecDomain, Subset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "AC")]
    Ac,
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "TD")]
    Td,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Ac, Task::Sa, Task::Td];

    pub fn num_classes(self) -> usize {
        match self {
            Task::Ac => 2,
            Task::Sa => 3,
            Task::Td => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ac => "AC",
            Task::Sa => "SA",
            Task::Td => "TD",
        }
    }

    /// Split collections this task can be trained on.
    pub fn accepts(self, dataset: SplitTask) -> bool {
        match self {
            Task::Ac => matches!(dataset, SplitTask::AcSa | SplitTask::AcTd),
            Task::Sa => dataset == SplitTask::Sa,
            Task::Td => dataset == SplitTask::Td,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AC" => Ok(Task::Ac),
            "SA" => Ok(Task::Sa),
            "TD" => Ok(Task::Td),
            _ => Err(Error::UnknownCategory { group: "task".into(), value: s.into() }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Negative,
    Neutral,
    Positive,
}

impl Sentiment {
    pub const NAMES: [&'static str; 3] = ["negative", "neutral", "positive"];
}

pub fn sa_label(rating: u8) -> Result<Sentiment> {
    match rating {
        1 => Ok(Sentiment::Negative),
        3 => Ok(Sentiment::Neutral),
        5 => Ok(Sentiment::Positive),
        r => Err(Error::InvalidArgument(format!("rating {r} has no sentiment class (expected 1, 3 or 5)"))),
    }
}

fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    32
}
fn default_task() -> Task {
    Task::Ac
}
fn default_lr_grid() -> Vec<f64> {
    vec![5e-5, 1e-5, 5e-6, 1e-6]
}
fn default_patience() -> usize {
    5
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl FineTuneConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr_grid: default_lr_grid(),
            patience: default_patience(),
            seed: 0,
            weight_decay: 0.0,
            clip_norm: default_clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::InvalidArgument("lr_grid must hold positive rates".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Class names in index order for `task` over `docs`.
pub fn task_labels(task: Task, dimension: Dimension, docs: &[&LabeledDocument]) -> Result<Vec<String>> {
    let labels: Vec<String> = match task {
        Task::Ac => [DemClass::A, DemClass::B].iter().map(|c| c.name(dimension).to_string()).collect(),
        Task::Sa => Sentiment::NAMES.iter().map(|s| s.to_string()).collect(),
        Task::Td => {
            let mut topics = BTreeSet::new();
            let mut missing = 0;
            for d in docs {
                match &d.topic {
                    Some(t) => {
                        topics.insert(t.clone());
                    }
                    None => missing += 1,
                }
            }
            if missing > 0 {
                return Err(Error::MissingLabel { label: "topic".into(), count: missing });
            }
            topics.into_iter().collect()
        }
    };
    if labels.len() != task.num_classes() {
        return Err(Error::LabelCardinality { expected: task.num_classes(), found: labels.len() });
    }
    Ok(labels)
}

/// Class index of `doc` under `task`.
pub fn label_of(doc: &LabeledDocument, task: Task, dimension: Dimension, labels: &[String]) -> Result<usize> {
    let missing = |what: &str| Error::MissingLabel { label: what.into(), count: 1 };
    match task {
        Task::Ac => doc.demographic(dimension).map(DemClass::index).ok_or_else(|| missing(&dimension.to_string())),
        Task::Sa => {
            let r = doc.rating.ok_or_else(|| missing("rating"))?;
            Ok(sa_label(r)? as usize)
        }
        Task::Td => {
            let t = doc.topic.as_deref().ok_or_else(|| missing("topic"))?;
            labels
                .iter()
                .position(|l| l == t)
                .ok_or_else(|| Error::UnknownCategory { group: "topic".into(), value: t.into() })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneEpoch {
    pub lr: f64,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneTrial {
    pub lr: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub dev_f1: f64,
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub classifier: Checkpoint,
    pub trials: Vec<FineTuneTrial>,
    pub log: Vec<FineTuneEpoch>,
}

fn resolve<'a>(index: &HashMap<&str, &'a LabeledDocument>, ids: &[String]) -> Result<Vec<&'a LabeledDocument>> {
    ids.iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| Error::Missing(format!("document `{id}` named by the split"))))
        .collect()
}

struct Prepared {
    seqs: Vec<Vec<u32>>,
    targets: Vec<usize>,
}

fn prepare(ckpt: &Checkpoint, docs: &[&LabeledDocument], task: Task, dim: Dimension, labels: &[String]) -> Result<Prepared> {
    let seqs = encode_all(&ckpt.tokenizer, docs.iter().map(|d| d.text.as_str()), ckpt.config.max_seq_len);
    let targets = docs.iter().map(|d| label_of(d, task, dim, labels)).collect::<Result<_>>()?;
    Ok(Prepared { seqs, targets })
}

fn predict_prepared(encoder: &Encoder, head: &ClassifierHead, params: &ParamSet, seqs: &[Vec<u32>], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(seqs.len());
    for rows in sequential_batches(seqs.len(), batch) {
        let ids = pad_rows(seqs, &rows);
        let enc = encoder.encode(params, &MaskedBatch::unmasked(ids))?;
        out.extend(head.predict(params, &enc));
    }
    Ok(out)
}

/// Trains a fresh linear head together with the encoder, one trial per
/// learning rate; the trial with the best development macro-F1 wins.
pub fn finetune(base: &Checkpoint, docs: &[LabeledDocument], split: &CorpusSplit, config: &FineTuneConfig) -> Result<FineTuneOutcome> {
    config.validate()?;
    if !config.task.accepts(split.task) {
        return Err(Error::InvalidArgument(format!("task {} cannot be trained on a {} split", config.task, split.task)));
    }
    let index: HashMap<&str, &LabeledDocument> = docs.iter().map(|d| (d.id.as_str(), d)).collect();
    let train_docs = resolve(&index, &split.train)?;
    let dev_docs = resolve(&index, &split.dev)?;
    if train_docs.is_empty() || dev_docs.is_empty() {
        return Err(Error::InsufficientData("split has an empty train or dev partition".into()));
    }
    let dim = split.dimension;
    let all: Vec<&LabeledDocument> = train_docs.iter().chain(&dev_docs).chain(&resolve(&index, &split.test)?).copied().collect();
    let labels = task_labels(config.task, dim, &all)?;
    let train = prepare(base, &train_docs, config.task, dim, &labels)?;
    let dev = prepare(base, &dev_docs, config.task, dim, &labels)?;

    let ecfg = &base.config;
    let mut init = base.encoder_params();
    let head = ClassifierHead::init(&mut init, ecfg.hidden_dim, labels.len());
    let encoder = Encoder::bind(ecfg, &init)?;

    let mut trials = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamSet, f64)> = None;
    for (i, &lr) in config.lr_grid.iter().enumerate() {
        let seed = derive_seed(config.seed, &format!("finetune-{i}-{lr:e}"));
        let mut params = init.clone();
        let mut adam = Adam::new(&params, AdamConfig { weight_decay: config.weight_decay, ..AdamConfig::with_lr(lr) });
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dropout"));
        let mut stopper = EarlyStopping::new(config.patience, Goal::Maximize);
        let mut grads = params.zeros_like();
        let mut trial_best = (params.clone(), f64::NEG_INFINITY);
        let mut epochs_run = 0;
        for epoch in 1..=config.epochs {
            let mut loss_sum = 0.0;
            let order = shuffled_batches(train.seqs.len(), config.batch_size, derive_seed(seed, &format!("order-{epoch}")));
            for rows in &order {
                let ids = pad_rows(&train.seqs, rows);
                let targets: Vec<usize> = rows.iter().map(|&r| train.targets[r]).collect();
                let (enc, cache) = encoder.forward(&params, &MaskedBatch::unmasked(ids), Mode::Train(&mut rng))?;
                grads.fill_zero();
                let out = head.compute(&params, Some(&mut grads), &enc, &targets)?;
                encoder.backward(&params, &mut grads, &cache, None, out.d_sequence.as_ref());
                clip_grad_norm(&mut grads, config.clip_norm);
                adam.step(&mut params, &grads);
                loss_sum += out.value;
            }
            let pred = predict_prepared(&encoder, &head, &params, &dev.seqs, config.batch_size)?;
            let f1 = macro_f1(&dev.targets, &pred);
            log.push(FineTuneEpoch { lr, epoch, train_loss: loss_sum / order.len() as f64, dev_f1: f1 });
            epochs_run = epoch;
            match stopper.observe(epoch, f1) {
                Verdict::Improved => trial_best = (params.clone(), f1),
                Verdict::NoImprovement => {}
                Verdict::Stop => break,
            }
        }
        if epochs_run == 0 {
            let pred = predict_prepared(&encoder, &head, &params, &dev.seqs, config.batch_size)?;
            trial_best.1 = macro_f1(&dev.targets, &pred);
        }
        trials.push(FineTuneTrial { lr, epochs_run, best_epoch: stopper.best_epoch(), dev_f1: trial_best.1 });
        if best.as_ref().map_or(true, |b| trial_best.1 > b.0) {
            best = Some((trial_best.1, trial_best.0, lr));
        }
    }
    let (dev_f1, params, lr) = best.expect("non-empty grid");
    let split_digest = digest_parts([serde_json::to_string(split)?]);
    let classifier = Checkpoint {
        config: ecfg.clone(),
        tokenizer: base.tokenizer.clone(),
        params: params.filtered(|n| !n.starts_with(MLM_HEAD)),
        lineage: base.lineage.clone(),
        classifier: Some(ClassifierInfo {
            task: config.task,
            dimension: Some(dim),
            labels,
            split_digest,
            learning_rate: lr,
            dev_f1,
        }),
    };
    Ok(FineTuneOutcome { classifier, trials, log })
}

/// Class predictions of a fine-tuned classifier.
pub fn predict(classifier: &Checkpoint, docs: &[&LabeledDocument]) -> Result<Vec<usize>> {
    let info = classifier_info(classifier)?;
    let encoder = classifier.encoder()?;
    let head = ClassifierHead::bind(&classifier.params, classifier.config.hidden_dim, info.labels.len())?;
    let seqs = encode_all(&classifier.tokenizer, docs.iter().map(|d| d.text.as_str()), classifier.config.max_seq_len);
    predict_prepared(&encoder, &head, &classifier.params, &seqs, 64)
}

fn classifier_info(ckpt: &Checkpoint) -> Result<&ClassifierInfo> {
    ckpt.classifier.as_ref().ok_or_else(|| Error::InvalidArgument("checkpoint has no classification head".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub f1: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Documents of `docs` that fall in `subset` for `dimension`.
pub fn filter_subset<'a>(docs: &'a [LabeledDocument], subset: Subset, dimension: Dimension) -> Vec<&'a LabeledDocument> {
    docs.iter()
        .filter(|d| match subset {
            Subset::Mixed => true,
            Subset::ClassA => d.demographic(dimension) == Some(DemClass::A),
            Subset::ClassB => d.demographic(dimension) == Some(DemClass::B),
        })
        .collect()
}

pub fn evaluate_detailed(classifier: &Checkpoint, docs: &[LabeledDocument], subset: Subset) -> Result<Evaluation> {
    let info = classifier_info(classifier)?;
    let dim = info.dimension.unwrap_or(Dimension::Gender);
    let selected = filter_subset(docs, subset, dim);
    if selected.is_empty() {
        return Err(Error::EmptySubset(subset.to_string()));
    }
    let truth = selected.iter().map(|d| label_of(d, info.task, dim, &info.labels)).collect::<Result<Vec<_>>>()?;
    let pred = predict(classifier, &selected)?;
    Ok(Evaluation { f1: macro_f1(&truth, &pred), accuracy: accuracy(&truth, &pred), n: truth.len() })
}

/// Macro-F1 of `classifier` on the documents of `docs` in `subset`.
pub fn evaluate(classifier: &Checkpoint, docs: &[LabeledDocument], subset: Subset) -> Result<f64> {
    Ok(evaluate_detailed(classifier, docs, subset)?.f1)
}

#[cfg(test)]
mod tests;
