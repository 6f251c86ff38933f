use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DemClass, Dimension, LabeledDocument, SplitTask};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Disjoint document-id partitions for one (dimension, task) collection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub dimension: Dimension,
    pub task: SplitTask,
    pub seed: u64,
    pub specialization: Vec<String>,
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl CorpusSplit {
    pub fn finetune_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// Pairwise intersection sizes are all zero.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.specialization.iter().chain(self.finetune_ids()).all(|id| seen.insert(id))
    }
}

/// The on-disk split description: the split plus the digest of the corpus
/// it was drawn from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub corpus_digest: String,
    #[serde(flatten)]
    pub split: CorpusSplit,
}

impl SplitManifest {
    pub fn new(split: CorpusSplit, corpus_digest: String) -> Self {
        Self { format_version: MANIFEST_VERSION, corpus_digest, split }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&body)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::format(
                "split manifest",
                format!("unsupported version {}", manifest.format_version),
            ));
        }
        Ok(manifest)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitOptions {
    /// Upper bound on fine-tuning documents per demographic class.
    pub max_per_class: Option<usize>,
    /// Number of most frequent topics kept for topic-labeled collections.
    pub topics: usize,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self { max_per_class: None, topics: 5 }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Indices of `docs` sorted by id, so that sampling depends on the document
/// set and the seed but not on file order.
fn by_id<'a>(docs: &'a [LabeledDocument], keep: impl Fn(&LabeledDocument) -> bool) -> Vec<&'a LabeledDocument> {
    let mut out: Vec<&LabeledDocument> = docs.iter().filter(|d| keep(d)).collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

fn check_unique_ids(docs: &[LabeledDocument]) -> Result<()> {
    let mut seen = HashSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate document id `{}`", d.id)));
        }
    }
    Ok(())
}

fn eligible_for(task: SplitTask, doc: &LabeledDocument) -> bool {
    if task.needs_rating() && !matches!(doc.rating, Some(1 | 3 | 5)) {
        return false;
    }
    if task.needs_topic() && doc.topic.is_none() {
        return false;
    }
    true
}

/// Per-class (train, dev, test) counts. Both classes get the same counts, so
/// partition totals are even; only `n mod 5 ∈ {0, 1, 4}` keeps every total
/// within one document of the exact 60/20/20 ratio.
fn partition_quotas(n: usize) -> Option<(usize, usize, usize)> {
    let train = (6 * n + 5) / 10;
    let dev = (2 * n + 5) / 10;
    let test = n.checked_sub(train + dev)?;
    let total = 2.0 * n as f64;
    let within = |count: usize, share: f64| (2.0 * count as f64 - share * total).abs() <= 1.0 + 1e-9;
    (within(train, 0.6) && within(dev, 0.2) && within(test, 0.2)).then_some((train, dev, test))
}

/// Largest-remainder apportionment of `total` across cells proportional to
/// `weights`; ties go to the earlier cell.
fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let mut remainders: Vec<(usize, usize)> =
        weights.iter().enumerate().map(|(i, &w)| ((w * total) % sum, i)).collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - out.iter().sum::<usize>();
    for &(_, i) in remainders.iter().take(missing) {
        out[i] += 1;
    }
    out
}

/// Produces a leak-free split: fine-tuning train/dev/test partitions with
/// exact demographic balance (and, for topic collections, identical topic
/// composition in both classes), plus a specialization partition holding
/// every other document labeled for `dimension`.
pub fn make_split(docs: &[LabeledDocument], dimension: Dimension, task: SplitTask, seed: u64) -> Result<CorpusSplit> {
    make_split_with(docs, dimension, task, seed, &SplitOptions::default())
}

pub fn make_split_with(
    docs: &[LabeledDocument],
    dimension: Dimension,
    task: SplitTask,
    seed: u64,
    options: &SplitOptions,
) -> Result<CorpusSplit> {
    check_unique_ids(docs)?;
    let labeled = by_id(docs, |d| d.demographic(dimension).is_some());
    let pool: Vec<LabeledDocument> = labeled
        .iter()
        .filter(|d| eligible_for(task, d))
        .map(|d| (*d).clone())
        .collect();
    let pool = if task.needs_topic() {
        balance_topics(&pool, options.topics, dimension, seed)?
    } else {
        pool
    };

    // Group each class by stratum (topic for topic collections).
    let stratum = |d: &LabeledDocument| if task.needs_topic() { d.topic.clone() } else { None };
    let mut strata: BTreeMap<Option<String>, [Vec<&LabeledDocument>; 2]> = BTreeMap::new();
    for d in by_id(&pool, |_| true) {
        let class = d.demographic(dimension).expect("pool is labeled");
        strata.entry(stratum(d)).or_default()[class.index()].push(d);
    }
    let count = |c: usize| strata.values().map(|s| s[c].len()).sum::<usize>();
    let (count_a, count_b) = (count(0), count(1));
    let mut n = count_a.min(count_b);
    if let Some(cap) = options.max_per_class {
        n = n.min(cap);
    }
    while n > 0 && partition_quotas(n).map_or(true, |(_, d, t)| d == 0 || t == 0) {
        n -= 1;
    }
    if n == 0 {
        let (short, have) = if count_a <= count_b { (DemClass::A, count_a) } else { (DemClass::B, count_b) };
        return Err(Error::InsufficientData(format!(
            "class {} has {} eligible document(s) for {} (class {}: {}, class {}: {}); cannot fill a balanced split",
            short.name(dimension),
            have,
            task,
            DemClass::A.name(dimension),
            count_a,
            DemClass::B.name(dimension),
            count_b,
        )));
    }
    let (n_train, n_dev, n_test) = partition_quotas(n).expect("feasible n");

    // Both classes use the same per-stratum allocation so topic composition
    // matches across classes.
    let capacity: Vec<usize> = strata.values().map(|s| s[0].len().min(s[1].len())).collect();
    let take = apportion(&capacity, n);
    let take = fix_capacity(take, &capacity, n);
    let train_q = apportion(&take, n_train);
    let rest: Vec<usize> = take.iter().zip(&train_q).map(|(t, q)| t - q).collect();
    let dev_q = apportion(&rest, n_dev);

    let mut split = CorpusSplit {
        dimension,
        task,
        seed,
        specialization: Vec::new(),
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for (s, cells) in strata.values().enumerate() {
        for (c, members) in cells.iter().enumerate() {
            let mut members = members.clone();
            members.shuffle(&mut rng_for(seed, (s as u64) << 1 | c as u64));
            let (tr, dv, total) = (train_q[s], dev_q[s], take[s]);
            split.train.extend(members[..tr].iter().map(|d| d.id.clone()));
            split.dev.extend(members[tr..tr + dv].iter().map(|d| d.id.clone()));
            split.test.extend(members[tr + dv..total].iter().map(|d| d.id.clone()));
        }
    }
    debug_assert_eq!(split.test.len(), 2 * n_test);

    let used: HashSet<&String> = split.finetune_ids().collect();
    split.specialization = labeled
        .iter()
        .filter(|d| !used.contains(&d.id))
        .map(|d| d.id.clone())
        .collect();
    for part in [&mut split.train, &mut split.dev, &mut split.test] {
        part.shuffle(&mut rng_for(seed, u64::MAX));
    }
    Ok(split)
}

/// Apportionment can exceed a stratum's capacity when strata are uneven;
/// move the excess to strata with room, in order.
fn fix_capacity(mut take: Vec<usize>, capacity: &[usize], total: usize) -> Vec<usize> {
    let mut excess = 0;
    for (t, &cap) in take.iter_mut().zip(capacity) {
        if *t > cap {
            excess += *t - cap;
            *t = cap;
        }
    }
    for (t, &cap) in take.iter_mut().zip(capacity) {
        let room = (cap - *t).min(excess);
        *t += room;
        excess -= room;
    }
    debug_assert_eq!(take.iter().sum::<usize>(), total);
    take
}

/// Keeps the `k` most frequent topics and downsamples each topic so both
/// demographic classes contribute the same number of documents.
pub fn balance_topics(docs: &[LabeledDocument], k: usize, dimension: Dimension, seed: u64) -> Result<Vec<LabeledDocument>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut cells: BTreeMap<&str, [Vec<&LabeledDocument>; 2]> = BTreeMap::new();
    for d in by_id(docs, |_| true) {
        if let (Some(topic), Some(class)) = (d.topic.as_deref(), d.demographic(dimension)) {
            cells.entry(topic).or_default()[class.index()].push(d);
        }
    }
    if cells.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} distinct topic(s), {} requested",
            cells.len(),
            k
        )));
    }
    let mut ranked: Vec<(&str, [Vec<&LabeledDocument>; 2])> = cells.into_iter().collect();
    ranked.sort_by(|a, b| {
        let total = |c: &[Vec<&LabeledDocument>; 2]| c[0].len() + c[1].len();
        total(&b.1).cmp(&total(&a.1)).then_with(|| a.0.cmp(b.0))
    });
    let mut out = Vec::new();
    for (t, (_, mut classes)) in ranked.into_iter().take(k).enumerate() {
        let m = classes[0].len().min(classes[1].len());
        for (c, members) in classes.iter_mut().enumerate() {
            members.shuffle(&mut rng_for(seed, (t as u64) << 1 | c as u64));
            out.extend(members[..m].iter().map(|d| (*d).clone()));
        }
    }
    Ok(out)
}

/// Draws exactly `n_per_group` documents from each demographic class,
/// uniformly without replacement.
pub fn sample_specialization(
    docs: &[LabeledDocument],
    dimension: Dimension,
    n_per_group: usize,
    seed: u64,
) -> Result<Vec<LabeledDocument>> {
    let mut out = Vec::with_capacity(2 * n_per_group);
    for class in [DemClass::A, DemClass::B] {
        let mut members = by_id(docs, |d| d.demographic(dimension) == Some(class));
        if members.len() < n_per_group {
            return Err(Error::InsufficientData(format!(
                "class {} has {} document(s), short by {}",
                class.name(dimension),
                members.len(),
                n_per_group - members.len()
            )));
        }
        members.shuffle(&mut rng_for(seed, class.index() as u64));
        out.extend(members[..n_per_group].iter().map(|d| (*d).clone()));
    }
    out.shuffle(&mut rng_for(seed, 2));
    Ok(out)
}
