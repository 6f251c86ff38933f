use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dimension, SplitTask};
use crate::finetune::{BaseModel, ResultRecord, SpecDomain, Subset, Task};
use crate::specialize::Method;

/// A result cell with the seed factored out.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub country: String,
    pub dimension: Dimension,
    pub task: Task,
    pub dataset: SplitTask,
    pub base_model: BaseModel,
    pub method: Method,
    pub spec_domain: SpecDomain,
    pub subset: Subset,
}

impl CellKey {
    pub fn of(r: &ResultRecord) -> Self {
        Self {
            country: r.country.clone(),
            dimension: r.dimension,
            task: r.task,
            dataset: r.dataset,
            base_model: r.base_model,
            method: r.method,
            spec_domain: r.spec_domain,
            subset: r.subset,
        }
    }

    /// A record carrying this key's categories, with zeroed measurements.
    pub fn as_record(&self) -> ResultRecord {
        ResultRecord {
            country: self.country.clone(),
            language: String::new(),
            task: self.task,
            dataset: self.dataset,
            method: self.method,
            dimension: self.dimension,
            base_model: self.base_model,
            spec_domain: self.spec_domain,
            subset: self.subset,
            seed: 0,
            f1: 0.0,
            accuracy: 0.0,
            n_test: 0,
            corpus_digest: String::new(),
            cell: String::new(),
        }
    }
}

/// Built-in baseline choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Specialized cells against the unspecialized model.
    Vanilla,
    /// Out-of-domain specialization against in-domain, per method.
    InDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub key: CellKey,
    /// Seed-averaged F1 in percentage points.
    pub cell_f1: f64,
    pub baseline_f1: f64,
    /// `cell_f1 - baseline_f1`.
    pub delta: f64,
    pub cell_seeds: usize,
    pub baseline_seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    /// Sorted by key.
    pub rows: Vec<DeltaRow>,
    /// Cells without a baseline; excluded from `rows`.
    pub unpaired: Vec<CellKey>,
}

pub fn delta_table(records: &[ResultRecord], baseline: Baseline) -> DeltaTable {
    match baseline {
        Baseline::Vanilla => delta_table_by(
            records,
            |r| r.method == Method::Vanilla,
            |k| Some(CellKey { method: Method::Vanilla, spec_domain: SpecDomain::None, ..k.clone() }),
        ),
        Baseline::InDomain => delta_table_by(
            records,
            |r| r.spec_domain == SpecDomain::InDomain,
            |k| (k.spec_domain == SpecDomain::OutOfDomain).then(|| CellKey { spec_domain: SpecDomain::InDomain, ..k.clone() }),
        ),
    }
}

/// ΔF1 of every candidate cell against its baseline. Records for which
/// `is_baseline` holds are baselines; every other record whose key maps to
/// `Some` under `baseline_of` is a candidate paired with that key.
pub fn delta_table_by(
    records: &[ResultRecord],
    is_baseline: impl Fn(&ResultRecord) -> bool,
    baseline_of: impl Fn(&CellKey) -> Option<CellKey>,
) -> DeltaTable {
    let mut baselines: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    let mut cells: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        let target = if is_baseline(r) { &mut baselines } else { &mut cells };
        target.entry(CellKey::of(r)).or_default().push(100.0 * r.f1);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut table = DeltaTable::default();
    for (key, f1s) in &cells {
        let Some(base_key) = baseline_of(key) else { continue };
        match baselines.get(&base_key) {
            Some(base) => {
                let (c, b) = (mean(f1s), mean(base));
                table.rows.push(DeltaRow {
                    key: key.clone(),
                    cell_f1: c,
                    baseline_f1: b,
                    delta: c - b,
                    cell_seeds: f1s.len(),
                    baseline_seeds: base.len(),
                });
            }
            None => table.unpaired.push(key.clone()),
        }
    }
    table
}
