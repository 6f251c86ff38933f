use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Task;
use crate::corpus::{Dimension, SplitTask};
use crate::error::{Error, Result};
use crate::specialize::Method;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseModel {
    Multilingual,
    Monolingual,
}

impl BaseModel {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseModel::Multilingual => "multilingual",
            BaseModel::Monolingual => "monolingual",
        }
    }
}

impl FromStr for BaseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multilingual" => Ok(BaseModel::Multilingual),
            "monolingual" => Ok(BaseModel::Monolingual),
            _ => Err(Error::UnknownCategory { group: "base_model".into(), value: s.into() }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpecDomain {
    #[serde(rename = "in-domain")]
    InDomain,
    #[serde(rename = "out-of-domain")]
    OutOfDomain,
    #[serde(rename = "none")]
    None,
}

impl SpecDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            SpecDomain::InDomain => "in-domain",
            SpecDomain::OutOfDomain => "out-of-domain",
            SpecDomain::None => "none",
        }
    }
}

impl FromStr for SpecDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-domain" | "in" => Ok(SpecDomain::InDomain),
            "out-of-domain" | "out" => Ok(SpecDomain::OutOfDomain),
            "none" => Ok(SpecDomain::None),
            _ => Err(Error::UnknownCategory { group: "spec_domain".into(), value: s.into() }),
        }
    }
}

/// Which test documents are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    #[serde(rename = "class-A-only")]
    ClassA,
    #[serde(rename = "class-B-only")]
    ClassB,
    #[serde(rename = "mixed")]
    Mixed,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::ClassA, Subset::ClassB, Subset::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::ClassA => "class-A-only",
            Subset::ClassB => "class-B-only",
            Subset::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "class-a" | "class-a-only" => Ok(Subset::ClassA),
            "b" | "class-b" | "class-b-only" => Ok(Subset::ClassB),
            "mixed" | "all" => Ok(Subset::Mixed),
            _ => Err(Error::UnknownCategory { group: "subset".into(), value: s.into() }),
        }
    }
}

/// One evaluated (trial, subset) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub country: String,
    pub language: String,
    pub task: Task,
    pub dataset: SplitTask,
    pub method: Method,
    pub dimension: Dimension,
    pub base_model: BaseModel,
    pub spec_domain: SpecDomain,
    pub subset: Subset,
    pub seed: u64,
    pub f1: f64,
    #[serde(default)]
    pub accuracy: f64,
    #[serde(default)]
    pub n_test: usize,
    /// Digest of the fine-tuning corpus the split was drawn from.
    #[serde(default)]
    pub corpus_digest: String,
    /// Digest of the grid cell that produced the record, if any.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub cell: String,
}

impl ResultRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.f1) {
            return Err(Error::InvalidArgument(format!("f1 {} outside [0, 1]", self.f1)));
        }
        if self.method == Method::Vanilla && self.spec_domain != SpecDomain::None {
            return Err(Error::InvalidArgument("vanilla records have no specialization domain".into()));
        }
        if self.method != Method::Vanilla && self.spec_domain == SpecDomain::None {
            return Err(Error::InvalidArgument(format!("{} record needs a specialization domain", self.method)));
        }
        Ok(())
    }
}

/// Appends records to a JSONL store with a single write per call, so
/// concurrent appenders never interleave partial lines.
pub fn append_records(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        r.validate()?;
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("results store", format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record() -> ResultRecord {
        ResultRecord {
            country: "US".into(),
            language: "en".into(),
            task: Task::Td,
            dataset: SplitTask::Td,
            method: Method::DsTok,
            dimension: Dimension::Gender,
            base_model: BaseModel::Multilingual,
            spec_domain: SpecDomain::InDomain,
            subset: Subset::Mixed,
            seed: 1,
            f1: 0.716,
            accuracy: 0.72,
            n_test: 100,
            corpus_digest: "abc".into(),
            cell: String::new(),
        }
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let a = record();
        let b = ResultRecord { subset: Subset::ClassA, ..record() };
        append_records(&path, &[a.clone()]).unwrap();
        append_records(&path, &[b.clone()]).unwrap();
        assert_eq!(read_records(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(ResultRecord { f1: 1.2, ..record() }.validate().is_err());
        assert!(ResultRecord { method: Method::Vanilla, ..record() }.validate().is_err());
        assert!(ResultRecord { method: Method::Vanilla, spec_domain: SpecDomain::None, ..record() }.validate().is_ok());
    }

    #[test]
    fn serialized_names() {
        let json = serde_json::to_value(record()).unwrap();
        assert_eq!(json["subset"], "mixed");
        assert_eq!(json["spec_domain"], "in-domain");
        assert_eq!(json["method"], "DS-Tok");
        assert_eq!(json["dataset"], "TD");
    }
}
