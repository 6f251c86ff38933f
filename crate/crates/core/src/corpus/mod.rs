//! Demographically labeled corpora: ingestion, leak-free splits, topic
//! balancing, specialization sampling and dynamic token masking.

mod mask;
mod split;
mod tokenizer;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use mask::{mask_tokens, mask_tokens_with, MaskedBatch, MaskingScheme};
pub use split::{
    balance_topics, make_split, make_split_with, sample_specialization, CorpusSplit, SplitManifest, SplitOptions,
};
pub use tokenizer::{Tokenizer, CLS_ID, MASK_ID, NUM_SPECIAL, PAD_ID, UNK_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    U35,
    O45,
}

/// The demographic axis a split or specialization run is defined over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Gender,
    Age,
}

/// Binary demographic class. `B` (M for gender, O45 for age) is the positive
/// class of the demographic heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DemClass {
    A,
    B,
}

impl DemClass {
    pub fn label(self) -> f64 {
        match self {
            DemClass::A => 0.0,
            DemClass::B => 1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self, dimension: Dimension) -> &'static str {
        match (dimension, self) {
            (Dimension::Gender, DemClass::A) => "F",
            (Dimension::Gender, DemClass::B) => "M",
            (Dimension::Age, DemClass::A) => "U35",
            (Dimension::Age, DemClass::B) => "O45",
        }
    }
}

/// Which fine-tuning collection a split is drawn for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitTask {
    #[serde(rename = "AC-SA")]
    AcSa,
    #[serde(rename = "AC-TD")]
    AcTd,
    #[serde(rename = "SA")]
    Sa,
    #[serde(rename = "TD")]
    Td,
}

impl SplitTask {
    pub const ALL: [SplitTask; 4] = [SplitTask::AcSa, SplitTask::AcTd, SplitTask::Sa, SplitTask::Td];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTask::AcSa => "AC-SA",
            SplitTask::AcTd => "AC-TD",
            SplitTask::Sa => "SA",
            SplitTask::Td => "TD",
        }
    }

    pub fn needs_rating(self) -> bool {
        matches!(self, SplitTask::AcSa | SplitTask::Sa)
    }

    pub fn needs_topic(self) -> bool {
        matches!(self, SplitTask::AcTd | SplitTask::Td)
    }
}

impl fmt::Display for SplitTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "AC-SA" => Ok(SplitTask::AcSa),
            "AC-TD" => Ok(SplitTask::AcTd),
            "SA" => Ok(SplitTask::Sa),
            "TD" => Ok(SplitTask::Td),
            _ => Err(Error::InvalidArgument(format!("unknown dataset `{s}`"))),
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Gender => "gender",
            Dimension::Age => "age",
        })
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gender" => Ok(Dimension::Gender),
            "age" => Ok(Dimension::Age),
            _ => Err(Error::InvalidArgument(format!("unknown dimension `{s}`"))),
        }
    }
}

/// One review or post with its author labels and task labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDocument {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub country: String,
    #[serde(default)]
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age_group: Option<AgeGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default)]
    pub domain_tag: String,
}

impl LabeledDocument {
    pub fn demographic(&self, dimension: Dimension) -> Option<DemClass> {
        match dimension {
            Dimension::Gender => self.gender.map(|g| match g {
                Gender::F => DemClass::A,
                Gender::M => DemClass::B,
            }),
            Dimension::Age => self.age_group.map(|a| match a {
                AgeGroup::U35 => DemClass::A,
                AgeGroup::O45 => DemClass::B,
            }),
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }
}

/// Maps corpus JSON keys onto document fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub id: String,
    pub text: String,
    pub country: String,
    pub language: String,
    pub gender: String,
    pub age_group: String,
    pub rating: String,
    pub topic: String,
    pub domain_tag: String,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self {
            id: "id".into(),
            text: "text".into(),
            country: "country".into(),
            language: "language".into(),
            gender: "gender".into(),
            age_group: "age_group".into(),
            rating: "rating".into(),
            topic: "topic".into(),
            domain_tag: "domain_tag".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    /// 1-based line number in the source file.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub documents: Vec<LabeledDocument>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Reads a JSONL corpus. Unreadable files are fatal; malformed records are
/// collected as per-line diagnostics.
pub fn load_corpus(path: &Path, schema: &FieldMapping) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, schema) {
            Ok(doc) => report.documents.push(doc),
            Err(message) => report.diagnostics.push(Diagnostic { line: i + 1, message }),
        }
    }
    Ok(report)
}

/// Loads a corpus and fails on the first malformed record.
pub fn load_corpus_strict(path: &Path) -> Result<Vec<LabeledDocument>> {
    let report = load_corpus(path, &FieldMapping::default())?;
    if let Some(d) = report.diagnostics.first() {
        return Err(Error::format(
            format!("corpus {}", path.display()),
            format!("line {}: {}", d.line, d.message),
        ));
    }
    Ok(report.documents)
}

pub fn write_corpus(path: &Path, docs: &[LabeledDocument]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn parse_record(line: &str, schema: &FieldMapping) -> std::result::Result<LabeledDocument, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("record is not a JSON object")?;
    let field = |key: &str| obj.get(key).filter(|v| !v.is_null());
    let string = |key: &str| -> std::result::Result<Option<String>, String> {
        match field(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(Value::Number(n)) => Ok(Some(n.to_string())),
            Some(other) => Err(format!("field `{key}` must be a string, got {other}")),
        }
    };

    let id = string(&schema.id)?.ok_or_else(|| format!("missing `{}`", schema.id))?;
    let text = string(&schema.text)?.ok_or_else(|| format!("missing `{}`", schema.text))?;
    if text.split_whitespace().next().is_none() {
        return Err(format!("`{}` has no tokens", schema.text));
    }
    let gender = match string(&schema.gender)?.as_deref() {
        None => None,
        Some("F") => Some(Gender::F),
        Some("M") => Some(Gender::M),
        Some(other) => return Err(format!("gender must be F or M, got `{other}`")),
    };
    let age_group = match string(&schema.age_group)?.as_deref() {
        None => None,
        Some("U35") => Some(AgeGroup::U35),
        Some("O45") => Some(AgeGroup::O45),
        Some(other) => return Err(format!("age_group must be U35 or O45, got `{other}`")),
    };
    let rating = match field(&schema.rating) {
        None => None,
        Some(v) => match v.as_u64() {
            Some(r @ 1..=5) => Some(r as u8),
            _ => return Err(format!("rating must be an integer in 1..=5, got {v}")),
        },
    };
    Ok(LabeledDocument {
        id,
        text,
        country: string(&schema.country)?.unwrap_or_default(),
        language: string(&schema.language)?.unwrap_or_default(),
        gender,
        age_group,
        rating,
        topic: string(&schema.topic)?,
        domain_tag: string(&schema.domain_tag)?.unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn corpus_file(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_valid_lines() {
        let f = corpus_file(&[
            r#"{"id":"1","text":"good shop","country":"DK","language":"da","gender":"F","rating":5,"topic":"t","domain_tag":"reviews"}"#,
            r#"{"id":"2","text":"bad","gender":"M","age_group":"O45","rating":1}"#,
            r#"{"id":"3","text":"fine","gender":null,"age_group":"U35"}"#,
        ]);
        let report = load_corpus(f.path(), &FieldMapping::default()).unwrap();
        assert_eq!(report.documents.len(), 3);
        assert!(report.diagnostics.is_empty());
        assert_eq!(report.documents[0].gender, Some(Gender::F));
        assert_eq!(report.documents[1].demographic(Dimension::Age), Some(DemClass::B));
        assert_eq!(report.documents[2].gender, None);
    }

    #[test]
    fn missing_text_is_a_record_level_error() {
        let f = corpus_file(&[
            r#"{"id":"1","text":"a b"}"#,
            r#"{"id":"2"}"#,
            r#"{"id":"3","text":"c"}"#,
        ]);
        let report = load_corpus(f.path(), &FieldMapping::default()).unwrap();
        assert_eq!(report.documents.len(), 2);
        assert_eq!(report.diagnostics.len(), 1);
        assert_eq!(report.diagnostics[0].line, 2);
    }

    #[test]
    fn empty_file_yields_nothing() {
        let f = corpus_file(&[]);
        let report = load_corpus(f.path(), &FieldMapping::default()).unwrap();
        assert!(report.documents.is_empty());
        assert!(report.diagnostics.is_empty());
    }

    #[test]
    fn unreadable_file_is_fatal() {
        let err = load_corpus(Path::new("/nonexistent/corpus.jsonl"), &FieldMapping::default())
            .unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let f = corpus_file(&[
            r#"{"id":"1","text":"x","age_group":"35-45"}"#,
            r#"{"id":"2","text":"x","rating":7}"#,
            r#"{"id":"3","text":"   "}"#,
        ]);
        let report = load_corpus(f.path(), &FieldMapping::default()).unwrap();
        assert!(report.documents.is_empty());
        assert_eq!(report.diagnostics.len(), 3);
    }

    #[test]
    fn custom_field_mapping() {
        let f = corpus_file(&[r#"{"review_id":7,"body":"hello there","sex":"M"}"#]);
        let schema = FieldMapping {
            id: "review_id".into(),
            text: "body".into(),
            gender: "sex".into(),
            ..FieldMapping::default()
        };
        let report = load_corpus(f.path(), &schema).unwrap();
        assert_eq!(report.documents[0].id, "7");
        assert_eq!(report.documents[0].gender, Some(Gender::M));
    }
}
