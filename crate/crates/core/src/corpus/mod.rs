//! Dataset records, prompt templates, prompt assembly and the span-shuffle
//! perturbation applied to test inputs.

mod prompt;
mod shuffle;
mod template;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use prompt::{assemble_prompt, Prompt};
pub use shuffle::{span_shuffle, span_shuffle_text, TRIPLE_PERMUTATIONS};
pub use template::{Slot, TaskKind, Template};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: missing required field \"{field}\"")]
    MissingField { line: usize, field: String },
    #[error("line {line}: duplicate id \"{id}\"")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: label \"{label}\" is not one of the template labels")]
    UnknownRecordLabel { line: usize, label: String },
    #[error("example \"{id}\" has no field \"{field}\"")]
    UnresolvedPlaceholder { id: String, field: String },
    #[error("unknown label \"{0}\"")]
    UnknownLabel(String),
    #[error("example \"{0}\" carries no gold label")]
    MissingLabel(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("unknown dataset format \"{0}\"")]
    UnknownFormat(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// One dataset record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub fields: BTreeMap<String, String>,
    pub label: Option<String>,
    /// Free-form tag used to break reports down over mixed-domain pools.
    pub domain: Option<String>,
}

impl Example {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            fields: BTreeMap::new(),
            label: None,
            domain: None,
        }
    }

    pub fn with_field(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.fields.insert(name.into(), value.into());
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }
}

/// Supported on-disk dataset layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    /// One flat JSON object of string values per line.
    #[default]
    JsonLines,
}

impl std::str::FromStr for DatasetFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json-lines" | "ndjson" => Ok(Self::JsonLines),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// Ordered list of examples plus where they came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub source: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn from_examples(source: impl Into<String>, examples: Vec<Example>) -> Self {
        Self {
            source: source.into(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }
}

/// Reserved record keys; every other key is a text field.
const ID_KEY: &str = "id";
const LABEL_KEY: &str = "label";
const DOMAIN_KEY: &str = "domain";

/// Loads a dataset, optionally checking every record against `template`.
///
/// Record order follows the file. Records without an `id` get their
/// zero-based record index as id.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
    template: Option<&Template>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let examples = match format {
        DatasetFormat::JsonLines => parse_json_lines(&text, template)?,
    };
    Ok(Dataset::from_examples(path.display().to_string(), examples))
}

/// Parses line-delimited records from memory.
pub fn parse_json_lines(text: &str, template: Option<&Template>) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record = parse_flat_record(raw, line)?;
        let mut example = Example::new(examples.len().to_string());
        for (key, value) in record {
            match key.as_str() {
                ID_KEY => example.id = value,
                LABEL_KEY => example.label = Some(value),
                DOMAIN_KEY => example.domain = Some(value),
                _ => {
                    example.fields.insert(key, value);
                }
            }
        }
        if let Some(t) = template {
            for field in t.required_fields() {
                if !example.fields.contains_key(&field) {
                    return Err(CorpusError::MissingField { line, field });
                }
            }
            if let Some(label) = &example.label {
                if t.kind() == TaskKind::Classification && !t.has_label(label) {
                    return Err(CorpusError::UnknownRecordLabel {
                        line,
                        label: label.clone(),
                    });
                }
            }
        }
        if !seen.insert(example.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line,
                id: example.id,
            });
        }
        examples.push(example);
    }
    Ok(examples)
}

/// Parses one line as a flat string-to-string object. `null` values are
/// treated as absent.
pub(crate) fn parse_flat_record(raw: &str, line: usize) -> Result<BTreeMap<String, String>> {
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            reason: e.to_string(),
        })?;
    let serde_json::Value::Object(map) = value else {
        return Err(CorpusError::Malformed {
            line,
            reason: "record is not an object".into(),
        });
    };
    let mut out = BTreeMap::new();
    for (key, value) in map {
        match value {
            serde_json::Value::String(s) => {
                out.insert(key, s);
            }
            serde_json::Value::Null => {}
            other => {
                return Err(CorpusError::Malformed {
                    line,
                    reason: format!("field \"{key}\" is not a string: {other}"),
                })
            }
        }
    }
    Ok(out)
}

/// Writes examples back out as line-delimited records.
pub fn write_json_lines(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        let mut map = serde_json::Map::new();
        map.insert(ID_KEY.into(), e.id.clone().into());
        for (k, v) in &e.fields {
            map.insert(k.clone(), v.clone().into());
        }
        if let Some(l) = &e.label {
            map.insert(LABEL_KEY.into(), l.clone().into());
        }
        if let Some(d) = &e.domain {
            map.insert(DOMAIN_KEY.into(), d.clone().into());
        }
        out.push_str(&serde_json::Value::Object(map).to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_file_order_and_assigns_ids() {
        let text = "{\"text\":\"c\"}\n{\"text\":\"a\"}\n{\"text\":\"b\"}\n";
        let ex = parse_json_lines(text, None).unwrap();
        let texts: Vec<_> = ex.iter().map(|e| e.field("text").unwrap()).collect();
        assert_eq!(texts, ["c", "a", "b"]);
        let ids: Vec<_> = ex.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["0", "1", "2"]);
    }

    #[test]
    fn missing_template_field_names_field_and_line() {
        let t = Template::builtin("sst2").unwrap();
        let text = "{\"text\":\"fine\",\"label\":\"positive\"}\n{\"sentence\":\"oops\"}\n";
        match parse_json_lines(text, Some(&t)) {
            Err(CorpusError::MissingField { line, field }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "text");
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = parse_json_lines(text, Some(&t)).unwrap_err().to_string();
        assert!(msg.contains("\"text\"") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn sst2_record_keeps_label() {
        let t = Template::builtin("sst2").unwrap();
        let ex = parse_json_lines("{\"text\":\"a fine film\",\"label\":\"positive\"}", Some(&t))
            .unwrap();
        assert_eq!(ex[0].label.as_deref(), Some("positive"));
    }

    #[test]
    fn rejects_bad_records() {
        assert!(matches!(
            parse_json_lines("{\"id\":\"a\"}\n{\"id\":\"a\"}", None),
            Err(CorpusError::DuplicateId { line: 2, .. })
        ));
        assert!(matches!(
            parse_json_lines("{\"text\": 3}", None),
            Err(CorpusError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_json_lines("\n[1,2]", None),
            Err(CorpusError::Malformed { line: 2, .. })
        ));
        let t = Template::builtin("sst2").unwrap();
        assert!(matches!(
            parse_json_lines("{\"text\":\"x\",\"label\":\"meh\"}", Some(&t)),
            Err(CorpusError::UnknownRecordLabel { .. })
        ));
    }

    #[test]
    fn json_lines_round_trip() {
        let ex = vec![
            Example::new("a").with_field("text", "hi \"there\"").with_label("positive"),
            Example::new("b").with_field("text", "").with_domain("news"),
        ];
        let back = parse_json_lines(&write_json_lines(&ex), None).unwrap();
        assert_eq!(back, ex);
    }

    #[test]
    fn loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "{\"text\":\"x\"}\n").unwrap();
        let d = load_dataset(&path, DatasetFormat::JsonLines, None).unwrap();
        assert_eq!(d.len(), 1);
        assert!(load_dataset(dir.path().join("nope"), DatasetFormat::JsonLines, None).is_err());
    }
}
