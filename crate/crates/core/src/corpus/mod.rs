//! Tool corpora and instruction datasets.
//!
//! Both live on disk as line-delimited JSON: `tools.jsonl` holds one
//! [`ToolDoc`] per line and `queries.jsonl` one [`QueryRecord`] per line.
//! Loading validates every invariant up front; the returned collections
//! are immutable and can be shared freely across threads.

pub mod toolbench;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::textproc::tokenize;

/// A `(tool_name, api_name)` reference, the ground-truth granularity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ToolRef {
    pub tool_name: String,
    pub api_name: String,
}

impl ToolRef {
    pub fn new(tool_name: impl Into<String>, api_name: impl Into<String>) -> Self {
        Self {
            tool_name: tool_name.into(),
            api_name: api_name.into(),
        }
    }
}

impl fmt::Display for ToolRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}", self.tool_name, self.api_name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDoc {
    pub doc_id: String,
    pub tool_name: String,
    pub api_name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl ToolDoc {
    pub fn tool_ref(&self) -> ToolRef {
        ToolRef::new(&self.tool_name, &self.api_name)
    }
}

/// Renders a document for retrieval: `tool_name api_name description`.
pub fn doc_text(doc: &ToolDoc) -> String {
    [doc.tool_name.as_str(), doc.api_name.as_str(), doc.description.as_str()]
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetTag {
    I1,
    I2,
    I3,
    #[default]
    #[serde(rename = "other")]
    Other,
}

impl SubsetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SubsetTag::I1 => "I1",
            SubsetTag::I2 => "I2",
            SubsetTag::I3 => "I3",
            SubsetTag::Other => "other",
        }
    }

    fn is_other(&self) -> bool {
        *self == SubsetTag::Other
    }
}

impl fmt::Display for SubsetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One benchmark item: vague instruction, optional specific instruction and
/// the ground-truth tools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub vague: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specific: Option<String>,
    #[serde(rename = "relevant_apis")]
    pub ground_truth: Vec<ToolRef>,
    #[serde(default, skip_serializing_if = "SubsetTag::is_other")]
    pub subset: SubsetTag,
}

impl QueryRecord {
    pub fn specific_text(&self) -> Result<&str> {
        self.specific
            .as_deref()
            .ok_or_else(|| Error::MissingSpecific(vec![self.query_id.clone()]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub avg_doc_len: f64,
}

/// Wire form of a tool line; `doc_id` is optional on input.
#[derive(Debug, Deserialize)]
struct ToolLine {
    doc_id: Option<String>,
    tool_name: String,
    api_name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    category: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<ToolDoc>,
    by_id: HashMap<String, usize>,
    by_ref: HashMap<ToolRef, usize>,
    stats: CorpusStats,
}

impl Corpus {
    /// Builds a corpus from in-memory docs, enforcing the same invariants as
    /// [`load_corpus`]. Line numbers in errors are 1-based positions.
    pub fn from_docs(docs: Vec<ToolDoc>) -> Result<Self> {
        Self::build(docs, Path::new("<memory>"), None)
    }

    fn build(docs: Vec<ToolDoc>, path: &Path, lines: Option<&[usize]>) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyCorpus(path.to_path_buf()));
        }
        let line_of = |i: usize| lines.map_or(i + 1, |l| l[i]);
        let mut by_id = HashMap::with_capacity(docs.len());
        let mut by_ref = HashMap::with_capacity(docs.len());
        let mut total_len = 0usize;
        for (i, doc) in docs.iter().enumerate() {
            if doc.tool_name.trim().is_empty() || doc.api_name.trim().is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_of(i),
                    message: "tool_name and api_name must be non-empty".into(),
                });
            }
            if let Some(&first) = by_ref.get(&doc.tool_ref()) {
                return Err(Error::DuplicateKey {
                    path: path.to_path_buf(),
                    line: line_of(i),
                    first_line: line_of(first),
                    key: doc.tool_ref().to_string(),
                });
            }
            if let Some(&first) = by_id.get(&doc.doc_id) {
                return Err(Error::DuplicateKey {
                    path: path.to_path_buf(),
                    line: line_of(i),
                    first_line: line_of(first),
                    key: doc.doc_id.clone(),
                });
            }
            by_ref.insert(doc.tool_ref(), i);
            by_id.insert(doc.doc_id.clone(), i);
            total_len += tokenize(&doc_text(doc)).len();
        }
        let stats = CorpusStats {
            doc_count: docs.len(),
            avg_doc_len: total_len as f64 / docs.len() as f64,
        };
        Ok(Self {
            docs,
            by_id,
            by_ref,
            stats,
        })
    }

    pub fn docs(&self) -> &[ToolDoc] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn stats(&self) -> CorpusStats {
        self.stats
    }

    pub fn get(&self, doc_id: &str) -> Option<&ToolDoc> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn index_of(&self, doc_id: &str) -> Option<usize> {
        self.by_id.get(doc_id).copied()
    }

    pub fn resolve(&self, r: &ToolRef) -> Option<&ToolDoc> {
        self.by_ref.get(r).map(|&i| &self.docs[i])
    }

    /// doc_ids of a record's ground truth. Records returned by
    /// [`load_queries`] always resolve fully.
    pub fn ground_truth_ids(&self, record: &QueryRecord) -> Result<HashSet<String>> {
        record
            .ground_truth
            .iter()
            .map(|r| {
                self.resolve(r)
                    .map(|d| d.doc_id.clone())
                    .ok_or_else(|| Error::UnresolvedReference {
                        query_id: record.query_id.clone(),
                        tool_name: r.tool_name.clone(),
                        api_name: r.api_name.clone(),
                    })
            })
            .collect()
    }

    /// Writes the corpus in `tools.jsonl` form.
    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.docs)
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let rows: Vec<(usize, ToolLine)> = jsonl::read(path)?;
    let lines: Vec<usize> = rows.iter().map(|(l, _)| *l).collect();
    let docs = rows
        .into_iter()
        .map(|(_, t)| ToolDoc {
            doc_id: t
                .doc_id
                .unwrap_or_else(|| format!("{}::{}", t.tool_name, t.api_name)),
            tool_name: t.tool_name,
            api_name: t.api_name,
            description: t.description,
            category: t.category,
        })
        .collect();
    Corpus::build(docs, path, Some(&lines))
}

/// Validates one record against a corpus, deduplicating its ground truth in
/// first-seen order.
pub fn validate_query(mut record: QueryRecord, corpus: &Corpus) -> Result<QueryRecord> {
    if record.vague.trim().is_empty() {
        return Err(Error::invalid(format!(
            "query {}: vague instruction is empty",
            record.query_id
        )));
    }
    if record.ground_truth.is_empty() {
        return Err(Error::EmptyGroundTruth(record.query_id));
    }
    let mut seen = HashSet::new();
    record.ground_truth.retain(|r| seen.insert(r.clone()));
    corpus.ground_truth_ids(&record)?;
    Ok(record)
}

pub fn load_queries(path: &Path, corpus: &Corpus) -> Result<Vec<QueryRecord>> {
    let rows: Vec<(usize, QueryRecord)> = jsonl::read(path)?;
    let mut first_line: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, record) in rows {
        if let Some(&first) = first_line.get(&record.query_id) {
            return Err(Error::DuplicateKey {
                path: path.to_path_buf(),
                line,
                first_line: first,
                key: record.query_id,
            });
        }
        first_line.insert(record.query_id.clone(), line);
        out.push(validate_query(record, corpus)?);
    }
    Ok(out)
}

pub fn save_queries(path: &Path, records: &[QueryRecord]) -> Result<()> {
    jsonl::write(path, records)
}

/// Fails with every offending query_id when any record lacks `specific`.
pub fn require_specific(records: &[QueryRecord]) -> Result<()> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| r.specific.is_none())
        .map(|r| r.query_id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingSpecific(missing))
    }
}
