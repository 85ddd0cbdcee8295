//! Conversion from native ToolBench files into `tools.jsonl` / `queries.jsonl`.
//!
//! Accepted tool sources:
//! * a directory tree of per-tool JSON files (`tool_name`, `tool_description`, `api_list[]`),
//! * a retrieval `corpus.tsv` (`docid \t {json document}`),
//! * a query file, whose `api_list` entries carry the API metadata.
//!
//! Query files are JSON arrays of `{query_id, query, "relevant APIs": [[tool, api]], api_list}`.
//! A vague rewrite can be read from a configurable field; when it is absent
//! the original query is used for both forms.

use std::collections::HashSet;
use std::path::Path;

use serde_json::Value;
use walkdir::WalkDir;

use super::{QueryRecord, SubsetTag, ToolDoc, ToolRef};
use crate::error::{Error, Result};

fn str_field<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| v.get(*k).and_then(Value::as_str))
}

fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn push_doc(out: &mut Vec<ToolDoc>, seen: &mut HashSet<ToolRef>, doc: ToolDoc) {
    if doc.tool_name.trim().is_empty() || doc.api_name.trim().is_empty() {
        return;
    }
    if seen.insert(doc.tool_ref()) {
        out.push(doc);
    }
}

fn api_doc(tool_name: &str, api: &Value, tool_desc: &str, category: Option<&str>) -> Option<ToolDoc> {
    let api_name = str_field(api, &["api_name", "name"])?;
    let api_desc = str_field(api, &["api_description", "description"]).unwrap_or("");
    let description = [tool_desc.trim(), api_desc.trim()]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ");
    Some(ToolDoc {
        doc_id: format!("{tool_name}::{api_name}"),
        tool_name: tool_name.to_string(),
        api_name: api_name.to_string(),
        description,
        category: category
            .or_else(|| str_field(api, &["category_name"]))
            .map(str::to_string),
    })
}

fn tools_from_tool_json(v: &Value, category: Option<&str>, out: &mut Vec<ToolDoc>, seen: &mut HashSet<ToolRef>) {
    let Some(tool_name) = str_field(v, &["tool_name", "standardized_name", "name"]) else {
        return;
    };
    let tool_desc = str_field(v, &["tool_description", "description"]).unwrap_or("");
    for api in v.get("api_list").and_then(Value::as_array).into_iter().flatten() {
        if let Some(doc) = api_doc(tool_name, api, tool_desc, category) {
            push_doc(out, seen, doc);
        }
    }
}

fn tools_from_corpus_tsv(path: &Path, out: &mut Vec<ToolDoc>, seen: &mut HashSet<ToolRef>) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        let Some((_, doc)) = line.split_once('\t') else { continue };
        let Ok(v) = serde_json::from_str::<Value>(doc) else {
            // header row or free-text document column
            if i == 0 {
                continue;
            }
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "document column is not JSON".into(),
            });
        };
        let Some(tool) = str_field(&v, &["tool_name"]) else { continue };
        if let Some(d) = api_doc(tool, &v, "", None) {
            push_doc(out, seen, d);
        }
    }
    Ok(())
}

/// Collects tool documents from any supported ToolBench source.
pub fn convert_tools(input: &Path) -> Result<Vec<ToolDoc>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    if input.is_dir() {
        let mut files: Vec<_> = WalkDir::new(input)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "json"))
            .map(|e| e.into_path())
            .collect();
        files.sort();
        for f in files {
            let category = f
                .parent()
                .filter(|p| *p != input)
                .and_then(|p| p.file_name())
                .and_then(|s| s.to_str())
                .map(str::to_string);
            let v = read_value(&f)?;
            tools_from_tool_json(&v, category.as_deref(), &mut out, &mut seen);
        }
    } else if input.extension().is_some_and(|x| x == "tsv") {
        tools_from_corpus_tsv(input, &mut out, &mut seen)?;
    } else {
        match read_value(input)? {
            Value::Array(items) => {
                for q in &items {
                    for api in q.get("api_list").and_then(Value::as_array).into_iter().flatten() {
                        if let Some(tool) = str_field(api, &["tool_name"]) {
                            if let Some(d) = api_doc(tool, api, "", None) {
                                push_doc(&mut out, &mut seen, d);
                            }
                        }
                    }
                }
            }
            v => tools_from_tool_json(&v, None, &mut out, &mut seen),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus(input.to_path_buf()));
    }
    Ok(out)
}

fn relevant_refs(q: &Value) -> Vec<ToolRef> {
    let rel = q
        .get("relevant APIs")
        .or_else(|| q.get("relevant_apis"))
        .and_then(Value::as_array);
    rel.into_iter()
        .flatten()
        .filter_map(|r| match r {
            Value::Array(pair) if pair.len() >= 2 => Some(ToolRef::new(pair[0].as_str()?, pair[1].as_str()?)),
            Value::Object(_) => Some(ToolRef::new(
                str_field(r, &["tool_name"])?,
                str_field(r, &["api_name"])?,
            )),
            _ => None,
        })
        .collect()
}

/// Converts a ToolBench query file. Records lacking a query text or any
/// relevant API are skipped; the count of skipped records is returned.
pub fn convert_queries(input: &Path, subset: SubsetTag, vague_field: Option<&str>) -> Result<(Vec<QueryRecord>, usize)> {
    let v = read_value(input)?;
    let items = v
        .as_array()
        .ok_or_else(|| Error::invalid(format!("{}: expected a JSON array of queries", input.display())))?;
    let mut out = Vec::with_capacity(items.len());
    let mut skipped = 0;
    for (i, q) in items.iter().enumerate() {
        let Some(query) = str_field(q, &["query", "specific"]) else {
            skipped += 1;
            continue;
        };
        let ground_truth = relevant_refs(q);
        if ground_truth.is_empty() {
            skipped += 1;
            continue;
        }
        let query_id = match q.get("query_id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => format!("{}-{}", subset, i),
        };
        let vague = vague_field
            .and_then(|f| str_field(q, &[f]))
            .unwrap_or(query)
            .to_string();
        out.push(QueryRecord {
            query_id,
            vague,
            specific: Some(query.to_string()),
            ground_truth,
            subset,
        });
    }
    Ok((out, skipped))
}
