//! Disease knowledge base: JSONL ingestion, on-disk storage and id lookup.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a knowledge-base file: {0}")]
    BadHeader(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseDoc {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub diagnosis_knowledge: String,
}

impl DiseaseDoc {
    /// Text that represents the document to the retriever.
    pub fn text(&self) -> String {
        let mut parts = vec![self.name.clone()];
        if !self.aliases.is_empty() {
            parts.push(self.aliases.join(", "));
        }
        for extra in [&self.description, &self.diagnosis_knowledge] {
            if !extra.is_empty() {
                parts.push(extra.clone());
            }
        }
        parts.join(". ")
    }

    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.name.trim().is_empty() {
            return Err("empty name".into());
        }
        let mut seen = HashSet::new();
        for a in &self.aliases {
            if !seen.insert(a.as_str()) {
                return Err(format!("duplicate alias '{a}'"));
            }
        }
        Ok(())
    }
}

/// A record that was parsed but not stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub line: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub ingested: usize,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeBase {
    docs: BTreeMap<String, DiseaseDoc>,
    version: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u64,
    count: usize,
}

const FORMAT: &str = "medreason-kb/1";

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a JSONL stream of documents into a fresh knowledge base.
    pub fn ingest<R: BufRead>(source: R) -> Result<(Self, IngestReport), KbError> {
        let mut kb = Self::new();
        let report = kb.ingest_into(source)?;
        Ok((kb, report))
    }

    /// Adds every valid record of `source`. A malformed line aborts with its
    /// 1-based line number; a duplicate id is rejected and the earlier record kept.
    pub fn ingest_into<R: BufRead>(&mut self, source: R) -> Result<IngestReport, KbError> {
        let mut report = IngestReport::default();
        for (idx, line) in source.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: DiseaseDoc = serde_json::from_str(&line)
                .map_err(|e| KbError::Malformed { line: line_no, message: e.to_string() })?;
            if let Err(reason) = doc.check() {
                if doc.id.trim().is_empty() || doc.name.trim().is_empty() {
                    return Err(KbError::Malformed { line: line_no, message: reason });
                }
                report.rejections.push(Rejection { line: line_no, id: doc.id, reason });
                continue;
            }
            match self.insert(doc) {
                Ok(()) => report.ingested += 1,
                Err(id) => report.rejections.push(Rejection { line: line_no, id, reason: "duplicate id".into() }),
            }
        }
        Ok(report)
    }

    /// Inserts `doc` unless its id is already present; returns the id on rejection.
    pub fn insert(&mut self, doc: DiseaseDoc) -> Result<(), String> {
        if self.docs.contains_key(&doc.id) {
            return Err(doc.id);
        }
        self.docs.insert(doc.id.clone(), doc);
        self.version += 1;
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&DiseaseDoc> {
        self.docs.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.docs.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Documents in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &DiseaseDoc> {
        self.docs.values()
    }

    /// Display name for `id`, falling back to the id itself.
    pub fn name_of<'a>(&'a self, id: &'a str) -> &'a str {
        self.get(id).map(|d| d.name.as_str()).unwrap_or(id)
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Header { format: FORMAT.into(), version: self.version, count: self.docs.len() };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for doc in self.docs.values() {
            writeln!(w, "{}", serde_json::to_string(doc).expect("doc serializes"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn open(path: &Path) -> Result<Self, KbError> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines.next().ok_or_else(|| KbError::BadHeader("empty file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| KbError::BadHeader(e.to_string()))?;
        if header.format != FORMAT {
            return Err(KbError::BadHeader(format!("unknown format '{}'", header.format)));
        }
        let mut docs = BTreeMap::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let doc: DiseaseDoc = serde_json::from_str(&line)
                .map_err(|e| KbError::Malformed { line: idx + 2, message: e.to_string() })?;
            docs.insert(doc.id.clone(), doc);
        }
        if docs.len() != header.count {
            return Err(KbError::BadHeader(format!("header declares {} docs, found {}", header.count, docs.len())));
        }
        Ok(Self { docs, version: header.version })
    }
}

impl FromIterator<DiseaseDoc> for KnowledgeBase {
    /// Later duplicates are dropped, matching `ingest`.
    fn from_iter<T: IntoIterator<Item = DiseaseDoc>>(iter: T) -> Self {
        let mut kb = Self::new();
        for doc in iter {
            let _ = kb.insert(doc);
        }
        kb
    }
}
