//! The schema cache: storage, exact top-k retrieval, access statistics,
//! replacement and JSONL persistence.
//!
//! Readers (`search_top_k`, snapshots) and writers (`put`, `replace`,
//! `record_access`) go through one `RwLock`, so a search sees the cache
//! either before or after a write.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{cosine, EmbeddingVector};
use crate::error::{Error, Result};

pub const STORE_FORMAT: &str = "errsight-schema-store";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSchema {
    pub id: String,
    /// Observable patterns that mark the error.
    pub signatures: String,
    /// Conditions and interaction sequences that precede it.
    pub context_analysis: String,
    /// Questions and rules for spotting it in a new trajectory.
    pub detection_heuristics: String,
    pub mistake_agent: String,
    pub mistake_step: usize,
    pub mistake_reason: String,
    pub source_trajectory_id: String,
    /// Embedding of [`ErrorSchema::retrieval_text`]; used for retrieval.
    pub embedding: EmbeddingVector,
    /// Embedding of the condensed source trajectory; used by the novelty test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_embedding: Option<EmbeddingVector>,
    pub created_by: String,
}

impl ErrorSchema {
    pub fn retrieval_text(&self) -> String {
        retrieval_text(&self.signatures, &self.context_analysis, &self.detection_heuristics)
    }

    pub fn check(&self) -> Result<()> {
        for (name, value) in [
            ("id", &self.id),
            ("signatures", &self.signatures),
            ("context_analysis", &self.context_analysis),
            ("detection_heuristics", &self.detection_heuristics),
        ] {
            if value.trim().is_empty() {
                return Err(Error::violation(format!("schema field `{name}` must be non-empty")));
            }
        }
        if let Some(src) = &self.source_embedding {
            if !src.is_compatible(&self.embedding) {
                return Err(Error::violation("source_embedding does not match the schema embedding backend"));
            }
        }
        Ok(())
    }
}

/// Text embedded for retrieval: the three analysis sections, without the
/// agent/step block.
pub fn retrieval_text(signatures: &str, context_analysis: &str, detection_heuristics: &str) -> String {
    format!(
        "Error Signatures:\n{}\n\nError Context Analysis:\n{}\n\nDetection Heuristics:\n{}",
        signatures.trim(),
        context_analysis.trim(),
        detection_heuristics.trim()
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub schema: ErrorSchema,
    pub access_count: u64,
    #[serde(default)]
    pub last_hit: Option<DateTime<Utc>>,
    pub insert_seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub entry: CacheEntry,
    pub similarity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    backend_tag: String,
    dim: usize,
    next_seq: u64,
}

#[derive(Debug, Default)]
struct Inner {
    /// Ascending `insert_seq`.
    entries: Vec<CacheEntry>,
    next_seq: u64,
}

impl Inner {
    fn position(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.schema.id == id)
    }

    fn take_seq(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }
}

#[derive(Debug)]
pub struct SchemaCache {
    backend_tag: String,
    dim: usize,
    /// Optional LRU bound; `None` never evicts.
    max_entries: Option<usize>,
    inner: RwLock<Inner>,
}

impl SchemaCache {
    pub fn new(backend_tag: impl Into<String>, dim: usize) -> Self {
        SchemaCache {
            backend_tag: backend_tag.into(),
            dim,
            max_entries: None,
            inner: RwLock::new(Inner::default()),
        }
    }

    pub fn with_max_entries(mut self, max_entries: Option<usize>) -> Self {
        self.max_entries = max_entries.filter(|m| *m > 0);
        self
    }

    pub fn backend_tag(&self) -> &str {
        &self.backend_tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.inner.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<CacheEntry> {
        let inner = self.inner.read();
        inner.position(id).map(|i| inner.entries[i].clone())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inner.read().position(id).is_some()
    }

    /// All entries in insertion order.
    pub fn entries(&self) -> Vec<CacheEntry> {
        self.inner.read().entries.clone()
    }

    fn check_vector(&self, v: &EmbeddingVector, what: &str) -> Result<()> {
        if v.dim() != self.dim || v.backend_tag() != self.backend_tag {
            return Err(Error::invalid(format!(
                "{what} is {}/{} but the store holds {}/{}",
                v.backend_tag(),
                v.dim(),
                self.backend_tag,
                self.dim
            )));
        }
        Ok(())
    }

    fn check_schema(&self, s: &ErrorSchema) -> Result<()> {
        s.check()?;
        self.check_vector(&s.embedding, "schema embedding")
            .map_err(|e| Error::SchemaViolation(e.to_string()))
    }

    pub fn put(&self, schema: ErrorSchema) -> Result<String> {
        self.check_schema(&schema)?;
        let mut inner = self.inner.write();
        if inner.position(&schema.id).is_some() {
            return Err(Error::DuplicateEntry(schema.id));
        }
        if let Some(max) = self.max_entries {
            while inner.entries.len() >= max {
                let victim = inner
                    .entries
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, e)| (e.last_hit, e.insert_seq))
                    .map(|(i, _)| i)
                    .expect("non-empty");
                inner.entries.remove(victim);
            }
        }
        let id = schema.id.clone();
        let insert_seq = inner.take_seq();
        inner.entries.push(CacheEntry { schema, access_count: 0, last_hit: None, insert_seq });
        Ok(id)
    }

    /// Exact top-k by cosine similarity, descending; ties go to the older
    /// entry. Entries whose source trajectory is in `exclude` are skipped.
    /// Access counts are not touched.
    pub fn search_top_k(&self, query: &EmbeddingVector, k: usize, exclude: &HashSet<String>) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        self.check_vector(query, "query")?;
        let inner = self.inner.read();
        let mut scored = Vec::with_capacity(inner.entries.len());
        for e in &inner.entries {
            if exclude.contains(&e.schema.source_trajectory_id) {
                continue;
            }
            scored.push((cosine(query, &e.schema.embedding)?, e));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.insert_seq.cmp(&b.1.insert_seq)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(similarity, e)| Hit { entry: e.clone(), similarity })
            .collect())
    }

    /// Adds one access per occurrence of each id. Known ids are updated even
    /// when some ids are unknown; the unknown ones are reported together.
    pub fn record_access(&self, ids: &[String]) -> Result<Vec<(String, u64)>> {
        let now = Utc::now();
        let mut inner = self.inner.write();
        let mut unknown = Vec::new();
        let mut updated = Vec::new();
        for id in ids {
            match inner.position(id) {
                Some(i) => {
                    let e = &mut inner.entries[i];
                    e.access_count += 1;
                    e.last_hit = Some(now);
                    updated.push((id.clone(), e.access_count));
                }
                None => unknown.push(id.clone()),
            }
        }
        if unknown.is_empty() {
            Ok(updated)
        } else {
            Err(Error::NotFound(unknown))
        }
    }

    /// Swaps `old_id` for `new_schema` in one write. The new entry starts at
    /// zero accesses with a fresh sequence number.
    pub fn replace(&self, old_id: &str, new_schema: ErrorSchema) -> Result<String> {
        self.check_schema(&new_schema)?;
        let mut inner = self.inner.write();
        let pos = inner.position(old_id).ok_or_else(|| Error::NotFound(vec![old_id.to_string()]))?;
        if new_schema.id != old_id && inner.position(&new_schema.id).is_some() {
            return Err(Error::DuplicateEntry(new_schema.id));
        }
        inner.entries.remove(pos);
        let id = new_schema.id.clone();
        let insert_seq = inner.take_seq();
        inner.entries.push(CacheEntry { schema: new_schema, access_count: 0, last_hit: None, insert_seq });
        Ok(id)
    }

    /// SHA-256 over the schema contents in insertion order, ignoring access
    /// statistics. Identifies which schema set an evaluation ran against.
    pub fn content_hash(&self) -> String {
        let inner = self.inner.read();
        let mut h = Sha256::new();
        h.update(self.backend_tag.as_bytes());
        for e in &inner.entries {
            h.update(serde_json::to_vec(&e.schema).expect("schema serializes"));
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let inner = self.inner.read();
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            let header = Header {
                format: STORE_FORMAT.into(),
                version: STORE_VERSION,
                backend_tag: self.backend_tag.clone(),
                dim: self.dim,
                next_seq: inner.next_seq,
            };
            serde_json::to_writer(&mut w, &header).map_err(|e| Error::Internal(e.to_string()))?;
            w.write_all(b"\n")?;
            for e in &inner.entries {
                serde_json::to_writer(&mut w, e).map_err(|e| Error::Internal(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn restore(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::ParseLine {
                line: 1,
                message: format!("bad store header: {e}"),
            })?,
            None => {
                return Err(Error::ParseLine { line: 1, message: "empty store file".into() });
            }
        };
        if header.format != STORE_FORMAT || header.version != STORE_VERSION {
            return Err(Error::IncompatibleStore(format!(
                "unsupported store format {} v{}",
                header.format, header.version
            )));
        }
        let cache = SchemaCache::new(header.backend_tag, header.dim);
        {
            let mut inner = cache.inner.write();
            for (n, line) in lines {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry = serde_json::from_str(&line).map_err(|e| Error::ParseLine {
                    line: n + 1,
                    message: e.to_string(),
                })?;
                cache
                    .check_schema(&entry.schema)
                    .map_err(|e| Error::ParseLine { line: n + 1, message: e.to_string() })?;
                if inner.position(&entry.schema.id).is_some() {
                    return Err(Error::ParseLine {
                        line: n + 1,
                        message: format!("duplicate schema id {:?}", entry.schema.id),
                    });
                }
                if entry.insert_seq >= header.next_seq {
                    return Err(Error::ParseLine {
                        line: n + 1,
                        message: "insert_seq not below header next_seq".into(),
                    });
                }
                inner.entries.push(entry);
            }
            inner.entries.sort_by_key(|e| e.insert_seq);
            inner.next_seq = header.next_seq;
        }
        Ok(cache)
    }

    /// Restores and checks that the store was written with `backend_tag`/`dim`.
    pub fn restore_expecting(path: &Path, backend_tag: &str, dim: usize) -> Result<Self> {
        let cache = Self::restore(path)?;
        if cache.backend_tag != backend_tag || cache.dim != dim {
            return Err(Error::IncompatibleStore(format!(
                "store was built with {}/{}, engine uses {backend_tag}/{dim}",
                cache.backend_tag, cache.dim
            )));
        }
        Ok(cache)
    }
}
