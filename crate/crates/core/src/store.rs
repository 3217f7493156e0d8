//! CWE-indexed repair-pattern knowledge base, persisted as JSONL.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CweLabel;
use crate::extraction::{source_side_for, RepairPattern, SourceSide};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("pattern {pattern_id} rejected: {reason}")]
    Rejected { pattern_id: String, reason: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// On-disk pattern record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternRecord {
    pub pattern_id: String,
    pub pair_id: String,
    pub cwe_id: String,
    pub cwe_name: String,
    pub action: String,
    pub key_element: String,
    pub source_side: SourceSide,
    pub validation_text: String,
}

impl From<&RepairPattern> for PatternRecord {
    fn from(p: &RepairPattern) -> Self {
        PatternRecord {
            pattern_id: p.pattern_id.clone(),
            pair_id: p.pair_id.clone(),
            cwe_id: p.cwe.id.clone(),
            cwe_name: p.cwe.name.clone(),
            action: p.action.clone(),
            key_element: p.key_element.clone(),
            source_side: p.source_side,
            validation_text: p.validation_text.clone(),
        }
    }
}

impl From<PatternRecord> for RepairPattern {
    fn from(r: PatternRecord) -> Self {
        RepairPattern {
            pattern_id: r.pattern_id,
            pair_id: r.pair_id,
            cwe: CweLabel::new(r.cwe_id, r.cwe_name),
            action: r.action,
            key_element: r.key_element,
            source_side: r.source_side,
            validation_text: r.validation_text,
            novel_action: false,
        }
    }
}

/// Patterns in insertion order with CWE and pair indexes.
///
/// Single writer; `&PatternStore` can be shared freely between readers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatternStore {
    patterns: IndexMap<String, RepairPattern>,
    by_cwe: HashMap<String, Vec<String>>,
    by_pair: HashMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub total: usize,
    pub per_cwe: BTreeMap<String, usize>,
    pub actions: BTreeMap<String, usize>,
}

impl PatternStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Inserts `pattern`, replacing any earlier pattern for the same pair.
    /// The replacement moves to the end of the insertion order.
    pub fn put(&mut self, pattern: RepairPattern) -> Result<(), StoreError> {
        let reject = |reason: &str| StoreError::Rejected { pattern_id: pattern.pattern_id.clone(), reason: reason.into() };
        if pattern.pattern_id.is_empty() || pattern.pair_id.is_empty() {
            return Err(reject("empty pattern or pair id"));
        }
        if !pattern.cwe.is_valid_id() {
            return Err(reject("invalid CWE id"));
        }
        if pattern.key_element.is_empty() || !pattern.validation_text.contains(&pattern.key_element) {
            return Err(reject("key element is not a substring of its validation text"));
        }
        if source_side_for(&pattern.action) != pattern.source_side {
            return Err(reject("source side does not match action"));
        }
        if let Some(existing) = self.patterns.get(&pattern.pattern_id) {
            if existing.pair_id != pattern.pair_id {
                return Err(reject("pattern id already used by another pair"));
            }
        }

        if let Some(old_id) = self.by_pair.get(&pattern.pair_id).cloned() {
            self.remove(&old_id);
        }
        self.by_cwe.entry(pattern.cwe.id.clone()).or_default().push(pattern.pattern_id.clone());
        self.by_pair.insert(pattern.pair_id.clone(), pattern.pattern_id.clone());
        self.patterns.insert(pattern.pattern_id.clone(), pattern);
        Ok(())
    }

    fn remove(&mut self, pattern_id: &str) {
        if let Some(old) = self.patterns.shift_remove(pattern_id) {
            if let Some(ids) = self.by_cwe.get_mut(&old.cwe.id) {
                ids.retain(|id| id != pattern_id);
                if ids.is_empty() {
                    self.by_cwe.remove(&old.cwe.id);
                }
            }
            self.by_pair.remove(&old.pair_id);
        }
    }

    pub fn get(&self, pattern_id: &str) -> Option<&RepairPattern> {
        self.patterns.get(pattern_id)
    }

    pub fn get_by_pair(&self, pair_id: &str) -> Option<&RepairPattern> {
        self.by_pair.get(pair_id).and_then(|id| self.patterns.get(id))
    }

    /// Patterns for `cwe_id`, in insertion order.
    pub fn query_by_cwe(&self, cwe_id: &str) -> Vec<&RepairPattern> {
        self.by_cwe
            .get(cwe_id)
            .map(|ids| ids.iter().filter_map(|id| self.patterns.get(id)).collect())
            .unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RepairPattern> {
        self.patterns.values()
    }

    /// A new store holding only the patterns accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&RepairPattern) -> bool) -> PatternStore {
        let mut out = PatternStore::new();
        for p in self.iter().filter(|p| keep(p)) {
            out.put(p.clone()).expect("pattern was valid on insert");
        }
        out
    }

    pub fn stats(&self) -> StoreStats {
        let mut stats = StoreStats { total: self.len(), ..Default::default() };
        for p in self.iter() {
            *stats.per_cwe.entry(p.cwe.id.clone()).or_default() += 1;
            *stats.actions.entry(p.action.clone()).or_default() += 1;
        }
        stats
    }

    pub fn to_jsonl(&self) -> String {
        self.iter()
            .map(|p| serde_json::to_string(&PatternRecord::from(p)).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, StoreError> {
        let mut store = PatternStore::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: PatternRecord = serde_json::from_str(line)
                .map_err(|e| StoreError::Parse { line: idx + 1, message: e.to_string() })?;
            store.put(record.into())?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}
