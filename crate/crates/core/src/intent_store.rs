//! Intent inventory: canned responses, exemplar centroids and the live
//! per-intent FAQ thresholds.
//!
//! Readers take an `Arc` snapshot and never observe a half-applied write.
//! Writers are serialized and publish a new snapshot (copy-on-write over
//! `Arc<IntentRecord>`), bumping the version each time. A bounded LRU sits in
//! front of per-key lookups and is invalidated on every write to that key.
//!
//! Hit counts are telemetry rather than content: they accumulate beside the
//! snapshot and are folded into records on the next write to the record or
//! on [`IntentStore::export_snapshot`], without bumping the version.
//!
//! On disk (`intents.jsonl`) the first line is a header
//! `{"version":N,"tau_ood":0.5,"record_count":K}` followed by `K` lines,
//! one [`IntentRecord`] each.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use lru::LruCache;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedding, EmbeddingError, EmbeddingProvider};

pub const DEFAULT_TAU_FAQ: f64 = 0.85;
pub const TAU_OOD: f64 = 0.5;
pub const TAU_FAQ_CEILING: f64 = 0.98;
pub const DEFAULT_CACHE_CAPACITY: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldIssue {
    pub field: &'static str,
    pub reason: String,
}

impl std::fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("validation failed: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    ValidationFailed(Vec<FieldIssue>),
    #[error("corrupt store at line {line}: {reason}")]
    CorruptStore { line: usize, reason: String },
    #[error("unknown intent `{0}`")]
    UnknownIntent(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What an admin (or an activated draft) supplies; the store derives the
/// centroid, threshold and bookkeeping fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentDefinition {
    pub intent_id: String,
    #[serde(default)]
    pub display_name: String,
    pub exemplar_texts: Vec<String>,
    pub canned_response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub intent_id: String,
    pub display_name: String,
    pub exemplar_texts: Vec<String>,
    pub exemplar_embedding: Embedding,
    pub canned_response: String,
    pub tau_faq: f64,
    pub created_at: u64,
    pub updated_at: u64,
    pub hit_count: u64,
}

impl IntentRecord {
    fn check(&self) -> Vec<FieldIssue> {
        let mut issues = Vec::new();
        if self.intent_id.trim().is_empty() {
            issues.push(FieldIssue {
                field: "intent_id",
                reason: "must not be empty".into(),
            });
        }
        if self.exemplar_texts.is_empty() {
            issues.push(FieldIssue {
                field: "exemplar_texts",
                reason: "at least one exemplar is required".into(),
            });
        }
        if self.canned_response.trim().is_empty() {
            issues.push(FieldIssue {
                field: "canned_response",
                reason: "must not be empty".into(),
            });
        }
        if !(self.tau_faq > TAU_OOD && self.tau_faq <= TAU_FAQ_CEILING) {
            issues.push(FieldIssue {
                field: "tau_faq",
                reason: format!("{} outside ({TAU_OOD}, {TAU_FAQ_CEILING}]", self.tau_faq),
            });
        }
        issues
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentStoreSnapshot {
    pub version: u64,
    pub tau_ood: f64,
    /// Sorted by `intent_id`.
    pub records: Vec<Arc<IntentRecord>>,
}

impl Default for IntentStoreSnapshot {
    fn default() -> Self {
        Self {
            version: 0,
            tau_ood: TAU_OOD,
            records: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    version: u64,
    tau_ood: f64,
    record_count: usize,
}

impl IntentStoreSnapshot {
    /// Builds a snapshot from ready-made records (tests and fixtures use this
    /// to supply arbitrary centroids). Validates every record invariant.
    pub fn from_records(version: u64, records: Vec<IntentRecord>) -> Result<Self, StoreError> {
        let mut records: Vec<Arc<IntentRecord>> = records.into_iter().map(Arc::new).collect();
        records.sort_by(|a, b| a.intent_id.cmp(&b.intent_id));
        let mut issues: Vec<FieldIssue> = records.iter().flat_map(|r| r.check()).collect();
        if records.windows(2).any(|w| w[0].intent_id == w[1].intent_id) {
            issues.push(FieldIssue {
                field: "intent_id",
                reason: "duplicate intent id".into(),
            });
        }
        if !issues.is_empty() {
            return Err(StoreError::ValidationFailed(issues));
        }
        Ok(Self {
            version,
            tau_ood: TAU_OOD,
            records,
        })
    }

    pub fn get(&self, intent_id: &str) -> Option<&Arc<IntentRecord>> {
        self.records
            .binary_search_by(|r| r.intent_id.as_str().cmp(intent_id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &IntentRecord> {
        self.records.iter().map(|r| r.as_ref())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), StoreError> {
        let header = SnapshotHeader {
            version: self.version,
            tau_ood: self.tau_ood,
            record_count: self.records.len(),
        };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for record in &self.records {
            serde_json::to_writer(&mut out, record.as_ref()).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, StoreError> {
        let corrupt = |line: usize, reason: String| StoreError::CorruptStore { line, reason };
        let mut lines = input.lines().enumerate();
        let header: SnapshotHeader = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?).map_err(|e| corrupt(1, e.to_string()))?,
            None => return Err(corrupt(1, "missing header".into())),
        };
        if header.tau_ood != TAU_OOD {
            return Err(corrupt(1, format!("tau_ood must be {TAU_OOD}, found {}", header.tau_ood)));
        }
        let mut records = Vec::with_capacity(header.record_count);
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: IntentRecord =
                serde_json::from_str(&line).map_err(|e| corrupt(idx + 1, e.to_string()))?;
            if let Some(issue) = record.check().into_iter().next() {
                return Err(corrupt(idx + 1, issue.to_string()));
            }
            records.push(record);
        }
        if records.len() != header.record_count {
            return Err(corrupt(
                records.len() + 2,
                format!("expected {} records, found {}", header.record_count, records.len()),
            ));
        }
        Self::from_records(header.version, records).map_err(|e| corrupt(0, e.to_string()))
    }
}

#[derive(Clone)]
struct CachedRecord {
    version: u64,
    record: Arc<IntentRecord>,
}

struct StoreState {
    snapshot: Arc<IntentStoreSnapshot>,
    /// Version of the last write touching each key (deletes included).
    key_versions: HashMap<String, u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

pub struct IntentStore {
    provider: Arc<dyn EmbeddingProvider>,
    state: RwLock<StoreState>,
    writer: Mutex<()>,
    cache: Mutex<LruCache<String, CachedRecord>>,
    pending_hits: Mutex<HashMap<String, u64>>,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
}

impl std::fmt::Debug for IntentStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IntentStore")
            .field("version", &self.snapshot().version)
            .finish_non_exhaustive()
    }
}

impl IntentStore {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self::with_cache_capacity(provider, DEFAULT_CACHE_CAPACITY)
    }

    pub fn with_cache_capacity(provider: Arc<dyn EmbeddingProvider>, capacity: usize) -> Self {
        Self::from_snapshot(provider, IntentStoreSnapshot::default(), capacity)
    }

    pub fn from_snapshot(
        provider: Arc<dyn EmbeddingProvider>,
        snapshot: IntentStoreSnapshot,
        cache_capacity: usize,
    ) -> Self {
        let capacity = NonZeroUsize::new(cache_capacity.max(1)).expect("non-zero");
        Self {
            provider,
            state: RwLock::new(StoreState {
                snapshot: Arc::new(snapshot),
                key_versions: HashMap::new(),
            }),
            writer: Mutex::new(()),
            cache: Mutex::new(LruCache::new(capacity)),
            pending_hits: Mutex::new(HashMap::new()),
            cache_hits: AtomicU64::new(0),
            cache_misses: AtomicU64::new(0),
        }
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    pub fn snapshot(&self) -> Arc<IntentStoreSnapshot> {
        Arc::clone(&self.state.read().snapshot)
    }

    pub fn version(&self) -> u64 {
        self.state.read().snapshot.version
    }

    /// Inserts or replaces an intent. The centroid is always recomputed from
    /// the exemplars. `tau_faq` resets to the default for new intents and
    /// whenever exemplars or the canned response change; otherwise the
    /// feedback-tuned value is kept.
    pub fn upsert_intent(
        &self,
        definition: IntentDefinition,
    ) -> Result<Arc<IntentStoreSnapshot>, StoreError> {
        let mut issues = Vec::new();
        let mut embeddings = Vec::with_capacity(definition.exemplar_texts.len());
        for (i, text) in definition.exemplar_texts.iter().enumerate() {
            match self.provider.embed(text) {
                Ok(e) => embeddings.push(e),
                Err(EmbeddingError::EmptyText) => issues.push(FieldIssue {
                    field: "exemplar_texts",
                    reason: format!("exemplar {i} has no tokens"),
                }),
                Err(e) => return Err(e.into()),
            }
        }
        let centroid = if issues.is_empty() && !embeddings.is_empty() {
            Some(Embedding::centroid(&embeddings)?)
        } else {
            None
        };

        let _guard = self.writer.lock();
        let current = self.snapshot();
        let existing = current.get(&definition.intent_id).cloned();
        let now = now_ms();
        let display_name = if definition.display_name.trim().is_empty() {
            definition.intent_id.clone()
        } else {
            definition.display_name
        };
        let mut record = IntentRecord {
            intent_id: definition.intent_id,
            display_name,
            exemplar_texts: definition.exemplar_texts,
            exemplar_embedding: match centroid {
                Some(c) => c,
                // Placeholder so the remaining field checks still run.
                None => Embedding::normalize(vec![1.0; self.provider.dimension()])?,
            },
            canned_response: definition.canned_response,
            tau_faq: DEFAULT_TAU_FAQ,
            created_at: now,
            updated_at: now,
            hit_count: 0,
        };
        issues.extend(record.check());
        if !issues.is_empty() {
            return Err(StoreError::ValidationFailed(issues));
        }
        if let Some(prev) = existing {
            record.created_at = prev.created_at;
            record.hit_count = prev.hit_count + self.take_pending_hits(&record.intent_id);
            let content_changed = prev.exemplar_texts != record.exemplar_texts
                || prev.canned_response != record.canned_response;
            if !content_changed {
                record.tau_faq = prev.tau_faq;
                if prev.display_name == record.display_name {
                    record.updated_at = prev.updated_at;
                }
            }
        }
        Ok(self.publish(&current, record.intent_id.clone(), Some(record)))
    }

    pub fn delete_intent(&self, intent_id: &str) -> Result<Arc<IntentStoreSnapshot>, StoreError> {
        let _guard = self.writer.lock();
        let current = self.snapshot();
        if current.get(intent_id).is_none() {
            return Err(StoreError::UnknownIntent(intent_id.to_owned()));
        }
        self.pending_hits.lock().remove(intent_id);
        Ok(self.publish(&current, intent_id.to_owned(), None))
    }

    /// Atomic read-modify-write of one intent's threshold. `update` receives
    /// the current value; the result must stay within `(0.5, 0.98]`.
    pub fn update_tau_faq<F>(&self, intent_id: &str, update: F) -> Result<f64, StoreError>
    where
        F: FnOnce(f64) -> f64,
    {
        let _guard = self.writer.lock();
        let current = self.snapshot();
        let prev = current
            .get(intent_id)
            .ok_or_else(|| StoreError::UnknownIntent(intent_id.to_owned()))?;
        let mut record = IntentRecord::clone(prev);
        record.tau_faq = update(prev.tau_faq);
        record.hit_count += self.take_pending_hits(intent_id);
        record.updated_at = now_ms();
        if let Some(issue) = record.check().into_iter().next() {
            return Err(StoreError::ValidationFailed(vec![issue]));
        }
        let tau = record.tau_faq;
        self.publish(&current, intent_id.to_owned(), Some(record));
        Ok(tau)
    }

    fn take_pending_hits(&self, intent_id: &str) -> u64 {
        self.pending_hits.lock().remove(intent_id).unwrap_or(0)
    }

    fn publish(
        &self,
        current: &IntentStoreSnapshot,
        key: String,
        record: Option<IntentRecord>,
    ) -> Arc<IntentStoreSnapshot> {
        let mut records = current.records.clone();
        match records.binary_search_by(|r| r.intent_id.as_str().cmp(&key)) {
            Ok(i) => match record {
                Some(r) => records[i] = Arc::new(r),
                None => {
                    records.remove(i);
                }
            },
            Err(i) => {
                if let Some(r) = record {
                    records.insert(i, Arc::new(r));
                }
            }
        }
        let version = current.version + 1;
        let snapshot = Arc::new(IntentStoreSnapshot {
            version,
            tau_ood: TAU_OOD,
            records,
        });
        {
            let mut state = self.state.write();
            state.snapshot = Arc::clone(&snapshot);
            state.key_versions.insert(key.clone(), version);
        }
        self.cache.lock().pop(&key);
        snapshot
    }

    /// Cached lookup. Returns the record and whether it came from the cache.
    pub fn lookup(&self, intent_id: &str) -> Option<(Arc<IntentRecord>, bool)> {
        let (snapshot, key_version) = {
            let state = self.state.read();
            (
                Arc::clone(&state.snapshot),
                state.key_versions.get(intent_id).copied().unwrap_or(0),
            )
        };
        {
            let mut cache = self.cache.lock();
            if let Some(entry) = cache.get(intent_id) {
                if entry.version >= key_version {
                    self.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Some((Arc::clone(&entry.record), true));
                }
                cache.pop(intent_id);
            }
        }
        self.cache_misses.fetch_add(1, Ordering::Relaxed);
        let record = Arc::clone(snapshot.get(intent_id)?);
        self.cache.lock().put(
            intent_id.to_owned(),
            CachedRecord {
                version: snapshot.version,
                record: Arc::clone(&record),
            },
        );
        Some((record, false))
    }

    pub fn cache_stats(&self) -> CacheStats {
        CacheStats {
            hits: self.cache_hits.load(Ordering::Relaxed),
            misses: self.cache_misses.load(Ordering::Relaxed),
        }
    }

    pub fn record_hit(&self, intent_id: &str) {
        *self.pending_hits.lock().entry(intent_id.to_owned()).or_default() += 1;
    }

    pub fn hit_count(&self, intent_id: &str) -> u64 {
        let base = self.snapshot().get(intent_id).map_or(0, |r| r.hit_count);
        base + self.pending_hits.lock().get(intent_id).copied().unwrap_or(0)
    }

    /// Current snapshot with pending hit counts folded in (same version).
    pub fn export_snapshot(&self) -> IntentStoreSnapshot {
        let snapshot = self.snapshot();
        let pending = self.pending_hits.lock().clone();
        let records = snapshot
            .records
            .iter()
            .map(|r| match pending.get(&r.intent_id) {
                Some(extra) => {
                    let mut r = IntentRecord::clone(r);
                    r.hit_count += extra;
                    Arc::new(r)
                }
                None => Arc::clone(r),
            })
            .collect();
        IntentStoreSnapshot {
            version: snapshot.version,
            tau_ood: snapshot.tau_ood,
            records,
        }
    }

    /// Writes the exported snapshot atomically (temp file + rename).
    pub fn persist(&self, path: &Path) -> Result<IntentStoreSnapshot, StoreError> {
        let snapshot = self.export_snapshot();
        let tmp = path.with_extension("jsonl.tmp");
        snapshot.write_jsonl(BufWriter::new(File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(snapshot)
    }

    pub fn load(
        path: &Path,
        provider: Arc<dyn EmbeddingProvider>,
        cache_capacity: usize,
    ) -> Result<Self, StoreError> {
        let snapshot = IntentStoreSnapshot::read_jsonl(BufReader::new(File::open(path)?))?;
        if let Some(r) = snapshot.records.first() {
            if r.exemplar_embedding.dimension() != provider.dimension() {
                return Err(StoreError::CorruptStore {
                    line: 2,
                    reason: format!(
                        "embedding dimension {} does not match provider dimension {}",
                        r.exemplar_embedding.dimension(),
                        provider.dimension()
                    ),
                });
            }
        }
        Ok(Self::from_snapshot(provider, snapshot, cache_capacity))
    }
}
