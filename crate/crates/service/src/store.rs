//! In-memory dataset store keyed by unguessable ids.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::Serialize;

/// Inferred type of an uploaded column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    /// Every value is 0 or 1.
    Binary,
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSummary {
    pub name: String,
    pub kind: ColumnKind,
    /// Distinct values of a categorical column, in order of appearance.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub rows: usize,
    pub columns: Vec<ColumnSummary>,
}

/// Uploaded CSV; never modified after insertion.
#[derive(Debug)]
pub struct StoredDataset {
    pub bytes: Vec<u8>,
    pub summary: DatasetSummary,
}

struct Entry {
    data: Arc<StoredDataset>,
    last_used: Instant,
}

#[derive(Debug, Clone, Copy)]
pub struct StoreLimits {
    pub idle_timeout: Duration,
    pub max_datasets: usize,
    pub max_total_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InsertError {
    Full,
}

/// Shared store; every access goes through one mutex.
#[derive(Clone)]
pub struct SessionStore {
    inner: Arc<Mutex<HashMap<String, Entry>>>,
    limits: StoreLimits,
}

impl SessionStore {
    pub fn new(limits: StoreLimits) -> Self {
        Self { inner: Arc::new(Mutex::new(HashMap::new())), limits }
    }

    /// 128 random bits, hex encoded.
    fn fresh_id() -> String {
        let mut bytes = [0u8; 16];
        rand::rng().fill_bytes(&mut bytes);
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn insert(&self, data: StoredDataset) -> Result<String, InsertError> {
        let mut map = self.inner.lock().expect("store lock");
        Self::evict_locked(&mut map, self.limits.idle_timeout);
        let used: usize = map.values().map(|e| e.data.bytes.len()).sum();
        if map.len() >= self.limits.max_datasets || used + data.bytes.len() > self.limits.max_total_bytes {
            return Err(InsertError::Full);
        }
        let mut id = Self::fresh_id();
        while map.contains_key(&id) {
            id = Self::fresh_id();
        }
        map.insert(id.clone(), Entry { data: Arc::new(data), last_used: Instant::now() });
        Ok(id)
    }

    /// Dataset `id`, refreshing its idle clock.
    pub fn get(&self, id: &str) -> Option<Arc<StoredDataset>> {
        let mut map = self.inner.lock().expect("store lock");
        Self::evict_locked(&mut map, self.limits.idle_timeout);
        map.get_mut(id).map(|e| {
            e.last_used = Instant::now();
            Arc::clone(&e.data)
        })
    }

    pub fn evict_idle(&self) -> usize {
        let mut map = self.inner.lock().expect("store lock");
        Self::evict_locked(&mut map, self.limits.idle_timeout)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn evict_locked(map: &mut HashMap<String, Entry>, idle: Duration) -> usize {
        let before = map.len();
        let now = Instant::now();
        map.retain(|_, e| now.duration_since(e.last_used) < idle);
        before - map.len()
    }
}
