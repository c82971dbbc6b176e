//! Shared object pool between a broker push worker and push-based sources.
//!
//! Objects cycle FREE -> FILLED -> CONSUMING -> FREE. The push worker fills
//! and publishes; the owning source consumes and releases. Notifications
//! flow through bounded FIFO queues (broker to source) and a doorbell
//! (source to broker).

mod doorbell;
mod pool;

pub use doorbell::Doorbell;
pub use pool::{ObjectState, ObjectView, PayloadMeta, SharedObjectPool, StateCounts};

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

pub type ObjectId = u32;
pub type TaskId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("object {object} belongs to task {owner}, not {caller}")]
    WrongOwner { object: ObjectId, owner: TaskId, caller: TaskId },
    #[error("object {object}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition { object: ObjectId, from: ObjectState, to: ObjectState },
    #[error("object {0} is not leased for writing")]
    NotLeased(ObjectId),
    #[error("fill of {len} bytes exceeds object size {capacity}")]
    Overflow { len: usize, capacity: usize },
    #[error("pool closed")]
    Closed,
    #[error("group {0} already has a pool")]
    Exists(String),
}

#[derive(Debug, Error)]
pub enum ConsumeError<E> {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("handler failed")]
    Handler(E),
}

/// Registry of pools by `(stream, group)`, shared by a broker and the
/// source tasks co-located with it.
#[derive(Clone, Debug, Default)]
pub struct ObjectStore {
    pools: Arc<Mutex<HashMap<(String, String), Arc<SharedObjectPool>>>>,
}

impl ObjectStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &self,
        stream: &str,
        pool: Arc<SharedObjectPool>,
    ) -> Result<Arc<SharedObjectPool>, StoreError> {
        let key = (stream.to_string(), pool.group_id().to_string());
        let mut pools = self.pools.lock();
        if pools.contains_key(&key) {
            return Err(StoreError::Exists(key.1));
        }
        pools.insert(key, Arc::clone(&pool));
        Ok(pool)
    }

    pub fn attach(&self, stream: &str, group_id: &str) -> Option<Arc<SharedObjectPool>> {
        self.pools
            .lock()
            .get(&(stream.to_string(), group_id.to_string()))
            .cloned()
    }

    pub fn remove(&self, stream: &str, group_id: &str) -> Option<Arc<SharedObjectPool>> {
        self.pools
            .lock()
            .remove(&(stream.to_string(), group_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.pools.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
