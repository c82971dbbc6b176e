use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::shared_store::Doorbell;
use crate::stream::Partition;

/// A stream's partitions as seen by the broker. Each partition is written by
/// exactly one lane; readers take short read locks on published chunks.
#[derive(Debug)]
pub(crate) struct TopicState {
    pub name: String,
    pub partitions: Vec<RwLock<Partition>>,
    watchers: Mutex<Vec<Arc<Doorbell>>>,
}

impl TopicState {
    pub fn new(name: &str, partitions: u32, segment_bytes: usize, max_chunk_bytes: usize) -> Self {
        Self {
            name: name.to_string(),
            partitions: (0..partitions)
                .map(|id| {
                    RwLock::new(Partition::new(id, segment_bytes).with_max_chunk_bytes(max_chunk_bytes))
                })
                .collect(),
            watchers: Mutex::new(Vec::new()),
        }
    }

    pub fn partition_count(&self) -> u32 {
        self.partitions.len() as u32
    }

    pub fn watch(&self, bell: Arc<Doorbell>) {
        self.watchers.lock().push(bell);
    }

    pub fn unwatch(&self, bell: &Arc<Doorbell>) {
        let mut w = self.watchers.lock();
        if let Some(i) = w.iter().position(|b| Arc::ptr_eq(b, bell)) {
            w.swap_remove(i);
        }
    }

    /// Wakes push workers after new data became visible.
    pub fn notify_watchers(&self) {
        for b in self.watchers.lock().iter() {
            b.ring();
        }
    }

    pub fn heads(&self) -> Vec<u64> {
        self.partitions.iter().map(|p| p.read().head_offset()).collect()
    }
}

type Completion<T> = Box<dyn FnOnce(Vec<T>) + Send>;

/// Collects one result per fan-out part; the last part to finish runs the
/// completion on its own thread.
pub(crate) struct Join<T> {
    inner: Mutex<JoinInner<T>>,
}

struct JoinInner<T> {
    results: Vec<Option<T>>,
    remaining: usize,
    done: Option<Completion<T>>,
}

impl<T: Send> Join<T> {
    pub fn new(parts: usize, done: impl FnOnce(Vec<T>) + Send + 'static) -> Arc<Self> {
        let j = Arc::new(Self {
            inner: Mutex::new(JoinInner {
                results: (0..parts).map(|_| None).collect(),
                remaining: parts,
                done: Some(Box::new(done)),
            }),
        });
        if parts == 0 {
            j.finish();
        }
        j
    }

    pub fn complete(&self, part: usize, value: T) {
        let ready = {
            let mut g = self.inner.lock();
            debug_assert!(g.results[part].is_none());
            g.results[part] = Some(value);
            g.remaining -= 1;
            g.remaining == 0
        };
        if ready {
            self.finish();
        }
    }

    fn finish(&self) {
        let (results, done) = {
            let mut g = self.inner.lock();
            let results = g.results.drain(..).map(|r| r.expect("all parts complete")).collect();
            (results, g.done.take())
        };
        if let Some(done) = done {
            done(results);
        }
    }
}
