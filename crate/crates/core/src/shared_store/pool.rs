use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;

use super::doorbell::Doorbell;
use super::{ConsumeError, ObjectId, StoreError, TaskId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectState {
    Free,
    Filled,
    Consuming,
}

impl ObjectState {
    /// The only legal edges of the object lifecycle.
    pub fn can_move_to(self, next: ObjectState) -> bool {
        matches!(
            (self, next),
            (ObjectState::Free, ObjectState::Filled)
                | (ObjectState::Filled, ObjectState::Consuming)
                | (ObjectState::Consuming, ObjectState::Free)
        )
    }
}

/// What a filled object holds: one chunk of one partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PayloadMeta {
    pub partition_id: u32,
    pub base_offset: u64,
    pub record_count: u32,
}

/// Read-only view of a filled object handed to a consumer.
#[derive(Clone, Copy, Debug)]
pub struct ObjectView<'a> {
    pub object_id: ObjectId,
    pub meta: PayloadMeta,
    pub bytes: &'a [u8],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StateCounts {
    pub free: usize,
    pub filled: usize,
    pub consuming: usize,
    /// Free objects currently leased to the push worker for writing.
    pub leased: usize,
}

impl StateCounts {
    pub fn total(&self) -> usize {
        self.free + self.filled + self.consuming
    }
}

struct Slot {
    state: ObjectState,
    leased: bool,
    buffer: Vec<u8>,
    meta: PayloadMeta,
}

struct Object {
    owner: TaskId,
    slot: Mutex<Slot>,
}

type Observer = Box<dyn Fn(ObjectId, ObjectState, ObjectState) + Send + Sync>;

/// Fixed set of reusable buffers, `objects_per_consumer` per source task.
///
/// The push worker leases a free object, writes it and publishes it; the
/// owning task is notified in fill order, consumes the bytes in place and
/// releases the object, which rings the broker-side doorbell.
pub struct SharedObjectPool {
    group_id: String,
    object_size: usize,
    objects_per_consumer: usize,
    objects: Vec<Object>,
    by_task: HashMap<TaskId, Range<usize>>,
    notify: HashMap<TaskId, (Sender<ObjectId>, Receiver<ObjectId>)>,
    broker_signal: Arc<Doorbell>,
    close_tx: Mutex<Option<Sender<()>>>,
    close_rx: Receiver<()>,
    observer: Option<Observer>,
}

impl fmt::Debug for SharedObjectPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SharedObjectPool")
            .field("group_id", &self.group_id)
            .field("object_size", &self.object_size)
            .field("objects", &self.objects.len())
            .finish_non_exhaustive()
    }
}

impl SharedObjectPool {
    /// Object ids are assigned contiguously per task, in the order given.
    pub fn new(
        group_id: impl Into<String>,
        tasks: &[TaskId],
        objects_per_consumer: usize,
        object_size: usize,
        broker_signal: Arc<Doorbell>,
    ) -> Self {
        let mut objects = Vec::with_capacity(tasks.len() * objects_per_consumer);
        let mut by_task = HashMap::new();
        let mut notify = HashMap::new();
        for &task in tasks {
            let start = objects.len();
            for _ in 0..objects_per_consumer {
                objects.push(Object {
                    owner: task,
                    slot: Mutex::new(Slot {
                        state: ObjectState::Free,
                        leased: false,
                        buffer: Vec::with_capacity(object_size),
                        meta: PayloadMeta::default(),
                    }),
                });
            }
            by_task.insert(task, start..objects.len());
            notify.insert(task, crossbeam_channel::bounded(objects_per_consumer));
        }
        let (close_tx, close_rx) = crossbeam_channel::bounded(0);
        Self {
            group_id: group_id.into(),
            object_size,
            objects_per_consumer,
            objects,
            by_task,
            notify,
            broker_signal,
            close_tx: Mutex::new(Some(close_tx)),
            close_rx,
            observer: None,
        }
    }

    /// Installs a callback invoked (under the object's lock) on every state
    /// change.
    pub fn with_observer(
        mut self,
        f: impl Fn(ObjectId, ObjectState, ObjectState) + Send + Sync + 'static,
    ) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn object_size(&self) -> usize {
        self.object_size
    }

    pub fn objects_per_consumer(&self) -> usize {
        self.objects_per_consumer
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.by_task.keys().copied()
    }

    pub fn broker_signal(&self) -> &Arc<Doorbell> {
        &self.broker_signal
    }

    pub fn owner(&self, id: ObjectId) -> Result<TaskId, StoreError> {
        self.object(id).map(|o| o.owner)
    }

    fn object(&self, id: ObjectId) -> Result<&Object, StoreError> {
        self.objects
            .get(id as usize)
            .ok_or(StoreError::UnknownObject(id))
    }

    fn owned(&self, task: TaskId, id: ObjectId) -> Result<&Object, StoreError> {
        let o = self.object(id)?;
        if o.owner != task {
            return Err(StoreError::WrongOwner {
                object: id,
                owner: o.owner,
                caller: task,
            });
        }
        Ok(o)
    }

    fn transition(&self, id: ObjectId, slot: &mut Slot, to: ObjectState) -> Result<(), StoreError> {
        let from = slot.state;
        if !from.can_move_to(to) {
            return Err(StoreError::IllegalTransition { object: id, from, to });
        }
        slot.state = to;
        if let Some(obs) = &self.observer {
            obs(id, from, to);
        }
        Ok(())
    }

    /// Leases a free object of `task` for writing, or `None` when every
    /// object of the task is busy.
    pub fn acquire_free(&self, task: TaskId) -> Option<ObjectId> {
        let range = self.by_task.get(&task)?.clone();
        for idx in range {
            let mut slot = self.objects[idx].slot.lock();
            if slot.state == ObjectState::Free && !slot.leased {
                slot.leased = true;
                return Some(idx as ObjectId);
            }
        }
        None
    }

    /// Returns a lease without publishing.
    pub fn cancel_lease(&self, id: ObjectId) -> Result<(), StoreError> {
        let mut slot = self.object(id)?.slot.lock();
        if !slot.leased {
            return Err(StoreError::NotLeased(id));
        }
        slot.leased = false;
        Ok(())
    }

    /// Writes into a leased object's buffer. `write` receives the cleared
    /// buffer; its final length must not exceed the object size.
    pub fn fill(
        &self,
        id: ObjectId,
        meta: PayloadMeta,
        write: impl FnOnce(&mut Vec<u8>),
    ) -> Result<usize, StoreError> {
        let mut slot = self.object(id)?.slot.lock();
        if slot.state != ObjectState::Free || !slot.leased {
            return Err(StoreError::NotLeased(id));
        }
        slot.buffer.clear();
        write(&mut slot.buffer);
        let len = slot.buffer.len();
        if len > self.object_size {
            slot.buffer.clear();
            return Err(StoreError::Overflow {
                len,
                capacity: self.object_size,
            });
        }
        slot.meta = meta;
        Ok(len)
    }

    /// FREE -> FILLED, then notifies the owner.
    pub fn publish_filled(&self, id: ObjectId) -> Result<(), StoreError> {
        let obj = self.object(id)?;
        {
            let mut slot = obj.slot.lock();
            self.transition(id, &mut slot, ObjectState::Filled)?;
            slot.leased = false;
        }
        let (tx, _) = &self.notify[&obj.owner];
        // Capacity equals the object count, so this never blocks.
        tx.send(id).map_err(|_| StoreError::Closed)
    }

    /// Next filled object id for `task`, in fill order. `Ok(None)` on timeout,
    /// `Err(Closed)` once the pool is closed.
    pub fn recv_notification(
        &self,
        task: TaskId,
        timeout: Duration,
    ) -> Result<Option<ObjectId>, StoreError> {
        let (_, rx) = self.notify.get(&task).ok_or(StoreError::UnknownTask(task))?;
        if let Ok(id) = rx.try_recv() {
            return Ok(Some(id));
        }
        crossbeam_channel::select! {
            recv(rx) -> id => Ok(id.ok()),
            recv(self.close_rx) -> _ => Err(StoreError::Closed),
            default(timeout) => Ok(None),
        }
    }

    /// Non-blocking drain of pending notifications for `task`.
    pub fn try_notifications(&self, task: TaskId) -> Vec<ObjectId> {
        self.notify
            .get(&task)
            .map(|(_, rx)| rx.try_iter().collect())
            .unwrap_or_default()
    }

    /// Runs `handler` over the filled object in place, then releases it.
    /// On handler error the object stays FILLED.
    pub fn consume_and_release<R, E>(
        &self,
        task: TaskId,
        id: ObjectId,
        handler: impl FnOnce(ObjectView<'_>) -> Result<R, E>,
    ) -> Result<R, ConsumeError<E>> {
        let obj = self.owned(task, id)?;
        let mut slot = obj.slot.lock();
        if slot.state != ObjectState::Filled {
            return Err(StoreError::IllegalTransition {
                object: id,
                from: slot.state,
                to: ObjectState::Consuming,
            }
            .into());
        }
        let out = handler(ObjectView {
            object_id: id,
            meta: slot.meta,
            bytes: &slot.buffer,
        })
        .map_err(ConsumeError::Handler)?;
        self.transition(id, &mut slot, ObjectState::Consuming)?;
        self.transition(id, &mut slot, ObjectState::Free)?;
        drop(slot);
        self.broker_signal.ring();
        Ok(out)
    }

    /// FILLED -> CONSUMING, for consumers that process an object across calls.
    pub fn begin_consume(&self, task: TaskId, id: ObjectId) -> Result<(), StoreError> {
        let obj = self.owned(task, id)?;
        let mut slot = obj.slot.lock();
        self.transition(id, &mut slot, ObjectState::Consuming)
    }

    /// Reads an object that is FILLED or CONSUMING.
    pub fn read<R>(
        &self,
        task: TaskId,
        id: ObjectId,
        f: impl FnOnce(ObjectView<'_>) -> R,
    ) -> Result<R, StoreError> {
        let obj = self.owned(task, id)?;
        let slot = obj.slot.lock();
        if slot.state == ObjectState::Free {
            return Err(StoreError::IllegalTransition {
                object: id,
                from: ObjectState::Free,
                to: ObjectState::Consuming,
            });
        }
        Ok(f(ObjectView {
            object_id: id,
            meta: slot.meta,
            bytes: &slot.buffer,
        }))
    }

    /// CONSUMING -> FREE and rings the broker side.
    pub fn finish_consume(&self, task: TaskId, id: ObjectId) -> Result<(), StoreError> {
        let obj = self.owned(task, id)?;
        {
            let mut slot = obj.slot.lock();
            self.transition(id, &mut slot, ObjectState::Free)?;
        }
        self.broker_signal.ring();
        Ok(())
    }

    pub fn state(&self, id: ObjectId) -> Result<ObjectState, StoreError> {
        Ok(self.object(id)?.slot.lock().state)
    }

    pub fn counts(&self, task: TaskId) -> StateCounts {
        let mut c = StateCounts::default();
        if let Some(range) = self.by_task.get(&task) {
            for o in &self.objects[range.clone()] {
                let s = o.slot.lock();
                match s.state {
                    ObjectState::Free => c.free += 1,
                    ObjectState::Filled => c.filled += 1,
                    ObjectState::Consuming => c.consuming += 1,
                }
                if s.leased {
                    c.leased += 1;
                }
            }
        }
        c
    }

    pub fn total_counts(&self) -> StateCounts {
        let mut total = StateCounts::default();
        for task in self.by_task.keys() {
            let c = self.counts(*task);
            total.free += c.free;
            total.filled += c.filled;
            total.consuming += c.consuming;
            total.leased += c.leased;
        }
        total
    }

    /// Wakes blocked consumers with [`StoreError::Closed`].
    pub fn close(&self) {
        self.close_tx.lock().take();
        self.broker_signal.ring();
    }

    pub fn is_closed(&self) -> bool {
        self.close_tx.lock().is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(tasks: &[TaskId], depth: usize) -> SharedObjectPool {
        SharedObjectPool::new("g", tasks, depth, 64, Arc::new(Doorbell::new()))
    }

    fn fill_publish(p: &SharedObjectPool, task: TaskId, tag: u8) -> ObjectId {
        let id = p.acquire_free(task).expect("free object");
        p.fill(id, PayloadMeta { partition_id: 0, base_offset: u64::from(tag), record_count: 1 }, |b| {
            b.extend_from_slice(&[tag; 8])
        })
        .unwrap();
        p.publish_filled(id).unwrap();
        id
    }

    #[test]
    fn acquire_leaves_one_free() {
        let p = pool(&[7], 2);
        assert!(p.acquire_free(7).is_some());
        let c = p.counts(7);
        assert_eq!(c.free - c.leased, 1);
    }

    #[test]
    fn exhausted_pool_signals_backpressure() {
        let p = pool(&[1], 2);
        fill_publish(&p, 1, 1);
        fill_publish(&p, 1, 2);
        assert_eq!(p.acquire_free(1), None);
        assert_eq!(p.counts(1).filled, 2);
    }

    #[test]
    fn publish_notifies_owner_once() {
        let p = pool(&[1], 2);
        let id = fill_publish(&p, 1, 3);
        assert_eq!(p.recv_notification(1, Duration::from_millis(10)).unwrap(), Some(id));
        assert_eq!(p.recv_notification(1, Duration::from_millis(10)).unwrap(), None);
    }

    #[test]
    fn notifications_are_fifo() {
        let p = pool(&[1], 4);
        let a = fill_publish(&p, 1, 1);
        let b = fill_publish(&p, 1, 2);
        assert_eq!(p.try_notifications(1), vec![a, b]);
    }

    #[test]
    fn double_publish_is_a_violation() {
        let p = pool(&[1], 2);
        let id = fill_publish(&p, 1, 1);
        assert_eq!(
            p.publish_filled(id),
            Err(StoreError::IllegalTransition {
                object: id,
                from: ObjectState::Filled,
                to: ObjectState::Filled
            })
        );
    }

    #[test]
    fn consume_returns_pool_to_free_and_rings() {
        let p = pool(&[1], 2);
        let seen = p.broker_signal().generation();
        let id = fill_publish(&p, 1, 9);
        let got = p
            .consume_and_release(1, id, |v| Ok::<_, ()>(v.bytes.to_vec()))
            .unwrap();
        assert_eq!(got, vec![9u8; 8]);
        assert_eq!(p.counts(1).free, 2);
        assert!(p.broker_signal().generation() > seen);
    }

    #[test]
    fn handler_error_keeps_object_filled() {
        let p = pool(&[1], 2);
        let id = fill_publish(&p, 1, 1);
        let err = p.consume_and_release(1, id, |_| Err::<(), _>("boom")).unwrap_err();
        assert!(matches!(err, ConsumeError::Handler("boom")));
        assert_eq!(p.state(id).unwrap(), ObjectState::Filled);
    }

    #[test]
    fn wrong_owner_and_state() {
        let p = pool(&[1, 2], 2);
        let id = fill_publish(&p, 1, 1);
        assert!(matches!(
            p.consume_and_release(2, id, |_| Ok::<_, ()>(())),
            Err(ConsumeError::Store(StoreError::WrongOwner { .. }))
        ));
        let free = p.acquire_free(2).unwrap();
        p.cancel_lease(free).unwrap();
        assert!(matches!(
            p.consume_and_release(2, free, |_| Ok::<_, ()>(())),
            Err(ConsumeError::Store(StoreError::IllegalTransition { .. }))
        ));
        assert_eq!(p.finish_consume(1, id), Err(StoreError::IllegalTransition {
            object: id,
            from: ObjectState::Filled,
            to: ObjectState::Free,
        }));
        assert!(matches!(p.state(99), Err(StoreError::UnknownObject(99))));
    }

    #[test]
    fn overflow_is_rejected() {
        let p = pool(&[1], 2);
        let id = p.acquire_free(1).unwrap();
        assert!(matches!(
            p.fill(id, PayloadMeta::default(), |b| b.resize(65, 0)),
            Err(StoreError::Overflow { len: 65, capacity: 64 })
        ));
    }

    #[test]
    fn close_wakes_consumers() {
        let p = Arc::new(pool(&[1], 2));
        let q = Arc::clone(&p);
        let t = std::thread::spawn(move || q.recv_notification(1, Duration::from_secs(10)));
        std::thread::sleep(Duration::from_millis(20));
        p.close();
        assert_eq!(t.join().unwrap(), Err(StoreError::Closed));
    }

    /// Oracle: replay a 1000-chunk fill/consume cycle through a two-object
    /// pool and trace the state machine.
    #[test]
    fn thousand_chunk_cycle_trace() {
        let trace = Arc::new(Mutex::new(Vec::new()));
        let t = Arc::clone(&trace);
        let p = SharedObjectPool::new("g", &[0], 2, 64, Arc::new(Doorbell::new()))
            .with_observer(move |id, from, to| t.lock().push((id, from, to)));
        let mut delivered = Vec::new();
        let mut next = 0u64;
        let mut max_filled = 0;
        while delivered.len() < 1000 {
            while next < 1000 {
                let Some(id) = p.acquire_free(0) else { break };
                p.fill(id, PayloadMeta { partition_id: 0, base_offset: next, record_count: 1 }, |b| {
                    b.extend_from_slice(&next.to_le_bytes())
                })
                .unwrap();
                p.publish_filled(id).unwrap();
                next += 1;
            }
            max_filled = max_filled.max(p.counts(0).filled);
            if let Some(id) = p.recv_notification(0, Duration::ZERO).unwrap() {
                let v = p
                    .consume_and_release(0, id, |v| Ok::<_, ()>(u64::from_le_bytes(v.bytes.try_into().unwrap())))
                    .unwrap();
                delivered.push(v);
            }
        }
        assert_eq!(delivered, (0..1000).collect::<Vec<_>>());
        assert_eq!(max_filled, 2);
        let trace = trace.lock();
        assert_eq!(trace.len(), 3000);
        assert!(trace.iter().all(|(_, f, t)| f.can_move_to(*t)));
    }
}
