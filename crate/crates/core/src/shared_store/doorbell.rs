use std::time::Duration;

use parking_lot::{Condvar, Mutex};

/// Generation counter with blocking waits. Ringing wakes every waiter that
/// has not yet seen the new generation.
#[derive(Debug, Default)]
pub struct Doorbell {
    generation: Mutex<u64>,
    cv: Condvar,
}

impl Doorbell {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ring(&self) {
        *self.generation.lock() += 1;
        self.cv.notify_all();
    }

    pub fn generation(&self) -> u64 {
        *self.generation.lock()
    }

    /// Blocks until the generation moves past `seen` or `timeout` elapses;
    /// returns the current generation.
    pub fn wait_past(&self, seen: u64, timeout: Duration) -> u64 {
        let mut g = self.generation.lock();
        if *g == seen {
            self.cv.wait_for(&mut g, timeout);
        }
        *g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Instant;

    #[test]
    fn ring_wakes_waiter() {
        let bell = Arc::new(Doorbell::new());
        let seen = bell.generation();
        let b = Arc::clone(&bell);
        let t = std::thread::spawn(move || b.wait_past(seen, Duration::from_secs(10)));
        std::thread::sleep(Duration::from_millis(20));
        bell.ring();
        assert_eq!(t.join().unwrap(), seen + 1);
    }

    #[test]
    fn missed_ring_returns_immediately() {
        let bell = Doorbell::new();
        let seen = bell.generation();
        bell.ring();
        let start = Instant::now();
        assert_eq!(bell.wait_past(seen, Duration::from_secs(10)), seen + 1);
        assert!(start.elapsed() < Duration::from_secs(1));
    }
}
