use std::collections::BTreeMap;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::Result;

type Producer<B> = Arc<dyn Fn(usize) -> Result<B> + Send + Sync>;

/// Produces items `start..end` on worker threads through a bounded queue and
/// yields them in index order.
///
/// Each item is a pure function of its index, so the sequence does not
/// depend on the number of workers.
pub struct Prefetcher<B: Send + 'static> {
    rx: Option<Receiver<(usize, Result<B>)>>,
    pending: BTreeMap<usize, Result<B>>,
    next: usize,
    end: usize,
    handles: Vec<JoinHandle<()>>,
}

impl<B: Send + 'static> Prefetcher<B> {
    pub fn new(workers: usize, capacity: usize, start: usize, end: usize, produce: Producer<B>) -> Self {
        let workers = workers.max(1);
        let (tx, rx) = sync_channel(capacity.max(1));
        let handles = (0..workers)
            .map(|w| {
                let tx = tx.clone();
                let produce = Arc::clone(&produce);
                std::thread::spawn(move || {
                    for i in (start + w..end).step_by(workers) {
                        if tx.send((i, produce(i))).is_err() {
                            return;
                        }
                    }
                })
            })
            .collect();
        Self {
            rx: Some(rx),
            pending: BTreeMap::new(),
            next: start,
            end,
            handles,
        }
    }
}

impl<B: Send + 'static> Iterator for Prefetcher<B> {
    type Item = Result<B>;

    fn next(&mut self) -> Option<Result<B>> {
        if self.next >= self.end {
            return None;
        }
        loop {
            if let Some(item) = self.pending.remove(&self.next) {
                self.next += 1;
                return Some(item);
            }
            let (i, item) = self.rx.as_ref()?.recv().ok()?;
            self.pending.insert(i, item);
        }
    }
}

impl<B: Send + 'static> Drop for Prefetcher<B> {
    fn drop(&mut self) {
        // unblock producers waiting on a full queue
        self.rx.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_regardless_of_workers() {
        for workers in [1, 3] {
            let p = Prefetcher::new(workers, 2, 5, 40, Arc::new(|i| Ok(i * i)));
            let got: Vec<usize> = p.map(|r| r.unwrap()).collect();
            assert_eq!(got, (5..40).map(|i| i * i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn early_drop_does_not_hang() {
        let mut p = Prefetcher::new(2, 1, 0, 1000, Arc::new(Ok));
        assert_eq!(p.next().unwrap().unwrap(), 0);
    }
}
