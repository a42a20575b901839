//! Scoped-thread executor. Items are split into contiguous chunks, one per
//! worker; results are reassembled in input order, so any worker count
//! reproduces the sequential results byte for byte.

use mutualseq_core::trainer::Executor;

pub struct ThreadExecutor {
    workers: usize,
}

impl ThreadExecutor {
    pub fn new(workers: usize) -> Self {
        ThreadExecutor { workers: workers.max(1) }
    }
}

impl Executor for ThreadExecutor {
    fn map_vec<I: Send, T: Send, F: Fn(I) -> T + Sync>(&self, items: Vec<I>, f: F) -> Vec<T> {
        let n = items.len();
        let workers = self.workers.min(n);
        if workers <= 1 {
            return items.into_iter().map(f).collect();
        }
        let chunk_len = n.div_ceil(workers);
        let mut chunks: Vec<Vec<I>> = Vec::with_capacity(workers);
        let mut items = items;
        // Draining from the front keeps chunk k aligned with output range k.
        while !items.is_empty() {
            let take = chunk_len.min(items.len());
            let rest = items.split_off(take);
            chunks.push(items);
            items = rest;
        }
        let f = &f;
        let mut results: Vec<Vec<T>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| scope.spawn(move || chunk.into_iter().map(f).collect::<Vec<T>>()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(n);
        for part in results.drain(..) {
            out.extend(part);
        }
        out
    }
}
