//! Small shared helpers.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the worker-thread count for [`par_map`]. 1 means fully sequential.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

/// Order-preserving parallel map over independent items.
///
/// Output index i is always f(items[i]) regardless of thread count, so
/// results are identical for any `set_threads` value as long as `f` itself
/// is deterministic.
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync,
{
    let n_threads = threads();
    if n_threads <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let mut slots: Vec<Option<U>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    let mut work: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let chunk = n.div_ceil(n_threads).max(1);
    let f = &f;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        while !work.is_empty() {
            let take = chunk.min(work.len());
            let piece: Vec<(usize, T)> = work.drain(..take).collect();
            handles.push(scope.spawn(move || {
                piece
                    .into_iter()
                    .map(|(i, t)| (i, f(t)))
                    .collect::<Vec<(usize, U)>>()
            }));
        }
        for h in handles {
            for (i, u) in h.join().expect("worker panicked") {
                slots[i] = Some(u);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

/// Formats a float for reports: fixed 6 decimals, byte-stable.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        set_threads(4);
        let out = par_map((0..100).collect::<Vec<_>>(), |x| x * 2);
        set_threads(1);
        assert_eq!(out, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn par_map_single_thread() {
        set_threads(1);
        let out = par_map(vec![1, 2, 3], |x| x + 1);
        assert_eq!(out, vec![2, 3, 4]);
    }
}
