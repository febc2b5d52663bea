//! Thread budget. `DAS_THREADS` caps internal parallelism; every parallel
//! path in the crate produces results identical to its sequential order.

use std::thread;

pub fn threads() -> usize {
    let available = thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("DAS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(available.max(1)),
        _ => available,
    }
}

/// Runs `f(index, item)` over `items`, splitting them into contiguous
/// chunks across at most `threads()` scoped threads.
pub fn for_each_mut<T: Send, F>(items: &mut [T], f: F)
where
    F: Fn(usize, &mut T) + Sync,
{
    let n = threads();
    if n <= 1 || items.len() <= 1 {
        for (i, item) in items.iter_mut().enumerate() {
            f(i, item);
        }
        return;
    }
    let chunk = items.len().div_ceil(n);
    thread::scope(|scope| {
        for (c, part) in items.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, item) in part.iter_mut().enumerate() {
                    f(c * chunk + j, item);
                }
            });
        }
    });
}
