//! Deterministic fan-out across trials.
//!
//! Workers receive disjoint index ranges and write into pre-sized slots,
//! so results are independent of scheduling; all randomness must come
//! from per-index seeds. The worker count is `ABAT_THREADS` when set,
//! otherwise the machine's available parallelism.

pub fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("ABAT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Apply `f` to every index, in parallel when more than one worker is
/// configured; output order matches input order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = worker_threads().min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (w, slots) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (k, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(w * chunk + k));
                }
            });
        }
    });
    out.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let out = map_indexed(100, |i| i * i);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }

    #[test]
    fn empty_input_is_fine() {
        assert!(map_indexed(0, |i| i).is_empty());
    }
}
