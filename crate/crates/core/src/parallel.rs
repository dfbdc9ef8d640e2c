//! Deterministic fan-out over scoped threads.

use crate::error::Result;

/// Computes `f(0..count)` with up to `workers` threads. Results are returned
/// in index order, so the output does not depend on the worker count.
pub fn map_indexed<T, F>(count: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count).map(f).collect();
    }
    let f = &f;
    let mut chunks: Vec<Vec<Result<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w..count).step_by(workers).map(f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut iters: Vec<_> = chunks.iter_mut().map(|c| c.drain(..)).collect();
    (0..count)
        .map(|k| iters[k % workers].next().expect("every index produced"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let one = map_indexed(17, 1, |k| Ok(k * k)).unwrap();
        for w in [2, 3, 8, 40] {
            assert_eq!(map_indexed(17, w, |k| Ok(k * k)).unwrap(), one);
        }
        assert!(map_indexed(0, 4, Ok).unwrap().is_empty());
    }

    #[test]
    fn first_error_in_index_order_wins() {
        let r = map_indexed(10, 3, |k| {
            if k >= 4 {
                Err(crate::Error::Corpus(format!("{k}")))
            } else {
                Ok(k)
            }
        });
        assert!(matches!(r, Err(crate::Error::Corpus(s)) if s == "4"));
    }
}
