//! Order-preserving data parallelism.
//!
//! With the `parallel` feature, work runs on a rayon pool whose size is capped
//! by `PQMATT_THREADS`; without it everything runs on the calling thread.
//! Results always come back in input order, so reductions over them are
//! deterministic regardless of the worker count.

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "PQMATT_THREADS";

#[cfg(feature = "parallel")]
fn requested_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

#[cfg(feature = "parallel")]
mod imp {
    use std::sync::OnceLock;

    use rayon::prelude::*;
    use rayon::{ThreadPool, ThreadPoolBuilder};

    fn pool() -> &'static ThreadPool {
        static POOL: OnceLock<ThreadPool> = OnceLock::new();
        POOL.get_or_init(|| {
            let mut b = ThreadPoolBuilder::new().thread_name(|i| format!("pqmatt-{}", i));
            if let Some(n) = super::requested_threads() {
                b = b.num_threads(n);
            }
            b.build().expect("worker pool")
        })
    }

    pub fn threads() -> usize {
        pool().current_num_threads()
    }

    pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
        if items.len() <= 1 || threads() == 1 {
            return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
        }
        pool().install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect())
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn threads() -> usize {
        1
    }

    pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Worker count actually in use (1 without the `parallel` feature).
pub fn threads() -> usize {
    imp::threads()
}

/// `items.map(f)` with `f(index, item)`, results in input order.
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
    imp::map(items, f)
}

/// Sequential `map` regardless of features; the reference for parallel runs.
pub fn map_sequential<T, R>(items: &[T], f: impl Fn(usize, &T) -> R) -> Vec<R> {
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let ys = map(&xs, |i, &x| (i as u64) * 1_000_000 + x * x);
        assert_eq!(ys, map_sequential(&xs, |i, &x| (i as u64) * 1_000_000 + x * x));
        assert!(threads() >= 1);
        assert!(map(&[] as &[u8], |_, &x| x).is_empty());
    }

    #[test]
    fn float_reduction_is_bit_stable() {
        let xs: Vec<f32> = (0..4096).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
        let chunks: Vec<&[f32]> = xs.chunks(64).collect();
        let sum = |parts: Vec<f32>| parts.iter().fold(0.0f32, |a, b| a + b);
        let a = sum(map(&chunks, |_, c| c.iter().sum::<f32>()));
        let b = sum(map_sequential(&chunks, |_, c| c.iter().sum::<f32>()));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
