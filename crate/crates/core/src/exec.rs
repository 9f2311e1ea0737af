//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work fans out over rayon's pool;
//! without it, or when the mode is set to [`ExecMode::Sequential`], the same
//! closures run in a plain loop. Results are always returned in input order
//! so both paths produce identical outputs.

use std::sync::atomic::{AtomicU8, Ordering};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

const SEQ: u8 = 0;
const PAR: u8 = 1;

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { PAR } else { SEQ });

/// Selects the process-wide mode. `Parallel` degrades to sequential when the
/// crate is built without the `parallel` feature.
pub fn set_mode(mode: ExecMode) {
    MODE.store(
        match mode {
            ExecMode::Sequential => SEQ,
            ExecMode::Parallel => PAR,
        },
        Ordering::Relaxed,
    );
}

pub fn mode() -> ExecMode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == PAR {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

/// `f` over `0..n`, collected in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Fallible map; the first error in input order is returned.
pub fn try_map_slice<I, T, F>(items: &[I], f: F) -> Result<Vec<T>>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> Result<T> + Sync + Send,
{
    map_slice(items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_in_both_modes() {
        let want: Vec<usize> = (0..1000).map(|i| i * i).collect();
        for m in [ExecMode::Sequential, ExecMode::Parallel] {
            set_mode(m);
            assert_eq!(map_range(1000, |i| i * i), want);
        }
        set_mode(ExecMode::Parallel);
    }

    #[test]
    fn first_error_wins() {
        let items: Vec<i32> = (0..50).collect();
        let r = try_map_slice(&items, |&i| {
            if i % 7 == 6 {
                Err(crate::FitError::Config(format!("{i}")))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(r, Err(crate::FitError::Config(s)) if s == "6"));
    }
}
