//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper splits its input into fixed-size chunks and reduces the
//! per-chunk results in index order, so the floating point result is the
//! same whether the chunks run on the rayon pool or one after another on
//! the calling thread. Building without the `parallel` feature (or setting
//! [`Mode::Sequential`] for a scope) only changes where the work runs.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

thread_local! {
    static MODE: Cell<Mode> = const { Cell::new(default_mode()) };
}

const fn default_mode() -> Mode {
    if cfg!(feature = "parallel") {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// The execution mode seen by helpers called from this thread.
pub fn mode() -> Mode {
    MODE.with(|m| m.get())
}

/// Runs `f` with the given mode on the current thread, restoring the
/// previous mode afterwards. `Mode::Parallel` degrades to sequential when
/// the crate is built without the `parallel` feature.
pub fn with_mode<R>(mode: Mode, f: impl FnOnce() -> R) -> R {
    struct Restore(Mode);
    impl Drop for Restore {
        fn drop(&mut self) {
            MODE.with(|m| m.set(self.0));
        }
    }
    let prev = MODE.with(|m| m.replace(mode));
    let _restore = Restore(prev);
    f()
}

#[cfg(feature = "parallel")]
fn use_pool() -> bool {
    mode() == Mode::Parallel
}

/// Order-preserving map over `0..n`.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if use_pool() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_indices(items.len(), |i| f(&items[i]))
}

/// Folds fixed-size chunks of `items` (possibly concurrently) and merges the
/// chunk accumulators left to right.
pub fn fold_chunks<T, A, I, F, M>(items: &[T], chunk: usize, init: I, fold: F, merge: M) -> A
where
    T: Sync,
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize, &T) + Sync + Send,
    M: Fn(&mut A, A),
{
    let chunk = chunk.max(1);
    let n_chunks = items.len().div_ceil(chunk);
    let partials = map_indices(n_chunks, |c| {
        let start = c * chunk;
        let end = (start + chunk).min(items.len());
        let mut acc = init();
        for (i, item) in items[start..end].iter().enumerate() {
            fold(&mut acc, start + i, item);
        }
        acc
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(&init);
    for part in iter {
        merge(&mut total, part);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_is_identical_across_modes() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 1e-3 + 1.0).collect();
        let run = || fold_chunks(&xs, 7, || 0.0f64, |a, _, x| *a += x.ln(), |a, b| *a += b);
        let par = with_mode(Mode::Parallel, run);
        let seq = with_mode(Mode::Sequential, run);
        assert_eq!(par.to_bits(), seq.to_bits());
    }

    #[test]
    fn map_preserves_order() {
        let out = map_indices(100, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn with_mode_restores_previous() {
        let before = mode();
        with_mode(Mode::Sequential, || assert_eq!(mode(), Mode::Sequential));
        assert_eq!(mode(), before);
    }

    #[test]
    fn empty_fold_returns_init() {
        let xs: Vec<f64> = vec![];
        let total = fold_chunks(&xs, 4, || 5.0, |a, _, x| *a += x, |a, b| *a += b);
        assert_eq!(total, 5.0);
    }
}
