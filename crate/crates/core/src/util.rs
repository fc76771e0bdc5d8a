//! Seeding and parallelism helpers shared across the crate.
//!
//! All randomness in the crate flows through [`rng_from`] /
//! [`derive_seed`], so every run is a pure function of the configured
//! seed regardless of thread count or platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable capping worker threads used by [`parallel_map`].
pub const THREADS_ENV_VAR: &str = "CARL_LAB_THREADS";

/// Deterministic, seedable generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and an index
/// (splitmix64 finalizer). Used for per-episode and per-worker streams so
/// results do not depend on execution order.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn thread_cap() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV_VAR) {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1).min(64),
        Err(_) => available,
    }
}

/// Applies `f` to every index in `0..n` and returns results in index order.
/// Work is distributed over at most `CARL_LAB_THREADS` threads (default: the
/// machine's available parallelism); the output never depends on the thread
/// count because each index carries its own seed derivation.
pub fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = thread_cap().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let f = &f;
    let slot_ptrs: Vec<_> = slots.iter_mut().map(|s| SendPtr(s as *mut Option<T>)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let next = &next;
            let slot_ptrs = &slot_ptrs;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                let slot = slot_ptrs[i].0;
                // Safety: each index is claimed by exactly one worker, so no
                // two threads ever write the same slot.
                unsafe { *slot = Some(value) };
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every index was claimed")).collect()
}

struct SendPtr<T>(*mut T);
unsafe impl<T: Send> Send for SendPtr<T> {}
unsafe impl<T: Send> Sync for SendPtr<T> {}
