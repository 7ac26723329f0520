//! Deterministic 64-bit random streams.
//!
//! All randomness in the crate flows from a single root seed through
//! [`mix`], so generation order and parallelism never change output.
//! The generator is splitmix64; the draw conventions below are frozen
//! by golden tests and must not change.

/// splitmix64 finalizer.
#[inline]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and an index.
///
/// Used to give every instance, annotator, epoch, etc. an independent
/// stream: `mix(seed, k)` for k = 0, 1, 2, ...
pub fn mix(seed: u64, index: u64) -> u64 {
    finalize(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// A splitmix64 stream.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        finalize(self.state)
    }

    /// Uniform draw in `0..n`. Convention: `next_u64() % n`.
    pub fn next_range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_range(0)");
        self.next_u64() % n
    }

    /// Uniform draw in `[0, 1)` using the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn next_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle. Indices walk high to low; the swap partner
    /// is `next_range(i + 1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_range(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Pick one element index from `0..len`.
    pub fn choose_index(&mut self, len: usize) -> usize {
        self.next_range(len as u64) as usize
    }

    /// Sample `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        self.shuffle(&mut pool);
        pool.truncate(k);
        pool
    }
}
