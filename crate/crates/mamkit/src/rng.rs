//! Deterministic, labelled random streams.
//!
//! Every stochastic operation in the crate draws from an explicit [`RngStream`].
//! A stream is fully determined by its `(seed, label)` pair, so two runs with
//! equal seeds produce bit-identical draw sequences on any platform.

use sha2::{Digest, Sha256};

/// A counter-mode random stream keyed by `(seed, label)`.
///
/// The key is `SHA-256(seed_le || label)`; blocks are generated with SHA-256
/// over `(key, counter)`. Slow relative to a dedicated PRNG but the crate only
/// draws a few million values per run, and the construction is trivially
/// portable and splittable.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    key: [u8; 32],
    counter: u64,
    buf: [u64; 4],
    buf_pos: usize,
    draws: u64,
    /// Cached second output of the Box-Muller transform.
    gauss_spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        RngStream {
            seed,
            label: label.to_string(),
            key,
            counter: 0,
            buf: [0; 4],
            buf_pos: 4,
            draws: 0,
            gauss_spare: None,
        }
    }

    /// Derive an independent substream; draws from the child never affect the
    /// parent's position.
    pub fn substream(&self, label: &str) -> RngStream {
        RngStream::new(self.seed, &format!("{}/{}", self.label, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of `u64` words drawn so far.
    pub fn draw_count(&self) -> u64 {
        self.draws
    }

    fn refill(&mut self) {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(self.counter.to_le_bytes());
        let block: [u8; 32] = h.finalize().into();
        for (i, chunk) in block.chunks_exact(8).enumerate() {
            self.buf[i] = u64::from_le_bytes(chunk.try_into().unwrap());
        }
        self.counter += 1;
        self.buf_pos = 0;
    }

    pub fn next_u64(&mut self) -> u64 {
        if self.buf_pos >= 4 {
            self.refill();
        }
        let v = self.buf[self.buf_pos];
        self.buf_pos += 1;
        self.draws += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` via rejection sampling.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn next_range(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.next_below(hi - lo + 1)
    }

    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(v) = self.gauss_spare.take() {
            return v;
        }
        // u1 in (0,1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Standard Gumbel noise; see [`gumbel_from_uniform`].
    pub fn next_gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.next_f64())
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// `-ln(-ln u)` with `u` clamped away from {0,1} by 1e-12 so the result is
/// always finite.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}
