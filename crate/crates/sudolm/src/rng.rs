//! Seedable pseudorandomness for every stochastic step in the lab.
//!
//! All randomness flows through SplitMix64 so keys, worlds, datasets,
//! parameter initialization and shuffles are reproducible bit-for-bit from
//! a single 64-bit seed. The algorithm is a short arithmetic recurrence,
//! which keeps golden vectors portable across implementations.

/// SplitMix64 generator (Steele, Lea & Flood's `splitmix64` finalizer).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, bound)` by modular reduction.
    ///
    /// Key tokens are specified as `next_u64() mod alphabet_size`, so this
    /// uses plain reduction rather than rejection sampling.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        self.next_u64() % bound
    }

    /// Uniform f64 in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal sample via Box-Muller, scaled by `std`.
    pub fn next_gaussian(&mut self, std: f32) -> f32 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 / ((1u64 << 53) + 1) as f64;
        let u2 = self.next_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (z * std as f64) as f32
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Derived per-stage seeds so each pipeline stage has an independent stream
/// rooted in the single global seed.
#[derive(Debug, Clone, Copy)]
pub struct StageSeeds {
    pub world: u64,
    pub split: u64,
    pub key: u64,
    pub data: u64,
    pub model: u64,
    pub sft: u64,
    pub align: u64,
    pub attack: u64,
}

impl StageSeeds {
    pub fn derive(global_seed: u64) -> Self {
        let mut r = SplitMix64::new(global_seed);
        StageSeeds {
            world: r.next_u64(),
            split: r.next_u64(),
            key: r.next_u64(),
            data: r.next_u64(),
            model: r.next_u64(),
            sft: r.next_u64(),
            align: r.next_u64(),
            attack: r.next_u64(),
        }
    }
}
