//! Seedable PRNG used for masking and data generation.
//!
//! The generator is SplitMix64 (Steele, Lea, Flood 2014): a single `u64` of
//! state advanced by a Weyl sequence and scrambled by two xor-shift-multiply
//! rounds. It is fast, passes BigCrush, and its tiny state makes seeded runs
//! reproducible across platforms.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator with a 64-bit state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal draw via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Derives an independent child seed from a root seed and a stream index.
///
/// The rule is `mix(root ^ mix((index + 1) * GOLDEN_GAMMA))`, so utterances
/// generated in parallel see uncorrelated streams while remaining a pure
/// function of `(root, index)`.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    mix(root ^ mix(stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}
