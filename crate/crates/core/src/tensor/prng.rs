//! Deterministic pseudo-random numbers.
//!
//! Every stochastic choice in the crate (weight init, batch sampling,
//! temperature sampling, corpus synthesis) flows through [`Prng`] so that a
//! fixed seed reproduces a run bit for bit on any platform. The generator is
//! a 64-bit xorshift-multiply whose state is seeded through one splitmix64
//! step, which protects against low-entropy seeds such as 0 and 1.

/// splitmix64 increment (Weyl constant).
const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLITMIX_MIX1: u64 = 0xBF58_476D_1CE4_E5B9;
const SPLITMIX_MIX2: u64 = 0x94D0_49BB_1331_11EB;
/// xorshift64* output multiplier.
const XORSHIFT_MULT: u64 = 0x2545_F491_4F6C_DD1D;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(SPLITMIX_MIX1);
    z = (z ^ (z >> 27)).wrapping_mul(SPLITMIX_MIX2);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
    /// Spare Gaussian from the last Box-Muller pair.
    spare: Option<f64>,
}

impl Prng {
    /// Seeds the generator. Any seed is valid, including 0.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = splitmix64(&mut sm);
        // xorshift state must be nonzero; splitmix64 output is 0 for exactly
        // one input, so one extra step suffices.
        if state == 0 {
            state = splitmix64(&mut sm);
        }
        Prng { state, spare: None }
    }

    /// Derives an independent stream. Used to give each training stage and
    /// each corpus section its own generator without coupling their draws.
    pub fn fork(&mut self) -> Prng {
        Prng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_MULT)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be positive; uses rejection
    /// sampling so the distribution is exactly uniform.
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_range requires n > 0");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; pairs are cached so consecutive calls
    /// consume uniform draws two at a time.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 must be nonzero for the log; 0 occurs with probability 2^-53.
        let mut u1 = self.next_f64();
        while u1 == 0.0 {
            u1 = self.next_f64();
        }
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Normal with the given mean and standard deviation.
    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.next_gaussian()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.gen_range(i + 1);
            items.swap(i, j);
        }
    }
}
