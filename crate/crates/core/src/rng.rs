//! Deterministic random number generation.
//!
//! Every random draw in this crate flows through [`Rng`], a xoshiro256**
//! (version 1.0, Blackman/Vigna) generator whose four state words are
//! expanded from a single `u64` seed with SplitMix64. Both algorithms are
//! public domain and small enough to re-implement bit-for-bit in another
//! language, which is what keeps seeded runs portable.
//!
//! Stream discipline: subsystems never share a generator. Each consumer
//! derives its own seed with [`derive_seed`] from the experiment root seed,
//! a static domain label and integer qualifiers (device id, round, ...), so
//! adding a new consumer never shifts anybody else's draws.
//!
//! Draw formats, fixed for reproducibility:
//! * `uniform`: `(next_u64() >> 11) as f64 * 2^-53`, in `[0, 1)`.
//! * `normal`: Box-Muller on two uniforms, `u1 = 1 - uniform()` (so the log
//!   argument stays positive), `u2 = uniform()`,
//!   `z0 = sqrt(-2 ln u1) * cos(2 pi u2)`, `z1 = sqrt(-2 ln u1) * sin(2 pi u2)`;
//!   `z0` is returned first and `z1` is cached for the next call.
//! * `exponential` (mean 1): `-ln(1 - uniform())`.

/// One step of SplitMix64; advances `state` and returns the next output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the UTF-8 bytes of `s`; used to hash domain labels.
fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a stream seed from the root seed, a domain label and qualifiers.
///
/// The derivation is a SplitMix64 absorption chain: start from
/// `root ^ fnv1a64(domain)`, then for each part `p` absorb it as
/// `state = splitmix64_output(state ^ p)`. Distinct domains or qualifiers
/// give statistically independent streams.
pub fn derive_seed(root: u64, domain: &str, parts: &[u64]) -> u64 {
    let mut state = root ^ fnv1a64(domain);
    let mut out = splitmix64(&mut state);
    for &p in parts {
        state = out ^ p;
        out = splitmix64(&mut state);
    }
    out
}

/// xoshiro256** 1.0 with Box-Muller normal sampling.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl Rng {
    /// Seeds the four state words by running SplitMix64 from `seed`.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s =
            [splitmix64(&mut sm), splitmix64(&mut sm), splitmix64(&mut sm), splitmix64(&mut sm)];
        Rng { s, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)` by rejection, exact for any `n > 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Standard normal draw (Box-Muller, second value cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Exponential draw with mean 1.
    pub fn exponential(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below((i + 1) as u64) as usize;
            xs.swap(i, j);
        }
    }
}
