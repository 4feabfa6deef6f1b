//! Deterministic pseudo-randomness used throughout the simulator.
//!
//! Every stochastic choice in this crate (projection matrices, graph
//! generation, data partitioning, minibatch shuffles) flows through the
//! generators in this module so that runs are bit-reproducible across
//! builds and platforms:
//!
//! - state expansion: splitmix64 applied to a 64-bit seed,
//! - stream generation: xoshiro256++,
//! - Gaussian variates: Box–Muller,
//! - Gamma variates: Marsaglia–Tsang squeeze (with the standard
//!   `u^(1/a) * Gamma(a+1)` transform for shape < 1).

/// One step of the splitmix64 sequence, advancing `state` in place.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a context label.
///
/// Used to give each (purpose, round, client) combination its own generator
/// without threading mutable RNG state through the round loop.
pub fn derive_seed(base: u64, label: &str, a: u64, b: u64) -> u64 {
    let mut s = base;
    let mut out = splitmix64(&mut s);
    for &byte in label.as_bytes() {
        s ^= u64::from(byte);
        out ^= splitmix64(&mut s);
    }
    s ^= a.rotate_left(17);
    out ^= splitmix64(&mut s);
    s ^= b.rotate_left(41);
    out ^ splitmix64(&mut s)
}

/// xoshiro256++ generator with splitmix64 seed expansion.
#[derive(Clone, Debug)]
pub struct Xoshiro256pp {
    s: [u64; 4],
    gauss_spare: Option<f64>,
}

impl Xoshiro256pp {
    pub fn from_seed_u64(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { s, gauss_spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe as a logarithm argument.
    pub fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` via Lemire-style rejection.
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_below: bound must be positive");
        let bound = bound as u64;
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            let hi = ((x as u128 * bound as u128) >> 64) as u64;
            let lo = (x as u128 * bound as u128) as u64;
            if lo >= threshold {
                return hi as usize;
            }
        }
    }

    /// Standard normal via Box–Muller; pairs are cached.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Gamma(shape, 1) via Marsaglia–Tsang.
    pub fn next_gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0, "next_gamma: shape must be positive");
        if shape < 1.0 {
            let u = self.next_open_f64();
            return self.next_gamma(shape + 1.0) * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.next_gaussian();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.next_open_f64();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return d * v;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `m` distinct indices from `[0, n)`, returned sorted ascending.
    pub fn sample_indices(&mut self, n: usize, m: usize) -> Vec<usize> {
        assert!(m <= n, "sample_indices: m must not exceed n");
        let mut pool: Vec<usize> = (0..n).collect();
        // partial Fisher–Yates: the first m slots end up a uniform subset
        for i in 0..m {
            let j = i + self.next_below(n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..m].to_vec();
        picked.sort_unstable();
        picked
    }
}
