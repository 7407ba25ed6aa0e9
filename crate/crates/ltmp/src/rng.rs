//! Deterministic pseudo-random numbers.
//!
//! Everything stochastic in the crate (weight init, data synthesis, epoch
//! shuffling) draws from a [`Xoshiro256StarStar`] stream seeded through
//! splitmix64, so a fixed seed reproduces a run bit for bit on any platform.
//! Both generators are tiny, well studied, and specified exactly by their
//! reference implementations, which the unit tests pin down.

/// Stateful splitmix64 step. Advances `state` and returns the next output.
///
/// This is the reference finalizer: `state += 0x9E3779B97F4A7C15`, then two
/// xor-shift-multiply rounds on a copy.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pure one-shot mix of a single word; used to hash small keys (e.g. stable
/// group colours in the visualiser) without threading generator state.
pub fn mix64(x: u64) -> u64 {
    let mut s = x;
    splitmix64(&mut s)
}

/// Derives an independent stream seed from a base seed and a small tag, so
/// that e.g. weight init and data synthesis never share a stream.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut s = base ^ mix64(tag);
    splitmix64(&mut s)
}

/// xoshiro256** generator (Blackman & Vigna). 256-bit state, 64-bit output.
#[derive(Clone, Debug)]
pub struct Xoshiro256StarStar {
    s: [u64; 4],
}

impl Xoshiro256StarStar {
    /// Seeds the 256-bit state by running splitmix64 four times, as the
    /// reference implementation recommends.
    pub fn seeded(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { s }
    }

    /// Builds a generator from raw engine state. The all-zero state is
    /// invalid for this family and is rejected.
    pub fn from_state(s: [u64; 4]) -> Self {
        assert!(s.iter().any(|&w| w != 0), "xoshiro state must be nonzero");
        Self { s }
    }

    /// Next 64 uniform bits.
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform `f64` in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by Lemire's multiply-shift with rejection,
    /// so the result is exactly unbiased.
    pub fn gen_range(&mut self, n: u64) -> u64 {
        assert!(n > 0, "gen_range requires n > 0");
        let threshold = n.wrapping_neg() % n; // 2^64 mod n
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Standard normal via Box-Muller; pairs are generated together and the
    /// spare is cached, so draws come two uniforms at a time.
    pub fn next_normal(&mut self, spare: &mut Option<f64>) -> f64 {
        if let Some(z) = spare.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        *spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.gen_range(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

/// Convenience wrapper bundling the generator with its normal-draw cache.
#[derive(Clone, Debug)]
pub struct Rng {
    gen: Xoshiro256StarStar,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Self {
            gen: Xoshiro256StarStar::seeded(seed),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.gen.next_u64()
    }

    pub fn next_f64(&mut self) -> f64 {
        self.gen.next_f64()
    }

    pub fn gen_range(&mut self, n: u64) -> u64 {
        self.gen.gen_range(n)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.gen.next_normal(&mut self.spare_normal)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        self.gen.shuffle(xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix64_matches_reference_vector() {
        // Published outputs of the reference implementation for seed 0.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(splitmix64(&mut s), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn xoshiro_step_matches_hand_computation() {
        // From state [1,2,3,4] the reference update gives, worked by hand:
        //   out1 = rotl(2*5, 7) * 9        = 11520
        //   out2 = rotl(0*5, 7) * 9        = 0
        //   out3 = rotl(262149*5, 7) * 9   = 1509978240
        let mut g = Xoshiro256StarStar::from_state([1, 2, 3, 4]);
        assert_eq!(g.next_u64(), 11520);
        assert_eq!(g.next_u64(), 0);
        assert_eq!(g.next_u64(), 1509978240);
    }

    #[test]
    fn seeded_streams_are_reproducible_and_distinct() {
        let mut a = Xoshiro256StarStar::seeded(42);
        let mut b = Xoshiro256StarStar::seeded(42);
        let mut c = Xoshiro256StarStar::seeded(43);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..64).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn next_f64_is_in_unit_interval() {
        let mut g = Xoshiro256StarStar::seeded(7);
        for _ in 0..10_000 {
            let x = g.next_f64();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn gen_range_is_bounded_and_hits_every_residue() {
        let mut g = Xoshiro256StarStar::seeded(11);
        let mut seen = [false; 7];
        for _ in 0..1_000 {
            let x = g.gen_range(7);
            assert!(x < 7);
            seen[x as usize] = true;
        }
        assert!(seen.iter().all(|&v| v));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut g = Xoshiro256StarStar::seeded(5);
        let mut xs: Vec<u32> = (0..100).collect();
        g.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(xs, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut r = Rng::seeded(3);
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal(0.0, 1.0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(1234, 0);
        let b = derive_seed(1234, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(1234, 0));
    }
}
