//! Deterministic random stream: splitmix64-seeded xoshiro256++ uniforms,
//! Box-Muller normals. Fixed algorithm so (seed, counter) reproduces the
//! same variate sequence on every platform.

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    state: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        RngStream {
            seed,
            counter: 0,
            state,
        }
    }

    /// Independent stream derived from this stream's seed and a tag.
    pub fn derive(seed: u64, tag: u64) -> Self {
        let mut sm = seed;
        let base = splitmix64(&mut sm);
        Self::new(base ^ tag.wrapping_mul(0xA24B_AED4_963E_E407))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of raw 64-bit draws consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn next_u64(&mut self) -> u64 {
        // xoshiro256++
        let result = self.state[0]
            .wrapping_add(self.state[3])
            .rotate_left(23)
            .wrapping_add(self.state[0]);
        let t = self.state[1] << 17;
        self.state[2] ^= self.state[0];
        self.state[3] ^= self.state[1];
        self.state[1] ^= self.state[2];
        self.state[0] ^= self.state[3];
        self.state[2] ^= t;
        self.state[3] = self.state[3].rotate_left(45);
        self.counter += 1;
        result
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        (self.uniform() * n as f64) as u64
    }

    /// Standard normal via Box-Muller (two uniforms per draw, cosine branch).
    pub fn normal(&mut self) -> f32 {
        // u1 in (0, 1] so ln(u1) is finite
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(123);
        let mut b = RngStream::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.counter(), 100);
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = RngStream::new(1);
        let mut b = RngStream::new(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normals_have_unit_moments() {
        let mut rng = RngStream::new(99);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..n {
            let v = f64::from(rng.normal());
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn uniform_stays_in_unit_interval() {
        let mut rng = RngStream::new(7);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn pinned_first_draws() {
        // frozen so a silent algorithm change cannot slip through
        let mut rng = RngStream::new(0);
        assert_eq!(rng.next_u64(), 5987356902031041503);
        assert_eq!(rng.next_u64(), 7051070477665621255);
        assert_eq!(rng.next_u64(), 6633766593972829180);
    }
}
