//! Small explicitly specified PRNG.
//!
//! The generator is xoshiro256** seeded through SplitMix64. Its full state is
//! five `u64` words (seed plus four state words) so checkpoints can embed it.
//!
//! `split(label)` derives a child stream from the *seed* and the label only,
//! never from the parent's current position: the same label always yields the
//! same child, regardless of how many draws the parent has made.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    state: [u64; 4],
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by `label`.
    pub fn split(&self, label: &str) -> Self {
        let mut h = fnv1a(label.as_bytes()) ^ self.seed.rotate_left(17);
        Self::new(splitmix64(&mut h))
    }

    /// Child stream keyed by `label` and an index, e.g. a step or prompt number.
    pub fn split_indexed(&self, label: &str, index: u64) -> Self {
        let mut h = fnv1a(label.as_bytes()) ^ self.seed.rotate_left(17);
        h ^= splitmix64(&mut index.clone());
        Self::new(splitmix64(&mut h))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
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

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; the second variate is discarded so the
    /// state stays five words.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n` (rejection sampling, no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn to_words(&self) -> [u64; 5] {
        [
            self.seed,
            self.state[0],
            self.state[1],
            self.state[2],
            self.state[3],
        ]
    }

    pub fn from_words(w: [u64; 5]) -> Self {
        Self {
            seed: w[0],
            state: [w[1], w[2], w[3], w[4]],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_ignores_parent_position() {
        let a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        b.next_u64();
        assert_eq!(a.split("data"), b.split("data"));
        assert_ne!(a.split("data"), a.split("noise"));
        assert_ne!(a.split_indexed("step", 1), a.split_indexed("step", 2));
    }

    #[test]
    fn state_words_round_trip() {
        let mut a = SeededRng::new(11);
        a.uniform();
        let mut b = SeededRng::from_words(a.to_words());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn moments_are_plausible() {
        let mut r = SeededRng::new(1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        let u: f64 = (0..n).map(|_| r.uniform()).sum::<f64>() / n as f64;
        assert!((u - 0.5).abs() < 0.01);
    }
}
