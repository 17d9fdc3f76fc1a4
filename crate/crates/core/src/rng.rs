//! Reproducible random streams.
//!
//! A single master seed spawns independent, named sub-streams. Each stream is a
//! ChaCha8 generator keyed by the master seed and positioned on a stream id
//! derived from the stream name and an index, so adding a new consumer never
//! perturbs the draws seen by an existing one.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

pub const CODEBOOK: &str = "codebook";
pub const ACTIVITY: &str = "activity";
pub const CHANNEL: &str = "channel";
pub const NOISE: &str = "noise";
pub const STATE_EVOLUTION: &str = "state-evolution";
pub const CONDITIONAL: &str = "conditional-mc";
pub const TRIAL: &str = "trial";

/// Node of the seed hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        SeedTree { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Stream id for `(name, index)`; also what the run manifest records.
    pub fn stream_id(name: &str, index: u64) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes().chain(index.to_le_bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        splitmix64(h)
    }

    pub fn stream(&self, name: &str, index: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(Self::stream_id(name, index));
        rng
    }

    /// Independent subtree, e.g. one per Monte Carlo trial.
    pub fn child(&self, name: &str, index: u64) -> SeedTree {
        SeedTree {
            master: splitmix64(self.master ^ Self::stream_id(name, index)),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One draw of CN(0, variance): real and imaginary parts i.i.d. N(0, variance/2).
#[inline]
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

pub fn fill_complex_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [Complex64], variance: f64) {
    let s = (0.5 * variance).sqrt();
    for v in out.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v = Complex64::new(s * re, s * im);
    }
}
