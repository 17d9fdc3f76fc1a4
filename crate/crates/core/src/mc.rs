//! Batched Monte Carlo plumbing shared by the SE, estimation and downlink code.
//!
//! Samples are split into fixed-size batches, each drawn from its own named
//! sub-stream. Batches may run in parallel; results are always reduced in
//! batch order so the output does not depend on the thread count.

use rayon::prelude::*;

use crate::linalg::{Hermitian, C64};
use crate::rng::{self, SeedTree, StreamRng};

pub(crate) const BATCH: usize = 4096;

/// Runs `f(batch_index, batch_len, rng)` over all batches and returns the
/// per-batch results in batch order.
pub(crate) fn map_batches<T, F>(n: usize, seeds: &SeedTree, stream: &str, key: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut StreamRng) -> T + Sync,
{
    let count = n.div_ceil(BATCH);
    (0..count)
        .into_par_iter()
        .map(|k| {
            let len = BATCH.min(n - k * BATCH);
            let mut rng = seeds.stream(stream, (key << 24) | k as u64);
            f(len, &mut rng)
        })
        .collect()
}

/// Row draw of CN(0, K) given K^{1/2}.
#[derive(Debug, Clone)]
pub(crate) struct GaussianRows {
    root: Hermitian,
}

impl GaussianRows {
    pub(crate) fn new(cov: &Hermitian) -> Self {
        GaussianRows { root: cov.sqrt() }
    }

    pub(crate) fn draw(&self, rng: &mut StreamRng, white: &mut [C64], out: &mut [C64]) {
        rng::fill_complex_normal(rng, white, 1.0);
        match &self.root {
            Hermitian::Diagonal(d) => {
                for ((o, w), s) in out.iter_mut().zip(white.iter()).zip(d) {
                    *o = w * s;
                }
            }
            Hermitian::Dense(_) => out.copy_from_slice(&self.root.row_mul(white)),
        }
    }
}

/// Sums of e^H e and of its squared entry magnitudes.
#[derive(Debug, Clone)]
pub(crate) struct OuterMoments {
    pub dim: usize,
    pub full: bool,
    pub n: usize,
    sum: Vec<C64>,
    sum_abs2: Vec<f64>,
}

impl OuterMoments {
    pub(crate) fn new(dim: usize, full: bool) -> Self {
        let k = if full { dim * dim } else { dim };
        OuterMoments {
            dim,
            full,
            n: 0,
            sum: vec![C64::default(); k],
            sum_abs2: vec![0.0; k],
        }
    }

    pub(crate) fn add(&mut self, e: &[C64]) {
        self.n += 1;
        if self.full {
            for (i, ei) in e.iter().enumerate() {
                let ci = ei.conj();
                for (j, ej) in e.iter().enumerate() {
                    let v = ci * ej;
                    self.sum[i * self.dim + j] += v;
                    self.sum_abs2[i * self.dim + j] += v.norm_sqr();
                }
            }
        } else {
            for (i, ei) in e.iter().enumerate() {
                let p = ei.norm_sqr();
                self.sum[i] += p;
                self.sum_abs2[i] += p * p;
            }
        }
    }

    pub(crate) fn merge(&mut self, other: &OuterMoments) {
        self.n += other.n;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.sum_abs2.iter_mut().zip(&other.sum_abs2).for_each(|(a, b)| *a += b);
    }

    pub(crate) fn mean(&self) -> Vec<C64> {
        let n = self.n.max(1) as f64;
        self.sum.iter().map(|v| v / n).collect()
    }

    /// Per-entry sample variance of the summand.
    pub(crate) fn variance(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.sum
            .iter()
            .zip(&self.sum_abs2)
            .map(|(s, s2)| (s2 / n - (s / n).norm_sqr()).max(0.0))
            .collect()
    }
}

/// Running sum and sum of squares of a real statistic.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarMoments {
    pub n: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl ScalarMoments {
    pub fn add(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    pub fn merge(&mut self, o: &ScalarMoments) {
        self.n += o.n;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n.max(1) as f64
    }

    pub fn variance(&self) -> f64 {
        let n = self.n.max(1) as f64;
        (self.sum_sq / n - self.mean().powi(2)).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.n.max(1) as f64).sqrt()
    }
}

/// Assembles a Hermitian matrix from a moment layout.
pub(crate) fn to_hermitian(values: &[C64], dim: usize, full: bool) -> Hermitian {
    if full {
        let mut m = ndarray::Array2::from_shape_vec((dim, dim), values.to_vec()).expect("square layout");
        // symmetrize round-off
        for i in 0..dim {
            m[[i, i]] = C64::new(m[[i, i]].re, 0.0);
            for j in (i + 1)..dim {
                let v = 0.5 * (m[[i, j]] + m[[j, i]].conj());
                m[[i, j]] = v;
                m[[j, i]] = v.conj();
            }
        }
        Hermitian::Dense(m)
    } else {
        Hermitian::Diagonal(values.iter().map(|v| v.re).collect())
    }
}
