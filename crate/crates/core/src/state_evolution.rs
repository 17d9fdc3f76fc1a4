//! State evolution of the multi-source AMP: the diagonal recursion C^{(t,t)},
//! its fixed point, the mmse oracle and the replica-symmetric mutual
//! information.
//!
//! All expectations are Monte Carlo estimates stratified on the activity bit:
//! E[f] = λ E[f | a=1] + (1−λ) E[f | a=0]. Each location draws from the same
//! named sub-streams at every iteration (common random numbers), so the
//! recursion is a deterministic smooth map of C.

use crate::denoiser::{BgDenoiser, EffectiveNoise, PriorParams};
use crate::error::{ensure, Result};
use crate::linalg::{Hermitian, C64};
use crate::mc::{self, GaussianRows, OuterMoments, ScalarMoments};
use crate::model::{LsfcProfile, SystemConfig};
use crate::rng::{self, SeedTree};

/// Smallest accepted Monte Carlo size for an mmse estimate.
pub const MIN_MC_SAMPLES: usize = 1000;

/// How the SE covariance is kept structured between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    /// Keep only the diagonal and average it over blocks of `block` entries.
    BlockDiagonal { block: usize },
    /// Full Hermitian matrix.
    Dense,
}

/// Monte Carlo estimate of mmse(x | x + z C^{1/2}).
#[derive(Debug, Clone)]
pub struct MmseEstimate {
    pub matrix: Hermitian,
    /// Standard error per stored entry (F² entries row-major when dense, F when diagonal).
    pub stderr: Vec<f64>,
    pub samples: usize,
}

impl MmseEstimate {
    fn zero(dim: usize, full: bool, samples: usize) -> Self {
        let matrix = if full {
            Hermitian::Dense(ndarray::Array2::zeros((dim, dim)))
        } else {
            Hermitian::zeros(dim)
        };
        let k = if full { dim * dim } else { dim };
        MmseEstimate {
            matrix,
            stderr: vec![0.0; k],
            samples,
        }
    }

    /// Standard error of the trace.
    pub fn trace_stderr(&self) -> f64 {
        let dim = self.matrix.dim();
        let diag: Vec<f64> = if self.stderr.len() == dim {
            self.stderr.clone()
        } else {
            (0..dim).map(|i| self.stderr[i * dim + i]).collect()
        };
        // diagonal errors are positively correlated; the sum bounds the trace error
        diag.iter().sum()
    }
}

/// E[(x − η(y))^H (x − η(y))] with y = x + z C^{1/2}.
pub fn mmse_matrix(
    prior: &PriorParams,
    noise: &EffectiveNoise,
    samples: usize,
    seeds: &SeedTree,
) -> Result<MmseEstimate> {
    mmse_estimate(prior, noise, samples, seeds, 0, true)
}

pub(crate) fn mmse_estimate(
    prior: &PriorParams,
    noise: &EffectiveNoise,
    samples: usize,
    seeds: &SeedTree,
    key: u64,
    full: bool,
) -> Result<MmseEstimate> {
    ensure!(
        samples >= MIN_MC_SAMPLES,
        InvalidParameter,
        "{samples} Monte Carlo samples requested, at least {MIN_MC_SAMPLES} are required"
    );
    let dim = prior.dim();
    ensure!(noise.dim() == dim, InvalidInput, "prior and noise dimensions differ");
    if prior.lambda == 0.0 || prior.sigma.frobenius_norm() == 0.0 {
        return Ok(MmseEstimate::zero(dim, full, samples));
    }
    let den = BgDenoiser::new(prior, noise)?;
    let h_rows = GaussianRows::new(&prior.sigma);
    let z_rows = GaussianRows::new(noise.cov());
    let parts = mc::map_batches(samples, seeds, rng::STATE_EVOLUTION, key, |len, rng| {
        let mut on = OuterMoments::new(dim, full);
        let mut off = OuterMoments::new(dim, full);
        let mut white = vec![C64::default(); dim];
        let mut h = vec![C64::default(); dim];
        let mut z = vec![C64::default(); dim];
        let mut y = vec![C64::default(); dim];
        for _ in 0..len {
            h_rows.draw(rng, &mut white, &mut h);
            z_rows.draw(rng, &mut white, &mut z);
            for ((yi, hi), zi) in y.iter_mut().zip(&h).zip(&z) {
                *yi = hi + zi;
            }
            let eta = den.posterior_mean(&y);
            let e: Vec<C64> = h.iter().zip(&eta).map(|(a, b)| a - b).collect();
            on.add(&e);
            z_rows.draw(rng, &mut white, &mut z);
            let eta0 = den.posterior_mean(&z);
            let e0: Vec<C64> = eta0.iter().map(|v| -v).collect();
            off.add(&e0);
        }
        (on, off)
    });
    let mut on = OuterMoments::new(dim, full);
    let mut off = OuterMoments::new(dim, full);
    for (a, b) in &parts {
        on.merge(a);
        off.merge(b);
    }
    let lam = prior.lambda;
    let n = samples as f64;
    let mean: Vec<C64> = on
        .mean()
        .iter()
        .zip(off.mean())
        .map(|(a, b)| a * lam + b * (1.0 - lam))
        .collect();
    let stderr = on
        .variance()
        .iter()
        .zip(off.variance())
        .map(|(va, vb)| ((lam * lam * va + (1.0 - lam).powi(2) * vb) / n).sqrt())
        .collect();
    Ok(MmseEstimate {
        matrix: mc::to_hermitian(&mean, dim, full),
        stderr,
        samples,
    })
}

/// Priors, loads and noise level that define one SE recursion.
#[derive(Debug, Clone)]
pub struct SeProblem {
    pub priors: Vec<PriorParams>,
    pub alpha: Vec<f64>,
    pub sigma_w2: f64,
    pub projection: Projection,
}

impl SeProblem {
    pub fn new(priors: Vec<PriorParams>, alpha: Vec<f64>, sigma_w2: f64, projection: Projection) -> Result<Self> {
        ensure!(!priors.is_empty(), InvalidParameter, "no locations");
        ensure!(priors.len() == alpha.len(), InvalidParameter, "priors and alpha differ in length");
        ensure!(sigma_w2 > 0.0, InvalidParameter, "noise variance must be positive");
        let dim = priors[0].dim();
        ensure!(priors.iter().all(|p| p.dim() == dim), InvalidParameter, "prior dimensions differ");
        if let Projection::BlockDiagonal { block } = projection {
            ensure!(block > 0 && dim % block == 0, InvalidParameter, "block {block} does not divide F = {dim}");
        }
        Ok(SeProblem {
            priors,
            alpha,
            sigma_w2,
            projection,
        })
    }

    /// Matched cell-free model: Σ_u from the LSFC profile, α_u = N_u / L.
    pub fn from_system(config: &SystemConfig, geometry: &LsfcProfile) -> Result<Self> {
        config.validate()?;
        let priors = (0..config.num_locations())
            .map(|u| PriorParams::new(config.lambda[u], geometry.sigma(u, config.m)))
            .collect::<Result<Vec<_>>>()?;
        let alpha = (0..config.num_locations()).map(|u| config.alpha_eff(u)).collect();
        SeProblem::new(priors, alpha, config.sigma_w2(), Projection::BlockDiagonal { block: config.m })
    }

    pub fn dim(&self) -> usize {
        self.priors[0].dim()
    }

    fn full(&self) -> bool {
        matches!(self.projection, Projection::Dense)
    }

    fn project(&self, c: Hermitian) -> Hermitian {
        match self.projection {
            Projection::BlockDiagonal { block } => c.block_average(block),
            Projection::Dense => c,
        }
    }

    fn noise_floor(&self) -> Hermitian {
        let f = self.dim();
        if self.full() {
            Hermitian::scaled_identity(f, self.sigma_w2).to_dense_hermitian()
        } else {
            Hermitian::scaled_identity(f, self.sigma_w2)
        }
    }

    /// C^{(1,1)} = σ_w² I + Σ_u α_u λ_u Σ_u (zero initialization).
    pub fn initial(&self) -> Result<EffectiveNoise> {
        let mut c = self.noise_floor();
        for (p, a) in self.priors.iter().zip(&self.alpha) {
            c = c.add(&p.second_moment().scale(*a));
        }
        EffectiveNoise::new(self.project(c))
    }

    /// One SE step: σ_w² I + Σ_u α_u mmse_u(C).
    pub fn update(&self, c: &EffectiveNoise, samples: usize, seeds: &SeedTree) -> Result<(EffectiveNoise, Vec<MmseEstimate>)> {
        let mut next = self.noise_floor();
        let mut mmse = Vec::with_capacity(self.priors.len());
        for (u, (p, a)) in self.priors.iter().zip(&self.alpha).enumerate() {
            let est = mmse_estimate(p, c, samples, seeds, u as u64, self.full())?;
            next = next.add(&est.matrix.scale(*a));
            mmse.push(est);
        }
        Ok((EffectiveNoise::new(self.project(next))?, mmse))
    }
}

/// Output of [`se_recursion`].
#[derive(Debug, Clone)]
pub struct SeTrace {
    /// C^{(t,t)} for t = 1, …, T.
    pub c_seq: Vec<EffectiveNoise>,
    /// Per-location mmse at C^{(t,t)}, i.e. the error of x^{(t+1)}.
    pub mmse_seq: Vec<Vec<MmseEstimate>>,
    pub sigma_w2: f64,
}

impl SeTrace {
    /// Predicted total normalized MSE of X^{(t)}: tr(C^{(t,t)} − σ_w² I), t ≥ 1.
    pub fn predicted_mse(&self, t: usize) -> f64 {
        let c = &self.c_seq[t - 1];
        c.cov().trace() - self.sigma_w2 * c.dim() as f64
    }

    pub fn len(&self) -> usize {
        self.c_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_seq.is_empty()
    }

    pub fn last(&self) -> &EffectiveNoise {
        self.c_seq.last().expect("non-empty trace")
    }
}

/// Runs the recursion for `iterations` covariances C^{(1,1)}, …, C^{(T,T)}.
pub fn se_recursion(problem: &SeProblem, iterations: usize, samples: usize, seeds: &SeedTree) -> Result<SeTrace> {
    ensure!(iterations >= 1, InvalidParameter, "at least one SE iteration is required");
    let mut c_seq = vec![problem.initial()?];
    let mut mmse_seq = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (next, mmse) = problem.update(c_seq.last().expect("non-empty"), samples, seeds)?;
        mmse_seq.push(mmse);
        if c_seq.len() < iterations {
            c_seq.push(next);
        }
    }
    Ok(SeTrace {
        c_seq,
        mmse_seq,
        sigma_w2: problem.sigma_w2,
    })
}

/// Result of [`se_fixed_point`].
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub c: EffectiveNoise,
    pub iterations: usize,
    pub converged: bool,
    /// Largest relative diagonal change in the last iteration.
    pub last_change: f64,
    pub mmse: Vec<MmseEstimate>,
}

/// Iterates the recursion from zero initialization until the largest relative
/// change of a diagonal entry drops below `tol`.
pub fn se_fixed_point(
    problem: &SeProblem,
    samples: usize,
    tol: f64,
    max_iter: usize,
    seeds: &SeedTree,
) -> Result<FixedPoint> {
    ensure!(tol > 0.0, InvalidParameter, "tolerance must be positive");
    ensure!(max_iter >= 1, InvalidParameter, "max_iter must be positive");
    let mut c = problem.initial()?;
    let mut last_change = f64::INFINITY;
    for it in 1..=max_iter {
        let (next, mmse) = problem.update(&c, samples, seeds)?;
        last_change = c
            .cov()
            .diagonal()
            .iter()
            .zip(next.cov().diagonal())
            .map(|(a, b)| (a - b).abs() / a.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        c = next;
        if last_change < tol {
            return Ok(FixedPoint {
                c,
                iterations: it,
                converged: true,
                last_change,
                mmse,
            });
        }
        if it == max_iter {
            return Ok(FixedPoint {
                c,
                iterations: it,
                converged: false,
                last_change,
                mmse,
            });
        }
    }
    unreachable!("loop returns on the last iteration (last change {last_change})")
}

/// Replica-symmetric mutual information, in nats.
#[derive(Debug, Clone)]
pub struct MutualInformation {
    pub total: f64,
    pub stderr: f64,
    /// I(x_u; x_u + z C^{1/2}) with its standard error.
    pub per_location: Vec<(f64, f64)>,
}

/// Σ_u α_u I(x_u; x_u + z C*^{1/2}) + σ_w² tr(C*⁻¹) + ln(|C*| / |e σ_w² I|).
///
/// Per location, I = h(r) − ln|πeC| with the mixture density of r, which
/// reduces to E[r C⁻¹ r^H] − F − E[ln((1−λ) + λ e^{−ln Λ_u(r)})]. The first
/// expectation is λ tr(C⁻¹(Σ+C)) + (1−λ) F exactly; the last is sampled.
pub fn rs_mutual_information(
    problem: &SeProblem,
    c_star: &EffectiveNoise,
    samples: usize,
    seeds: &SeedTree,
) -> Result<MutualInformation> {
    ensure!(samples >= MIN_MC_SAMPLES, InvalidParameter, "at least {MIN_MC_SAMPLES} samples are required");
    let f = problem.dim() as f64;
    let c_fac = c_star.cov().factor()?;
    let c_inv = c_fac.inverse();
    let mut total = problem.sigma_w2 * c_inv.trace() + c_fac.log_det() - f * (1.0 + problem.sigma_w2.ln());
    let mut var = 0.0;
    let mut per_location = Vec::with_capacity(problem.priors.len());
    for (u, (p, a)) in problem.priors.iter().zip(&problem.alpha).enumerate() {
        let (i_u, se_u) = location_information(p, c_star, &c_inv, samples, seeds, u as u64)?;
        total += a * i_u;
        var += (a * se_u).powi(2);
        per_location.push((i_u, se_u));
    }
    Ok(MutualInformation {
        total,
        stderr: var.sqrt(),
        per_location,
    })
}

fn location_information(
    prior: &PriorParams,
    c: &EffectiveNoise,
    c_inv: &Hermitian,
    samples: usize,
    seeds: &SeedTree,
    key: u64,
) -> Result<(f64, f64)> {
    let lam = prior.lambda;
    if lam == 0.0 || prior.sigma.frobenius_norm() == 0.0 {
        return Ok((0.0, 0.0));
    }
    let dim = prior.dim();
    let den = BgDenoiser::new(prior, c)?;
    let sc = prior.sigma.add(c.cov());
    // tr(C⁻¹(Σ+C)) for Hermitian inputs
    let cinv = c_inv.to_dense();
    let scd = sc.to_dense();
    let tr: f64 = (0..dim)
        .map(|i| (0..dim).map(|j| (cinv[[i, j]] * scd[[j, i]]).re).sum::<f64>())
        .sum();
    let exact = lam * tr + (1.0 - lam) * dim as f64;
    let ln_off = (1.0 - lam).ln();
    let ln_on = lam.ln();
    let soft = |log_lr: f64| {
        // ln((1−λ) + λ e^{−ℓ})
        let (x, y) = (ln_off, ln_on - log_lr);
        let m = x.max(y);
        if m == f64::NEG_INFINITY {
            m
        } else {
            m + ((x - m).exp() + (y - m).exp()).ln()
        }
    };
    let r1 = GaussianRows::new(&sc);
    let r0 = GaussianRows::new(c.cov());
    let parts = mc::map_batches(samples, seeds, rng::STATE_EVOLUTION, (1 << 20) | key, |len, rng| {
        let mut on = ScalarMoments::default();
        let mut off = ScalarMoments::default();
        let mut white = vec![C64::default(); dim];
        let mut r = vec![C64::default(); dim];
        for _ in 0..len {
            r1.draw(rng, &mut white, &mut r);
            on.add(soft(den.log_lr(&r)));
            r0.draw(rng, &mut white, &mut r);
            off.add(soft(den.log_lr(&r)));
        }
        (on, off)
    });
    let mut on = ScalarMoments::default();
    let mut off = ScalarMoments::default();
    for (a, b) in &parts {
        on.merge(a);
        off.merge(b);
    }
    let value = exact - dim as f64 - (lam * on.mean() + (1.0 - lam) * off.mean());
    let se = ((lam * on.stderr()).powi(2) + ((1.0 - lam) * off.stderr()).powi(2)).sqrt();
    Ok((value, se))
}
