//! Multi-source matrix AMP.
//!
//! One step, for every location u:
//!
//! ```text
//! Γ_u = S_u X_u − α_u Z_prev Q_u
//! Z   = Y − Σ_u Γ_u
//! R_u = S_u^H Z + X_u
//! X_u ← η_u(R_u),  Q_u ← mean Jacobian of η_u
//! ```
//!
//! Locations are stored stacked along the codeword axis, so the two matrix
//! products are single GEMMs over the whole codebook.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use crate::denoiser::{BgDenoiser, EffectiveNoise, PriorParams};
use crate::error::{ensure, Result};
use crate::linalg::{adjoint_mul, gram_mean, Hermitian, C64};
use crate::mc::{self, GaussianRows};
use crate::model::{Scene, SystemConfig};
use crate::rng::SeedTree;

/// How Q_u is computed after each denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnsagerMode {
    /// Average of η′ over the rows of R_u.
    Empirical,
    /// Monte Carlo average of η′(x + φ) under the SE law.
    StateEvolution { samples: usize, seed: u64 },
}

/// Which covariance the denoiser treats as the effective noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// C^{(t,t)} from the supplied SE schedule.
    Schedule,
    /// Block-averaged diagonal of (1/L) Z^H Z.
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AmpOptions {
    pub onsager: OnsagerMode,
    pub noise: NoiseMode,
    /// Block length for the online noise estimate (M).
    pub block: usize,
}

impl Default for AmpOptions {
    fn default() -> Self {
        AmpOptions {
            onsager: OnsagerMode::Empirical,
            noise: NoiseMode::Schedule,
            block: 1,
        }
    }
}

impl OnsagerMode {
    pub fn name(&self) -> &'static str {
        match self {
            OnsagerMode::Empirical => "empirical",
            OnsagerMode::StateEvolution { .. } => "se",
        }
    }
}

/// Iterate of the algorithm; per-location blocks are stacked row-wise.
#[derive(Debug, Clone)]
pub struct AmpState {
    /// X^{(t)}, N×F.
    pub x_hat: Array2<C64>,
    /// Z^{(t−1)}, L×F.
    pub z: Array2<C64>,
    /// Q_u^{(t)}.
    pub q: Vec<Array2<C64>>,
    /// R^{(t−1)}, N×F (zero before the first step).
    pub r: Array2<C64>,
    /// Index t of the estimate held in `x_hat`.
    pub t: usize,
    offsets: Vec<usize>,
}

impl AmpState {
    /// X^{(1)} = 0, Z^{(0)} = 0.
    pub fn new(scene: &Scene) -> Self {
        let n = scene.codebook.ncols();
        let (l, f) = scene.observation.dim();
        AmpState {
            x_hat: Array2::zeros((n, f)),
            z: Array2::zeros((l, f)),
            q: vec![Array2::zeros((f, f)); scene.num_locations()],
            r: Array2::zeros((n, f)),
            t: 1,
            offsets: scene.offsets.clone(),
        }
    }

    pub fn x_u(&self, u: usize) -> ArrayView2<'_, C64> {
        self.x_hat.slice(s![self.offsets[u]..self.offsets[u + 1], ..])
    }

    pub fn r_u(&self, u: usize) -> ArrayView2<'_, C64> {
        self.r.slice(s![self.offsets[u]..self.offsets[u + 1], ..])
    }
}

/// Covariance used by the denoiser at the current step.
fn online_noise(z: &Array2<C64>, block: usize) -> Result<EffectiveNoise> {
    let g = gram_mean(&z.view());
    let diag: Vec<f64> = (0..g.nrows()).map(|i| g[[i, i]].re.max(1e-300)).collect();
    EffectiveNoise::new(Hermitian::Diagonal(diag).block_average(block))
}

/// Mean of η′(a h + φ) with h ~ CN(0, Σ), φ ~ CN(0, C).
fn se_onsager(den: &BgDenoiser, prior: &PriorParams, noise: &EffectiveNoise, samples: usize, seeds: &SeedTree, key: u64) -> Array2<C64> {
    let f = prior.dim();
    let h_rows = GaussianRows::new(&prior.sigma);
    let z_rows = GaussianRows::new(noise.cov());
    let lam = prior.lambda;
    let parts = mc::map_batches(samples, seeds, crate::rng::STATE_EVOLUTION, key, |len, rng| {
        let mut on = Array2::<C64>::zeros((f, f));
        let mut off = Array2::<C64>::zeros((f, f));
        let mut white = vec![C64::default(); f];
        let mut h = vec![C64::default(); f];
        let mut z = vec![C64::default(); f];
        for _ in 0..len {
            h_rows.draw(rng, &mut white, &mut h);
            z_rows.draw(rng, &mut white, &mut z);
            let y: Vec<C64> = h.iter().zip(&z).map(|(a, b)| a + b).collect();
            on += &den.jacobian(&y);
            z_rows.draw(rng, &mut white, &mut z);
            off += &den.jacobian(&z);
        }
        (on, off)
    });
    let mut q = Array2::<C64>::zeros((f, f));
    for (on, off) in parts {
        q = q + on * C64::new(lam, 0.0) + off * C64::new(1.0 - lam, 0.0);
    }
    q / C64::new(samples as f64, 0.0)
}

/// One AMP step from X^{(t)} to X^{(t+1)} using `noise` = C^{(t,t)}.
pub fn amp_step(
    state: &AmpState,
    scene: &Scene,
    priors: &[PriorParams],
    alpha: &[f64],
    noise: &EffectiveNoise,
    opts: &AmpOptions,
) -> Result<AmpState> {
    let u_count = scene.num_locations();
    let (l, f) = scene.observation.dim();
    let n = scene.codebook.ncols();
    ensure!(
        priors.len() == u_count && alpha.len() == u_count && state.q.len() == u_count,
        InvalidInput,
        "expected {u_count} locations"
    );
    ensure!(
        state.x_hat.dim() == (n, f) && state.z.dim() == (l, f) && scene.codebook.nrows() == l,
        InvalidInput,
        "state dimensions do not match the scene"
    );
    ensure!(state.offsets == scene.offsets, InvalidInput, "state and scene partition differ");
    ensure!(
        priors.iter().all(|p| p.dim() == f),
        InvalidInput,
        "prior dimension differs from F = {f}"
    );

    // Z^{(t)} = Y − S X^{(t)} + Z^{(t−1)} Σ_u α_u Q_u^{(t)}
    let mut onsager = Array2::<C64>::zeros((f, f));
    for (q, a) in state.q.iter().zip(alpha) {
        onsager.scaled_add(C64::new(*a, 0.0), q);
    }
    let mut z = &scene.observation - &scene.codebook.dot(&state.x_hat);
    z += &state.z.dot(&onsager);

    let noise = match opts.noise {
        NoiseMode::Schedule => {
            ensure!(noise.dim() == f, InvalidInput, "noise dimension {} differs from F = {f}", noise.dim());
            noise.clone()
        }
        NoiseMode::Online => online_noise(&z, opts.block)?,
    };

    let mut r = adjoint_mul(&scene.codebook.view(), &z.view());
    r += &state.x_hat;

    let blocks: Vec<(Array2<C64>, Array2<C64>)> = (0..u_count)
        .into_par_iter()
        .map(|u| -> Result<_> {
            let rows = scene.range(u);
            let r_u = r.slice(s![rows.clone(), ..]);
            let mut x = Array2::<C64>::zeros(r_u.dim());
            let prior = &priors[u];
            if prior.lambda == 0.0 || prior.sigma.frobenius_norm() == 0.0 {
                return Ok((x, Array2::zeros((f, f))));
            }
            let den = BgDenoiser::new(prior, &noise)?;
            let empirical = matches!(opts.onsager, OnsagerMode::Empirical);
            let jac = den.apply_rows(&r_u, &mut x.view_mut(), empirical);
            let q = match opts.onsager {
                OnsagerMode::Empirical => jac.expect("requested"),
                OnsagerMode::StateEvolution { samples, seed } => {
                    let seeds = SeedTree::new(seed).child("onsager", state.t as u64);
                    se_onsager(&den, prior, &noise, samples, &seeds, u as u64)
                }
            };
            Ok((x, q))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut x_hat = Array2::<C64>::zeros((n, f));
    let mut q = Vec::with_capacity(u_count);
    for (u, (x, qu)) in blocks.into_iter().enumerate() {
        x_hat.slice_mut(s![scene.range(u), ..]).assign(&x);
        q.push(qu);
    }
    Ok(AmpState {
        x_hat,
        z,
        q,
        r,
        t: state.t + 1,
        offsets: state.offsets.clone(),
    })
}

/// (1/N)(X − X̂)^H (X − X̂).
pub fn empirical_mse_matrix(x_true: &ArrayView2<C64>, x_est: &ArrayView2<C64>) -> Result<Array2<C64>> {
    ensure!(x_true.dim() == x_est.dim(), InvalidInput, "shapes {:?} and {:?} differ", x_true.dim(), x_est.dim());
    let e = x_true - x_est;
    Ok(gram_mean(&e.view()))
}

/// Output of [`amp_run`].
#[derive(Debug, Clone)]
pub struct AmpTrace {
    /// (1/L) Σ_u ‖X_u − X_u^{(t+1)}‖_F² after step t = 1..T.
    pub mse: Vec<f64>,
    /// Per step, per location (1/N_u)(X_u − X_u^{(t+1)})^H(·).
    pub mse_matrices: Vec<Vec<Array2<C64>>>,
    /// Q_u^{(t+1)} per step.
    pub q_history: Vec<Vec<Array2<C64>>>,
    /// Noise covariance handed to the denoiser at each step.
    pub noise_used: Vec<EffectiveNoise>,
    /// Final state: `r` holds R^{(T)}, `x_hat` holds X^{(T+1)}.
    pub state: AmpState,
}

/// Runs T = `schedule.len()` steps from X^{(1)} = 0.
pub fn amp_run(
    scene: &Scene,
    priors: &[PriorParams],
    config: &SystemConfig,
    schedule: &[EffectiveNoise],
    opts: &AmpOptions,
) -> Result<AmpTrace> {
    ensure!(
        schedule.len() == config.iterations,
        InvalidInput,
        "schedule has {} entries, expected T = {}",
        schedule.len(),
        config.iterations
    );
    let alpha: Vec<f64> = (0..config.num_locations()).map(|u| config.alpha_eff(u)).collect();
    let l = scene.observation.nrows() as f64;
    let mut state = AmpState::new(scene);
    let mut trace = AmpTrace {
        mse: Vec::with_capacity(schedule.len()),
        mse_matrices: Vec::with_capacity(schedule.len()),
        q_history: Vec::with_capacity(schedule.len()),
        noise_used: Vec::with_capacity(schedule.len()),
        state: state.clone(),
    };
    for c in schedule {
        state = amp_step(&state, scene, priors, &alpha, c, opts)?;
        let mut total = 0.0;
        let mut mats = Vec::with_capacity(priors.len());
        for u in 0..priors.len() {
            let m = empirical_mse_matrix(&scene.channels_u(u), &state.x_u(u))?;
            total += m.diag().iter().map(|v| v.re).sum::<f64>() * scene.range(u).len() as f64;
            mats.push(m);
        }
        trace.mse.push(total / l);
        trace.mse_matrices.push(mats);
        trace.q_history.push(state.q.clone());
        trace.noise_used.push(match opts.noise {
            NoiseMode::Schedule => c.clone(),
            NoiseMode::Online => online_noise(&state.z, opts.block)?,
        });
    }
    trace.state = state;
    Ok(trace)
}
