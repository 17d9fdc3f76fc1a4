//! Channel-estimation quality: AMP errors conditioned on the detection outcome
//! and the genie-aided linear MMSE baseline that knows the active set.

use nalgebra::{Cholesky, DMatrix};
use ndarray::{s, Array1, Array2, Axis};

use crate::amp::AmpTrace;
use crate::denoiser::{BgDenoiser, EffectiveNoise, PriorParams};
use crate::detection::DetectionReport;
use crate::error::{ensure, Error, Result};
use crate::linalg::{from_nalgebra, to_nalgebra, C64};
use crate::mc::{self, GaussianRows, ScalarMoments};
use crate::model::{LsfcProfile, Scene, SystemConfig};
use crate::rng::{self, SeedTree};

/// Acceptance rate below which conditional MC estimates are refused.
pub const MIN_ACCEPTANCE: f64 = 1e-3;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moment {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Moment {
    pub fn from_values(v: &[f64]) -> Option<Moment> {
        let mut m = ScalarMoments::default();
        v.iter().for_each(|x| m.add(*x));
        Moment::from_moments(&m)
    }

    pub fn from_moments(m: &ScalarMoments) -> Option<Moment> {
        (m.n > 0).then(|| Moment {
            mean: m.mean(),
            stderr: if m.n > 1 { (m.variance() * m.n as f64 / (m.n - 1) as f64 / m.n as f64).sqrt() } else { f64::NAN },
            count: m.n,
        })
    }

    fn scaled(self, k: f64) -> Moment {
        Moment {
            mean: self.mean * k,
            stderr: self.stderr * k,
            count: self.count,
        }
    }
}

/// Theory-side conditional expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TheoryValue {
    Value(Moment),
    /// The conditioning event is empty (e.g. η ≡ 0).
    Undefined,
    /// Acceptance rate under [`MIN_ACCEPTANCE`].
    InsufficientSamples { acceptance: f64 },
}

impl TheoryValue {
    pub fn value(&self) -> Option<Moment> {
        match self {
            TheoryValue::Value(m) => Some(*m),
            _ => None,
        }
    }
}

/// Conditional error statistics for one location.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationErrors {
    /// ‖h − ĥ‖^p over A_d.
    pub detected: Option<Moment>,
    /// ‖ĥ‖^p over A_fa.
    pub false_alarm: Option<Moment>,
    pub theory_detected: TheoryValue,
    pub theory_false_alarm: TheoryValue,
    pub n_detected: usize,
    pub n_false_alarm: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalErrorReport {
    pub p: u32,
    /// Entries per channel vector; divides p = 2 moments into per-coefficient MSE.
    pub f: usize,
    pub locations: Vec<LocationErrors>,
}

impl ConditionalErrorReport {
    /// Empirical A_d MSE per coefficient (p = 2 only).
    pub fn detected_mse(&self, u: usize) -> Option<Moment> {
        (self.p == 2).then(|| self.locations[u].detected.map(|m| m.scaled(1.0 / self.f as f64))).flatten()
    }

    pub fn theory_detected_mse(&self, u: usize) -> Option<Moment> {
        (self.p == 2)
            .then(|| self.locations[u].theory_detected.value().map(|m| m.scaled(1.0 / self.f as f64)))
            .flatten()
    }
}

fn norm_pow(v: impl Iterator<Item = C64>, p: u32) -> f64 {
    let sq: f64 = v.map(|x| x.norm_sqr()).sum();
    sq.powi(p as i32 / 2)
}

/// Rejection MC of E[‖h − η(h + φ)‖^p | detected] (`active`) or
/// E[‖η(φ)‖^p | detected] under the SE law with noise φ ~ CN(0, C).
#[allow(clippy::too_many_arguments)]
pub fn conditional_error_theory(
    prior: &PriorParams,
    noise: &EffectiveNoise,
    nu_log: f64,
    active: bool,
    p: u32,
    samples: usize,
    seeds: &SeedTree,
    key: u64,
) -> Result<TheoryValue> {
    if prior.lambda == 0.0 || prior.sigma.frobenius_norm() == 0.0 {
        return Ok(TheoryValue::Undefined);
    }
    let den = BgDenoiser::new(prior, noise)?;
    let f = prior.dim();
    let h_rows = GaussianRows::new(&prior.sigma);
    let z_rows = GaussianRows::new(noise.cov());
    let parts = mc::map_batches(samples, seeds, rng::CONDITIONAL, key, |len, rng| {
        let mut acc = ScalarMoments::default();
        let mut white = vec![C64::default(); f];
        let mut h = vec![C64::default(); f];
        let mut z = vec![C64::default(); f];
        for _ in 0..len {
            z_rows.draw(rng, &mut white, &mut z);
            if active {
                h_rows.draw(rng, &mut white, &mut h);
                z.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
            }
            if den.log_lr(&z) < nu_log {
                let eta = den.posterior_mean(&z);
                let v = if active {
                    norm_pow(h.iter().zip(&eta).map(|(a, b)| a - b), p)
                } else {
                    norm_pow(eta.into_iter(), p)
                };
                acc.add(v);
            }
        }
        acc
    });
    let mut acc = ScalarMoments::default();
    parts.iter().for_each(|m| acc.merge(m));
    let acceptance = acc.n as f64 / samples as f64;
    if acceptance < MIN_ACCEPTANCE {
        return Ok(TheoryValue::InsufficientSamples { acceptance });
    }
    Ok(Moment::from_moments(&acc).map_or(TheoryValue::Undefined, TheoryValue::Value))
}

/// Running sums of ‖h − ĥ‖^p over A_d and ‖ĥ‖^p over A_fa for one location.
#[derive(Debug, Clone, Copy, Default)]
pub struct ErrorSums {
    pub detected: ScalarMoments,
    pub false_alarm: ScalarMoments,
}

impl ErrorSums {
    pub fn merge(&mut self, o: &ErrorSums) {
        self.detected.merge(&o.detected);
        self.false_alarm.merge(&o.false_alarm);
    }
}

/// Empirical error sums of the estimates `x_hat` (stacked N×F) under `decisions`.
pub fn empirical_error_sums(scene: &Scene, x_hat: &Array2<C64>, decisions: &[Vec<bool>], p: u32) -> Result<Vec<ErrorSums>> {
    ensure!(p >= 2 && p % 2 == 0, InvalidParameter, "moment order p = {p} must be even and positive");
    ensure!(x_hat.dim() == scene.channels.dim(), InvalidInput, "estimates do not belong to this scene");
    ensure!(decisions.len() == scene.num_locations(), InvalidInput, "one decision vector per location is required");
    let mut out = Vec::with_capacity(decisions.len());
    for (u, dec) in decisions.iter().enumerate() {
        let range = scene.range(u);
        ensure!(dec.len() == range.len(), InvalidInput, "decision count differs at location {u}");
        let mut e = ErrorSums::default();
        for (n, d) in range.zip(dec) {
            if !d {
                continue;
            }
            let x = x_hat.row(n);
            if scene.activity[n] {
                e.detected.add(norm_pow(scene.channels.row(n).iter().zip(x.iter()).map(|(a, b)| a - b), p));
            } else {
                e.false_alarm.add(norm_pow(x.iter().copied(), p));
            }
        }
        out.push(e);
    }
    Ok(out)
}

/// Empirical and theoretical moments of the AMP estimation error over the
/// detected-active set A_d and of the estimate norm over the false-alarm set A_fa.
pub fn conditional_error_stats(
    scene: &Scene,
    trace: &AmpTrace,
    report: &DetectionReport,
    priors: &[PriorParams],
    p: u32,
    samples: usize,
    seeds: &SeedTree,
) -> Result<ConditionalErrorReport> {
    ensure!(priors.len() == scene.num_locations(), InvalidInput, "one prior per location is required");
    let noise = trace.noise_used.last().ok_or_else(|| Error::InvalidInput("empty AMP trace".into()))?;
    let sums = empirical_error_sums(scene, &trace.state.x_hat, &report.decisions, p)?;
    let mut locations = Vec::with_capacity(sums.len());
    for (u, e) in sums.iter().enumerate() {
        let nu = report.thresholds[u];
        let sub = seeds.child("conditional", u as u64);
        locations.push(LocationErrors {
            n_detected: e.detected.n,
            n_false_alarm: e.false_alarm.n,
            detected: Moment::from_moments(&e.detected),
            false_alarm: Moment::from_moments(&e.false_alarm),
            theory_detected: conditional_error_theory(&priors[u], noise, nu, true, p, samples, &sub, 0)?,
            theory_false_alarm: conditional_error_theory(&priors[u], noise, nu, false, p, samples, &sub, 1)?,
        });
    }
    Ok(ConditionalErrorReport {
        p,
        f: scene.channels.ncols(),
        locations,
    })
}

/// How the genie estimator inverts the regularized Gram operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenieSolver {
    /// L×L system when K ≥ L, K×K system otherwise.
    Auto,
    Primal,
    Dual,
}

/// Genie-aided MMSE estimates of all active channels.
#[derive(Debug, Clone)]
pub struct GenieEstimate {
    /// Stacked row indices (into the scene) of the active codewords.
    pub rows: Vec<usize>,
    /// Location of each active row.
    pub locations: Vec<usize>,
    /// K×F estimates.
    pub estimates: Array2<C64>,
    /// K×B per-coefficient MSE g/(1 + gμ).
    pub mse: Array2<f64>,
    /// K×B leave-one-out quadratic forms μ.
    pub mu: Array2<f64>,
}

impl GenieEstimate {
    /// Per-coefficient squared error averaged over active rows of location `u`.
    pub fn empirical_mse(&self, scene: &Scene, u: usize) -> Option<Moment> {
        let f = scene.channels.ncols() as f64;
        let v: Vec<f64> = self
            .rows
            .iter()
            .zip(&self.locations)
            .enumerate()
            .filter(|(_, (_, l))| **l == u)
            .map(|(k, (n, _))| {
                scene
                    .channels
                    .row(*n)
                    .iter()
                    .zip(self.estimates.row(k).iter())
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum::<f64>()
                    / f
            })
            .collect();
        Moment::from_values(&v)
    }

    /// Mean of the per-coefficient MSE over RUs and active rows of location `u`.
    pub fn predicted_mse(&self, u: usize) -> Option<f64> {
        let idx: Vec<usize> = (0..self.rows.len()).filter(|k| self.locations[*k] == u).collect();
        (!idx.is_empty()).then(|| idx.iter().map(|k| self.mse.row(*k).mean().unwrap_or(0.0)).sum::<f64>() / idx.len() as f64)
    }
}

fn cholesky(m: DMatrix<C64>) -> Result<Cholesky<C64, nalgebra::Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Conditioning("genie Gram operator is not positive definite".into()))
}

/// Linear MMSE estimate of the active channels at every RU from Y_b.
pub fn genie_mmse_estimate(
    scene: &Scene,
    geometry: &LsfcProfile,
    config: &SystemConfig,
    solver: GenieSolver,
) -> Result<GenieEstimate> {
    let (l, f) = scene.observation.dim();
    let m = config.m;
    let b_count = config.b;
    ensure!(f == b_count * m, InvalidInput, "scene has F = {f}, config has B·M = {}", b_count * m);
    let sigma2 = config.sigma_w2();
    let mut rows = Vec::new();
    let mut locations = Vec::new();
    for u in 0..scene.num_locations() {
        for n in scene.range(u) {
            if scene.activity[n] {
                rows.push(n);
                locations.push(u);
            }
        }
    }
    let k = rows.len();
    ensure!(k > 0, InvalidInput, "no active messages");
    let mut st = Array2::<C64>::zeros((l, k));
    for (j, n) in rows.iter().enumerate() {
        st.column_mut(j).assign(&scene.codebook.column(*n));
    }
    let sth = st.t().mapv(|v| v.conj());
    let dual = match solver {
        GenieSolver::Auto => k < l,
        GenieSolver::Primal => false,
        GenieSolver::Dual => true,
    };
    let gram = dual.then(|| sth.dot(&st));

    let mut estimates = Array2::<C64>::zeros((k, f));
    let mut mse = Array2::<f64>::zeros((k, b_count));
    let mut mu = Array2::<f64>::zeros((k, b_count));
    for b in 0..b_count {
        let g: Array1<f64> = locations.iter().map(|u| geometry.gain(*u, b)).collect();
        ensure!(g.iter().all(|v| *v > 0.0), InvalidInput, "genie estimator needs positive gains");
        let yb = scene.observation.slice(s![.., b * m..(b + 1) * m]);
        let sy = sth.dot(&yb);
        let (est, err) = if let Some(gram) = &gram {
            // Ĥ = D^{1/2} P D^{1/2} S^H Y with P = (D^{1/2} G D^{1/2} + σ² I)^{-1};
            // error covariance σ² D^{1/2} P D^{1/2}
            let sq = g.mapv(f64::sqrt);
            let mut a = gram.clone();
            for ((i, j), v) in a.indexed_iter_mut() {
                *v *= sq[i] * sq[j];
            }
            a.diag_mut().iter_mut().for_each(|v| *v += sigma2);
            let chol = cholesky(to_nalgebra(&a.view()))?;
            let mut rhs = sy;
            for (i, mut row) in rhs.axis_iter_mut(Axis(0)).enumerate() {
                row.mapv_inplace(|v| v * sq[i]);
            }
            let mut est = from_nalgebra(&chol.solve(&to_nalgebra(&rhs.view())));
            for (i, mut row) in est.axis_iter_mut(Axis(0)).enumerate() {
                row.mapv_inplace(|v| v * sq[i]);
            }
            let p = chol.inverse();
            let err: Vec<f64> = (0..k).map(|i| sigma2 * g[i] * p[(i, i)].re).collect();
            (est, err)
        } else {
            // A = S D S^H + σ² I;  Ĥ = D S^H A^{-1} Y;  mse = g − g² s^H A^{-1} s
            let mut sd = st.clone();
            for (j, mut col) in sd.axis_iter_mut(Axis(1)).enumerate() {
                col.mapv_inplace(|v| v * g[j]);
            }
            let mut a = sd.dot(&sth);
            a.diag_mut().iter_mut().for_each(|v| *v += sigma2);
            let chol = cholesky(to_nalgebra(&a.view()))?;
            let ainv_y = from_nalgebra(&chol.solve(&to_nalgebra(&yb)));
            let ainv_s = from_nalgebra(&chol.solve(&to_nalgebra(&st.view())));
            let mut est = sth.dot(&ainv_y);
            for (i, mut row) in est.axis_iter_mut(Axis(0)).enumerate() {
                row.mapv_inplace(|v| v * g[i]);
            }
            let err: Vec<f64> = (0..k)
                .map(|i| {
                    let q: C64 = st.column(i).iter().zip(ainv_s.column(i).iter()).map(|(a, b)| a.conj() * b).sum();
                    g[i] - g[i] * g[i] * q.re
                })
                .collect();
            (est, err)
        };
        estimates.slice_mut(s![.., b * m..(b + 1) * m]).assign(&est);
        for i in 0..k {
            mse[[i, b]] = err[i];
            // g/(1 + gμ) = err  ⇒  μ = 1/err − 1/g
            mu[[i, b]] = 1.0 / err[i] - 1.0 / g[i];
        }
    }
    Ok(GenieEstimate {
        rows,
        locations,
        estimates,
        mse,
        mu,
    })
}

/// Per-coefficient genie MSE g/(1 + gμ).
pub fn genie_mse(g: f64, mu: f64) -> f64 {
    g / (1.0 + g * mu)
}

/// Root of c = σ² + Σ_u λ_u α_u g_{u,b} c / (g_{u,b} + c) by monotone iteration from σ².
pub fn genie_asymptotic_fixed_point(
    geometry: &LsfcProfile,
    lambda: &[f64],
    alpha: &[f64],
    sigma_w2: f64,
    b: usize,
    tol: f64,
) -> Result<f64> {
    ensure!(tol > 0.0, InvalidParameter, "tolerance must be positive");
    ensure!(sigma_w2 > 0.0, InvalidParameter, "noise variance must be positive");
    ensure!(b < geometry.num_rus(), InvalidParameter, "RU index {b} out of range");
    ensure!(
        lambda.len() == geometry.num_locations() && alpha.len() == lambda.len(),
        InvalidParameter,
        "lambda and alpha must have one entry per location"
    );
    let terms: Vec<(f64, f64)> = (0..lambda.len()).map(|u| (lambda[u] * alpha[u], geometry.gain(u, b))).collect();
    let map = |c: f64| sigma_w2 + terms.iter().map(|(w, g)| if *g > 0.0 { w * g * c / (g + c) } else { 0.0 }).sum::<f64>();
    let mut c = sigma_w2;
    for _ in 0..100_000 {
        let next = map(c);
        if (next - c).abs() < tol * 1e-3 {
            c = next;
            break;
        }
        c = next;
    }
    ensure!((map(c) - c).abs() < tol, Conditioning, "fixed-point iteration did not converge");
    Ok(c)
}
