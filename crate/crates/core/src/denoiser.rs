//! Bernoulli-Gaussian posterior-mean denoiser, its MAP likelihood ratio and
//! its Wirtinger Jacobian.
//!
//! For a row observation r = x + z C^{1/2} with x = a h, a ~ Bern(λ),
//! h ~ CN(0, Σ):
//!
//!   m(r)  = r A,            A = (Σ + C)⁻¹ Σ
//!   ℓ(r)  = ln((1-λ)/λ) + ln|Σ+C| − ln|C| − r D r^H,  D = C⁻¹ − (Σ+C)⁻¹
//!   η(r)  = m(r) / (1 + e^ℓ)
//!
//! Everything is evaluated in the log domain so that large ‖r‖ never overflows.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::error::{ensure, Result};
use crate::linalg::{row_mul_dense, Hermitian, C64};

/// Prior of one location: activity probability and channel covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    pub lambda: f64,
    pub sigma: Hermitian,
}

impl PriorParams {
    pub fn new(lambda: f64, sigma: Hermitian) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&lambda), InvalidParameter, "lambda = {lambda} outside [0, 1]");
        ensure!(
            sigma.hermitian_defect() < 1e-10,
            InvalidParameter,
            "prior covariance is not Hermitian"
        );
        ensure!(
            sigma.min_eigenvalue() >= -1e-12,
            InvalidParameter,
            "prior covariance is not positive semi-definite"
        );
        Ok(PriorParams { lambda, sigma })
    }

    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    /// E[x^H x] = λ Σ.
    pub fn second_moment(&self) -> Hermitian {
        self.sigma.scale(self.lambda)
    }
}

/// Effective noise covariance C seen by the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveNoise {
    cov: Hermitian,
}

impl EffectiveNoise {
    pub fn new(cov: Hermitian) -> Result<Self> {
        ensure!(cov.hermitian_defect() < 1e-10, InvalidParameter, "noise covariance is not Hermitian");
        cov.factor()?;
        Ok(EffectiveNoise { cov })
    }

    /// C = diag(τ_1, …, τ_B) ⊗ I_M.
    pub fn per_ru(tau: &[f64], m: usize) -> Result<Self> {
        let d = tau.iter().flat_map(|&t| std::iter::repeat_n(t, m)).collect();
        EffectiveNoise::new(Hermitian::Diagonal(d))
    }

    pub fn scalar(dim: usize, tau: f64) -> Result<Self> {
        EffectiveNoise::new(Hermitian::scaled_identity(dim, tau))
    }

    pub fn cov(&self) -> &Hermitian {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    /// Per-RU scalars τ_b, averaging each block of `m` diagonal entries.
    pub fn tau(&self, m: usize) -> Vec<f64> {
        self.cov.diagonal().chunks(m).map(|c| c.iter().sum::<f64>() / m as f64).collect()
    }

    pub fn into_inner(self) -> Hermitian {
        self.cov
    }
}

/// F×F matrix that is real diagonal in the matched model.
#[derive(Debug, Clone)]
enum Op {
    Diag(Vec<f64>),
    Dense(Array2<C64>),
}

impl Op {
    fn from_hermitian(h: Hermitian) -> Op {
        match h {
            Hermitian::Diagonal(d) => Op::Diag(d),
            Hermitian::Dense(m) => Op::Dense(m),
        }
    }

    /// r M.
    fn row_mul(&self, r: &[C64], out: &mut [C64]) {
        match self {
            Op::Diag(d) => {
                for ((o, x), s) in out.iter_mut().zip(r).zip(d) {
                    *o = x * s;
                }
            }
            Op::Dense(m) => out.copy_from_slice(&row_mul_dense(r, &m.view())),
        }
    }

    /// M v^H, returned as a column stored in a slice.
    fn mul_adjoint(&self, v: &[C64], out: &mut [C64]) {
        match self {
            Op::Diag(d) => {
                for ((o, x), s) in out.iter_mut().zip(v).zip(d) {
                    *o = x.conj() * s;
                }
            }
            Op::Dense(m) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = m.row(i).iter().zip(v).map(|(a, b)| a * b.conj()).sum();
                }
            }
        }
    }

    fn to_dense(&self) -> Array2<C64> {
        match self {
            Op::Diag(d) => Hermitian::Diagonal(d.clone()).to_dense(),
            Op::Dense(m) => m.clone(),
        }
    }
}

/// Output of one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// η(r).
    pub eta: Vec<C64>,
    /// Linear MMSE part m(r) = r(Σ+C)⁻¹Σ.
    pub linear: Vec<C64>,
    /// Quadratic form q = r D r^H.
    pub quad: f64,
    /// ln Λ_map(r).
    pub log_lr_map: f64,
    /// Posterior activity probability 1/(1+Λ_map).
    pub p_active: f64,
}

/// Stable 1/(1 + e^x).
#[inline]
pub fn logistic_neg(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// The posterior-mean denoiser η_{u,t} for one prior and one noise level.
#[derive(Debug, Clone)]
pub struct BgDenoiser {
    lambda: f64,
    dim: usize,
    /// (Σ+C)⁻¹Σ
    a: Op,
    /// C⁻¹ − (Σ+C)⁻¹
    d: Op,
    log_odds: f64,
    log_det_ratio: f64,
}

impl BgDenoiser {
    pub fn new(prior: &PriorParams, noise: &EffectiveNoise) -> Result<Self> {
        ensure!(prior.lambda > 0.0, InvalidParameter, "the denoiser is undefined for lambda = 0");
        ensure!(
            prior.dim() == noise.dim(),
            InvalidInput,
            "prior has dimension {} but noise has {}",
            prior.dim(),
            noise.dim()
        );
        let c = noise.cov();
        let c_fac = c.factor()?;
        let sc = prior.sigma.add(c);
        let sc_fac = sc.factor()?;
        let log_det_ratio = sc_fac.log_det() - c_fac.log_det();
        let log_odds = if prior.lambda >= 1.0 {
            f64::NEG_INFINITY
        } else {
            ((1.0 - prior.lambda) / prior.lambda).ln()
        };
        let (a, d) = match (&prior.sigma, c) {
            (Hermitian::Diagonal(s), Hermitian::Diagonal(cd)) => {
                let a = s.iter().zip(cd).map(|(s, c)| s / (s + c)).collect();
                let d = s.iter().zip(cd).map(|(s, c)| s / (c * (s + c))).collect();
                (Op::Diag(a), Op::Diag(d))
            }
            _ => {
                let sc_inv = sc_fac.inverse().to_dense();
                let a = sc_inv.dot(&prior.sigma.to_dense());
                let d = c_fac.inverse().to_dense() - sc_inv;
                (Op::Dense(a), Op::from_hermitian(Hermitian::Dense(d)))
            }
        };
        Ok(BgDenoiser {
            lambda: prior.lambda,
            dim: prior.dim(),
            a,
            d,
            log_odds,
            log_det_ratio,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// ln|Σ+C| − ln|C|.
    pub fn log_det_ratio(&self) -> f64 {
        self.log_det_ratio
    }

    /// ln((1−λ)/λ).
    pub fn log_odds(&self) -> f64 {
        self.log_odds
    }

    /// (Σ+C)⁻¹Σ as a dense matrix.
    pub fn linear_gain(&self) -> Array2<C64> {
        self.a.to_dense()
    }

    /// C⁻¹ − (Σ+C)⁻¹ as a dense matrix.
    pub fn quad_matrix(&self) -> Array2<C64> {
        self.d.to_dense()
    }

    /// r D r^H.
    pub fn quad_form(&self, r: &[C64]) -> f64 {
        match &self.d {
            Op::Diag(d) => r.iter().zip(d).map(|(x, s)| s * x.norm_sqr()).sum(),
            Op::Dense(m) => {
                let rd = row_mul_dense(r, &m.view());
                rd.iter().zip(r).map(|(a, b)| (a * b.conj()).re).sum()
            }
        }
    }

    /// ln Λ_u(r) = ln|Σ+C| − ln|C| − r D r^H, the prior-free log ratio.
    pub fn log_lr(&self, r: &[C64]) -> f64 {
        self.log_det_ratio - self.quad_form(r)
    }

    /// ln Λ_map(r), including the prior odds.
    pub fn log_lr_map(&self, r: &[C64]) -> f64 {
        self.log_odds + self.log_lr(r)
    }

    pub fn evaluate(&self, r: &[C64]) -> Evaluation {
        let mut linear = vec![C64::default(); self.dim];
        self.a.row_mul(r, &mut linear);
        let quad = self.quad_form(r);
        let log_lr_map = self.log_odds + self.log_det_ratio - quad;
        let p_active = logistic_neg(log_lr_map);
        let eta = linear.iter().map(|v| v * p_active).collect();
        Evaluation {
            eta,
            linear,
            quad,
            log_lr_map,
            p_active,
        }
    }

    pub fn posterior_mean(&self, r: &[C64]) -> Vec<C64> {
        self.evaluate(r).eta
    }

    /// Wirtinger Jacobian [η′(r)]_{ij} = ∂η_j/∂r_i.
    ///
    /// With s = 1/(1+Λ_map) and m = r A this is s A + s(1−s) (C⁻¹ m^H) m, where
    /// C⁻¹ m^H = D r^H.
    pub fn jacobian(&self, r: &[C64]) -> Array2<C64> {
        let mut j = Array2::zeros((self.dim, self.dim));
        self.accumulate_jacobian(r, 1.0, &mut j.view_mut());
        j
    }

    /// out += w η′(r).
    fn accumulate_jacobian(&self, r: &[C64], w: f64, out: &mut ArrayViewMut2<C64>) {
        let ev = self.evaluate(r);
        self.accumulate_jacobian_from(r, &ev, w, out);
    }

    fn accumulate_jacobian_from(&self, r: &[C64], ev: &Evaluation, w: f64, out: &mut ArrayViewMut2<C64>) {
        let s = ev.p_active;
        match &self.a {
            Op::Diag(a) => {
                for (i, ai) in a.iter().enumerate() {
                    out[[i, i]] += w * s * ai;
                }
            }
            Op::Dense(a) => {
                out.scaled_add(C64::new(w * s, 0.0), a);
            }
        }
        let k = w * s * (1.0 - s);
        if k == 0.0 {
            return;
        }
        // D r^H is a column; note (D r^H)_i = Σ_j D_ij conj(r_j)
        let mut v = vec![C64::default(); self.dim];
        self.d.mul_adjoint(r, &mut v);
        for (i, vi) in v.iter().enumerate() {
            let vik = vi * k;
            for (jdx, mj) in ev.linear.iter().enumerate() {
                out[[i, jdx]] += vik * mj;
            }
        }
    }

    /// Applies η row-wise to `r` (n×F), writing into `out`; returns the mean
    /// Jacobian over the rows when requested.
    pub fn apply_rows(
        &self,
        r: &ArrayView2<C64>,
        out: &mut ArrayViewMut2<C64>,
        mean_jacobian: bool,
    ) -> Option<Array2<C64>> {
        let mut jac = mean_jacobian.then(|| Array2::<C64>::zeros((self.dim, self.dim)));
        let n = r.nrows();
        let w = 1.0 / n.max(1) as f64;
        let mut row = vec![C64::default(); self.dim];
        for (i, rin) in r.outer_iter().enumerate() {
            row.iter_mut().zip(rin.iter()).for_each(|(d, s)| *d = *s);
            let ev = self.evaluate(&row);
            out.row_mut(i).iter_mut().zip(&ev.eta).for_each(|(d, s)| *d = *s);
            if let Some(j) = jac.as_mut() {
                self.accumulate_jacobian_from(&row, &ev, w, &mut j.view_mut());
            }
        }
        jac
    }
}
