//! Cluster-based MRT acknowledgement downlink: power accounting and
//! use-and-then-forget ergodic rate bounds.
//!
//! Rates are reported in bits per symbol.

use ndarray::Array2;

use crate::denoiser::{BgDenoiser, EffectiveNoise, PriorParams};
use crate::detection::{md_fa_probabilities, QuadraticTest};
use crate::error::{ensure, Error, Result};
use crate::estimation::MIN_ACCEPTANCE;
use crate::linalg::C64;
use crate::mc::{self, GaussianRows};
use crate::model::LsfcProfile;
use crate::rng::{self, SeedTree};

/// False-alarm weight (λ⁻¹ − 1) P_fa under which that term of Z is dropped.
pub const NEGLIGIBLE_FA_WEIGHT: f64 = 1e-12;

/// Static serving clusters C_u and their transpose S_b.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMap {
    pub clusters: Vec<Vec<usize>>,
    pub coverage: Vec<Vec<usize>>,
}

impl ClusterMap {
    pub fn serves(&self, u: usize, b: usize) -> bool {
        self.clusters[u].contains(&b)
    }
}

/// Each location is served by the `q` RUs with the largest gains
/// (ties go to the smaller RU index).
pub fn form_clusters(geometry: &LsfcProfile, q: usize) -> Result<ClusterMap> {
    let b_count = geometry.num_rus();
    ensure!(q >= 1 && q <= b_count, InvalidParameter, "cluster size Q = {q} outside [1, {b_count}]");
    let mut clusters = Vec::with_capacity(geometry.num_locations());
    let mut coverage = vec![Vec::new(); b_count];
    for u in 0..geometry.num_locations() {
        let mut idx: Vec<usize> = (0..b_count).collect();
        idx.sort_by(|&a, &b| geometry.gain(u, b).total_cmp(&geometry.gain(u, a)).then(a.cmp(&b)));
        idx.truncate(q);
        idx.sort_unstable();
        for &b in &idx {
            coverage[b].push(u);
        }
        clusters.push(idx);
    }
    Ok(ClusterMap { clusters, coverage })
}

/// Per-RU conditional moments of one location.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationMoments {
    /// M_{u,b} = E[h_b η_b^H | D_u].
    pub mean: Vec<C64>,
    /// V_{u,b} = Var(h_b η_b^H | D_u).
    pub var: Vec<f64>,
    /// Detection-weighted average estimate energy Z_{u,b}.
    pub z: Vec<f64>,
    pub p_md: f64,
    pub p_fa: f64,
    /// Empirical acceptance rate of D_u.
    pub accept_detected: f64,
    /// Importance-sampling estimate of P(F_u); tracks `p_fa`.
    pub accept_false_alarm: f64,
}

impl LocationMoments {
    fn zeros(b: usize, p_md: f64, p_fa: f64) -> Self {
        LocationMoments {
            mean: vec![C64::default(); b],
            var: vec![0.0; b],
            z: vec![0.0; b],
            p_md,
            p_fa,
            accept_detected: 0.0,
            accept_false_alarm: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Sums {
    n_d: usize,
    n_fa: usize,
    corr: Vec<C64>,
    corr_abs2: Vec<f64>,
    energy_d: Vec<f64>,
    energy_fa: Vec<f64>,
    /// Σ w over false-alarm hits.
    weight_fa: f64,
}

impl Sums {
    fn new(b: usize) -> Self {
        Sums {
            n_d: 0,
            n_fa: 0,
            corr: vec![C64::default(); b],
            corr_abs2: vec![0.0; b],
            energy_d: vec![0.0; b],
            energy_fa: vec![0.0; b],
            weight_fa: 0.0,
        }
    }

    fn merge(&mut self, o: &Sums) {
        self.n_d += o.n_d;
        self.n_fa += o.n_fa;
        self.weight_fa += o.weight_fa;
        for b in 0..self.corr.len() {
            self.corr[b] += o.corr[b];
            self.corr_abs2[b] += o.corr_abs2[b];
            self.energy_d[b] += o.energy_d[b];
            self.energy_fa[b] += o.energy_fa[b];
        }
    }
}

/// Monte Carlo of the per-RU tables for location `u`.
///
/// The denoiser acts on the full F-vector; each RU uses the b-th M-block of
/// its output, and the detection event conditions all blocks jointly. The
/// detected branch uses plain rejection. False alarms can be rare, so the
/// noise-only branch draws from CN(0, κC) with κ chosen to put the mean of
/// the test statistic on its threshold, and reweights by the density ratio
/// κ^F exp(−(κ−1) zC⁻¹z^H). With κ = 1 this is rejection sampling again.
pub fn dl_conditional_moments(
    prior: &PriorParams,
    noise: &EffectiveNoise,
    nu_log: f64,
    m: usize,
    samples: usize,
    seeds: &SeedTree,
) -> Result<LocationMoments> {
    let f = prior.dim();
    ensure!(m >= 1 && f % m == 0, InvalidParameter, "F = {f} is not a multiple of M = {m}");
    ensure!(noise.dim() == f, InvalidInput, "noise dimension {} differs from F = {f}", noise.dim());
    ensure!(samples > 0, InvalidParameter, "at least one Monte Carlo sample is required");
    let b_count = f / m;
    if prior.lambda == 0.0 || prior.sigma.frobenius_norm() == 0.0 {
        return Ok(LocationMoments::zeros(b_count, 1.0, 0.0));
    }
    let (p_md, p_fa) = md_fa_probabilities(prior, noise, nu_log)?;
    let den = BgDenoiser::new(prior, noise)?;
    let h_rows = GaussianRows::new(&prior.sigma);
    let z_rows = GaussianRows::new(noise.cov());
    let need_fa = prior.lambda < 1.0;
    let test = QuadraticTest::new(prior, noise)?;
    let kappa = (test.gamma(nu_log) / test.d_h0.iter().sum::<f64>()).max(1.0);
    let (root_kappa, log_kappa_f) = (kappa.sqrt(), f as f64 * kappa.ln());
    let parts = mc::map_batches(samples, seeds, rng::CONDITIONAL, 0, |len, rng| {
        let mut s = Sums::new(b_count);
        let mut white = vec![C64::default(); f];
        let mut h = vec![C64::default(); f];
        let mut z = vec![C64::default(); f];
        let mut r = vec![C64::default(); f];
        for _ in 0..len {
            h_rows.draw(rng, &mut white, &mut h);
            z_rows.draw(rng, &mut white, &mut z);
            for i in 0..f {
                r[i] = h[i] + z[i];
            }
            if den.log_lr(&r) < nu_log {
                s.n_d += 1;
                let eta = den.posterior_mean(&r);
                for b in 0..b_count {
                    let blk = b * m..(b + 1) * m;
                    let c: C64 = h[blk.clone()].iter().zip(&eta[blk.clone()]).map(|(x, e)| x * e.conj()).sum();
                    s.corr[b] += c;
                    s.corr_abs2[b] += c.norm_sqr();
                    s.energy_d[b] += eta[blk].iter().map(|e| e.norm_sqr()).sum::<f64>();
                }
            }
            if !need_fa {
                continue;
            }
            // `white` still holds the draw behind z, so zC⁻¹z^H = ‖white‖²
            let x0: f64 = white.iter().map(|w| w.norm_sqr()).sum();
            z.iter_mut().for_each(|v| *v *= root_kappa);
            if den.log_lr(&z) < nu_log {
                s.n_fa += 1;
                let w = (log_kappa_f - (kappa - 1.0) * x0).exp();
                s.weight_fa += w;
                let eta = den.posterior_mean(&z);
                for b in 0..b_count {
                    s.energy_fa[b] += w * eta[b * m..(b + 1) * m].iter().map(|e| e.norm_sqr()).sum::<f64>();
                }
            }
        }
        s
    });
    let mut s = Sums::new(b_count);
    parts.iter().for_each(|p| s.merge(p));
    let acc_d = s.n_d as f64 / samples as f64;
    let acc_fa = s.n_fa as f64 / samples as f64;
    if acc_d < MIN_ACCEPTANCE {
        return Err(Error::InsufficientSamples(format!(
            "detection event accepted {acc_d:.2e} of {samples} samples"
        )));
    }
    let mut fa_weight = if need_fa { (1.0 / prior.lambda - 1.0) * p_fa } else { 0.0 };
    // the false-alarm energy is O(tr Σ); below this weight it cannot move Z
    if fa_weight < NEGLIGIBLE_FA_WEIGHT {
        fa_weight = 0.0;
    }
    if fa_weight > 0.0 && (acc_fa < MIN_ACCEPTANCE || !(s.weight_fa > 0.0 && s.weight_fa.is_finite())) {
        return Err(Error::InsufficientSamples(format!(
            "false-alarm event hit {acc_fa:.2e} of {samples} proposals (κ = {kappa:.3})"
        )));
    }
    let nd = s.n_d as f64;
    let mut out = LocationMoments::zeros(b_count, p_md, p_fa);
    out.accept_detected = acc_d;
    out.accept_false_alarm = s.weight_fa / samples as f64;
    for b in 0..b_count {
        let mean = s.corr[b] / nd;
        out.mean[b] = mean;
        out.var[b] = (s.corr_abs2[b] / nd - mean.norm_sqr()).max(0.0);
        let e_fa = if s.weight_fa > 0.0 { s.energy_fa[b] / s.weight_fa } else { 0.0 };
        out.z[b] = (1.0 - p_md) * s.energy_d[b] / nd + fa_weight * e_fa;
    }
    Ok(out)
}

/// U×B tables M, V and Z.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTables {
    pub mean: Array2<C64>,
    pub var: Array2<f64>,
    pub z: Array2<f64>,
    pub p_md: Vec<f64>,
    pub p_fa: Vec<f64>,
}

impl MomentTables {
    pub fn from_locations(locs: &[LocationMoments]) -> Result<Self> {
        ensure!(!locs.is_empty(), InvalidInput, "no locations");
        let b = locs[0].mean.len();
        ensure!(locs.iter().all(|l| l.mean.len() == b), InvalidInput, "ragged moment tables");
        let u = locs.len();
        Ok(MomentTables {
            mean: Array2::from_shape_fn((u, b), |(i, j)| locs[i].mean[j]),
            var: Array2::from_shape_fn((u, b), |(i, j)| locs[i].var[j]),
            z: Array2::from_shape_fn((u, b), |(i, j)| locs[i].z[j]),
            p_md: locs.iter().map(|l| l.p_md).collect(),
            p_fa: locs.iter().map(|l| l.p_fa).collect(),
        })
    }

    pub fn num_locations(&self) -> usize {
        self.z.nrows()
    }

    pub fn num_rus(&self) -> usize {
        self.z.ncols()
    }
}

/// DL power normalization that balances average DL and UL power.
pub fn dl_power_normalization(z: &Array2<f64>, lambda: &[f64], alpha: &[f64], clusters: &ClusterMap, l: usize) -> Result<f64> {
    ensure!(
        lambda.len() == z.nrows() && alpha.len() == z.nrows(),
        InvalidInput,
        "lambda/alpha length differs from the Z table"
    );
    let num: f64 = lambda.iter().zip(alpha).map(|(a, b)| a * b).sum();
    let mut den = 0.0;
    for (b, locs) in clusters.coverage.iter().enumerate() {
        for &u in locs {
            den += lambda[u] * alpha[u] * z[[u, b]];
        }
    }
    ensure!(den > 0.0 && den.is_finite(), InvalidInput, "no detectable users: power denominator is {den}");
    Ok(num / (l as f64 * den))
}

/// Average transmit power per RU, ρ Σ_{u ∈ S_b} λ_u N_u Z_{u,b} with N_u = α_u L.
pub fn average_tx_power(z: &Array2<f64>, lambda: &[f64], alpha: &[f64], clusters: &ClusterMap, l: usize, rho_dl: f64) -> Vec<f64> {
    clusters
        .coverage
        .iter()
        .enumerate()
        .map(|(b, locs)| rho_dl * locs.iter().map(|&u| lambda[u] * alpha[u] * l as f64 * z[[u, b]]).sum::<f64>())
        .collect()
}

/// Per-location UatF and genie UatF rates.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub uatf: Vec<f64>,
    pub genie: Vec<f64>,
    pub rho_dl: f64,
    pub tables: MomentTables,
}

/// Inputs shared by both rate formulas.
#[derive(Debug, Clone, Copy)]
pub struct RateContext<'a> {
    pub geometry: &'a LsfcProfile,
    pub clusters: &'a ClusterMap,
    pub sigma_w2: f64,
    pub l: usize,
    pub m: usize,
    pub lambda: &'a [f64],
    pub alpha: &'a [f64],
}

fn log2_1p(x: f64) -> f64 {
    x.ln_1p() / std::f64::consts::LN_2
}

/// Multiuser interference L Σ_{u'} Σ_{b ∈ C_{u'}} λ α g_{u,b} w(u', b).
fn interference(ctx: &RateContext, u: usize, w: impl Fn(usize, usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for (v, cl) in ctx.clusters.clusters.iter().enumerate() {
        for &b in cl {
            acc += ctx.lambda[v] * ctx.alpha[v] * ctx.geometry.gain(u, b) * w(v, b);
        }
    }
    ctx.l as f64 * acc
}

/// Genie UatF rate of location `u` (perfect detection and CSI).
pub fn genie_rate(ctx: &RateContext, u: usize, rho_dl: f64) -> f64 {
    let m = ctx.m as f64;
    let sg: f64 = ctx.clusters.clusters[u].iter().map(|&b| ctx.geometry.gain(u, b)).sum();
    let den = ctx.sigma_w2 / rho_dl + m * sg + m * interference(ctx, u, |v, b| ctx.geometry.gain(v, b));
    log2_1p(m * m * sg * sg / den)
}

pub fn uatf_rates(ctx: &RateContext, tables: MomentTables, rho_dl: f64) -> Result<RateReport> {
    let u_count = ctx.geometry.num_locations();
    ensure!(
        tables.num_locations() == u_count && tables.num_rus() == ctx.geometry.num_rus(),
        InvalidInput,
        "moment tables do not match the geometry"
    );
    ensure!(rho_dl > 0.0, InvalidParameter, "rho_DL must be positive");
    let mut uatf = Vec::with_capacity(u_count);
    let mut genie = Vec::with_capacity(u_count);
    for u in 0..u_count {
        let cl = &ctx.clusters.clusters[u];
        let sig: C64 = cl.iter().map(|&b| tables.mean[[u, b]]).sum();
        let var: f64 = cl.iter().map(|&b| tables.var[[u, b]]).sum();
        let den = ctx.sigma_w2 / rho_dl + var + interference(ctx, u, |v, b| tables.z[[v, b]]);
        uatf.push(log2_1p(sig.norm_sqr() / den));
        genie.push(genie_rate(ctx, u, rho_dl));
    }
    Ok(RateReport {
        uatf,
        genie,
        rho_dl,
        tables,
    })
}

/// Staircase CDF over the active-user population.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCdf {
    /// Population weight of each location, λ_u N_u / Σ λ N.
    pub weights: Vec<f64>,
    /// (rate, cumulative probability) at each jump, rates ascending.
    pub steps: Vec<(f64, f64)>,
}

impl RateCdf {
    /// Smallest rate at which the CDF reaches `p`.
    pub fn quantile(&self, p: f64) -> f64 {
        self.steps
            .iter()
            .find(|(_, c)| *c >= p - 1e-12)
            .or(self.steps.last())
            .map_or(f64::NAN, |s| s.0)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    pub fn eval(&self, rate: f64) -> f64 {
        self.steps.iter().take_while(|(r, _)| *r <= rate).last().map_or(0.0, |s| s.1)
    }
}

pub fn rate_cdf(rates: &[f64], lambda: &[f64], n: &[f64]) -> Result<RateCdf> {
    ensure!(
        rates.len() == lambda.len() && n.len() == lambda.len(),
        InvalidInput,
        "rates, lambda and N must have one entry per location"
    );
    let total: f64 = lambda.iter().zip(n).map(|(a, b)| a * b).sum();
    ensure!(total > 0.0, InvalidInput, "no active-user population");
    let weights: Vec<f64> = lambda.iter().zip(n).map(|(a, b)| a * b / total).collect();
    let mut idx: Vec<usize> = (0..rates.len()).filter(|&u| weights[u] > 0.0).collect();
    idx.sort_by(|&a, &b| rates[a].total_cmp(&rates[b]).then(a.cmp(&b)));
    let mut steps: Vec<(f64, f64)> = Vec::new();
    let mut acc = 0.0;
    for (k, &u) in idx.iter().enumerate() {
        acc += weights[u];
        let c = if k + 1 == idx.len() { 1.0 } else { acc };
        match steps.last_mut() {
            Some(last) if last.0 == rates[u] => last.1 = c,
            _ => steps.push((rates[u], c)),
        }
    }
    Ok(RateCdf { weights, steps })
}
