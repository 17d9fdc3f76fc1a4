//! Network geometry, priors and random generation of codebooks, activities,
//! channels and observations.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg::{Hermitian, C64};
use crate::rng::{self, SeedTree};

/// Scalar parameters of one uplink RACH slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Codeword block length L.
    pub l: usize,
    /// Number of RUs B.
    pub b: usize,
    /// Antennas per RU M.
    pub m: usize,
    /// Codebook load per location, α_u = N_u / L.
    pub alpha: Vec<f64>,
    /// Message activity probability per location.
    pub lambda: Vec<f64>,
    /// Linear uplink SNR.
    pub snr: f64,
    /// AMP iterations T.
    pub iterations: usize,
    pub seed: u64,
    /// Monte Carlo sample count for state evolution.
    pub mc_se: usize,
    /// Monte Carlo sample count for conditional moments.
    pub mc_cond: usize,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.l > 0, InvalidParameter, "L must be positive");
        ensure!(self.b > 0 && self.m > 0, InvalidParameter, "B and M must be positive");
        ensure!(!self.alpha.is_empty(), InvalidParameter, "at least one location is required");
        ensure!(
            self.alpha.len() == self.lambda.len(),
            InvalidParameter,
            "alpha has {} entries but lambda has {}",
            self.alpha.len(),
            self.lambda.len()
        );
        for (u, &a) in self.alpha.iter().enumerate() {
            ensure!(a > 0.0 && a.is_finite(), InvalidParameter, "alpha[{u}] = {a} must be positive");
            ensure!(self.n_u(u) >= 1, InvalidParameter, "location {u} has an empty codebook");
        }
        for (u, &lam) in self.lambda.iter().enumerate() {
            ensure!((0.0..=1.0).contains(&lam), InvalidParameter, "lambda[{u}] = {lam} outside [0, 1]");
        }
        ensure!(self.snr > 0.0 && self.snr.is_finite(), InvalidParameter, "snr must be positive");
        ensure!(self.iterations >= 1, InvalidParameter, "at least one AMP iteration is required");
        Ok(())
    }

    pub fn num_locations(&self) -> usize {
        self.alpha.len()
    }

    pub fn f(&self) -> usize {
        self.b * self.m
    }

    pub fn n_u(&self, u: usize) -> usize {
        (self.alpha[u] * self.l as f64).round() as usize
    }

    pub fn n_total(&self) -> usize {
        (0..self.num_locations()).map(|u| self.n_u(u)).sum()
    }

    /// Effective load N_u / L after rounding.
    pub fn alpha_eff(&self, u: usize) -> f64 {
        self.n_u(u) as f64 / self.l as f64
    }

    pub fn sigma_w2(&self) -> f64 {
        1.0 / (self.l as f64 * self.snr)
    }
}

/// Nominal large-scale fading coefficients g_{u,b}, with optional coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LsfcProfile {
    g: Array2<f64>,
    locations: Option<Vec<[f64; 2]>>,
    rus: Option<Vec<[f64; 2]>>,
}

impl LsfcProfile {
    pub fn new(g: Array2<f64>) -> Result<Self> {
        ensure!(g.nrows() > 0 && g.ncols() > 0, InvalidParameter, "empty LSFC matrix");
        for (u, row) in g.outer_iter().enumerate() {
            ensure!(
                row.iter().all(|v| *v >= 0.0 && v.is_finite()),
                InvalidParameter,
                "location {u} has a negative or non-finite LSFC"
            );
            ensure!(row.iter().any(|v| *v > 0.0), InvalidParameter, "location {u} reaches no RU");
        }
        Ok(LsfcProfile {
            g,
            locations: None,
            rus: None,
        })
    }

    pub fn with_coordinates(mut self, locations: Vec<[f64; 2]>, rus: Vec<[f64; 2]>) -> Self {
        assert_eq!(locations.len(), self.num_locations());
        assert_eq!(rus.len(), self.num_rus());
        self.locations = Some(locations);
        self.rus = Some(rus);
        self
    }

    pub fn g(&self) -> &Array2<f64> {
        &self.g
    }

    pub fn gain(&self, u: usize, b: usize) -> f64 {
        self.g[[u, b]]
    }

    pub fn num_locations(&self) -> usize {
        self.g.nrows()
    }

    pub fn num_rus(&self) -> usize {
        self.g.ncols()
    }

    pub fn locations(&self) -> Option<&[[f64; 2]]> {
        self.locations.as_deref()
    }

    pub fn rus(&self) -> Option<&[[f64; 2]]> {
        self.rus.as_deref()
    }

    pub fn max_gain(&self) -> f64 {
        self.g.iter().copied().fold(0.0, f64::max)
    }

    /// Rescales so that the strongest link has unit gain.
    pub fn normalized(&self) -> LsfcProfile {
        let k = self.max_gain();
        LsfcProfile {
            g: self.g.mapv(|v| v / k),
            locations: self.locations.clone(),
            rus: self.rus.clone(),
        }
    }

    /// Σ_u = diag(g_{u,1}, …, g_{u,B}) ⊗ I_M.
    pub fn sigma(&self, u: usize, m: usize) -> Hermitian {
        let d = self
            .g
            .row(u)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, m))
            .collect();
        Hermitian::Diagonal(d)
    }

    /// Plain-text table: one line per location, whitespace separated.
    pub fn write_table<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.g.outer_iter() {
            let mut line = String::new();
            for (b, v) in row.iter().enumerate() {
                if b > 0 {
                    line.push(' ');
                }
                write!(line, "{v:?}").expect("write to string");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_table<R: BufRead>(input: R) -> Result<LsfcProfile> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<lsfc table>", e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidInput(format!("line {}: {e}", lineno + 1)))?;
            rows.push(row);
        }
        ensure!(!rows.is_empty(), InvalidInput, "LSFC table is empty");
        let b = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == b), InvalidInput, "ragged LSFC table");
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let g = Array2::from_shape_vec((flat.len() / b, b), flat).expect("shape checked");
        LsfcProfile::new(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_table(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<LsfcProfile> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        LsfcProfile::read_table(std::io::BufReader::new(file))
    }
}

/// Two-cell linear Wyner model with crosstalk ℘.
pub fn build_wyner_geometry(crosstalk: f64) -> Result<LsfcProfile> {
    ensure!(
        (0.0..=1.0).contains(&crosstalk),
        InvalidParameter,
        "crosstalk {crosstalk} outside [0, 1]"
    );
    LsfcProfile::new(ndarray::array![[1.0, crosstalk], [crosstalk, 1.0]])
}

/// PL = 1 / (1 + (d/d0)^γ).
pub fn pathloss(d: f64, d0: f64, gamma: f64) -> Result<f64> {
    ensure!(d0 > 0.0, InvalidParameter, "cutoff distance d0 = {d0} must be positive");
    ensure!(gamma > 0.0, InvalidParameter, "pathloss exponent must be positive");
    ensure!(d >= 0.0, InvalidParameter, "distance must be non-negative");
    Ok(1.0 / (1.0 + (d / d0).powf(gamma)))
}

/// Layout of the 16-tile, 12-RU network on a torus.
///
/// RUs sit on a triangular lattice of spacing `side` from which one point in
/// seven is removed, giving the hexagonal arrangement of the figure: every
/// lattice triangle that avoids the removed points is a location tile. The
/// torus is spanned by two orthogonal lattice vectors and holds 14 lattice
/// points, 2 of them removed.
#[derive(Debug, Clone)]
pub struct HexLayout {
    pub side: f64,
    pub rus: Vec<[f64; 2]>,
    pub centroids: Vec<[f64; 2]>,
    /// RU indices at the three corners of each tile.
    pub corners: Vec<[usize; 3]>,
    /// Torus periods.
    pub periods: [[f64; 2]; 2],
}

const TORUS_T1: (i64, i64) = (3, -2);
const TORUS_T2: (i64, i64) = (1, 4);

fn lattice_point(i: i64, j: i64, side: f64) -> [f64; 2] {
    [side * (i as f64 + 0.5 * j as f64), side * (j as f64 * 3f64.sqrt() / 2.0)]
}

fn is_hole(i: i64, j: i64) -> bool {
    (3 * i + j).rem_euclid(7) == 0
}

impl HexLayout {
    pub fn new(side: f64) -> Result<Self> {
        ensure!(side > 0.0 && side.is_finite(), InvalidParameter, "tile side must be positive");
        let p1 = lattice_point(TORUS_T1.0, TORUS_T1.1, side);
        let p2 = lattice_point(TORUS_T2.0, TORUS_T2.1, side);
        let periods = [p1, p2];

        // torus coordinates of lattice point (i, j), in units of the periods
        let frac = |i: i64, j: i64| -> (f64, f64) {
            let p = lattice_point(i, j, side);
            let a = (p[0] * p1[0] + p[1] * p1[1]) / (p1[0] * p1[0] + p1[1] * p1[1]);
            let b = (p[0] * p2[0] + p[1] * p2[1]) / (p2[0] * p2[0] + p2[1] * p2[1]);
            (a, b)
        };
        let wrap = |x: f64| {
            let w = x - x.floor();
            if w > 1.0 - 1e-9 {
                0.0
            } else {
                w
            }
        };
        let canonical = |i: i64, j: i64| -> (i64, i64) {
            let (a, b) = frac(i, j);
            let (fa, fb) = ((a - wrap(a)).round() as i64, (b - wrap(b)).round() as i64);
            (
                i - fa * TORUS_T1.0 - fb * TORUS_T2.0,
                j - fa * TORUS_T1.1 - fb * TORUS_T2.1,
            )
        };

        let mut points: Vec<(i64, i64)> = Vec::new();
        for i in -8..=8 {
            for j in -8..=8 {
                let c = canonical(i, j);
                if !points.contains(&c) {
                    points.push(c);
                }
            }
        }
        debug_assert_eq!(points.len(), 14);
        let mut ru_points: Vec<(i64, i64)> = points.iter().copied().filter(|&(i, j)| !is_hole(i, j)).collect();
        ru_points.sort_by(|x, y| {
            let (ax, bx) = frac(x.0, x.1);
            let (ay, by) = frac(y.0, y.1);
            (bx, ax).partial_cmp(&(by, ay)).expect("finite")
        });
        let ru_index = |i: i64, j: i64| ru_points.iter().position(|&p| p == canonical(i, j));

        let mut tiles: Vec<([usize; 3], [f64; 2])> = Vec::new();
        let mut anchors: Vec<(i64, i64)> = points.clone();
        anchors.sort_by(|x, y| {
            let (ax, bx) = frac(x.0, x.1);
            let (ay, by) = frac(y.0, y.1);
            (bx, ax).partial_cmp(&(by, ay)).expect("finite")
        });
        for &(i, j) in &anchors {
            let up = [(i, j), (i + 1, j), (i, j + 1)];
            let down = [(i + 1, j), (i, j + 1), (i + 1, j + 1)];
            for tri in [up, down] {
                if tri.iter().any(|&(a, b)| is_hole(a, b)) {
                    continue;
                }
                let idx = tri.map(|(a, b)| ru_index(a, b).expect("corner is an RU"));
                let mut c = [0.0; 2];
                for &(a, b) in &tri {
                    let p = lattice_point(a, b, side);
                    c[0] += p[0] / 3.0;
                    c[1] += p[1] / 3.0;
                }
                tiles.push((idx, c));
            }
        }
        debug_assert_eq!(tiles.len(), 16);
        let rus = ru_points.iter().map(|&(i, j)| lattice_point(i, j, side)).collect();
        Ok(HexLayout {
            side,
            rus,
            centroids: tiles.iter().map(|t| t.1).collect(),
            corners: tiles.iter().map(|t| t.0).collect(),
            periods,
        })
    }

    /// Minimum distance over the untranslated copy and its 8 wrapped neighbours.
    pub fn torus_distance(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        let [p1, p2] = self.periods;
        let mut best = f64::INFINITY;
        for k in -1..=1 {
            for l in -1..=1 {
                let dx = x[0] - y[0] + k as f64 * p1[0] + l as f64 * p2[0];
                let dy = x[1] - y[1] + k as f64 * p1[1] + l as f64 * p2[1];
                best = best.min(dx.hypot(dy));
            }
        }
        best
    }

    pub fn distances(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.centroids.len(), self.rus.len()), |(u, b)| {
            self.torus_distance(self.centroids[u], self.rus[b])
        })
    }
}

/// Pathloss profile of the 16-location, 12-RU torus network.
pub fn build_hex_geometry(side: f64, d0: f64, gamma: f64) -> Result<LsfcProfile> {
    let layout = HexLayout::new(side)?;
    let d = layout.distances();
    let mut g = Array2::zeros(d.dim());
    for ((u, b), dist) in d.indexed_iter() {
        g[[u, b]] = pathloss(*dist, d0, gamma)?;
    }
    Ok(LsfcProfile::new(g)?.with_coordinates(layout.centroids, layout.rus))
}

/// Transmit SNR that yields `snr_rx` at the nearest RU of the best location.
pub fn calibrate_snr(snr_rx: f64, geometry: &LsfcProfile) -> Result<f64> {
    ensure!(snr_rx > 0.0, InvalidParameter, "snr_rx must be positive");
    let pl = geometry.max_gain();
    ensure!(pl > 0.0, InvalidParameter, "geometry has no non-zero gain");
    Ok(snr_rx / pl)
}

/// One sampled realization of the uplink slot.
///
/// Per-location quantities are stored stacked along the codeword axis; the
/// `offsets` give the column range of each location.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// L×N codebook, columns of location u at `offsets[u]..offsets[u+1]`.
    pub codebook: Array2<C64>,
    /// N activity flags.
    pub activity: Vec<bool>,
    /// N×F channel rows, zero where inactive.
    pub channels: Array2<C64>,
    pub noise: Array2<C64>,
    pub observation: Array2<C64>,
    pub offsets: Vec<usize>,
}

impl Scene {
    pub fn num_locations(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, u: usize) -> std::ops::Range<usize> {
        self.offsets[u]..self.offsets[u + 1]
    }

    pub fn codebook_u(&self, u: usize) -> ArrayView2<'_, C64> {
        self.codebook.slice(s![.., self.range(u)])
    }

    pub fn channels_u(&self, u: usize) -> ArrayView2<'_, C64> {
        self.channels.slice(s![self.range(u), ..])
    }

    pub fn activity_u(&self, u: usize) -> &[bool] {
        &self.activity[self.range(u)]
    }

    /// Y − Σ_u S_u X_u − W, computed densely.
    pub fn reconstruction_residual(&self) -> f64 {
        let r = &self.observation - &self.codebook.dot(&self.channels) - &self.noise;
        r.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

pub(crate) fn location_offsets(config: &SystemConfig) -> Vec<usize> {
    let mut offsets = vec![0];
    for u in 0..config.num_locations() {
        offsets.push(offsets[u] + config.n_u(u));
    }
    offsets
}

/// Draws codebooks, activities, channels and noise from their own named streams.
pub fn sample_scene(config: &SystemConfig, geometry: &LsfcProfile, seeds: &SeedTree) -> Result<Scene> {
    config.validate()?;
    ensure!(
        geometry.num_locations() == config.num_locations() && geometry.num_rus() == config.b,
        InvalidInput,
        "geometry is {}×{} but config has U = {}, B = {}",
        geometry.num_locations(),
        geometry.num_rus(),
        config.num_locations(),
        config.b
    );
    let (l, f, m) = (config.l, config.f(), config.m);
    let offsets = location_offsets(config);
    let n = offsets[config.num_locations()];

    // column-major fill per location keeps each codeword contiguous in the stream
    let mut codebook = Array2::<C64>::zeros((l, n));
    for u in 0..config.num_locations() {
        let mut rng = seeds.stream(rng::CODEBOOK, u as u64);
        let mut col = vec![C64::default(); l];
        for j in offsets[u]..offsets[u + 1] {
            rng::fill_complex_normal(&mut rng, &mut col, 1.0 / l as f64);
            codebook.column_mut(j).iter_mut().zip(&col).for_each(|(d, s)| *d = *s);
        }
    }

    let mut activity = vec![false; n];
    let mut channels = Array2::<C64>::zeros((n, f));
    for u in 0..config.num_locations() {
        let mut act_rng = seeds.stream(rng::ACTIVITY, u as u64);
        let mut ch_rng = seeds.stream(rng::CHANNEL, u as u64);
        let lam = config.lambda[u];
        for j in offsets[u]..offsets[u + 1] {
            let active = rand::Rng::random::<f64>(&mut act_rng) < lam;
            activity[j] = active;
            if active {
                let mut row = channels.row_mut(j);
                for b in 0..config.b {
                    let g = geometry.gain(u, b);
                    for k in 0..m {
                        row[b * m + k] = rng::complex_normal(&mut ch_rng, g);
                    }
                }
            }
        }
    }

    let mut noise = Array2::<C64>::zeros((l, f));
    {
        let mut rng = seeds.stream(rng::NOISE, 0);
        let buf = noise.as_slice_mut().expect("standard layout");
        rng::fill_complex_normal(&mut rng, buf, config.sigma_w2());
    }

    let mut observation = noise.clone();
    accumulate_active(&mut observation.view_mut(), &codebook.view(), &channels.view(), &activity);

    Ok(Scene {
        codebook,
        activity,
        channels,
        noise,
        observation,
        offsets,
    })
}

/// Y += Σ over active n of s_n x_n, exploiting the sparsity of X.
fn accumulate_active(y: &mut ArrayViewMut2<C64>, s: &ArrayView2<C64>, x: &ArrayView2<C64>, active: &[bool]) {
    for (n, _) in active.iter().enumerate().filter(|(_, a)| **a) {
        let col = s.column(n);
        let row = x.row(n);
        for (i, si) in col.iter().enumerate() {
            let mut yrow = y.row_mut(i);
            for (yv, xv) in yrow.iter_mut().zip(row.iter()) {
                *yv += si * xv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn toy_config(l: usize) -> SystemConfig {
        SystemConfig {
            l,
            b: 2,
            m: 2,
            alpha: vec![2.0, 2.0],
            lambda: vec![0.1, 0.2],
            snr: 10.0,
            iterations: 8,
            seed: 11,
            mc_se: 20_000,
            mc_cond: 20_000,
        }
    }

    #[test]
    fn wyner_profiles() {
        let g = build_wyner_geometry(0.5).unwrap();
        assert_eq!(g.g(), &ndarray::array![[1.0, 0.5], [0.5, 1.0]]);
        assert_eq!(build_wyner_geometry(0.0).unwrap().g(), &ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(build_wyner_geometry(1.0).unwrap().g().iter().all(|v| *v == 1.0));
        assert!(build_wyner_geometry(1.5).is_err());
        assert!(build_wyner_geometry(-0.1).is_err());
    }

    #[test]
    fn pathloss_values() {
        assert_eq!(pathloss(0.0, 13.57, 3.67).unwrap(), 1.0);
        assert_relative_eq!(pathloss(13.57, 13.57, 3.67).unwrap(), 0.5, epsilon = 1e-15);
        let expected = 1.0 / (1.0 + 2f64.powf(3.67));
        assert_relative_eq!(pathloss(2.0 * 13.57, 13.57, 3.67).unwrap(), expected, epsilon = 1e-15);
        assert!((expected - 0.0729).abs() < 5e-4);
        assert!(pathloss(1.0, 0.0, 3.67).is_err());
        assert!(pathloss(1.0, -1.0, 3.67).is_err());
    }

    #[test]
    fn snr_calibration() {
        let g = LsfcProfile::new(ndarray::array![[0.5, 0.1]]).unwrap();
        assert_relative_eq!(calibrate_snr(10.0, &g).unwrap(), 20.0);
        let unit = LsfcProfile::new(ndarray::array![[1.0, 0.1]]).unwrap();
        assert_relative_eq!(calibrate_snr(10.0, &unit).unwrap(), 10.0);
        assert!(calibrate_snr(0.0, &unit).is_err());
    }

    #[test]
    fn profile_rejects_dead_rows() {
        assert!(LsfcProfile::new(ndarray::array![[0.0, 0.0], [1.0, 0.0]]).is_err());
        assert!(LsfcProfile::new(ndarray::array![[-1.0, 1.0]]).is_err());
    }

    #[test]
    fn sigma_structure() {
        let g = build_wyner_geometry(0.5).unwrap();
        assert_eq!(g.sigma(0, 2), Hermitian::Diagonal(vec![1.0, 1.0, 0.5, 0.5]));
        assert_eq!(g.sigma(1, 3), Hermitian::Diagonal(vec![0.5, 0.5, 0.5, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn table_round_trip() {
        let g = build_hex_geometry(100.0, 13.57, 3.67).unwrap();
        let mut buf = Vec::new();
        g.write_table(&mut buf).unwrap();
        let back = LsfcProfile::read_table(buf.as_slice()).unwrap();
        assert_eq!(back.g(), g.g());
        assert!(LsfcProfile::read_table("1 2\n3\n".as_bytes()).is_err());
        assert!(LsfcProfile::read_table("1 x\n".as_bytes()).is_err());
    }

    #[test]
    fn hex_layout_counts() {
        let layout = HexLayout::new(100.0).unwrap();
        assert_eq!(layout.rus.len(), 12);
        assert_eq!(layout.centroids.len(), 16);
        // each RU is a corner of exactly four tiles
        let mut touch = [0usize; 12];
        for c in &layout.corners {
            for &b in c {
                touch[b] += 1;
            }
        }
        assert!(touch.iter().all(|&t| t == 4));
        // nearest corner is at the circumradius side/√3
        let d = layout.distances();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        assert_relative_eq!(min, 100.0 / 3f64.sqrt(), epsilon = 1e-9);
    }

    #[test]
    fn hex_nearest_rus_are_tile_corners() {
        let layout = HexLayout::new(100.0).unwrap();
        let g = build_hex_geometry(100.0, 13.57, 3.67).unwrap();
        assert_eq!(g.g().dim(), (16, 12));
        assert!(g.g().iter().all(|v| *v > 0.0 && *v <= 1.0));
        for (u, row) in g.g().outer_iter().enumerate() {
            let best = row.iter().copied().fold(0.0, f64::max);
            for &b in &layout.corners[u] {
                assert_relative_eq!(row[b], best, max_relative = 1e-12);
            }
            let strictly_weaker = row.iter().enumerate().filter(|(b, _)| !layout.corners[u].contains(b));
            for (_, v) in strictly_weaker {
                assert!(*v < best * 0.999);
            }
        }
    }

    /// Every lattice translation and half-turn of the torus that maps removed
    /// points onto removed points is a symmetry of the layout; the profile
    /// must be invariant under each of them.
    #[test]
    fn hex_profile_is_invariant_under_layout_symmetries() {
        let layout = HexLayout::new(100.0).unwrap();
        let g = build_hex_geometry(100.0, 13.57, 3.67).unwrap();
        let find = |pts: &[[f64; 2]], p: [f64; 2]| {
            pts.iter()
                .position(|q| layout.torus_distance(*q, p) < 1e-6)
        };
        let mut symmetries = 0;
        for i in -4..=4i64 {
            for j in -4..=4i64 {
                for half_turn in [false, true] {
                    let shift = lattice_point(i, j, 100.0);
                    let map = |p: [f64; 2]| {
                        let q = if half_turn { [-p[0], -p[1]] } else { p };
                        [q[0] + shift[0], q[1] + shift[1]]
                    };
                    let ru_perm: Option<Vec<usize>> = layout.rus.iter().map(|p| find(&layout.rus, map(*p))).collect();
                    let tile_perm: Option<Vec<usize>> =
                        layout.centroids.iter().map(|p| find(&layout.centroids, map(*p))).collect();
                    let (Some(rp), Some(tp)) = (ru_perm, tile_perm) else { continue };
                    symmetries += 1;
                    for u in 0..16 {
                        for b in 0..12 {
                            assert_relative_eq!(g.gain(tp[u], rp[b]), g.gain(u, b), max_relative = 1e-12);
                        }
                    }
                }
            }
        }
        // the two translations of the hole lattice and the half-turns
        assert!(symmetries >= 4, "found {symmetries} symmetries");
    }

    #[test]
    fn scene_reconstruction_and_determinism() {
        let cfg = toy_config(64);
        let geo = build_wyner_geometry(0.5).unwrap();
        let seeds = SeedTree::new(3);
        let a = sample_scene(&cfg, &geo, &seeds).unwrap();
        let b = sample_scene(&cfg, &geo, &seeds).unwrap();
        assert_eq!(a, b);
        assert!(a.reconstruction_residual() < 1e-12);
        for (n, act) in a.activity.iter().enumerate() {
            let zero = a.channels.row(n).iter().all(|v| *v == C64::default());
            assert_eq!(zero, !act);
        }
        let c = sample_scene(&cfg, &geo, &SeedTree::new(4)).unwrap();
        assert_ne!(a.observation, c.observation);
    }

    #[test]
    fn scene_without_activity_is_pure_noise() {
        let mut cfg = toy_config(32);
        cfg.lambda = vec![0.0, 0.0];
        let geo = build_wyner_geometry(0.5).unwrap();
        let s = sample_scene(&cfg, &geo, &SeedTree::new(1)).unwrap();
        assert_eq!(s.observation, s.noise);
        assert!(s.channels.iter().all(|v| *v == C64::default()));
    }

    #[test]
    fn scene_statistics() {
        let cfg = SystemConfig {
            l: 1024,
            alpha: vec![2.0],
            lambda: vec![0.1],
            b: 2,
            ..toy_config(1024)
        };
        let geo = LsfcProfile::new(ndarray::array![[1.0, 0.5]]).unwrap();
        let s = sample_scene(&cfg, &geo, &SeedTree::new(9)).unwrap();
        let n = cfg.n_u(0);
        assert_eq!(n, 2048);
        // column norms: ‖s‖² ~ Gamma(L, 1/L), mean 1, variance 1/L
        let norms: Vec<f64> = s.codebook.columns().into_iter().map(|c| c.iter().map(|v| v.norm_sqr()).sum()).collect();
        let mean = norms.iter().sum::<f64>() / n as f64;
        let se = (1.0 / cfg.l as f64 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean column norm {mean}");
        let frac = s.activity.iter().filter(|a| **a).count() as f64 / n as f64;
        assert!((frac - 0.1).abs() < 3.0 * (0.09f64 / n as f64).sqrt(), "activity {frac}");
        // per-location covariance of active rows
        let active: Vec<usize> = (0..n).filter(|&i| s.activity[i]).collect();
        let k = active.len() as f64;
        for c in 0..cfg.f() {
            let g = geo.gain(0, c / cfg.m);
            let p = active.iter().map(|&i| s.channels[[i, c]].norm_sqr()).sum::<f64>() / k;
            assert!((p - g).abs() < 5.0 * g / k.sqrt(), "entry {c}: {p} vs {g}");
        }
        let cross: C64 = active.iter().map(|&i| s.channels[[i, 0]] * s.channels[[i, 2]].conj()).sum::<C64>() / k;
        assert!(cross.norm() < 5.0 * (0.5f64).sqrt() / k.sqrt());
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_config(16);
        assert!(cfg.validate().is_ok());
        assert_relative_eq!(cfg.sigma_w2(), 1.0 / 160.0);
        cfg.alpha = vec![0.01, 2.0];
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config(16);
        cfg.lambda = vec![0.1];
        assert!(cfg.validate().is_err());
    }
}
