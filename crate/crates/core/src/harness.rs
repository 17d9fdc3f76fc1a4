//! Experiment orchestration: config files, seeded Monte Carlo trials and the
//! CSV tables behind every figure.
//!
//! Every random quantity hangs off one [`SeedTree`] built from the config's
//! master seed. Trials use `child(TRIAL, k)` and reductions always run in
//! trial order, so the output is independent of the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amp::{amp_run, AmpOptions, NoiseMode, OnsagerMode};
use crate::denoiser::{BgDenoiser, EffectiveNoise};
use crate::detection::{calibrate_threshold, detect, Calibration, ErrorCounts, QuadraticTest};
use crate::downlink::{
    dl_conditional_moments, dl_power_normalization, form_clusters, rate_cdf, uatf_rates, ClusterMap, LocationMoments,
    MomentTables, RateContext, RateReport,
};
use crate::error::{ensure, Error, Result};
use crate::estimation::{
    conditional_error_theory, empirical_error_sums, genie_asymptotic_fixed_point, genie_mmse_estimate, ErrorSums,
    GenieSolver, Moment, TheoryValue,
};
use crate::linalg::{Hermitian, C64};
use crate::mc::ScalarMoments;
use crate::model::{build_hex_geometry, build_wyner_geometry, calibrate_snr, sample_scene, LsfcProfile, SystemConfig};
use crate::rng::{self, SeedTree};
use crate::state_evolution::{se_fixed_point, se_recursion, SeProblem, SeTrace};

/// Version of the CSV column layout, recorded in every manifest.
pub const SCHEMA_VERSION: u32 = 1;

pub const MSE_TRACE_CSV: &str = "mse_trace.csv";
pub const SE_TRACE_CSV: &str = "se_trace.csv";
pub const ROC_CSV: &str = "roc.csv";
pub const DETECTION_CSV: &str = "detection.csv";
pub const ESTIMATION_CSV: &str = "estimation.csv";
pub const GENIE_CSV: &str = "genie.csv";
pub const GENIE_MU_CSV: &str = "genie_mu.csv";
pub const MOMENTS_CSV: &str = "moments.csv";
pub const RATES_CDF_CSV: &str = "rates_cdf.csv";
pub const MANIFEST: &str = "manifest.txt";
const SE_CACHE: &str = "se_cache.csv";
const MOMENTS_KEY: &str = "moments.key";

fn default_seed() -> u64 {
    1
}
fn default_mc_se() -> usize {
    20_000
}
fn default_mc_cond() -> usize {
    100_000
}
fn default_trials() -> usize {
    1
}
fn default_q() -> usize {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_onsager_samples() -> usize {
    20_000
}
fn default_roc_points() -> usize {
    41
}
fn default_roc_span() -> f64 {
    20.0
}

/// `[system]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub l: usize,
    pub m: usize,
    /// Codebook size per location.
    pub n_u: Vec<usize>,
    pub lambda: Vec<f64>,
    /// Received SNR at the strongest link, in dB.
    pub snr_db: f64,
    pub iterations: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_mc_se")]
    pub mc_se: usize,
    #[serde(default = "default_mc_cond")]
    pub mc_cond: usize,
}

/// `[geometry]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometrySpec {
    Wyner { crosstalk: f64 },
    /// Torus of equilateral tiles with side `side` (m) and pathloss 1/(1 + (d/d0)^γ).
    Hex { side: f64, d0: f64, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    EqualError,
    TargetFa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsagerChoice {
    Empirical,
    StateEvolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseChoice {
    /// C^{(t,t)} from state evolution.
    Schedule,
    /// Estimated from the residual at every step.
    Online,
}

/// `[experiment]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_detection")]
    pub detection: DetectionMode,
    /// Target P_fa when `detection = "target_fa"`.
    #[serde(default)]
    pub target_fa: Option<f64>,
    /// Cluster size Q.
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_onsager")]
    pub onsager: OnsagerChoice,
    #[serde(default = "default_onsager_samples")]
    pub onsager_samples: usize,
    /// Effective noise handed to the denoiser.
    #[serde(default = "default_amp_noise")]
    pub amp_noise: NoiseChoice,
    /// Number of threshold offsets in the ROC sweep.
    #[serde(default = "default_roc_points")]
    pub roc_points: usize,
    /// Half-width of the ROC sweep around the calibrated ln ν, in nats.
    #[serde(default = "default_roc_span")]
    pub roc_span: f64,
}

fn default_detection() -> DetectionMode {
    DetectionMode::EqualError
}
fn default_onsager() -> OnsagerChoice {
    OnsagerChoice::Empirical
}
fn default_amp_noise() -> NoiseChoice {
    NoiseChoice::Schedule
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            trials: default_trials(),
            detection: default_detection(),
            target_fa: None,
            q: default_q(),
            out: default_out(),
            onsager: default_onsager(),
            onsager_samples: default_onsager_samples(),
            amp_noise: default_amp_noise(),
            roc_points: default_roc_points(),
            roc_span: default_roc_span(),
        }
    }
}

/// Parsed config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemSection,
    pub geometry: GeometrySpec,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// Validated experiment: the file echo plus the objects built from it.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub file: ConfigFile,
    pub system: SystemConfig,
    pub geometry: LsfcProfile,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_file(file: ConfigFile) -> Result<Self> {
        let s = &file.system;
        let x = &file.experiment;
        let geometry = match &file.geometry {
            GeometrySpec::Wyner { crosstalk } => build_wyner_geometry(*crosstalk),
            // unit gain on the strongest link, so snr_db is the received SNR there
            GeometrySpec::Hex { side, d0, gamma } => build_hex_geometry(*side, *d0, *gamma).map(|g| g.normalized()),
        }
        .map_err(|e| config_err(format!("geometry: {e}")))?;
        if s.n_u.len() != geometry.num_locations() || s.lambda.len() != geometry.num_locations() {
            return Err(config_err(format!(
                "geometry has {} locations but n_u has {} and lambda {} entries",
                geometry.num_locations(),
                s.n_u.len(),
                s.lambda.len()
            )));
        }
        if !s.snr_db.is_finite() {
            return Err(config_err("snr_db must be finite"));
        }
        let snr = calibrate_snr(10f64.powf(s.snr_db / 10.0), &geometry).map_err(|e| config_err(e.to_string()))?;
        let system = SystemConfig {
            l: s.l,
            b: geometry.num_rus(),
            m: s.m,
            alpha: s.n_u.iter().map(|n| *n as f64 / s.l.max(1) as f64).collect(),
            lambda: s.lambda.clone(),
            snr,
            iterations: s.iterations,
            seed: s.seed,
            mc_se: s.mc_se,
            mc_cond: s.mc_cond,
        };
        system.validate().map_err(|e| config_err(e.to_string()))?;
        if x.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if x.q == 0 || x.q > system.b {
            return Err(config_err(format!("q = {} outside [1, {}]", x.q, system.b)));
        }
        if x.detection == DetectionMode::TargetFa && !matches!(x.target_fa, Some(p) if p > 0.0 && p < 1.0) {
            return Err(config_err("detection = \"target_fa\" needs target_fa in (0, 1)"));
        }
        if x.roc_points < 2 || !(x.roc_span > 0.0) {
            return Err(config_err("roc_points must be at least 2 and roc_span positive"));
        }
        if s.mc_se < crate::state_evolution::MIN_MC_SAMPLES || s.mc_cond == 0 {
            return Err(config_err("mc_se or mc_cond too small"));
        }
        Ok(ExperimentConfig { file, system, geometry })
    }

    /// Applies command-line overrides and re-validates.
    pub fn with_overrides(self, seed: Option<u64>, trials: Option<usize>, out: Option<PathBuf>) -> Result<Self> {
        let mut file = self.file;
        if let Some(s) = seed {
            file.system.seed = s;
        }
        if let Some(t) = trials {
            file.experiment.trials = t;
        }
        if let Some(o) = out {
            file.experiment.out = o;
        }
        Self::from_file(file)
    }

    /// Canonical re-serialization of the resolved config.
    pub fn canonical_text(&self) -> String {
        toml::to_string(&self.file).expect("config serializes")
    }

    /// Git-style blob hash (SHA-256) of the canonical config.
    pub fn content_hash(&self) -> String {
        blob_hash(self.canonical_text().as_bytes())
    }

    /// Hash of everything the SE depends on.
    fn se_key(&self) -> String {
        let s = &self.file.system;
        blob_hash(
            format!(
                "{}|{:?}|{:?}|{:?}|{:?}|{}|{}|{}|{}",
                SCHEMA_VERSION, self.file.geometry, s.n_u, s.lambda, s.snr_db, s.l, s.m, s.iterations, s.mc_se
            )
            .as_bytes(),
        ) + &format!("-{}", s.seed)
    }

    fn moments_key(&self) -> String {
        let x = &self.file.experiment;
        blob_hash(format!("{}|{:?}|{:?}|{}", self.se_key(), x.detection, x.target_fa, self.file.system.mc_cond).as_bytes())
    }

    pub fn out_dir(&self) -> &Path {
        &self.file.experiment.out
    }

    pub fn trials(&self) -> usize {
        self.file.experiment.trials
    }

    pub fn calibration(&self) -> Calibration {
        match self.file.experiment.detection {
            DetectionMode::EqualError => Calibration::EqualError,
            DetectionMode::TargetFa => Calibration::TargetFa(self.file.experiment.target_fa.unwrap_or(0.01)),
        }
    }

    pub fn amp_options(&self) -> AmpOptions {
        let x = &self.file.experiment;
        AmpOptions {
            onsager: match x.onsager {
                OnsagerChoice::Empirical => OnsagerMode::Empirical,
                OnsagerChoice::StateEvolution => OnsagerMode::StateEvolution {
                    samples: x.onsager_samples,
                    seed: self.system.seed,
                },
            },
            noise: match x.amp_noise {
                NoiseChoice::Schedule => NoiseMode::Schedule,
                NoiseChoice::Online => NoiseMode::Online,
            },
            block: self.system.m,
        }
    }

    fn seeds(&self) -> SeedTree {
        SeedTree::new(self.system.seed)
    }
}

fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Shortest representation that parses back to the same double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Subcommands of the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Se,
    Simulate,
    Roc,
    Rates,
    Genie,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Se => "se",
            Command::Simulate => "simulate",
            Command::Roc => "roc",
            Command::Rates => "rates",
            Command::Genie => "genie",
        }
    }
}

/// Plain-text record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config_text: String,
    pub master_seed: u64,
    pub streams: Vec<(String, u64)>,
    /// (file name, SHA-256 of its bytes), in write order.
    pub files: Vec<(String, String)>,
    pub summary: Vec<(String, String)>,
    pub started_unix: u64,
    pub elapsed_seconds: f64,
}

impl RunManifest {
    pub fn summary_value(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "schema_version = {SCHEMA_VERSION}");
        let _ = writeln!(s, "software = cfura {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_sha256 = {}", self.config_hash);
        let _ = writeln!(s, "master_seed = {}", self.master_seed);
        let _ = writeln!(s, "started_unix = {}", self.started_unix);
        let _ = writeln!(s, "elapsed_seconds = {:.3}", self.elapsed_seconds);
        let _ = writeln!(s, "rates_unit = bits/symbol (log2)");
        let _ = writeln!(s, "\n[streams]");
        for (k, v) in &self.streams {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[files]");
        for (k, v) in &self.files {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[summary]");
        for (k, v) in &self.summary {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[config]");
        s.push_str(&self.config_text);
        s
    }
}

struct CsvTable {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    fn new(header: &[&'static str]) -> Self {
        CsvTable {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex(&Sha256::digest(&bytes)))
    }
}

/// Runs `command` on a dedicated pool of `threads` workers (rayon's default when `None`).
pub fn run_command(cfg: &ExperimentConfig, command: Command, threads: Option<usize>) -> Result<RunManifest> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        ensure!(n >= 1, InvalidParameter, "thread count must be positive");
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(|| Runner::new(cfg, command)?.run())
}

/// Full pipeline; equivalent to `run_command(cfg, Command::Simulate, None)`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    run_command(cfg, Command::Simulate, None)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    command: Command,
    out: PathBuf,
    problem: SeProblem,
    seeds: SeedTree,
    manifest: RunManifest,
    clock: Instant,
}

/// Per-trial results that are reduced in trial order.
#[derive(Debug, Clone, Default)]
struct TrialOutcome {
    mse: Vec<f64>,
    counts: Vec<ErrorCounts>,
    /// [offset][location]
    roc: Vec<Vec<ErrorCounts>>,
    errors: Vec<ErrorSums>,
    genie_err: Vec<ScalarMoments>,
    genie_pred: Vec<ScalarMoments>,
    genie_mu: Vec<ScalarMoments>,
}

#[derive(Debug, Clone, Copy)]
struct TrialPlan {
    amp: bool,
    genie: bool,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, command: Command) -> Result<Self> {
        let out = cfg.out_dir().to_path_buf();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let problem = SeProblem::from_system(&cfg.system, &cfg.geometry)?;
        let seeds = cfg.seeds();
        let streams = [
            rng::CODEBOOK,
            rng::ACTIVITY,
            rng::CHANNEL,
            rng::NOISE,
            rng::STATE_EVOLUTION,
            rng::CONDITIONAL,
            rng::TRIAL,
        ]
        .iter()
        .map(|s| (s.to_string(), SeedTree::stream_id(s, 0)))
        .collect();
        let manifest = RunManifest {
            command: command.name().to_string(),
            config_hash: cfg.content_hash(),
            config_text: cfg.canonical_text(),
            master_seed: cfg.system.seed,
            streams,
            files: Vec::new(),
            summary: Vec::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            elapsed_seconds: 0.0,
        };
        Ok(Runner {
            cfg,
            command,
            out,
            problem,
            seeds,
            manifest,
            clock: Instant::now(),
        })
    }

    fn run(mut self) -> Result<RunManifest> {
        log::info!("{}: config {}", self.command.name(), &self.manifest.config_hash[..12]);
        match self.command {
            Command::Se => {
                let se = self.state_evolution()?;
                self.write_se_trace(&se)?;
                self.fixed_point_summary()?;
            }
            Command::Simulate => {
                let se = self.state_evolution()?;
                self.write_se_trace(&se)?;
                let thresholds = self.thresholds(&se)?;
                let trials = self.trials(&se, &thresholds, TrialPlan { amp: true, genie: true })?;
                self.write_mse_trace(&se, &trials)?;
                self.write_detection(&se, &thresholds, &trials)?;
                self.write_roc(&se, &thresholds, &trials)?;
                self.write_estimation(&se, &thresholds, &trials)?;
                self.write_genie(&trials)?;
                let moments = self.moments(&se, &thresholds)?;
                self.write_rates(moments)?;
            }
            Command::Roc => {
                let se = self.state_evolution()?;
                let thresholds = self.thresholds(&se)?;
                let trials = self.trials(&se, &thresholds, TrialPlan { amp: true, genie: false })?;
                self.write_detection(&se, &thresholds, &trials)?;
                self.write_roc(&se, &thresholds, &trials)?;
            }
            Command::Rates => {
                let moments = match self.cached_moments()? {
                    Some(m) => m,
                    None => {
                        let se = self.state_evolution()?;
                        let thresholds = self.thresholds(&se)?;
                        self.moments(&se, &thresholds)?
                    }
                };
                self.write_rates(moments)?;
            }
            Command::Genie => {
                let trials = self.trials_without_se(TrialPlan { amp: false, genie: true })?;
                self.write_genie(&trials)?;
            }
        }
        self.manifest.elapsed_seconds = self.clock.elapsed().as_secs_f64();
        let path = self.out.join(MANIFEST);
        fs::write(&path, self.manifest.render()).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, table: &CsvTable) -> Result<()> {
        let digest = table.write(&self.path(name))?;
        self.manifest.files.push((name.to_string(), digest));
        Ok(())
    }

    fn summary(&mut self, key: &str, value: impl ToString) {
        self.manifest.summary.push((key.to_string(), value.to_string()));
    }

    fn f(&self) -> usize {
        self.cfg.system.f()
    }

    /// T + 1 SE covariances: the AMP's T iterates X^{(2)}, …, X^{(T+1)} are
    /// predicted by C^{(2,2)}, …, C^{(T+1,T+1)}, and its final R_u sees C^{(T,T)}.
    fn state_evolution(&mut self) -> Result<SeTrace> {
        let t = self.cfg.system.iterations;
        let key = self.cfg.se_key();
        let cache = self.path(SE_CACHE);
        if let Some(trace) = read_se_cache(&cache, &key, t + 1, self.f(), self.problem.sigma_w2)? {
            log::info!("state evolution: cache hit");
            self.summary("se_cache", "hit");
            return Ok(trace);
        }
        let trace = se_recursion(
            &self.problem,
            t + 1,
            self.cfg.system.mc_se,
            &self.seeds.child(rng::STATE_EVOLUTION, 0),
        )?;
        write_se_cache(&cache, &key, &trace)?;
        self.summary("se_cache", "miss");
        Ok(trace)
    }

    fn write_se_trace(&mut self, se: &SeTrace) -> Result<()> {
        let mut t = CsvTable::new(&["t", "trace_c", "predicted_mse"]);
        for k in 1..=self.cfg.system.iterations {
            t.push(vec![
                k.to_string(),
                fmt_f64(se.c_seq[k - 1].cov().trace()),
                fmt_f64(se.predicted_mse(k)),
            ]);
        }
        self.write(SE_TRACE_CSV, &t)
    }

    fn fixed_point_summary(&mut self) -> Result<()> {
        let fp = se_fixed_point(
            &self.problem,
            self.cfg.system.mc_se,
            1e-6,
            500,
            &self.seeds.child(rng::STATE_EVOLUTION, 0),
        )?;
        let mse = fp.c.cov().trace() - self.problem.sigma_w2 * self.f() as f64;
        self.summary("fixed_point_mse", fmt_f64(mse));
        self.summary("fixed_point_iterations", fp.iterations);
        self.summary("fixed_point_converged", fp.converged);
        Ok(())
    }

    fn final_noise<'s>(&self, se: &'s SeTrace) -> &'s EffectiveNoise {
        &se.c_seq[self.cfg.system.iterations - 1]
    }

    fn thresholds(&mut self, se: &SeTrace) -> Result<Vec<f64>> {
        let noise = self.final_noise(se);
        let mode = self.cfg.calibration();
        self.problem
            .priors
            .iter()
            .map(|p| {
                if p.lambda == 0.0 || p.sigma.frobenius_norm() == 0.0 {
                    Ok(0.0)
                } else {
                    calibrate_threshold(p, noise, mode)
                }
            })
            .collect()
    }

    fn roc_offsets(&self) -> Vec<f64> {
        let x = &self.cfg.file.experiment;
        let k = x.roc_points;
        (0..k).map(|i| -x.roc_span + 2.0 * x.roc_span * i as f64 / (k - 1) as f64).collect()
    }

    fn trials(&mut self, se: &SeTrace, thresholds: &[f64], plan: TrialPlan) -> Result<Vec<TrialOutcome>> {
        let schedule = &se.c_seq[..self.cfg.system.iterations];
        self.run_trials(Some((schedule, thresholds)), plan)
    }

    fn trials_without_se(&mut self, plan: TrialPlan) -> Result<Vec<TrialOutcome>> {
        self.run_trials(None, plan)
    }

    fn run_trials(&mut self, amp: Option<(&[EffectiveNoise], &[f64])>, plan: TrialPlan) -> Result<Vec<TrialOutcome>> {
        let n = self.cfg.trials();
        let offsets = self.roc_offsets();
        let this = &*self;
        let out: Vec<Result<TrialOutcome>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let r = this.trial(k, amp, &offsets, plan);
                if let Err(e) = &r {
                    log::error!("trial {k} aborted: {e}");
                } else {
                    log::debug!("trial {k} done");
                }
                r
            })
            .collect();
        let out = out.into_iter().collect::<Result<Vec<_>>>()?;
        self.summary("trials", n);
        Ok(out)
    }

    fn trial(
        &self,
        k: usize,
        amp: Option<(&[EffectiveNoise], &[f64])>,
        offsets: &[f64],
        plan: TrialPlan,
    ) -> Result<TrialOutcome> {
        let sys = &self.cfg.system;
        let seeds = self.seeds.child(rng::TRIAL, k as u64);
        let scene = sample_scene(sys, &self.cfg.geometry, &seeds)?;
        let mut out = TrialOutcome::default();
        if let (true, Some((schedule, thresholds))) = (plan.amp, amp) {
            let priors = &self.problem.priors;
            let trace = amp_run(&scene, priors, sys, schedule, &self.cfg.amp_options())?;
            out.mse = trace.mse.clone();
            let noise = schedule.last().expect("non-empty schedule");
            let views: Vec<_> = (0..priors.len()).map(|u| trace.state.r_u(u)).collect();
            let truth: Vec<&[bool]> = (0..priors.len()).map(|u| scene.activity_u(u)).collect();
            let rep = detect(&views, priors, noise, thresholds, Some(&truth))?;
            out.counts = rep.counts.clone().unwrap_or_default();
            out.errors = empirical_error_sums(&scene, &trace.state.x_hat, &rep.decisions, 2)?;
            // ROC: one pass over ln Λ per row, counted at every offset
            out.roc = vec![vec![ErrorCounts::default(); priors.len()]; offsets.len()];
            for (u, p) in priors.iter().enumerate() {
                if p.lambda == 0.0 || p.sigma.frobenius_norm() == 0.0 {
                    continue;
                }
                let den = BgDenoiser::new(p, noise)?;
                let mut row = vec![C64::default(); views[u].ncols()];
                for (x, &active) in views[u].outer_iter().zip(truth[u]) {
                    row.iter_mut().zip(x.iter()).for_each(|(d, s)| *d = *s);
                    let llr = den.log_lr(&row);
                    for (j, off) in offsets.iter().enumerate() {
                        let declared = llr < thresholds[u] + off;
                        let c = &mut out.roc[j][u];
                        if active {
                            c.active += 1;
                            c.missed += usize::from(!declared);
                        } else {
                            c.inactive += 1;
                            c.false_alarms += usize::from(declared);
                        }
                    }
                }
            }
        }
        if plan.genie {
            let est = genie_mmse_estimate(&scene, &self.cfg.geometry, sys, GenieSolver::Auto)?;
            let u_count = sys.num_locations();
            out.genie_err = vec![ScalarMoments::default(); u_count];
            out.genie_pred = vec![ScalarMoments::default(); u_count];
            out.genie_mu = vec![ScalarMoments::default(); sys.b];
            let f = scene.channels.ncols() as f64;
            for (i, (&n, &u)) in est.rows.iter().zip(&est.locations).enumerate() {
                let e: f64 = scene
                    .channels
                    .row(n)
                    .iter()
                    .zip(est.estimates.row(i).iter())
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum();
                out.genie_err[u].add(e / f);
                out.genie_pred[u].add(est.mse.row(i).mean().unwrap_or(0.0));
                for b in 0..sys.b {
                    out.genie_mu[b].add(est.mu[[i, b]]);
                }
            }
        }
        Ok(out)
    }

    fn write_mse_trace(&mut self, se: &SeTrace, trials: &[TrialOutcome]) -> Result<()> {
        let mut t = CsvTable::new(&["trial", "t", "empirical_mse", "predicted_mse"]);
        let mut worst: f64 = 0.0;
        let iters = self.cfg.system.iterations;
        for k in 0..iters {
            let pred = se.predicted_mse(k + 2);
            let mean = trials.iter().map(|o| o.mse[k]).sum::<f64>() / trials.len() as f64;
            worst = worst.max((mean - pred).abs() / pred);
        }
        for (i, o) in trials.iter().enumerate() {
            for (k, m) in o.mse.iter().enumerate() {
                t.push(vec![i.to_string(), (k + 2).to_string(), fmt_f64(*m), fmt_f64(se.predicted_mse(k + 2))]);
            }
        }
        self.summary("se_worst_relative_gap", fmt_f64(worst));
        self.write(MSE_TRACE_CSV, &t)
    }

    fn write_detection(&mut self, se: &SeTrace, thresholds: &[f64], trials: &[TrialOutcome]) -> Result<()> {
        let noise = self.final_noise(se).clone();
        let mut t = CsvTable::new(&[
            "location",
            "threshold",
            "p_md_theory",
            "p_fa_theory",
            "active",
            "missed",
            "inactive",
            "false_alarms",
            "md_rate",
            "fa_rate",
        ]);
        let mut ee = Vec::new();
        for (u, p) in self.problem.priors.iter().enumerate() {
            let mut c = ErrorCounts::default();
            trials.iter().for_each(|o| c.merge(&o.counts[u]));
            let (md, fa) = theory_probabilities(p, &noise, thresholds[u])?;
            ee.push(0.5 * (md + fa));
            t.push(vec![
                u.to_string(),
                fmt_f64(thresholds[u]),
                fmt_f64(md),
                fmt_f64(fa),
                c.active.to_string(),
                c.missed.to_string(),
                c.inactive.to_string(),
                c.false_alarms.to_string(),
                fmt_f64(c.md_rate()),
                fmt_f64(c.fa_rate()),
            ]);
        }
        self.summary("mean_operating_error", fmt_f64(ee.iter().sum::<f64>() / ee.len() as f64));
        self.write(DETECTION_CSV, &t)
    }

    fn write_roc(&mut self, se: &SeTrace, thresholds: &[f64], trials: &[TrialOutcome]) -> Result<()> {
        let noise = self.final_noise(se).clone();
        let offsets = self.roc_offsets();
        let tests: Vec<Option<QuadraticTest>> = self
            .problem
            .priors
            .iter()
            .map(|p| {
                if p.lambda == 0.0 || p.sigma.frobenius_norm() == 0.0 {
                    Ok(None)
                } else {
                    QuadraticTest::new(p, &noise).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        let used: Vec<usize> = (0..tests.len()).filter(|u| tests[*u].is_some()).collect();
        ensure!(!used.is_empty(), InvalidInput, "no location has a non-trivial detector");
        let mut t = CsvTable::new(&[
            "point",
            "nu_offset",
            "p_md_theory",
            "p_fa_theory",
            "md_rate",
            "fa_rate",
            "missed",
            "active",
            "false_alarms",
            "inactive",
        ]);
        let k = used.len() as f64;
        for (j, off) in offsets.iter().enumerate() {
            let (mut md, mut fa, mut emd, mut efa) = (0.0, 0.0, 0.0, 0.0);
            let mut pooled = ErrorCounts::default();
            for &u in &used {
                let (a, b) = tests[u].as_ref().expect("filtered").probabilities(thresholds[u] + off)?;
                md += a / k;
                fa += b / k;
                let mut c = ErrorCounts::default();
                trials.iter().for_each(|o| c.merge(&o.roc[j][u]));
                emd += c.md_rate() / k;
                efa += c.fa_rate() / k;
                pooled.merge(&c);
            }
            t.push(vec![
                j.to_string(),
                fmt_f64(*off),
                fmt_f64(md),
                fmt_f64(fa),
                fmt_f64(emd),
                fmt_f64(efa),
                pooled.missed.to_string(),
                pooled.active.to_string(),
                pooled.false_alarms.to_string(),
                pooled.inactive.to_string(),
            ]);
        }
        self.write(ROC_CSV, &t)
    }

    fn write_estimation(&mut self, se: &SeTrace, thresholds: &[f64], trials: &[TrialOutcome]) -> Result<()> {
        let noise = self.final_noise(se).clone();
        let f = self.f() as f64;
        let samples = self.cfg.system.mc_cond;
        let mut t = CsvTable::new(&[
            "location",
            "n_detected",
            "amp_mse",
            "amp_mse_stderr",
            "amp_mse_theory",
            "amp_mse_theory_stderr",
            "theory_status",
            "n_false_alarm",
            "fa_energy",
            "fa_energy_theory",
            "genie_mse",
            "genie_mse_stderr",
            "genie_mse_predicted",
            "genie_mse_asymptotic",
        ]);
        let c_star = self.genie_fixed_points()?;
        let (mut amp_total, mut genie_total) = (0.0, 0.0);
        for (u, p) in self.problem.priors.iter().enumerate() {
            let mut e = ErrorSums::default();
            trials.iter().for_each(|o| e.merge(&o.errors[u]));
            let seeds = self.seeds.child(rng::CONDITIONAL, u as u64);
            let th_d = conditional_error_theory(p, &noise, thresholds[u], true, 2, samples, &seeds, 0)?;
            let th_fa = conditional_error_theory(p, &noise, thresholds[u], false, 2, samples, &seeds, 1)?;
            let status = match th_d {
                TheoryValue::Value(_) => "ok".to_string(),
                TheoryValue::Undefined => "undefined".to_string(),
                TheoryValue::InsufficientSamples { acceptance } => format!("insufficient:{acceptance:e}"),
            };
            let amp = Moment::from_moments(&e.detected).map(|m| (m.mean / f, m.stderr / f));
            let fa = Moment::from_moments(&e.false_alarm).map(|m| m.mean / f);
            let mut g = ScalarMoments::default();
            let mut gp = ScalarMoments::default();
            for o in trials {
                g.merge(&o.genie_err[u]);
                gp.merge(&o.genie_pred[u]);
            }
            let genie = Moment::from_moments(&g);
            let asym = self.genie_asymptotic(u, &c_star);
            if let (Some(a), Some(gm)) = (amp, genie) {
                amp_total += a.0;
                genie_total += gm.mean;
            }
            t.push(vec![
                u.to_string(),
                e.detected.n.to_string(),
                fmt_opt(amp.map(|a| a.0)),
                fmt_opt(amp.map(|a| a.1)),
                fmt_opt(th_d.value().map(|m| m.mean / f)),
                fmt_opt(th_d.value().map(|m| m.stderr / f)),
                status,
                e.false_alarm.n.to_string(),
                fmt_opt(fa),
                fmt_opt(th_fa.value().map(|m| m.mean / f)),
                fmt_opt(genie.map(|m| m.mean)),
                fmt_opt(genie.map(|m| m.stderr)),
                fmt_opt((gp.n > 0).then(|| gp.mean())),
                fmt_f64(asym),
            ]);
        }
        self.summary("amp_detected_mse_total", fmt_f64(amp_total));
        self.summary("genie_mse_total", fmt_f64(genie_total));
        self.write(ESTIMATION_CSV, &t)
    }

    fn genie_fixed_points(&self) -> Result<Vec<f64>> {
        let sys = &self.cfg.system;
        let alpha: Vec<f64> = (0..sys.num_locations()).map(|u| sys.alpha_eff(u)).collect();
        (0..sys.b)
            .map(|b| genie_asymptotic_fixed_point(&self.cfg.geometry, &sys.lambda, &alpha, sys.sigma_w2(), b, 1e-15))
            .collect()
    }

    /// Per-coefficient genie MSE of location u predicted from the fixed points.
    fn genie_asymptotic(&self, u: usize, c_star: &[f64]) -> f64 {
        let b_count = c_star.len();
        (0..b_count)
            .map(|b| {
                let g = self.cfg.geometry.gain(u, b);
                g * c_star[b] / (g + c_star[b])
            })
            .sum::<f64>()
            / b_count as f64
    }

    fn write_genie(&mut self, trials: &[TrialOutcome]) -> Result<()> {
        let c_star = self.genie_fixed_points()?;
        let mut t = CsvTable::new(&["location", "n_active", "genie_mse", "genie_mse_stderr", "genie_mse_predicted", "genie_mse_asymptotic"]);
        for u in 0..self.cfg.system.num_locations() {
            let mut g = ScalarMoments::default();
            let mut gp = ScalarMoments::default();
            for o in trials {
                g.merge(&o.genie_err[u]);
                gp.merge(&o.genie_pred[u]);
            }
            let m = Moment::from_moments(&g);
            t.push(vec![
                u.to_string(),
                g.n.to_string(),
                fmt_opt(m.map(|m| m.mean)),
                fmt_opt(m.map(|m| m.stderr)),
                fmt_opt((gp.n > 0).then(|| gp.mean())),
                fmt_f64(self.genie_asymptotic(u, &c_star)),
            ]);
        }
        self.write(GENIE_CSV, &t)?;
        let mut t = CsvTable::new(&["ru", "mu_mean", "mu_stderr", "inv_c_star"]);
        let mut worst: f64 = 0.0;
        for (b, c) in c_star.iter().enumerate() {
            let mut mu = ScalarMoments::default();
            trials.iter().for_each(|o| mu.merge(&o.genie_mu[b]));
            worst = worst.max((mu.mean() - 1.0 / c).abs() * c);
            t.push(vec![b.to_string(), fmt_f64(mu.mean()), fmt_f64(mu.stderr()), fmt_f64(1.0 / c)]);
        }
        self.summary("genie_mu_worst_relative_gap", fmt_f64(worst));
        self.write(GENIE_MU_CSV, &t)
    }

    fn moments(&mut self, se: &SeTrace, thresholds: &[f64]) -> Result<MomentTables> {
        let noise = self.final_noise(se).clone();
        let sys = &self.cfg.system;
        let locs = self
            .problem
            .priors
            .iter()
            .enumerate()
            .map(|(u, p)| dl_conditional_moments(p, &noise, thresholds[u], sys.m, sys.mc_cond, &self.seeds.child("downlink", u as u64)))
            .collect::<Result<Vec<LocationMoments>>>()?;
        let tables = MomentTables::from_locations(&locs)?;
        let mut t = CsvTable::new(&["location", "ru", "mean_re", "mean_im", "var", "z", "p_md", "p_fa"]);
        for u in 0..tables.num_locations() {
            for b in 0..tables.num_rus() {
                t.push(vec![
                    u.to_string(),
                    b.to_string(),
                    fmt_f64(tables.mean[[u, b]].re),
                    fmt_f64(tables.mean[[u, b]].im),
                    fmt_f64(tables.var[[u, b]]),
                    fmt_f64(tables.z[[u, b]]),
                    fmt_f64(tables.p_md[u]),
                    fmt_f64(tables.p_fa[u]),
                ]);
            }
        }
        self.write(MOMENTS_CSV, &t)?;
        let key_path = self.path(MOMENTS_KEY);
        fs::write(&key_path, self.cfg.moments_key()).map_err(|e| Error::io(&key_path, e))?;
        Ok(tables)
    }

    fn cached_moments(&mut self) -> Result<Option<MomentTables>> {
        let key_path = self.path(MOMENTS_KEY);
        let Ok(key) = fs::read_to_string(&key_path) else {
            return Ok(None);
        };
        if key.trim() != self.cfg.moments_key() {
            return Ok(None);
        }
        let path = self.path(MOMENTS_CSV);
        let tables = read_moments(&path, self.cfg.system.num_locations(), self.cfg.system.b)?;
        self.summary("moments_cache", "hit");
        Ok(Some(tables))
    }

    fn write_rates(&mut self, tables: MomentTables) -> Result<()> {
        let sys = &self.cfg.system;
        let clusters: ClusterMap = form_clusters(&self.cfg.geometry, self.cfg.file.experiment.q)?;
        let alpha: Vec<f64> = (0..sys.num_locations()).map(|u| sys.alpha_eff(u)).collect();
        let rho = dl_power_normalization(&tables.z, &sys.lambda, &alpha, &clusters, sys.l)?;
        let ctx = RateContext {
            geometry: &self.cfg.geometry,
            clusters: &clusters,
            sigma_w2: sys.sigma_w2(),
            l: sys.l,
            m: sys.m,
            lambda: &sys.lambda,
            alpha: &alpha,
        };
        let report: RateReport = uatf_rates(&ctx, tables, rho)?;
        let n: Vec<f64> = (0..sys.num_locations()).map(|u| sys.n_u(u) as f64).collect();
        let cdf = rate_cdf(&report.uatf, &sys.lambda, &n)?;
        let genie_cdf = rate_cdf(&report.genie, &sys.lambda, &n)?;
        let mut t = CsvTable::new(&["location", "rate_uatf_bits", "rate_genie_bits", "cdf_weight"]);
        for u in 0..sys.num_locations() {
            t.push(vec![
                u.to_string(),
                fmt_f64(report.uatf[u]),
                fmt_f64(report.genie[u]),
                fmt_f64(cdf.weights[u]),
            ]);
        }
        let (med, gmed) = (cdf.median(), genie_cdf.median());
        self.summary("rho_dl", fmt_f64(rho));
        self.summary("median_rate_uatf_bits", fmt_f64(med));
        self.summary("median_rate_genie_bits", fmt_f64(gmed));
        self.write(RATES_CDF_CSV, &t)
    }
}

fn theory_probabilities(p: &crate::denoiser::PriorParams, noise: &EffectiveNoise, nu: f64) -> Result<(f64, f64)> {
    if p.lambda == 0.0 || p.sigma.frobenius_norm() == 0.0 {
        return Ok(if nu > 0.0 { (0.0, 1.0) } else { (1.0, 0.0) });
    }
    QuadraticTest::new(p, noise)?.probabilities(nu)
}

fn write_se_cache(path: &Path, key: &str, se: &SeTrace) -> Result<()> {
    let mut s = format!("key,{key}\n");
    for (t, c) in se.c_seq.iter().enumerate() {
        let Hermitian::Diagonal(d) = c.cov() else {
            // dense covariances are never produced by the harness projection
            return Ok(());
        };
        let _ = write!(s, "{}", t + 1);
        for v in d {
            let _ = write!(s, ",{}", fmt_f64(*v));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_se_cache(path: &Path, key: &str, len: usize, f: usize, sigma_w2: f64) -> Result<Option<SeTrace>> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(None);
    };
    let mut lines = text.lines();
    if lines.next() != Some(&format!("key,{key}")) {
        return Ok(None);
    }
    let mut c_seq = Vec::with_capacity(len);
    for line in lines {
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').skip(1).map(str::parse).collect();
        match vals {
            Ok(v) if v.len() == f => c_seq.push(EffectiveNoise::new(Hermitian::Diagonal(v))?),
            _ => return Ok(None),
        }
    }
    if c_seq.len() != len {
        return Ok(None);
    }
    Ok(Some(SeTrace {
        c_seq,
        mmse_seq: Vec::new(),
        sigma_w2,
    }))
}

/// Reads a `moments.csv` written by a previous run.
pub fn read_moments(path: &Path, u_count: usize, b_count: usize) -> Result<MomentTables> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    })?;
    let mut mean = Array2::<C64>::zeros((u_count, b_count));
    let mut var = Array2::<f64>::zeros((u_count, b_count));
    let mut z = Array2::<f64>::zeros((u_count, b_count));
    let mut p_md = vec![0.0; u_count];
    let mut p_fa = vec![0.0; u_count];
    let mut seen = 0;
    for rec in r.records() {
        let rec = rec?;
        let bad = || Error::InvalidInput(format!("{}: malformed row {:?}", path.display(), rec));
        ensure!(rec.len() == 8, InvalidInput, "{}: expected 8 columns", path.display());
        let u: usize = rec[0].parse().map_err(|_| bad())?;
        let b: usize = rec[1].parse().map_err(|_| bad())?;
        ensure!(u < u_count && b < b_count, InvalidInput, "{}: index ({u}, {b}) out of range", path.display());
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad());
        mean[[u, b]] = C64::new(num(2)?, num(3)?);
        var[[u, b]] = num(4)?;
        z[[u, b]] = num(5)?;
        p_md[u] = num(6)?;
        p_fa[u] = num(7)?;
        seen += 1;
    }
    ensure!(seen == u_count * b_count, InvalidInput, "{}: {seen} rows, expected {}", path.display(), u_count * b_count);
    Ok(MomentTables { mean, var, z, p_md, p_fa })
}
