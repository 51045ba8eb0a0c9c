//! Config-driven experiments with deterministic JSON reports: the
//! uniqueness cross-validation (particles against a grid solution of the
//! projected continuity equation) and the hypothesis battery.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{Grid, NormKind, ProjectionBasis, SpectralField};
use crate::flow::{FlowMap, Scheme};
use crate::liouville::{
    binned_velocity, grid_continuity_solve, project_ensemble, theta, trapezoid_weights, CylTestFunction,
    DisintegrationEstimate, GridDensity, ProjectedSnapshot, TabulatedVelocity, TestFunctionSpec,
};
use crate::measure::{moment, pushforward, sample, wasserstein1_1d, BallSpec, EnsembleMeasure, SamplerSpec};
use crate::models::{HamiltonianModel, ModelKind, ModelSpec, VectorFieldHandle};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub start: f64,
    pub end: f64,
    pub dt: f64,
}

/// One refinement level: particle count, flow and grid step, cell width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rung {
    pub n: usize,
    pub dt: f64,
    pub dx: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    /// 1-based weak-basis indices; their count is the projection dimension.
    pub weak_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniquenessSpec {
    pub ladder: Vec<Rung>,
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    /// Width of the Gaussian applied to both densities before comparing.
    pub smoothing: f64,
    /// Regression bandwidth; the rule-of-thumb value per snapshot if absent.
    #[serde(default)]
    pub bandwidth: Option<f64>,
    /// Margin added around the bounding box of the projected particles.
    pub padding: f64,
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default = "default_one")]
    pub expected_slope: f64,
    #[serde(default = "default_slope_tolerance")]
    pub slope_tolerance: f64,
    #[serde(default = "default_substeps")]
    pub max_substeps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisBounds {
    /// Ball every snapshot must stay in; the sampler ball when absent.
    #[serde(default)]
    pub ball: Option<BallSpec>,
    #[serde(default = "default_slack")]
    pub ball_slack: f64,
    #[serde(default)]
    pub z1_second_moment: Option<f64>,
    #[serde(default)]
    pub velocity: Option<f64>,
    #[serde(default)]
    pub velocity_prime: Option<f64>,
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub theta: Option<f64>,
}

impl Default for HypothesisBounds {
    fn default() -> Self {
        HypothesisBounds {
            ball: None,
            ball_slack: default_slack(),
            z1_second_moment: None,
            velocity: None,
            velocity_prime: None,
            lipschitz: None,
            theta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesesSpec {
    pub n: usize,
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    #[serde(default = "default_pairs")]
    pub lipschitz_pairs: usize,
    /// Scale `c` in `θ(‖v‖/c)`.
    #[serde(default = "default_one")]
    pub theta_scale: f64,
    #[serde(default)]
    pub bounds: HypothesisBounds,
}

fn default_snapshots() -> usize {
    10
}
fn default_directions() -> usize {
    16
}
fn default_one() -> f64 {
    1.0
}
fn default_slope_tolerance() -> f64 {
    0.3
}
fn default_substeps() -> usize {
    100_000
}
fn default_slack() -> f64 {
    1e-3
}
fn default_pairs() -> usize {
    1000
}
fn default_output() -> String {
    "out".into()
}
fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::StrangSplitting]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: String,
    /// The first entry drives the experiments; the rest are for comparisons.
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    pub grid: Grid,
    pub model: ModelSpec,
    /// Its `seed` is ignored; sampling streams derive from the top-level seed.
    pub sampler: SamplerSpec,
    pub time: TimeSpec,
    pub projection: ProjectionSpec,
    #[serde(default)]
    pub tests: Vec<TestFunctionSpec>,
    #[serde(default)]
    pub uniqueness: Option<UniquenessSpec>,
    #[serde(default)]
    pub hypotheses: Option<HypothesesSpec>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml_string()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::Config("at least one scheme is required".into()));
        }
        if !(self.time.end > self.time.start) {
            return Err(Error::Config("time.end must exceed time.start".into()));
        }
        if !(self.time.dt > 0.0 && self.time.dt <= crate::flow::MAX_STEP) {
            return Err(Error::Config(format!("time.dt must lie in (0, {}]", crate::flow::MAX_STEP)));
        }
        if self.projection.weak_indices.is_empty() {
            return Err(Error::Config("projection needs at least one weak index".into()));
        }
        if let Some(u) = &self.uniqueness {
            let d = self.projection.weak_indices.len();
            if d > 3 {
                return Err(Error::Config(format!("uniqueness runs need projection dimension <= 3, got {d}")));
            }
            if u.ladder.len() < 3 {
                return Err(Error::Config("the refinement ladder needs at least 3 rungs".into()));
            }
            if u.snapshots == 0 || u.directions == 0 {
                return Err(Error::Config("snapshots and directions must be positive".into()));
            }
            let window = (self.time.end - self.time.start) / u.snapshots as f64;
            for r in &u.ladder {
                if r.n == 0 || !(r.dx > 0.0) || !(r.dt > 0.0 && r.dt <= crate::flow::MAX_STEP) {
                    return Err(Error::Config(format!("invalid rung {r:?}")));
                }
                let ratio = window / r.dt;
                if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                    return Err(Error::Config(format!("rung dt {} does not divide the snapshot spacing {window}", r.dt)));
                }
            }
            if !(u.smoothing >= 0.0 && u.padding >= 0.0) {
                return Err(Error::Config("smoothing and padding must be >= 0".into()));
            }
        }
        if let Some(h) = &self.hypotheses {
            if h.n == 0 || h.snapshots == 0 || !(h.theta_scale > 0.0) {
                return Err(Error::Config("hypotheses need n, snapshots and theta_scale positive".into()));
            }
        }
        Ok(())
    }

    pub fn scheme(&self) -> Scheme {
        self.schemes[0]
    }

    pub fn build_model(&self) -> Result<Arc<HamiltonianModel>> {
        Ok(Arc::new(self.model.build(self.grid)?))
    }

    pub fn basis(&self, model: &HamiltonianModel) -> Result<ProjectionBasis> {
        ProjectionBasis::from_weak_indices(model.norm_weights().clone(), &self.projection.weak_indices)
    }

    pub fn test_functions(&self, model: &HamiltonianModel) -> Result<Vec<CylTestFunction>> {
        self.tests.iter().map(|t| t.build(model.norm_weights().clone())).collect()
    }

    /// `n` draws from the sampler on an independent stream of the seed.
    pub fn initial_ensemble(&self, model: &HamiltonianModel, n: usize, stream: u64) -> Result<EnsembleMeasure> {
        let mut spec = self.sampler.clone();
        spec.seed = stream_seed(self.seed, stream);
        Ok(sample(&spec, model.norm_weights(), n)?.at_time(self.time.start))
    }
}

/// Decorrelated seed for sub-stream `stream` of `seed`.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Least-squares slope of `log y` against `log x`; NaN unless every value
/// is positive and there are two distinct abscissae.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return f64::NAN;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return f64::NAN;
    }
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub passed: bool,
}

impl Check {
    pub fn within(name: &str, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let passed = value.is_finite() && lower.is_none_or(|l| value >= l) && upper.is_none_or(|u| value <= u);
        Check { name: name.into(), value, lower, upper, passed }
    }

    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self::within(name, value, None, Some(bound))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report<B> {
    pub schema_version: u32,
    pub experiment: String,
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub scheme: Scheme,
    pub ladder: Vec<Rung>,
    pub passed: bool,
    /// Name of the first failing check.
    pub first_failure: Option<String>,
    pub checks: Vec<Check>,
    pub results: B,
}

impl<B: Serialize> Report<B> {
    pub fn new(experiment: &str, cfg: &ExperimentConfig, ladder: Vec<Rung>, checks: Vec<Check>, results: B) -> Result<Self> {
        let first_failure = checks.iter().find(|c| !c.passed).map(|c| c.name.clone());
        Ok(Report {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.into(),
            name: cfg.name.clone(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            scheme: cfg.scheme(),
            ladder,
            passed: first_failure.is_none(),
            first_failure,
            checks,
            results,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RungResult {
    pub rung: Rung,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
    pub bandwidths: Vec<f64>,
    pub substeps: usize,
    pub max_cfl: f64,
    pub times: Vec<f64>,
    pub l1: Vec<f64>,
    pub sliced_w1: Vec<f64>,
    pub particle_center: Vec<f64>,
    pub grid_center: Vec<f64>,
}

impl RungResult {
    pub fn terminal_l1(&self) -> f64 {
        *self.l1.last().expect("at least one snapshot")
    }

    pub fn terminal_sliced_w1(&self) -> f64 {
        *self.sliced_w1.last().expect("at least one snapshot")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct UniquenessResults {
    pub projection_dim: usize,
    pub rungs: Vec<RungResult>,
    pub l1_slope: f64,
    pub sliced_w1_slope: f64,
}

/// Unit directions in `R^d` shared by every rung.
fn slicing_directions(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break g.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn sliced_w1_cloud(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64], d: usize, directions: &[Vec<f64>]) -> f64 {
    let proj = |pts: &[f64], u: &[f64]| -> Vec<f64> {
        pts.chunks(d).map(|y| y.iter().zip(u).map(|(p, q)| p * q).sum()).collect()
    };
    directions.iter().map(|u| wasserstein1_1d(&proj(a, u), wa, &proj(b, u), wb)).sum::<f64>() / directions.len() as f64
}

/// Curve A: the projected push-forward of the sampled ensemble. Curve B:
/// the upwind grid solution started from A's initial deposit and driven by
/// the binned regression estimate of the projected velocity on A's
/// snapshots. Reports L¹ (after smoothing both sides) and sliced W₁
/// distances per snapshot, and their log-log slopes in `Δx`.
pub fn run_uniqueness(cfg: &ExperimentConfig) -> Result<Report<UniquenessResults>> {
    cfg.validate()?;
    let spec = cfg.uniqueness.as_ref().ok_or_else(|| Error::Config("config has no [uniqueness] table".into()))?;
    let model = cfg.build_model()?;
    let basis = cfg.basis(&model)?;
    let directions = slicing_directions(basis.dim(), spec.directions, stream_seed(cfg.seed, 0));
    let mut rungs = Vec::with_capacity(spec.ladder.len());
    for (index, rung) in spec.ladder.iter().enumerate() {
        rungs.push(uniqueness_rung(cfg, spec, &model, &basis, index as u64 + 1, *rung, &directions)?);
    }
    let dx: Vec<f64> = rungs.iter().map(|r| r.rung.dx).collect();
    let l1: Vec<f64> = rungs.iter().map(|r| r.terminal_l1()).collect();
    let w1: Vec<f64> = rungs.iter().map(|r| r.terminal_sliced_w1()).collect();
    let l1_slope = loglog_slope(&dx, &l1);
    let sliced_w1_slope = loglog_slope(&dx, &w1);
    let tol = spec.slope_tolerance;
    let checks = vec![Check::within(
        "terminal L1 distance decays at first order in dx",
        l1_slope,
        Some(spec.expected_slope - tol),
        Some(spec.expected_slope + tol),
    )];
    let results = UniquenessResults { projection_dim: basis.dim(), rungs, l1_slope, sliced_w1_slope };
    Report::new("uniqueness", cfg, spec.ladder.clone(), checks, results)
}

fn uniqueness_rung(
    cfg: &ExperimentConfig,
    spec: &UniquenessSpec,
    model: &Arc<HamiltonianModel>,
    basis: &ProjectionBasis,
    stream: u64,
    rung: Rung,
    directions: &[Vec<f64>],
) -> Result<RungResult> {
    let d = basis.dim();
    let field = VectorFieldHandle::original(model.clone());
    let flow = FlowMap::new(model.clone(), cfg.scheme(), rung.dt)?;
    let (t0, t1) = (cfg.time.start, cfg.time.end);
    let times: Vec<f64> = (0..=spec.snapshots).map(|j| t0 + (t1 - t0) * j as f64 / spec.snapshots as f64).collect();

    let mut mu = cfg.initial_ensemble(model, rung.n, stream)?;
    let mut snaps: Vec<ProjectedSnapshot> = vec![project_ensemble(&mu, basis, Some(&field))?];
    for w in times.windows(2) {
        mu = pushforward(&mu, &flow, w[0], w[1])?;
        snaps.push(project_ensemble(&mu, basis, Some(&field))?);
    }
    drop(mu);

    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for s in &snaps {
        for y in s.points.chunks(d) {
            for a in 0..d {
                lower[a] = lower[a].min(y[a]);
                upper[a] = upper[a].max(y[a]);
            }
        }
    }
    let mut cells = vec![0; d];
    for a in 0..d {
        lower[a] -= spec.padding;
        let width = upper[a] + spec.padding - lower[a];
        cells[a] = ((width / rung.dx).ceil() as usize).max(2);
        upper[a] = lower[a] + cells[a] as f64 * rung.dx;
    }
    let deposit = |s: &ProjectedSnapshot| GridDensity::deposit(lower.clone(), upper.clone(), cells.clone(), &s.points, &s.weights);
    let initial = deposit(&snaps[0])?;

    let estimate = match spec.bandwidth {
        Some(h) => DisintegrationEstimate::nadaraya_watson().with_bandwidth(h),
        None => DisintegrationEstimate::nadaraya_watson(),
    };
    let bandwidths = snaps.iter().map(|s| estimate.bandwidth_for(s)).collect::<Result<Vec<f64>>>()?;
    let values = snaps
        .iter()
        .zip(&bandwidths)
        .map(|(s, h)| binned_velocity(&initial, s, *h))
        .collect::<Result<Vec<_>>>()?;
    let velocity = TabulatedVelocity { times: times.clone(), values };
    let solution = grid_continuity_solve(&initial, &velocity, t0, t1, rung.dt, spec.max_substeps)?;

    let centers = initial.centers();
    let mut l1 = Vec::with_capacity(times.len());
    let mut sliced = Vec::with_capacity(times.len());
    let mut last = (vec![], vec![]);
    for (s, t) in snaps.iter().zip(&times) {
        let j = solution
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(j, _)| j)
            .expect("grid solution holds its initial node");
        let b = &solution.densities[j];
        let a = deposit(s)?;
        l1.push(a.smoothed(spec.smoothing).l1_distance(&b.smoothed(spec.smoothing))?);
        sliced.push(sliced_w1_cloud(&s.points, &s.weights, &centers, b.values(), d, directions));
        last = (a.center_of_mass(), b.center_of_mass());
    }
    Ok(RungResult {
        rung,
        lower,
        upper,
        cells,
        bandwidths,
        substeps: solution.substeps,
        max_cfl: solution.max_cfl,
        times,
        l1,
        sliced_w1: sliced,
        particle_center: last.0,
        grid_center: last.1,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SnapshotDiagnostics {
    pub time: f64,
    pub max_z0_norm: f64,
    pub max_z1_norm: f64,
    pub z1_second_moment: f64,
    /// `E‖v(t,·)‖_{Z1'}`, original picture.
    pub velocity: f64,
    /// `E‖ṽ(t,·)‖_{Z0}` of the interaction-picture field, when it maps into `Z0`.
    pub velocity_prime: Option<f64>,
    /// `E θ(‖v‖_{Z1'} / c)`
    pub theta: f64,
    pub lipschitz: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesesResults {
    pub n: usize,
    pub snapshots: Vec<SnapshotDiagnostics>,
    pub z1_second_moment_integral: f64,
    pub velocity_integral: f64,
    pub velocity_prime_integral: Option<f64>,
    pub theta_integral: f64,
    pub lipschitz_supremum: Option<f64>,
}

fn lipschitz_applies(model: &HamiltonianModel) -> bool {
    matches!(model.kind(), ModelKind::Hartree | ModelKind::Skg)
}

/// Largest witness over `pairs` random pairs of distinct atoms.
fn ensemble_lipschitz(model: &HamiltonianModel, mu: &EnsembleMeasure, pairs: usize, seed: u64) -> Result<f64> {
    let n = mu.len();
    if n < 2 || pairs == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize)> = (0..pairs)
        .map(|_| {
            let i = rng.gen_range(0..n);
            let j = (i + rng.gen_range(1..n)) % n;
            (i, j)
        })
        .collect();
    let p = mu.particles();
    let values = picks
        .par_iter()
        .map(|&(i, j)| {
            if p[i] == p[j] {
                return Ok(0.0);
            }
            model.lipschitz_witness(mu.timestamp(), &p[i], &p[j])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

/// Per-snapshot hypothesis diagnostics along the push-forward of the
/// sampled ensemble, checked against the configured bounds.
pub fn run_hypotheses(cfg: &ExperimentConfig) -> Result<Report<HypothesesResults>> {
    cfg.validate()?;
    let spec = cfg.hypotheses.as_ref().ok_or_else(|| Error::Config("config has no [hypotheses] table".into()))?;
    let model = cfg.build_model()?;
    let weights = model.norm_weights().clone();
    let original = VectorFieldHandle::original(model.clone());
    let interaction = VectorFieldHandle::interaction(model.clone());
    let prime = interaction.codomain() == NormKind::Z0;
    let flow = FlowMap::new(model.clone(), cfg.scheme(), cfg.time.dt)?;
    let (t0, t1) = (cfg.time.start, cfg.time.end);
    let times: Vec<f64> = (0..=spec.snapshots).map(|j| t0 + (t1 - t0) * j as f64 / spec.snapshots as f64).collect();

    let mut mu = cfg.initial_ensemble(&model, spec.n, 1)?;
    let mut rows = Vec::with_capacity(times.len());
    for (j, t) in times.iter().enumerate() {
        if j > 0 {
            mu = pushforward(&mu, &flow, times[j - 1], *t)?;
        }
        let stats: Vec<[f64; 5]> = mu
            .particles()
            .par_iter()
            .map(|z| {
                let v = original.eval(*t, z)?;
                let speed = weights.norm(&v, NormKind::Z1Dual)?;
                let speed_prime = if prime { weights.norm(&interaction.eval(*t, z)?, NormKind::Z0)? } else { 0.0 };
                Ok([
                    weights.norm(z, NormKind::Z0)?,
                    weights.norm(z, NormKind::Z1)?,
                    speed,
                    speed_prime,
                    theta(speed / spec.theta_scale),
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = |k: usize| stats.iter().zip(mu.weights()).map(|(s, w)| w * s[k]).sum::<f64>();
        let max = |k: usize| stats.iter().map(|s| s[k]).fold(0.0, f64::max);
        let lipschitz = if lipschitz_applies(&model) {
            Some(ensemble_lipschitz(&model, &mu, spec.lipschitz_pairs, stream_seed(cfg.seed, 1000 + j as u64))?)
        } else {
            None
        };
        rows.push(SnapshotDiagnostics {
            time: *t,
            max_z0_norm: max(0),
            max_z1_norm: max(1),
            z1_second_moment: moment(&mu, 2, &weights, NormKind::Z1)?,
            velocity: mean(2),
            velocity_prime: prime.then(|| mean(3)),
            theta: mean(4),
            lipschitz,
        });
    }
    let tw = trapezoid_weights(&times);
    let integral = |f: &dyn Fn(&SnapshotDiagnostics) -> f64| rows.iter().zip(&tw).map(|(r, w)| w * f(r)).sum::<f64>();
    let z1_second_moment_integral = integral(&|r| r.z1_second_moment);
    let velocity_integral = integral(&|r| r.velocity);
    let velocity_prime_integral = prime.then(|| integral(&|r| r.velocity_prime.unwrap_or(0.0)));
    let theta_integral = integral(&|r| r.theta);
    let lipschitz_supremum = rows.iter().filter_map(|r| r.lipschitz).reduce(f64::max);

    let b = &spec.bounds;
    let mut checks = vec![Check::at_most(
        "estimates finite",
        if [z1_second_moment_integral, velocity_integral, theta_integral].iter().all(|v| v.is_finite()) { 0.0 } else { 1.0 },
        0.0,
    )];
    if let Some(ball) = b.ball.clone().or_else(|| cfg.sampler.ball.clone()) {
        let worst = rows
            .iter()
            .map(|r| match ball.norm {
                NormKind::Z0 => r.max_z0_norm,
                _ => r.max_z1_norm,
            })
            .fold(0.0, f64::max);
        checks.push(Check::at_most("ball max norms", worst, ball.radius * (1.0 + b.ball_slack)));
    }
    if let Some(c) = b.z1_second_moment {
        checks.push(Check::at_most("Z1 second moment", z1_second_moment_integral, c));
    }
    if let Some(c) = b.velocity {
        checks.push(Check::at_most("velocity estimate (A)", velocity_integral, c));
    }
    if let (Some(c), Some(v)) = (b.velocity_prime, velocity_prime_integral) {
        checks.push(Check::at_most("velocity estimate (A')", v, c));
    }
    if let (Some(c), Some(v)) = (b.lipschitz, lipschitz_supremum) {
        checks.push(Check::at_most("Lipschitz witnesses", v, c));
    }
    if let Some(c) = b.theta {
        checks.push(Check::at_most("theta-moment", theta_integral, c));
    }
    let results = HypothesesResults {
        n: spec.n,
        snapshots: rows,
        z1_second_moment_integral,
        velocity_integral,
        velocity_prime_integral,
        theta_integral,
        lipschitz_supremum,
    };
    Report::new("hypotheses", cfg, vec![], checks, results)
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzSurvey {
    pub pairs: usize,
    pub supremum: f64,
    pub mean: f64,
    /// Witness at `y = x + ε e` for shrinking `ε`.
    pub merge: Vec<(f64, f64)>,
}

fn ball_point(model: &HamiltonianModel, radius: f64, rng: &mut ChaCha8Rng) -> Result<SpectralField> {
    let len = model.grid().len() * model.components();
    let dim = 2 * len;
    let coeffs: Vec<num_complex::Complex64> = (0..len)
        .map(|_| num_complex::Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let z = SpectralField::from_coeffs(*model.grid(), model.components(), coeffs)?;
    let n = model.norm_weights().norm(&z, NormKind::Z0)?;
    let r = radius * rng.gen::<f64>().powf(1.0 / dim as f64);
    Ok(z.scaled((r / n).into()))
}

/// Lipschitz witnesses over `pairs` independent pairs drawn uniformly from
/// the `Z0` ball of the given radius, plus the merge limit along the first
/// weak direction.
pub fn lipschitz_survey(model: &HamiltonianModel, t: f64, radius: f64, pairs: usize, seed: u64) -> Result<LipschitzSurvey> {
    if !lipschitz_applies(model) {
        return Err(Error::Config("Lipschitz witness is defined for the Hartree and S-KG models".into()));
    }
    if pairs == 0 || !(radius > 0.0) {
        return Err(Error::Parameter("need a positive radius and at least one pair".into()));
    }
    let values = (0..pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, i));
            let x = ball_point(model, radius, &mut rng)?;
            let y = ball_point(model, radius, &mut rng)?;
            model.lipschitz_witness(t, &x, &y)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, u64::MAX));
    let x = ball_point(model, radius, &mut rng)?;
    let e = model.norm_weights().weak_vector(1);
    let e = e.scaled((1.0 / model.norm_weights().norm(&e, NormKind::Z0)?).into());
    let merge = [1e-2, 1e-4, 1e-6]
        .iter()
        .map(|eps| {
            let mut y = x.clone();
            y.axpy((*eps).into(), &e);
            Ok((*eps, model.lipschitz_witness(t, &x, &y)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LipschitzSurvey {
        pairs,
        supremum: values.iter().cloned().fold(0.0, f64::max),
        mean: values.iter().sum::<f64>() / pairs as f64,
        merge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "unit"
seed = 3
[grid]
dimension = 1
modes = 16
length = 6.283185307179586
[model]
kind = "nls"
coupling = 0.0
[sampler]
type = "delta_mixture"
atoms = [[{ mode = [2], re = 0.3, im = -0.4 }]]
[time]
start = 0.0
end = 0.5
dt = 0.01
[projection]
weak_indices = [5, 6]
[hypotheses]
n = 4
snapshots = 5
"#;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(text).unwrap()
    }

    #[test]
    fn config_round_trips_byte_identically() {
        let c = cfg(BASE);
        let once = c.to_toml_string().unwrap();
        let back = cfg(&once);
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string().unwrap(), once);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        let mut other = c.clone();
        other.seed = 4;
        assert_ne!(other.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(ExperimentConfig::from_toml_str("name = 1"), Err(Error::Config(_))));
        let unknown = BASE.replace("seed = 3", "seed = 3\nbogus = 1");
        assert!(ExperimentConfig::from_toml_str(&unknown).is_err());
        let short = format!("{BASE}[uniqueness]\nsmoothing = 0.1\npadding = 0.1\nladder = [{{ n = 10, dt = 0.01, dx = 0.1 }}]\n");
        assert!(ExperimentConfig::from_toml_str(&short).is_err());
        let ragged = format!(
            "{BASE}[uniqueness]\nsmoothing = 0.1\npadding = 0.1\nladder = [{{ n = 10, dt = 0.01, dx = 0.1 }}, {{ n = 10, dt = 0.03, dx = 0.1 }}, {{ n = 10, dt = 0.01, dx = 0.1 }}]\n"
        );
        assert!(ExperimentConfig::from_toml_str(&ragged).is_err());
        let big_step = BASE.replace("dt = 0.01", "dt = 0.2");
        assert!(ExperimentConfig::from_toml_str(&big_step).is_err());
    }

    #[test]
    fn slopes_and_seeds() {
        let x = [1.0, 0.5, 0.25];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
        assert!(loglog_slope(&x, &[1.0, 0.0, 1.0]).is_nan());
        assert!(loglog_slope(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
        assert_ne!(stream_seed(1, 0), stream_seed(1, 1));
        assert_ne!(stream_seed(1, 0), stream_seed(2, 0));
        assert_eq!(stream_seed(9, 9), stream_seed(9, 9));
    }

    #[test]
    fn free_velocity_matches_multiplier() {
        let report = run_hypotheses(&cfg(BASE)).unwrap();
        // single mode k = 2: ‖a z‖_{Z1'} = |c| a / sqrt(a + 1) with a = 4
        let expected = 0.5 * 4.0 / 5f64.sqrt();
        for row in &report.results.snapshots {
            assert!((row.velocity - expected).abs() < 1e-12, "{}", row.velocity);
            assert!((row.max_z1_norm - 0.5 * 5f64.sqrt()).abs() < 1e-12);
            assert!(row.lipschitz.is_none());
        }
        assert!((report.results.velocity_integral - 0.5 * expected).abs() < 1e-12);
        assert!(report.passed);
    }

    #[test]
    fn zero_ensemble_passes_trivially() {
        let text = BASE
            .replace(r#"atoms = [[{ mode = [2], re = 0.3, im = -0.4 }]]"#, "atoms = [[]]")
            .replace(r#"kind = "nls""#, r#"kind = "hartree""#)
            .replace("coupling = 0.0", "coupling = 1.0\nkernel = { type = \"yukawa\", g = 1.0, m = 1.0 }");
        let text = format!("{text}[hypotheses.bounds]\nz1_second_moment = 0.0\nvelocity = 0.0\nlipschitz = 0.0\ntheta = 0.0\n");
        let report = run_hypotheses(&cfg(&text)).unwrap();
        let r = &report.results;
        assert_eq!((r.z1_second_moment_integral, r.velocity_integral, r.theta_integral), (0.0, 0.0, 0.0));
        assert_eq!(r.velocity_prime_integral, Some(0.0));
        assert_eq!(r.lipschitz_supremum, Some(0.0));
        assert!(report.passed, "{:?}", report.first_failure);
    }

    #[test]
    fn failing_bound_is_named() {
        let text = format!("{BASE}[hypotheses.bounds]\nvelocity = 0.1\n");
        let report = run_hypotheses(&cfg(&text)).unwrap();
        assert!(!report.passed);
        assert_eq!(report.first_failure.as_deref(), Some("velocity estimate (A)"));
    }

    #[test]
    fn reports_are_deterministic() {
        let text = BASE.replace(
            "type = \"delta_mixture\"\natoms = [[{ mode = [2], re = 0.3, im = -0.4 }]]",
            "type = \"gaussian_field\"\ndecay = { type = \"power\", amplitude = 0.3, exponent = 1.0 }",
        );
        let text = text.replace("coupling = 0.0", "coupling = 1.0").replace("n = 4", "n = 40");
        let a = run_hypotheses(&cfg(&text)).unwrap().to_json().unwrap();
        let b = run_hypotheses(&cfg(&text)).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        assert!(a.contains(&cfg(&text).hash().unwrap()));
    }

    #[test]
    fn survey_merge_limit_is_finite() {
        let g = Grid::new(1, 16, 6.283185307179586).unwrap();
        let m = ModelSpec::new(ModelKind::Hartree)
            .with_kernel(crate::models::KernelSpec::Yukawa { g: 1.0, m: 1.0 })
            .build(g)
            .unwrap();
        let s = lipschitz_survey(&m, 0.3, 1.0, 50, 1).unwrap();
        assert!(s.supremum.is_finite() && s.supremum >= s.mean && s.mean > 0.0);
        let (a, b) = (s.merge[1].1, s.merge[2].1);
        assert!(((a - b) / b).abs() < 1e-3, "{:?}", s.merge);
        let nls = ModelSpec::new(ModelKind::Nls).build(g).unwrap();
        assert!(lipschitz_survey(&nls, 0.0, 1.0, 5, 1).is_err());
    }
}
