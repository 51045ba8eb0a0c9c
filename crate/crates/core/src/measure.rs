//! Empirical probability measures on the field space, initial-law samplers,
//! push-forward along a flow, moments and distances.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, NormKind, NormWeights, SpectralField};
use crate::flow::FlowMap;
use crate::liouville::CylTestFunction;

/// Weighted atoms `Σ w_i δ_{z_i}` at a fixed time.
#[derive(Clone, Debug)]
pub struct EnsembleMeasure {
    particles: Vec<SpectralField>,
    weights: Vec<f64>,
    timestamp: f64,
}

/// Neumaier-compensated sum; naive summation of 10⁴ weights `1/n` already
/// drifts by 1e-12.
pub(crate) fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

impl EnsembleMeasure {
    pub fn new(particles: Vec<SpectralField>, weights: Vec<f64>, timestamp: f64) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::Config("ensemble needs at least one particle".into()));
        }
        if particles.len() != weights.len() {
            return Err(Error::Config("particle and weight counts differ".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Parameter("weights must be finite and nonnegative".into()));
        }
        let total = compensated_sum(&weights);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("weights sum to {total}, expected 1")));
        }
        let first = &particles[0];
        if particles.iter().any(|p| !p.same_shape(first)) {
            return Err(Error::Config("particles live on different grids".into()));
        }
        Ok(EnsembleMeasure { particles, weights, timestamp })
    }

    /// Equal weights `1/n`.
    pub fn uniform(particles: Vec<SpectralField>, timestamp: f64) -> Result<Self> {
        let n = particles.len();
        EnsembleMeasure::new(particles, vec![1.0 / n.max(1) as f64; n], timestamp)
    }

    pub fn dirac(z: SpectralField, timestamp: f64) -> Self {
        EnsembleMeasure { particles: vec![z], weights: vec![1.0], timestamp }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[SpectralField] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn grid(&self) -> &Grid {
        self.particles[0].grid()
    }

    pub fn components(&self) -> usize {
        self.particles[0].components()
    }

    /// Same atoms and weights, relabelled time.
    pub fn at_time(mut self, timestamp: f64) -> Self {
        self.timestamp = timestamp;
        self
    }

    /// `∫ f dμ`, summed in particle order.
    pub fn expectation<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&SpectralField) -> Result<f64> + Sync,
    {
        let values: Vec<Result<f64>> = self.particles.par_iter().map(&f).collect();
        let mut acc = 0.0;
        for (v, w) in values.into_iter().zip(&self.weights) {
            acc += w * v?;
        }
        Ok(acc)
    }

    pub fn into_parts(self) -> (Vec<SpectralField>, Vec<f64>, f64) {
        (self.particles, self.weights, self.timestamp)
    }
}

/// Time-ordered snapshots; particle `i` of every snapshot is the image of the
/// same initial atom when the curve comes from a push-forward.
#[derive(Clone, Debug)]
pub struct MeasureCurve {
    snapshots: Vec<EnsembleMeasure>,
}

impl MeasureCurve {
    pub fn new(snapshots: Vec<EnsembleMeasure>) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::Config("measure curve needs at least one snapshot".into()));
        }
        if snapshots.windows(2).any(|p| !(p[1].timestamp > p[0].timestamp)) {
            return Err(Error::Config("snapshot times must be strictly increasing".into()));
        }
        let first = &snapshots[0].particles[0];
        if snapshots.iter().any(|s| !s.particles[0].same_shape(first)) {
            return Err(Error::Config("snapshots live on different grids".into()));
        }
        Ok(MeasureCurve { snapshots })
    }

    pub fn snapshots(&self) -> &[EnsembleMeasure] {
        &self.snapshots
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.timestamp).collect()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Every `stride`-th snapshot, keeping the first.
    pub fn subsampled(&self, stride: usize) -> Result<MeasureCurve> {
        MeasureCurve::new(self.snapshots.iter().step_by(stride.max(1)).cloned().collect())
    }
}

/// One spectral coefficient `ẑ_k` of a given component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAmplitude {
    #[serde(default)]
    pub component: usize,
    pub mode: Vec<i64>,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl ModeAmplitude {
    pub fn new(mode: &[i64], value: Complex64) -> Self {
        ModeAmplitude { component: 0, mode: mode.to_vec(), re: value.re, im: value.im }
    }
}

/// Field assembled from listed coefficients.
pub fn field_from_modes(grid: Grid, components: usize, modes: &[ModeAmplitude]) -> Result<SpectralField> {
    let mut z = SpectralField::zeros(grid, components);
    for m in modes {
        if m.component >= components {
            return Err(Error::Config(format!("component {} out of range", m.component)));
        }
        let idx = grid.index_of(&m.mode)?;
        z.component_mut(m.component)[idx] += Complex64::new(m.re, m.im);
    }
    Ok(z)
}

/// Standard deviations `σ_k` of each real component of `ẑ_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SpectralDecay {
    /// `σ_k = amplitude · (1 + |k|²)^{-exponent}`, zero for `|k| > max_mode`.
    Power {
        amplitude: f64,
        exponent: f64,
        #[serde(default)]
        max_mode: Option<f64>,
    },
    /// Only the listed modes fluctuate, with the given `σ`.
    Modes { entries: Vec<ModeSigma> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSigma {
    #[serde(default)]
    pub component: usize,
    pub mode: Vec<i64>,
    pub sigma: f64,
}

impl SpectralDecay {
    pub fn sigmas(&self, grid: &Grid, components: usize) -> Result<Vec<f64>> {
        let n = grid.len();
        let out = match self {
            SpectralDecay::Power { amplitude, exponent, max_mode } => (0..n * components)
                .map(|i| {
                    let k2 = grid.k_squared(i % n);
                    if max_mode.is_some_and(|m| k2.sqrt() > m) {
                        0.0
                    } else {
                        amplitude * (1.0 + k2).powf(-exponent)
                    }
                })
                .collect(),
            SpectralDecay::Modes { entries } => {
                let mut s = vec![0.0; n * components];
                for e in entries {
                    if e.component >= components {
                        return Err(Error::Config(format!("component {} out of range", e.component)));
                    }
                    s[e.component * n + grid.index_of(&e.mode)?] = e.sigma;
                }
                s
            }
        };
        if out.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Parameter("spectral standard deviations must be finite and >= 0".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SamplerKind {
    /// `ẑ_k = m_k + σ_k (ξ_k + i η_k)` with independent standard normals.
    GaussianField {
        decay: SpectralDecay,
        #[serde(default)]
        mean: Vec<ModeAmplitude>,
    },
    /// Atoms drawn with the given probabilities (uniform when omitted).
    DeltaMixture {
        atoms: Vec<Vec<ModeAmplitude>>,
        #[serde(default)]
        probabilities: Vec<f64>,
    },
    /// Focusing NLS soliton profiles `η sech(η (x₁ - x₀)) e^{i(v x₁ + θ)}`
    /// with uniform position and phase and jittered `η`, `v`.
    SolitonCloud {
        amplitude: f64,
        #[serde(default)]
        amplitude_spread: f64,
        #[serde(default)]
        velocity_spread: f64,
    },
}

/// Conditioning on `‖z‖ ≤ radius` in the tagged norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub norm: NormKind,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    #[serde(flatten)]
    pub kind: SamplerKind,
    #[serde(default)]
    pub ball: Option<BallSpec>,
    #[serde(default)]
    pub seed: u64,
}

const PILOT_DRAWS: usize = 1000;
const MIN_ACCEPTANCE: f64 = 1e-3;

struct Drawer {
    grid: Grid,
    components: usize,
    kind: DrawKind,
}

enum DrawKind {
    Gaussian { sigmas: Vec<f64>, mean: SpectralField },
    Atoms { atoms: Vec<SpectralField>, cumulative: Vec<f64> },
    Soliton { amplitude: f64, amplitude_spread: f64, velocity_spread: f64 },
}

impl Drawer {
    fn new(kind: &SamplerKind, grid: Grid, components: usize) -> Result<Self> {
        let kind = match kind {
            SamplerKind::GaussianField { decay, mean } => DrawKind::Gaussian {
                sigmas: decay.sigmas(&grid, components)?,
                mean: field_from_modes(grid, components, mean)?,
            },
            SamplerKind::DeltaMixture { atoms, probabilities } => {
                if atoms.is_empty() {
                    return Err(Error::Config("delta mixture needs at least one atom".into()));
                }
                let probs = if probabilities.is_empty() {
                    vec![1.0 / atoms.len() as f64; atoms.len()]
                } else {
                    probabilities.clone()
                };
                if probs.len() != atoms.len() || probs.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::Config("delta mixture probabilities do not match atoms".into()));
                }
                let total: f64 = probs.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::Config("delta mixture probabilities sum to zero".into()));
                }
                let mut acc = 0.0;
                let cumulative = probs
                    .iter()
                    .map(|p| {
                        acc += p / total;
                        acc
                    })
                    .collect();
                let atoms =
                    atoms.iter().map(|a| field_from_modes(grid, components, a)).collect::<Result<Vec<_>>>()?;
                DrawKind::Atoms { atoms, cumulative }
            }
            SamplerKind::SolitonCloud { amplitude, amplitude_spread, velocity_spread } => {
                if !(*amplitude > 0.0 && *amplitude_spread >= 0.0 && *amplitude_spread < *amplitude) {
                    return Err(Error::Parameter("soliton amplitude must exceed its spread".into()));
                }
                DrawKind::Soliton {
                    amplitude: *amplitude,
                    amplitude_spread: *amplitude_spread,
                    velocity_spread: *velocity_spread,
                }
            }
        };
        Ok(Drawer { grid, components, kind })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<SpectralField> {
        match &self.kind {
            DrawKind::Gaussian { sigmas, mean } => {
                let mut z = mean.clone();
                for (c, s) in z.coeffs_mut().iter_mut().zip(sigmas) {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *c += Complex64::new(s * re, s * im);
                }
                Ok(z)
            }
            DrawKind::Atoms { atoms, cumulative } => {
                let u: f64 = rng.gen();
                let i = cumulative.partition_point(|c| *c <= u).min(atoms.len() - 1);
                Ok(atoms[i].clone())
            }
            DrawKind::Soliton { amplitude, amplitude_spread, velocity_spread } => {
                let l = self.grid.length();
                let eta = amplitude + amplitude_spread * rng.gen_range(-1.0..=1.0);
                let v = velocity_spread * rng.gen_range(-1.0..=1.0);
                let x0 = rng.gen_range(0.0..l);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let n = self.grid.len();
                let mut values = vec![Complex64::new(0.0, 0.0); n * self.components];
                for (j, val) in values.iter_mut().take(n).enumerate() {
                    let x = self.grid.point(j)[0];
                    // periodic distance to the center
                    let d = (x - x0 + 0.5 * l).rem_euclid(l) - 0.5 * l;
                    *val = Complex64::from_polar(eta / (eta * d).cosh(), v * d + theta);
                }
                SpectralField::from_physical(self.grid, self.components, values)
            }
        }
    }
}

/// `n` equal-weight draws, conditioned on the ball by rejection. The pilot
/// estimate of the acceptance rate uses its own random stream.
pub fn sample(spec: &SamplerSpec, weights: &NormWeights, n: usize) -> Result<EnsembleMeasure> {
    if n == 0 {
        return Err(Error::Config("sample size must be >= 1".into()));
    }
    let drawer = Drawer::new(&spec.kind, *weights.grid(), weights.components())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut particles = Vec::with_capacity(n);
    match &spec.ball {
        None => {
            for _ in 0..n {
                particles.push(drawer.draw(&mut rng)?);
            }
        }
        Some(ball) => {
            if !(ball.radius > 0.0) {
                return Err(Error::Parameter("ball radius must be positive".into()));
            }
            let inside = |z: &SpectralField| -> Result<bool> { Ok(weights.norm(z, ball.norm)? <= ball.radius) };
            let mut pilot = ChaCha8Rng::seed_from_u64(spec.seed);
            pilot.set_stream(1);
            let mut hits = 0usize;
            for _ in 0..PILOT_DRAWS {
                if inside(&drawer.draw(&mut pilot)?)? {
                    hits += 1;
                }
            }
            let acceptance = hits as f64 / PILOT_DRAWS as f64;
            if acceptance < MIN_ACCEPTANCE {
                return Err(Error::InfeasibleConditioning { acceptance });
            }
            let budget = (n as f64 / acceptance * 100.0).ceil() as usize + PILOT_DRAWS;
            let mut tries = 0usize;
            while particles.len() < n {
                tries += 1;
                if tries > budget {
                    return Err(Error::InfeasibleConditioning { acceptance: particles.len() as f64 / tries as f64 });
                }
                let z = drawer.draw(&mut rng)?;
                if inside(&z)? {
                    particles.push(z);
                }
            }
        }
    }
    EnsembleMeasure::uniform(particles, 0.0)
}

/// `Φ(t, s)_♯ μ`: every atom moved along the flow, weights kept.
pub fn pushforward(mu: &EnsembleMeasure, flow: &FlowMap, s: f64, t: f64) -> Result<EnsembleMeasure> {
    let moved: Vec<Result<SpectralField>> = mu.particles.par_iter().map(|z| flow.propagate(s, t, z)).collect();
    let mut particles = Vec::with_capacity(moved.len());
    for (index, r) in moved.into_iter().enumerate() {
        match r {
            Ok(z) => particles.push(z),
            Err(Error::Blowup { time, .. }) => return Err(Error::ParticleBlowup { index, time }),
            Err(e) => return Err(e),
        }
    }
    Ok(EnsembleMeasure { particles, weights: mu.weights.clone(), timestamp: t })
}

/// Push-forward curve on `[s, t_end]`, observed every `stride` flow steps.
pub fn pushforward_curve(mu: &EnsembleMeasure, flow: &FlowMap, s: f64, t_end: f64, stride: usize) -> Result<MeasureCurve> {
    if !(t_end > s) {
        return Err(Error::Config("measure curves run forward in time".into()));
    }
    let trajs: Vec<Result<_>> = mu.particles.par_iter().map(|z| flow.solve_observed(s, t_end, z, stride)).collect();
    let mut paths = Vec::with_capacity(trajs.len());
    for (index, r) in trajs.into_iter().enumerate() {
        let traj = r?;
        if let Some(time) = traj.terminated_at {
            return Err(Error::ParticleBlowup { index, time });
        }
        paths.push(traj);
    }
    let times = paths[0].times.clone();
    let mut columns: Vec<Vec<SpectralField>> = times.iter().map(|_| Vec::with_capacity(paths.len())).collect();
    for traj in paths {
        for (col, z) in columns.iter_mut().zip(traj.states) {
            col.push(z);
        }
    }
    let snapshots = columns
        .into_iter()
        .zip(&times)
        .map(|(particles, &t)| EnsembleMeasure { particles, weights: mu.weights.clone(), timestamp: t })
        .collect();
    MeasureCurve::new(snapshots)
}

/// `Σ w_i ‖z_i‖^p`
pub fn moment(mu: &EnsembleMeasure, p: u32, weights: &NormWeights, norm: NormKind) -> Result<f64> {
    if !(p == 1 || p == 2) {
        return Err(Error::Parameter(format!("moment order must be 1 or 2, got {p}")));
    }
    mu.expectation(|z| Ok(weights.norm(z, norm)?.powi(p as i32)))
}

fn check_shared_grid(mu: &EnsembleMeasure, nu: &EnsembleMeasure) -> Result<()> {
    if !mu.particles[0].same_shape(&nu.particles[0]) {
        return Err(Error::Config("measures live on different grids".into()));
    }
    Ok(())
}

/// `max_φ |∫ψ∘π dμ − ∫ψ∘π dν|` over a fixed dictionary (time factors ignored).
pub fn cyl_distance(mu: &EnsembleMeasure, nu: &EnsembleMeasure, dictionary: &[CylTestFunction]) -> Result<f64> {
    if dictionary.is_empty() {
        return Err(Error::Config("test-function dictionary is empty".into()));
    }
    check_shared_grid(mu, nu)?;
    let mut worst: f64 = 0.0;
    for phi in dictionary {
        let a = mu.expectation(|z| phi.spatial_value(z))?;
        let b = nu.expectation(|z| phi.spatial_value(z))?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// Wasserstein-1 distance between weighted point sets on the line.
pub fn wasserstein1_1d(x: &[f64], wx: &[f64], y: &[f64], wy: &[f64]) -> f64 {
    let mut events: Vec<(f64, f64)> = x.iter().zip(wx).map(|(p, w)| (*p, *w)).collect();
    events.extend(y.iter().zip(wy).map(|(p, w)| (*p, -*w)));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        cdf_gap += pair[0].1;
        total += cdf_gap.abs() * (pair[1].0 - pair[0].0);
    }
    total
}

/// Sliced W₁ along explicit directions, each normalized in `Z1'`.
pub fn sliced_w1_along(
    mu: &EnsembleMeasure,
    nu: &EnsembleMeasure,
    weights: &NormWeights,
    directions: &[SpectralField],
) -> Result<f64> {
    check_shared_grid(mu, nu)?;
    if directions.is_empty() {
        return Err(Error::Config("need at least one direction".into()));
    }
    let mut total = 0.0;
    for u in directions {
        let norm = weights.norm(u, NormKind::Z1Dual)?;
        if norm == 0.0 {
            return Err(Error::Degenerate("zero slicing direction".into()));
        }
        let proj = |m: &EnsembleMeasure| -> Result<Vec<f64>> {
            m.particles
                .par_iter()
                .map(|z| Ok(weights.inner_real(u, z, crate::field::Pairing::Z1Dual)? / norm))
                .collect()
        };
        total += wasserstein1_1d(&proj(mu)?, &mu.weights, &proj(nu)?, &nu.weights);
    }
    Ok(total / directions.len() as f64)
}

/// Sliced W₁ over `directions` random `Z1'`-unit directions drawn uniformly
/// on the unit sphere of the realified `Z1'`.
pub fn sliced_w1(
    mu: &EnsembleMeasure,
    nu: &EnsembleMeasure,
    weights: &NormWeights,
    directions: usize,
    seed: u64,
) -> Result<f64> {
    check_shared_grid(mu, nu)?;
    if directions == 0 {
        return Err(Error::Config("need at least one direction".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = weights.weak_basis().len();
    let coords: Vec<Vec<f64>> = (0..directions)
        .map(|_| {
            let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            g.into_iter().map(|x| x / n).collect()
        })
        .collect();
    // weak coordinates are the Z1' coordinates in an orthonormal basis
    let wc = |m: &EnsembleMeasure| -> Result<Vec<Vec<f64>>> {
        m.particles.par_iter().map(|z| weights.weak_coordinates(z)).collect()
    };
    let (a, b) = (wc(mu)?, wc(nu)?);
    let dot = |u: &[f64], x: &[f64]| u.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    let mut total = 0.0;
    for u in &coords {
        let pa: Vec<f64> = a.iter().map(|x| dot(u, x)).collect();
        let pb: Vec<f64> = b.iter().map(|x| dot(u, x)).collect();
        total += wasserstein1_1d(&pa, &mu.weights, &pb, &nu.weights);
    }
    Ok(total / directions as f64)
}

/// `max |∫φ dμ_{t+Δ} − ∫φ dμ_t| / Δ` over the dictionary and adjacent snapshots.
pub fn weak_continuity_profile(curve: &MeasureCurve, dictionary: &[CylTestFunction]) -> Result<f64> {
    if curve.len() < 3 {
        return Err(Error::Config("continuity profile needs >= 3 snapshots".into()));
    }
    if dictionary.is_empty() {
        return Err(Error::Config("test-function dictionary is empty".into()));
    }
    let mut worst: f64 = 0.0;
    for phi in dictionary {
        let values = curve
            .snapshots
            .iter()
            .map(|s| s.expectation(|z| phi.spatial_value(z)))
            .collect::<Result<Vec<f64>>>()?;
        for (j, pair) in values.windows(2).enumerate() {
            let dt = curve.snapshots[j + 1].timestamp - curve.snapshots[j].timestamp;
            worst = worst.max((pair[1] - pair[0]).abs() / dt);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuityRefinement {
    pub coarse: f64,
    pub fine: f64,
    /// Set when halving the snapshot spacing nearly doubles the profile,
    /// the signature of a jump.
    pub flagged: bool,
}

/// Profile on the full curve versus every other snapshot.
pub fn weak_continuity_refinement(curve: &MeasureCurve, dictionary: &[CylTestFunction]) -> Result<ContinuityRefinement> {
    let fine = weak_continuity_profile(curve, dictionary)?;
    let coarse = weak_continuity_profile(&curve.subsampled(2)?, dictionary)?;
    let flagged = fine > 1.6 * coarse;
    Ok(ContinuityRefinement { coarse, fine, flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ProjectionBasis;
    use crate::flow::Scheme;
    use crate::models::{ModelKind, ModelSpec};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn grid() -> Grid {
        Grid::new(1, 16, 2.0 * PI).unwrap()
    }

    fn weights() -> Arc<NormWeights> {
        Arc::new(NormWeights::laplacian(grid(), 1))
    }

    fn gaussian(seed: u64, exponent: f64) -> SamplerSpec {
        SamplerSpec {
            kind: SamplerKind::GaussianField {
                decay: SpectralDecay::Power { amplitude: 0.5, exponent, max_mode: None },
                mean: vec![],
            },
            ball: None,
            seed,
        }
    }

    #[test]
    fn large_uniform_ensembles_are_accepted() {
        let n = 40_000;
        let z = SpectralField::zeros(grid(), 1);
        let mu = EnsembleMeasure::new(vec![z.clone(); n], vec![1.0 / n as f64; n], 0.0).unwrap();
        assert_eq!(mu.len(), n);
        assert!(EnsembleMeasure::new(vec![z; 2], vec![0.5, 0.5 + 1e-9], 0.0).is_err());
    }

    #[test]
    fn ensemble_validation() {
        let z = SpectralField::zeros(grid(), 1);
        assert!(EnsembleMeasure::new(vec![z.clone()], vec![0.5], 0.0).is_err());
        assert!(EnsembleMeasure::new(vec![z.clone(), z.clone()], vec![1.5, -0.5], 0.0).is_err());
        assert!(EnsembleMeasure::new(vec![], vec![], 0.0).is_err());
        let other = SpectralField::zeros(Grid::new(1, 8, 2.0 * PI).unwrap(), 1);
        assert!(EnsembleMeasure::uniform(vec![z.clone(), other], 0.0).is_err());
        let a = EnsembleMeasure::dirac(z.clone(), 0.0);
        let b = EnsembleMeasure::dirac(z, 0.0);
        assert!(MeasureCurve::new(vec![a, b]).is_err());
    }

    #[test]
    fn dirac_sampler() {
        let atom = vec![ModeAmplitude::new(&[2], Complex64::new(0.3, -0.1))];
        let spec = SamplerSpec {
            kind: SamplerKind::DeltaMixture { atoms: vec![atom.clone()], probabilities: vec![] },
            ball: None,
            seed: 1,
        };
        let mu = sample(&spec, &weights(), 50).unwrap();
        let expect = field_from_modes(grid(), 1, &atom).unwrap();
        assert!(mu.particles().iter().all(|p| *p == expect));
        assert!((mu.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_second_moment() {
        let w = weights();
        let spec = gaussian(42, 1.0);
        let n = 10_000;
        let mu = sample(&spec, &w, n).unwrap();
        let sig = match &spec.kind {
            SamplerKind::GaussianField { decay, .. } => decay.sigmas(&grid(), 1).unwrap(),
            _ => unreachable!(),
        };
        let expect: f64 = sig.iter().zip(w.symbol()).map(|(s, a)| 2.0 * (a + 1.0) * s * s).sum();
        let values: Vec<f64> = mu.particles().iter().map(|z| w.norm(z, NormKind::Z1).unwrap().powi(2)).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - expect).abs() <= 3.0 * se, "{mean} vs {expect} (se {se})");
        assert!((moment(&mu, 2, &w, NormKind::Z1).unwrap() - mean).abs() < 1e-9 * mean);
    }

    #[test]
    fn ball_conditioning() {
        let w = weights();
        let mut spec = gaussian(3, 1.0);
        spec.ball = Some(BallSpec { norm: NormKind::Z1, radius: 2.0 });
        let mu = sample(&spec, &w, 500).unwrap();
        assert!(mu.particles().iter().all(|z| w.norm(z, NormKind::Z1).unwrap() <= 2.0));
        spec.ball = Some(BallSpec { norm: NormKind::Z1, radius: 0.05 });
        assert!(matches!(sample(&spec, &w, 10), Err(Error::InfeasibleConditioning { .. })));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let w = weights();
        let a = sample(&gaussian(9, 1.0), &w, 20).unwrap();
        let b = sample(&gaussian(9, 1.0), &w, 20).unwrap();
        let c = sample(&gaussian(10, 1.0), &w, 20).unwrap();
        assert_eq!(a.particles(), b.particles());
        assert_ne!(a.particles(), c.particles());
    }

    #[test]
    fn soliton_cloud_profiles() {
        let g = Grid::new(1, 128, 20.0).unwrap();
        let w = NormWeights::laplacian(g, 1);
        let spec = SamplerSpec {
            kind: SamplerKind::SolitonCloud { amplitude: 1.5, amplitude_spread: 0.0, velocity_spread: 0.0 },
            ball: None,
            seed: 4,
        };
        let mu = sample(&spec, &w, 5).unwrap();
        // ∫ η² sech²(η x) dx = 2η on a box much wider than 1/η
        for z in mu.particles() {
            let mass = w.norm(z, NormKind::Z0).unwrap().powi(2);
            assert!((mass - 3.0).abs() < 1e-6, "{mass}");
        }
    }

    #[test]
    fn pushforward_identities() {
        let w = weights();
        let free = Arc::new(ModelSpec::new(ModelKind::Nls).with_coupling(0.0).build(grid()).unwrap());
        let flow = FlowMap::new(free.clone(), Scheme::StrangSplitting, 0.01).unwrap();
        let mu = sample(&gaussian(5, 1.0), &w, 200).unwrap();
        let same = pushforward(&mu, &flow, 0.2, 0.2).unwrap();
        assert_eq!(same.particles(), mu.particles());
        let moved = pushforward(&mu, &flow, 0.0, 0.8).unwrap();
        assert_eq!(moved.weights(), mu.weights());
        for (a, b) in mu.particles().iter().zip(moved.particles()) {
            let (na, nb) = (w.norm(a, NormKind::Z0).unwrap(), w.norm(b, NormKind::Z0).unwrap());
            assert!((na - nb).abs() <= 1e-12);
        }
        let h0 = mu.expectation(|z| free.energy(z)).unwrap();
        let h1 = moved.expectation(|z| free.energy(z)).unwrap();
        assert!((h0 - h1).abs() <= 1e-10);

        let z = mu.particles()[0].clone();
        let dirac = pushforward(&EnsembleMeasure::dirac(z.clone(), 0.0), &flow, 0.0, 0.8).unwrap();
        assert_eq!(dirac.particles()[0], flow.propagate(0.0, 0.8, &z).unwrap());
    }

    #[test]
    fn pushforward_composes() {
        let w = weights();
        let m = Arc::new(ModelSpec::new(ModelKind::Nls).with_coupling(1.0).build(grid()).unwrap());
        let flow = FlowMap::new(m.clone(), Scheme::StrangSplitting, 1e-3).unwrap();
        let fine = FlowMap::new(m.clone(), Scheme::StrangSplitting, 1e-4).unwrap();
        let mu = sample(&gaussian(6, 1.0), &w, 20).unwrap();
        let two = pushforward(&pushforward(&mu, &flow, 0.0, 0.3).unwrap(), &flow, 0.3, 0.7).unwrap();
        let one = pushforward(&mu, &flow, 0.0, 0.7).unwrap();
        let exact = pushforward(&mu, &fine, 0.0, 0.7).unwrap();
        for ((a, b), e) in two.particles().iter().zip(one.particles()).zip(exact.particles()) {
            let dev = w.norm(&(a - b), NormKind::Z1).unwrap();
            let err = w.norm(&(b - e), NormKind::Z1).unwrap().max(w.norm(&(a - e), NormKind::Z1).unwrap());
            assert!(dev <= 2.0 * err + 1e-12);
        }
    }

    #[test]
    fn pushforward_names_blown_up_particle() {
        let w = weights();
        let m = Arc::new(ModelSpec::new(ModelKind::Nls).with_coupling(-1.0).build(grid()).unwrap());
        let flow = FlowMap::new(m, Scheme::StrangSplitting, 0.01).unwrap().with_blowup_threshold(3.0).unwrap();
        let small = SpectralField::single_mode(grid(), 1, 0, &[0], Complex64::new(0.1, 0.0)).unwrap();
        let big = SpectralField::single_mode(grid(), 1, 0, &[0], Complex64::new(5.0, 0.0)).unwrap();
        let mu = EnsembleMeasure::uniform(vec![small.clone(), small, big], 0.0).unwrap();
        assert!(w.norm(&mu.particles()[2], NormKind::Z1).unwrap() > 3.0);
        match pushforward(&mu, &flow, 0.0, 0.1) {
            Err(Error::ParticleBlowup { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn moments_of_simple_measures() {
        let w = weights();
        let z = SpectralField::single_mode(grid(), 1, 0, &[1], Complex64::new(0.6, 0.8)).unwrap();
        let dirac = EnsembleMeasure::dirac(z.clone(), 0.0);
        let n1 = w.norm(&z, NormKind::Z1).unwrap();
        assert!((moment(&dirac, 1, &w, NormKind::Z1).unwrap() - n1).abs() < 1e-15);
        assert!((moment(&dirac, 2, &w, NormKind::Z1).unwrap() - n1 * n1).abs() < 1e-14);
        let pm = EnsembleMeasure::uniform(vec![z.clone(), z.scaled(Complex64::new(-1.0, 0.0))], 0.0).unwrap();
        assert!((moment(&pm, 1, &w, NormKind::Z1).unwrap() - n1).abs() < 1e-15);
        assert!(moment(&pm, 3, &w, NormKind::Z1).is_err());
    }

    #[test]
    fn one_dimensional_w1() {
        assert_eq!(wasserstein1_1d(&[0.0], &[1.0], &[2.5], &[1.0]), 2.5);
        let d = wasserstein1_1d(&[0.0, 1.0], &[0.5, 0.5], &[0.0, 3.0], &[0.5, 0.5]);
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sliced_w1_oracles() {
        let w = weights();
        let mu = sample(&gaussian(7, 1.0), &w, 300).unwrap();
        assert_eq!(sliced_w1(&mu, &mu, &w, 10, 1).unwrap(), 0.0);

        let z = mu.particles()[0].clone();
        let e1 = w.weak_vector(1);
        let mut shifted = z.clone();
        shifted.axpy(Complex64::new(-0.7, 0.0), &e1);
        let a = EnsembleMeasure::dirac(z, 0.0);
        let b = EnsembleMeasure::dirac(shifted, 0.0);
        let d = sliced_w1_along(&a, &b, &w, &[e1]).unwrap();
        assert!((d - 0.7).abs() < 1e-14);
    }

    #[test]
    fn sliced_w1_mean_shift() {
        use statrs::function::gamma::ln_gamma;
        // D-dimensional realified space of the 16-mode grid
        let w = weights();
        let dim = w.weak_basis().len() as f64;
        let shift = 0.8;
        let spec_a = SamplerSpec {
            kind: SamplerKind::GaussianField {
                decay: SpectralDecay::Power { amplitude: 0.1, exponent: 0.0, max_mode: None },
                mean: vec![],
            },
            ball: None,
            seed: 1,
        };
        let mut spec_b = spec_a.clone();
        spec_b.seed = 2;
        let mu = sample(&spec_a, &w, 4000).unwrap();
        let e1 = w.weak_vector(1);
        let nu_particles = sample(&spec_b, &w, 4000)
            .unwrap()
            .particles()
            .iter()
            .map(|z| {
                let mut z = z.clone();
                z.axpy(Complex64::new(shift, 0.0), &e1);
                z
            })
            .collect();
        let nu = EnsembleMeasure::uniform(nu_particles, 0.0).unwrap();
        let got = sliced_w1(&mu, &nu, &w, 400, 11).unwrap();
        // E|u₁| for u uniform on the unit sphere of R^D
        let e_abs = (ln_gamma(dim / 2.0) - ln_gamma((dim + 1.0) / 2.0)).exp() / PI.sqrt();
        let expect = shift * e_abs;
        assert!((got - expect).abs() < 0.2 * expect, "{got} vs {expect}");
    }

    fn dictionary(w: &Arc<NormWeights>) -> Vec<CylTestFunction> {
        // mode ±1 coordinates, which rotate under the free flow
        let basis = ProjectionBasis::from_weak_indices(w.clone(), &[3, 4]).unwrap();
        vec![
            CylTestFunction::bump(basis.clone(), 1.0).unwrap(),
            CylTestFunction::bump(basis, 0.5).unwrap().with_center(vec![0.2, -0.1]).unwrap(),
        ]
    }

    #[test]
    fn cylindrical_distance() {
        let w = weights();
        let dict = dictionary(&w);
        let mu = sample(&gaussian(8, 1.0), &w, 100).unwrap();
        assert_eq!(cyl_distance(&mu, &mu, &dict).unwrap(), 0.0);
        assert!(cyl_distance(&mu, &mu, &[]).is_err());

        let z = SpectralField::single_mode(grid(), 1, 0, &[0], Complex64::new(0.1, 0.05)).unwrap();
        let u = w.weak_vector(3);
        let mut prev = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3, 1e-6] {
            let mut zp = z.clone();
            zp.axpy(Complex64::new(eps, 0.0), &u);
            let d = cyl_distance(&EnsembleMeasure::dirac(z.clone(), 0.0), &EnsembleMeasure::dirac(zp, 0.0), &dict)
                .unwrap();
            assert!(d <= prev);
            prev = d;
        }
        assert!(prev < 1e-5);

        // one atom inside the supports, one far outside
        let far = &w.weak_vector(3) * 10.0;
        let d = cyl_distance(&EnsembleMeasure::dirac(z.clone(), 0.0), &EnsembleMeasure::dirac(far, 0.0), &dict).unwrap();
        let direct = dict.iter().map(|f| f.spatial_value(&z).unwrap().abs()).fold(0.0, f64::max);
        assert!((d - direct).abs() < 1e-15);
    }

    #[test]
    fn continuity_profiles() {
        let w = weights();
        let dict = dictionary(&w);
        let spec = SamplerSpec {
            kind: SamplerKind::GaussianField {
                decay: SpectralDecay::Power { amplitude: 0.2, exponent: 1.0, max_mode: None },
                mean: vec![],
            },
            ball: None,
            seed: 3,
        };
        let mu = sample(&spec, &w, 400).unwrap();
        let frozen = MeasureCurve::new((0..4).map(|j| mu.clone().at_time(j as f64 * 0.1)).collect()).unwrap();
        assert_eq!(weak_continuity_profile(&frozen, &dict).unwrap(), 0.0);

        let free = Arc::new(ModelSpec::new(ModelKind::Nls).with_coupling(0.0).build(grid()).unwrap());
        let flow = FlowMap::new(free, Scheme::StrangSplitting, 0.01).unwrap();
        let curve = pushforward_curve(&mu, &flow, 0.0, 0.4, 5).unwrap();
        let r = weak_continuity_refinement(&curve, &dict).unwrap();
        assert!(!r.flagged && r.fine.is_finite() && r.fine > 0.0, "{r:?}");

        // teleport particle 0 out of every bump support at the midpoint
        let mut snaps = curve.snapshots().to_vec();
        let mid = snaps.len() / 2;
        for s in snaps.iter_mut().skip(mid) {
            let (mut p, wts, t) = s.clone().into_parts();
            p[0] = &w.weak_vector(3) * 10.0;
            *s = EnsembleMeasure::new(p, wts, t).unwrap();
        }
        let jumped = MeasureCurve::new(snaps).unwrap();
        let r = weak_continuity_refinement(&jumped, &dict).unwrap();
        assert!(r.flagged, "{r:?}");
    }
}
