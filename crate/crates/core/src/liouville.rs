//! Weak Liouville residuals for measure curves, their finite-dimensional
//! projections, kernel-regression disintegration of the velocity field and an
//! upwind finite-volume solver for the projected continuity equation.

use std::collections::HashMap;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{NormKind, NormWeights, ProjectionBasis, SpectralField};
use crate::flow::FlowMap;
use crate::measure::{EnsembleMeasure, MeasureCurve};
use crate::models::VectorFieldHandle;

/// `Σ c_m u^{p_m}` in shifted coordinates `u = y - center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn one() -> Self {
        Polynomial { terms: vec![Monomial { coef: 1.0, powers: vec![] }] }
    }

    /// The coordinate `u_j`.
    pub fn coordinate(j: usize) -> Self {
        let mut powers = vec![0; j + 1];
        powers[j] = 1;
        Polynomial { terms: vec![Monomial { coef: 1.0, powers }] }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.terms.iter().any(|m| m.powers.len() > dim || !m.coef.is_finite()) {
            return Err(Error::Config(format!("polynomial uses more than {dim} variables")));
        }
        Ok(())
    }

    fn value(&self, u: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|m| m.coef * m.powers.iter().zip(u).map(|(p, x)| x.powi(*p as i32)).product::<f64>())
            .sum()
    }

    fn gradient(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        for m in &self.terms {
            for (j, &pj) in m.powers.iter().enumerate() {
                if pj == 0 {
                    continue;
                }
                let mut term = m.coef * pj as f64 * u[j].powi(pj as i32 - 1);
                for (i, &pi) in m.powers.iter().enumerate() {
                    if i != j {
                        term *= u[i].powi(pi as i32);
                    }
                }
                out[j] += term;
            }
        }
    }
}

/// `ψ(y) = P(y - c) · b((y - c)/R)` with `b(u) = exp(1/(|u|² - 1))` on the
/// unit ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub center: Vec<f64>,
    pub radius: f64,
    pub polynomial: Polynomial,
}

impl Profile {
    pub fn bump(dim: usize, radius: f64) -> Result<Self> {
        let p = Profile { center: vec![0.0; dim], radius, polynomial: Polynomial::one() };
        p.check()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn check(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Parameter("bump radius must be positive".into()));
        }
        if self.center.is_empty() {
            return Err(Error::Config("profile needs dimension >= 1".into()));
        }
        self.polynomial.check(self.center.len())
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        let r2 = self.radius * self.radius;
        let u: Vec<f64> = y.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let s = u.iter().map(|x| x * x).sum::<f64>() / r2;
        if s >= 1.0 {
            return 0.0;
        }
        self.polynomial.value(&u) * (1.0 / (s - 1.0)).exp()
    }

    /// Value, with `∇ψ(y)` written into `grad`.
    pub fn value_and_gradient(&self, y: &[f64], grad: &mut [f64]) -> f64 {
        let r2 = self.radius * self.radius;
        let u: Vec<f64> = y.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let s = u.iter().map(|x| x * x).sum::<f64>() / r2;
        if s >= 1.0 {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return 0.0;
        }
        let b = (1.0 / (s - 1.0)).exp();
        let p = self.polynomial.value(&u);
        self.polynomial.gradient(&u, grad);
        let db = -b / ((s - 1.0) * (s - 1.0)) * 2.0 / r2;
        for (g, x) in grad.iter_mut().zip(&u) {
            *g = *g * b + p * db * x;
        }
        p * b
    }
}

/// `χ(t) = exp(1/(u² - 1))` with `u` the affine map of `(start, end)` onto
/// `(-1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBump {
    pub start: f64,
    pub end: f64,
}

impl TimeBump {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(end > start) {
            return Err(Error::Parameter("time bump needs start < end".into()));
        }
        Ok(TimeBump { start, end })
    }

    fn u(&self, t: f64) -> f64 {
        (2.0 * t - self.start - self.end) / (self.end - self.start)
    }

    pub fn value(&self, t: f64) -> f64 {
        let u = self.u(t);
        if u.abs() >= 1.0 {
            0.0
        } else {
            (1.0 / (u * u - 1.0)).exp()
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let u = self.u(t);
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let q = u * u - 1.0;
        -(1.0 / q).exp() / (q * q) * 2.0 * u * 2.0 / (self.end - self.start)
    }
}

/// `φ(t, x) = χ(t) ψ(π x)` for an orthonormal projection `π` onto `R^n`.
#[derive(Clone, Debug)]
pub struct CylTestFunction {
    basis: ProjectionBasis,
    profile: Profile,
    time: Option<TimeBump>,
}

impl CylTestFunction {
    pub fn new(basis: ProjectionBasis, profile: Profile, time: Option<TimeBump>) -> Result<Self> {
        profile.check()?;
        if profile.dim() != basis.dim() {
            return Err(Error::Config("profile dimension differs from projection dimension".into()));
        }
        Ok(CylTestFunction { basis, profile, time })
    }

    pub fn bump(basis: ProjectionBasis, radius: f64) -> Result<Self> {
        let profile = Profile::bump(basis.dim(), radius)?;
        CylTestFunction::new(basis, profile, None)
    }

    pub fn with_center(mut self, center: Vec<f64>) -> Result<Self> {
        if center.len() != self.basis.dim() {
            return Err(Error::Config("center dimension differs from projection dimension".into()));
        }
        self.profile.center = center;
        Ok(self)
    }

    pub fn with_polynomial(mut self, polynomial: Polynomial) -> Result<Self> {
        polynomial.check(self.basis.dim())?;
        self.profile.polynomial = polynomial;
        Ok(self)
    }

    pub fn with_time(mut self, time: TimeBump) -> Self {
        self.time = Some(time);
        self
    }

    pub fn basis(&self) -> &ProjectionBasis {
        &self.basis
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn time(&self) -> Option<TimeBump> {
        self.time
    }

    /// `ψ(π z)`
    pub fn spatial_value(&self, z: &SpectralField) -> Result<f64> {
        Ok(self.profile.value(&self.basis.project(z)?))
    }

    fn chi(&self, t: f64) -> (f64, f64) {
        match self.time {
            Some(b) => (b.value(t), b.derivative(t)),
            None => (1.0, 0.0),
        }
    }

    pub fn value(&self, t: f64, z: &SpectralField) -> Result<f64> {
        Ok(self.chi(t).0 * self.spatial_value(z)?)
    }

    /// `∇φ(t, z) = χ(t) π^T ∇ψ(π z)`, the `Z1'` gradient.
    pub fn gradient(&self, t: f64, z: &SpectralField) -> Result<SpectralField> {
        let y = self.basis.project(z)?;
        let mut g = vec![0.0; y.len()];
        self.profile.value_and_gradient(&y, &mut g);
        let chi = self.chi(t).0;
        g.iter_mut().for_each(|x| *x *= chi);
        self.basis.lift(&g)
    }

    /// `∂_tφ + Re⟨v, ∇φ⟩_{Z1'}` at `(t, z)` given `v = v(t, z)`.
    pub fn integrand(&self, t: f64, z: &SpectralField, v: &SpectralField) -> Result<f64> {
        let (chi, dchi) = self.chi(t);
        if chi == 0.0 && dchi == 0.0 {
            return Ok(0.0);
        }
        let y = self.basis.project(z)?;
        let pv = self.basis.project(v)?;
        let mut g = vec![0.0; y.len()];
        let psi = self.profile.value_and_gradient(&y, &mut g);
        Ok(dchi * psi + chi * g.iter().zip(&pv).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Worst deviation between central differences of `φ(t, ·)` along random
    /// `Z1'`-unit directions and `Re⟨∇φ, h⟩_{Z1'}`.
    pub fn gradient_check(&self, t: f64, z: &SpectralField, directions: usize, seed: u64) -> Result<f64> {
        let w = self.basis.weights();
        let dim = w.weak_basis().len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grad = self.gradient(t, z)?;
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..directions {
            let coords: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let h = w.from_weak_coordinates(&coords);
            let h = &h * w.norm(&h, NormKind::Z1Dual)?.recip();
            let mut plus = z.clone();
            plus.axpy(Complex64::new(step, 0.0), &h);
            let mut minus = z.clone();
            minus.axpy(Complex64::new(-step, 0.0), &h);
            let fd = (self.value(t, &plus)? - self.value(t, &minus)?) / (2.0 * step);
            let exact = w.inner_real(&grad, &h, crate::field::Pairing::Z1Dual)?;
            worst = worst.max((fd - exact).abs());
        }
        Ok(worst)
    }
}

/// Serializable description of a cylindrical test function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionSpec {
    /// 1-based indices into the weak basis spanning the projection.
    pub weak_indices: Vec<usize>,
    pub radius: f64,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default)]
    pub polynomial: Option<Polynomial>,
    #[serde(default)]
    pub time: Option<TimeBump>,
}

impl TestFunctionSpec {
    pub fn build(&self, weights: std::sync::Arc<NormWeights>) -> Result<CylTestFunction> {
        let basis = ProjectionBasis::from_weak_indices(weights, &self.weak_indices)?;
        let d = basis.dim();
        let profile = Profile {
            center: self.center.clone().unwrap_or_else(|| vec![0.0; d]),
            radius: self.radius,
            polynomial: self.polynomial.clone().unwrap_or_else(Polynomial::one),
        };
        CylTestFunction::new(basis, profile, self.time)
    }
}

/// Trapezoidal weights for the given nodes.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for j in 1..n {
        let h = 0.5 * (times[j] - times[j - 1]);
        w[j - 1] += h;
        w[j] += h;
    }
    w
}

fn check_time_support(tests: &[CylTestFunction], t0: f64, t1: f64) -> Result<()> {
    let tol = 1e-12 * (1.0 + t0.abs().max(t1.abs()));
    for (i, phi) in tests.iter().enumerate() {
        match phi.time {
            None => return Err(Error::Config(format!("test {i} has no time factor"))),
            Some(b) if b.start < t0 - tol || b.end > t1 + tol => {
                return Err(Error::Config(format!(
                    "test {i} time support [{}, {}] leaves the horizon [{t0}, {t1}]",
                    b.start, b.end
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Trapezoidal time integral of every test integrand along one path.
fn path_integrals(
    times: &[f64],
    states: &[SpectralField],
    field: &VectorFieldHandle,
    tests: &[CylTestFunction],
) -> Result<Vec<f64>> {
    let tw = trapezoid_weights(times);
    let mut acc = vec![0.0; tests.len()];
    for ((t, z), w) in times.iter().zip(states).zip(&tw) {
        let active: Vec<usize> = (0..tests.len())
            .filter(|&i| {
                let (c, d) = tests[i].chi(*t);
                c != 0.0 || d != 0.0
            })
            .collect();
        if active.is_empty() {
            continue;
        }
        let v = field.eval(*t, z)?;
        for i in active {
            acc[i] += w * tests[i].integrand(*t, z, &v)?;
        }
    }
    Ok(acc)
}

/// `∫_I ∫ [∂_tφ + Re⟨v, ∇φ⟩_{Z1'}] dμ_t dt` for each test, trapezoidal in time.
pub fn liouville_residual(curve: &MeasureCurve, field: &VectorFieldHandle, tests: &[CylTestFunction]) -> Result<Vec<f64>> {
    let times = curve.times();
    check_time_support(tests, times[0], *times.last().unwrap())?;
    let n = curve.snapshots()[0].len();
    if curve.snapshots().iter().any(|s| s.len() != n) {
        return Err(Error::Config("snapshots carry different particle counts".into()));
    }
    let per_particle: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let states: Vec<SpectralField> = curve.snapshots().iter().map(|s| s.particles()[i].clone()).collect();
            path_integrals(&times, &states, field, tests)
        })
        .collect();
    let weights = curve.snapshots()[0].weights();
    let mut out = vec![0.0; tests.len()];
    for (r, w) in per_particle.into_iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(r?) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Per-particle time integrals of the Liouville integrand along the flow,
/// computed path by path without storing the curve. Row `i` belongs to
/// particle `i`; the residual is the weighted row sum.
pub fn liouville_particle_integrals(
    mu: &EnsembleMeasure,
    flow: &FlowMap,
    s: f64,
    t_end: f64,
    stride: usize,
    field: &VectorFieldHandle,
    tests: &[CylTestFunction],
) -> Result<Vec<Vec<f64>>> {
    check_time_support(tests, s, t_end)?;
    let rows: Vec<Result<Vec<f64>>> = mu
        .particles()
        .par_iter()
        .enumerate()
        .map(|(index, z)| {
            let traj = flow.solve_observed(s, t_end, z, stride)?;
            if let Some(time) = traj.terminated_at {
                return Err(Error::ParticleBlowup { index, time });
            }
            path_integrals(&traj.times, &traj.states, field, tests)
        })
        .collect();
    rows.into_iter().collect()
}

/// Streamed integrals together with the projected clouds observed every
/// `every` recorded nodes.
#[derive(Clone, Debug)]
pub struct ObservedIntegrals {
    pub rows: Vec<Vec<f64>>,
    pub snapshots: Vec<ProjectedSnapshot>,
}

/// [`liouville_particle_integrals`] that also records `π^d z_i`,
/// `π^d v(t, z_i)` and `‖v(t, z_i)‖_{Z1'}` on a coarser set of nodes.
#[allow(clippy::too_many_arguments)]
pub fn liouville_particle_integrals_observed(
    mu: &EnsembleMeasure,
    flow: &FlowMap,
    s: f64,
    t_end: f64,
    stride: usize,
    field: &VectorFieldHandle,
    tests: &[CylTestFunction],
    basis: &ProjectionBasis,
    every: usize,
) -> Result<ObservedIntegrals> {
    check_time_support(tests, s, t_end)?;
    if every == 0 {
        return Err(Error::Config("observation spacing must be positive".into()));
    }
    type Obs = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let rows: Vec<Result<(Vec<f64>, Obs)>> = mu
        .particles()
        .par_iter()
        .enumerate()
        .map(|(index, z)| {
            let traj = flow.solve_observed(s, t_end, z, stride)?;
            if let Some(time) = traj.terminated_at {
                return Err(Error::ParticleBlowup { index, time });
            }
            let row = path_integrals(&traj.times, &traj.states, field, tests)?;
            let (mut times, mut ys, mut vs, mut speeds) = (vec![], vec![], vec![], vec![]);
            for j in (0..traj.len()).step_by(every) {
                let (t, z) = (traj.times[j], &traj.states[j]);
                let v = field.eval(t, z)?;
                times.push(t);
                ys.extend(basis.project(z)?);
                vs.extend(basis.project(&v)?);
                speeds.push(basis.weights().norm(&v, NormKind::Z1Dual)?);
            }
            Ok((row, (times, ys, vs, speeds)))
        })
        .collect();
    let d = basis.dim();
    let mut out_rows = Vec::with_capacity(rows.len());
    let mut snapshots: Vec<ProjectedSnapshot> = Vec::new();
    for r in rows {
        let (row, (times, ys, vs, sp)) = r?;
        out_rows.push(row);
        if snapshots.is_empty() {
            snapshots = times
                .iter()
                .map(|t| ProjectedSnapshot {
                    time: *t,
                    dim: d,
                    points: vec![],
                    weights: mu.weights().to_vec(),
                    velocities: Some(vec![]),
                    speeds: Some(vec![]),
                })
                .collect();
        }
        for (j, snap) in snapshots.iter_mut().enumerate() {
            snap.points.extend_from_slice(&ys[j * d..(j + 1) * d]);
            snap.velocities.as_mut().expect("set above").extend_from_slice(&vs[j * d..(j + 1) * d]);
            snap.speeds.as_mut().expect("set above").push(sp[j]);
        }
    }
    Ok(ObservedIntegrals { rows: out_rows, snapshots })
}

/// `∫_I Σ w_i ‖v(t, z_i)‖ dt` in the tagged norm.
pub fn velocity_estimate(curve: &MeasureCurve, field: &VectorFieldHandle, norm: NormKind) -> Result<f64> {
    let w = field.model().norm_weights().clone();
    curve_integral(curve, field, |v| w.norm(v, norm))
}

/// `∫_I ∫ θ(‖v‖_{Z1'}/c0) dμ_t dt` with `θ(r) = r ln(1 + r)`.
pub fn theta_moment(curve: &MeasureCurve, field: &VectorFieldHandle, c0: f64) -> Result<f64> {
    if !(c0 > 0.0) {
        return Err(Error::Parameter("theta scale c0 must be positive".into()));
    }
    let w = field.model().norm_weights().clone();
    curve_integral(curve, field, |v| Ok(theta(w.norm(v, NormKind::Z1Dual)? / c0)))
}

pub fn theta(r: f64) -> f64 {
    r * r.ln_1p()
}

fn curve_integral<F>(curve: &MeasureCurve, field: &VectorFieldHandle, f: F) -> Result<f64>
where
    F: Fn(&SpectralField) -> Result<f64> + Sync,
{
    let times = curve.times();
    let tw = trapezoid_weights(&times);
    let mut total = 0.0;
    for (snap, w) in curve.snapshots().iter().zip(&tw) {
        let t = snap.timestamp();
        let mean = snap.expectation(|z| {
            let v = field.eval(t, z)?;
            if !v.is_finite() {
                return Err(Error::Overflow { norm: f64::INFINITY });
            }
            f(&v)
        })?;
        total += w * mean;
    }
    Ok(total)
}

/// Weighted point cloud `π^d_♯ μ_t`, optionally with the projected
/// velocities `π^d v(t, z_i)` and speeds `‖v(t, z_i)‖_{Z1'}`.
#[derive(Clone, Debug)]
pub struct ProjectedSnapshot {
    pub time: f64,
    pub dim: usize,
    /// Row-major `n × dim`.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub velocities: Option<Vec<f64>>,
    pub speeds: Option<Vec<f64>>,
}

impl ProjectedSnapshot {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for (mj, y) in m.iter_mut().zip(self.point(i)) {
                *mj += w * y;
            }
        }
        m
    }

    /// Weighted covariance, normalized by the total weight.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let m = self.mean();
        let d = self.dim;
        let mut c = vec![vec![0.0; d]; d];
        for (i, w) in self.weights.iter().enumerate() {
            let y = self.point(i);
            for a in 0..d {
                for b in 0..d {
                    c[a][b] += w * (y[a] - m[a]) * (y[b] - m[b]);
                }
            }
        }
        c
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

pub fn project_ensemble(
    mu: &EnsembleMeasure,
    basis: &ProjectionBasis,
    field: Option<&VectorFieldHandle>,
) -> Result<ProjectedSnapshot> {
    let d = basis.dim();
    let t = mu.timestamp();
    let rows: Vec<Result<(Vec<f64>, Option<(Vec<f64>, f64)>)>> = mu
        .particles()
        .par_iter()
        .map(|z| {
            let y = basis.project(z)?;
            let v = match field {
                Some(f) => {
                    let v = f.eval(t, z)?;
                    let speed = basis.weights().norm(&v, NormKind::Z1Dual)?;
                    Some((basis.project(&v)?, speed))
                }
                None => None,
            };
            Ok((y, v))
        })
        .collect();
    let n = rows.len();
    let mut points = Vec::with_capacity(n * d);
    let mut velocities = field.map(|_| Vec::with_capacity(n * d));
    let mut speeds = field.map(|_| Vec::with_capacity(n));
    for r in rows {
        let (y, v) = r?;
        points.extend(y);
        if let (Some((pv, s)), Some(vel), Some(sp)) = (v, velocities.as_mut(), speeds.as_mut()) {
            vel.extend(pv);
            sp.push(s);
        }
    }
    Ok(ProjectedSnapshot { time: t, dim: d, points, weights: mu.weights().to_vec(), velocities, speeds })
}

/// `π^d_♯ μ_t` for every snapshot of the curve.
pub fn project_curve(
    curve: &MeasureCurve,
    basis: &ProjectionBasis,
    field: Option<&VectorFieldHandle>,
) -> Result<Vec<ProjectedSnapshot>> {
    if basis.dim() > 6 {
        return Err(Error::Config("projection dimension must be <= 6".into()));
    }
    curve.snapshots().iter().map(|s| project_ensemble(s, basis, field)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegressionKind {
    NadarayaWatson,
    Knn { k_neighbors: usize },
}

/// Kernel-regression estimate of `E[π^d v | π^d X = y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisintegrationEstimate {
    /// Fixed bandwidth; `None` selects `σ̂ n^{-1/(d+4)}` per snapshot.
    pub bandwidth: Option<f64>,
    pub kind: RegressionKind,
}

/// One regression output; `flagged` marks queries farther than `3h` from
/// every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionValue {
    pub value: Vec<f64>,
    pub flagged: bool,
}

const KERNEL_CUTOFF: f64 = 5.0;

/// Bucketed sample positions with cell side `cell`.
struct CellList {
    cell: f64,
    dim: usize,
    buckets: HashMap<Vec<i64>, Vec<usize>>,
}

impl CellList {
    fn new(points: &[f64], dim: usize, cell: f64) -> Self {
        let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, y) in points.chunks(dim).enumerate() {
            buckets.entry(Self::key(y, cell)).or_default().push(i);
        }
        CellList { cell, dim, buckets }
    }

    fn key(y: &[f64], cell: f64) -> Vec<i64> {
        y.iter().map(|x| (x / cell).floor() as i64).collect()
    }

    fn for_neighbors(&self, y: &[f64], mut f: impl FnMut(usize)) {
        let base = Self::key(y, self.cell);
        let count = 3usize.pow(self.dim as u32);
        let mut key = base.clone();
        for code in 0..count {
            let mut c = code;
            for (k, b) in key.iter_mut().zip(&base) {
                *k = b + (c % 3) as i64 - 1;
                c /= 3;
            }
            if let Some(list) = self.buckets.get(&key) {
                list.iter().for_each(|&i| f(i));
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl DisintegrationEstimate {
    pub fn nadaraya_watson() -> Self {
        DisintegrationEstimate { bandwidth: None, kind: RegressionKind::NadarayaWatson }
    }

    pub fn knn(k_neighbors: usize) -> Self {
        DisintegrationEstimate { bandwidth: None, kind: RegressionKind::Knn { k_neighbors } }
    }

    pub fn with_bandwidth(mut self, h: f64) -> Self {
        self.bandwidth = Some(h);
        self
    }

    /// Rule-of-thumb `σ̂ n^{-1/(d+4)}` with `σ̂` the mean per-axis spread.
    pub fn default_bandwidth(snapshot: &ProjectedSnapshot) -> f64 {
        let c = snapshot.covariance();
        let d = snapshot.dim;
        let sigma = (0..d).map(|a| c[a][a].max(0.0).sqrt()).sum::<f64>() / d as f64;
        sigma * (snapshot.len() as f64).powf(-1.0 / (d as f64 + 4.0))
    }

    pub fn bandwidth_for(&self, snapshot: &ProjectedSnapshot) -> Result<f64> {
        let h = self.bandwidth.unwrap_or_else(|| Self::default_bandwidth(snapshot));
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Degenerate(format!("bandwidth {h} is not positive; the projected cloud may be a point")));
        }
        Ok(h)
    }

    /// Regress the per-sample rows `values` (`n × width`) at the query points.
    pub fn regress(
        &self,
        snapshot: &ProjectedSnapshot,
        values: &[f64],
        width: usize,
        queries: &[f64],
    ) -> Result<Vec<RegressionValue>> {
        let d = snapshot.dim;
        let n = snapshot.len();
        if n < 50 {
            return Err(Error::Config(format!("disintegration needs >= 50 particles, got {n}")));
        }
        if values.len() != n * width || queries.len() % d != 0 {
            return Err(Error::Config("regression input shapes do not match".into()));
        }
        let h = self.bandwidth_for(snapshot)?;
        let cells = CellList::new(&snapshot.points, d, KERNEL_CUTOFF * h);
        let knn = |y: &[f64], k: usize| -> (Vec<f64>, f64) {
            let mut idx: Vec<(f64, usize)> = (0..n).map(|i| (sq_dist(y, snapshot.point(i)), i)).collect();
            let k = k.clamp(1, n);
            idx.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
            let mut out = vec![0.0; width];
            let mut total = 0.0;
            for &(_, i) in &idx[..k] {
                let w = snapshot.weights[i];
                total += w;
                for (o, v) in out.iter_mut().zip(&values[i * width..(i + 1) * width]) {
                    *o += w * v;
                }
            }
            let nearest = idx[..k].iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            out.iter_mut().for_each(|o| *o /= total);
            (out, nearest.sqrt())
        };
        let results = queries
            .par_chunks(d)
            .map(|y| match self.kind {
                RegressionKind::Knn { k_neighbors } => {
                    let (value, nearest) = knn(y, k_neighbors);
                    RegressionValue { value, flagged: nearest > 3.0 * h }
                }
                RegressionKind::NadarayaWatson => {
                    let mut out = vec![0.0; width];
                    let mut total = 0.0;
                    let mut nearest = f64::INFINITY;
                    let inv = 0.5 / (h * h);
                    cells.for_neighbors(y, |i| {
                        let r2 = sq_dist(y, snapshot.point(i));
                        nearest = nearest.min(r2);
                        let w = snapshot.weights[i] * (-r2 * inv).exp();
                        total += w;
                        for (o, v) in out.iter_mut().zip(&values[i * width..(i + 1) * width]) {
                            *o += w * v;
                        }
                    });
                    if total > 0.0 && total.is_finite() {
                        out.iter_mut().for_each(|o| *o /= total);
                        RegressionValue { value: out, flagged: nearest.sqrt() > 3.0 * h }
                    } else {
                        // nothing inside the kernel cutoff
                        let (value, nearest) = knn(y, 10);
                        RegressionValue { value, flagged: nearest > 3.0 * h }
                    }
                }
            })
            .collect();
        Ok(results)
    }

    /// `v^d(t, y)` at the query points from a snapshot carrying velocities.
    pub fn estimate(&self, snapshot: &ProjectedSnapshot, queries: &[f64]) -> Result<Vec<RegressionValue>> {
        let vel = snapshot
            .velocities
            .as_ref()
            .ok_or_else(|| Error::Config("snapshot has no projected velocities".into()))?;
        self.regress(snapshot, vel, snapshot.dim, queries)
    }
}

/// Disintegrated field `v^d(t, ·)` of `μ` at the query points.
pub fn estimate_projected_field(
    est: &DisintegrationEstimate,
    mu: &EnsembleMeasure,
    basis: &ProjectionBasis,
    field: &VectorFieldHandle,
    t: f64,
    queries: &[f64],
) -> Result<Vec<RegressionValue>> {
    let snap = project_ensemble(&mu.clone().at_time(t), basis, Some(field))?;
    est.estimate(&snap, queries)
}

/// Test function `χ(t) ψ(y)` on `R^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedTestFunction {
    pub profile: Profile,
    pub time: TimeBump,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectedResidualReport {
    pub residuals: Vec<f64>,
    /// `∫_I ∫ |v^d| dμ^d_t dt`
    pub projected_speed: f64,
    /// `∫_I ∫ ‖v‖_{Z1'} dμ_t dt`
    pub full_speed: f64,
    pub bandwidths: Vec<f64>,
    pub flagged_queries: usize,
    /// Largest excess of `θ(|v^d|)` over the regressed `θ(‖v‖)` at sample points.
    pub jensen_excess: f64,
}

/// `∫_I ∫_{R^d} [∂_tφ + ⟨v^d, ∇φ⟩] dμ^d_t dt` with `v^d` regressed at the
/// sample points themselves.
pub fn projected_continuity_residual(
    curve: &[ProjectedSnapshot],
    est: &DisintegrationEstimate,
    tests: &[ProjectedTestFunction],
) -> Result<ProjectedResidualReport> {
    if curve.is_empty() {
        return Err(Error::Config("empty projected curve".into()));
    }
    let d = curve[0].dim;
    let t0 = curve[0].time;
    let t1 = curve.last().unwrap().time;
    for phi in tests {
        if phi.profile.dim() != d {
            return Err(Error::Config("test dimension differs from projection dimension".into()));
        }
        phi.profile.check()?;
        if phi.time.start < t0 - 1e-12 || phi.time.end > t1 + 1e-12 {
            return Err(Error::Config("test time support leaves the horizon".into()));
        }
    }
    let times: Vec<f64> = curve.iter().map(|s| s.time).collect();
    let tw = trapezoid_weights(&times);
    let mut residuals = vec![0.0; tests.len()];
    let mut projected_speed = 0.0;
    let mut full_speed = 0.0;
    let mut bandwidths = Vec::with_capacity(curve.len());
    let mut flagged_queries = 0;
    let mut jensen_excess: f64 = f64::NEG_INFINITY;
    for (snap, w) in curve.iter().zip(&tw) {
        let speeds =
            snap.speeds.as_ref().ok_or_else(|| Error::Config("snapshot has no velocity norms".into()))?;
        let vel = snap.velocities.as_ref().ok_or_else(|| Error::Config("snapshot has no projected velocities".into()))?;
        bandwidths.push(est.bandwidth_for(snap)?);
        // regress v^d and θ(‖v‖) together
        let width = d + 1;
        let mut rows = Vec::with_capacity(snap.len() * width);
        for i in 0..snap.len() {
            rows.extend_from_slice(&vel[i * d..(i + 1) * d]);
            rows.push(theta(speeds[i]));
        }
        let vd = est.regress(snap, &rows, width, &snap.points)?;
        let mut grad = vec![0.0; d];
        for (i, r) in vd.iter().enumerate() {
            let wi = snap.weights[i];
            let y = snap.point(i);
            let v = &r.value[..d];
            flagged_queries += r.flagged as usize;
            let speed = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            projected_speed += w * wi * speed;
            full_speed += w * wi * speeds[i];
            jensen_excess = jensen_excess.max(theta(speed) - r.value[d]);
            for (res, phi) in residuals.iter_mut().zip(tests) {
                let chi = phi.time.value(snap.time);
                let dchi = phi.time.derivative(snap.time);
                if chi == 0.0 && dchi == 0.0 {
                    continue;
                }
                let psi = phi.profile.value_and_gradient(y, &mut grad);
                let adv: f64 = grad.iter().zip(v).map(|(g, x)| g * x).sum();
                *res += w * wi * (dchi * psi + chi * adv);
            }
        }
    }
    Ok(ProjectedResidualReport { residuals, projected_speed, full_speed, bandwidths, flagged_queries, jensen_excess })
}

/// Nonnegative cell masses on an axis-aligned box in `R^d`, `d ≤ 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn zeros(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let d = cells.len();
        if !(1..=3).contains(&d) || lower.len() != d || upper.len() != d {
            return Err(Error::Config("grid density needs 1 <= d <= 3 with matching bounds".into()));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !(b > a)) || cells.iter().any(|c| *c < 2) {
            return Err(Error::Config("grid box must be nondegenerate with >= 2 cells per axis".into()));
        }
        let total = cells.iter().product();
        Ok(GridDensity { lower, upper, cells, values: vec![0.0; total] })
    }

    /// Cloud-in-cell deposit of a weighted point cloud; mass is renormalized
    /// to 1 and every point must lie inside the box.
    pub fn deposit(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>, points: &[f64], weights: &[f64]) -> Result<Self> {
        let mut g = GridDensity::zeros(lower, upper, cells)?;
        let d = g.dim();
        let spacing = g.spacing();
        for (y, w) in points.chunks(d).zip(weights) {
            if y.iter().zip(&g.lower).zip(&g.upper).any(|((x, a), b)| x < a || x > b) {
                return Err(Error::Config(format!("point {y:?} lies outside the density box")));
            }
            // fractional cell-center coordinates
            let s: Vec<f64> = (0..d).map(|a| (y[a] - g.lower[a]) / spacing[a] - 0.5).collect();
            for corner in 0..(1usize << d) {
                let mut idx = 0usize;
                let mut frac = *w;
                for a in 0..d {
                    let base = s[a].floor();
                    let hi = (corner >> a) & 1 == 1;
                    let f = s[a] - base;
                    let i = (base as i64 + hi as i64).clamp(0, g.cells[a] as i64 - 1) as usize;
                    frac *= if hi { f } else { 1.0 - f };
                    idx = idx * g.cells[a] + i;
                }
                g.values[idx] += frac;
            }
        }
        let total: f64 = g.values.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("deposit carries no mass".into()));
        }
        g.values.iter_mut().for_each(|v| *v /= total);
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self) -> Vec<f64> {
        (0..self.dim()).map(|a| (self.upper[a] - self.lower[a]) / self.cells[a] as f64).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = flat % self.cells[a];
            flat /= self.cells[a];
        }
        idx
    }

    fn stride(&self, axis: usize) -> usize {
        self.cells[axis + 1..].iter().product()
    }

    /// Row-major cell centers, `len × d`.
    pub fn centers(&self) -> Vec<f64> {
        let h = self.spacing();
        let mut out = Vec::with_capacity(self.len() * self.dim());
        for c in 0..self.len() {
            let idx = self.multi_index(c);
            for a in 0..self.dim() {
                out.push(self.lower[a] + (idx[a] as f64 + 0.5) * h[a]);
            }
        }
        out
    }

    pub fn center_of_mass(&self) -> Vec<f64> {
        let centers = self.centers();
        let d = self.dim();
        let mass = self.mass();
        let mut m = vec![0.0; d];
        for (c, v) in self.values.iter().enumerate() {
            for a in 0..d {
                m[a] += v * centers[c * d + a];
            }
        }
        m.iter_mut().for_each(|x| *x /= mass);
        m
    }

    pub fn l1_distance(&self, other: &GridDensity) -> Result<f64> {
        if self.cells != other.cells || self.lower != other.lower || self.upper != other.upper {
            return Err(Error::Config("densities live on different grids".into()));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum())
    }

    /// Mass-preserving Gaussian smoothing of width `b`: each cell spreads its
    /// mass over in-box cells with normalized weights, axis by axis.
    pub fn smoothed(&self, b: f64) -> GridDensity {
        let mut out = self.clone();
        if b <= 0.0 {
            return out;
        }
        let h = self.spacing();
        for axis in 0..self.dim() {
            let n = self.cells[axis];
            let reach = ((4.0 * b / h[axis]).ceil() as usize).min(n - 1);
            let stride = self.stride(axis);
            let kernel: Vec<f64> = (0..=reach).map(|j| (-0.5 * (j as f64 * h[axis] / b).powi(2)).exp()).collect();
            let src = out.values.clone();
            out.values.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..self.len() {
                if src[c] == 0.0 {
                    continue;
                }
                let i = (c / stride) % n;
                let lo = i.saturating_sub(reach);
                let hi = (i + reach).min(n - 1);
                let norm: f64 = (lo..=hi).map(|j| kernel[i.abs_diff(j)]).sum();
                for j in lo..=hi {
                    let target = c - i * stride + j * stride;
                    out.values[target] += src[c] * kernel[i.abs_diff(j)] / norm;
                }
            }
        }
        out
    }
}

/// Velocity on `R^d` used by the grid solver.
pub trait VelocityProvider: Sync {
    /// Write `v(t, y)` for the row-major points into `out`.
    fn velocity(&self, t: f64, points: &[f64], out: &mut [f64]);
}

pub struct ConstantVelocity(pub Vec<f64>);

impl VelocityProvider for ConstantVelocity {
    fn velocity(&self, _t: f64, points: &[f64], out: &mut [f64]) {
        let d = self.0.len();
        for chunk in out.chunks_mut(d).take(points.len() / d) {
            chunk.copy_from_slice(&self.0);
        }
    }
}

/// `v(y) = M y` with row-major `M`.
pub struct LinearVelocity {
    pub dim: usize,
    pub matrix: Vec<f64>,
}

impl VelocityProvider for LinearVelocity {
    fn velocity(&self, _t: f64, points: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (y, o) in points.chunks(d).zip(out.chunks_mut(d)) {
            for a in 0..d {
                o[a] = (0..d).map(|b| self.matrix[a * d + b] * y[b]).sum();
            }
        }
    }
}

/// Velocities tabulated at the cell centers of a fixed grid at a sequence of
/// times, linearly interpolated in time and held constant outside.
pub struct TabulatedVelocity {
    pub times: Vec<f64>,
    /// Per time, row-major `cells × d` values at the cell centers.
    pub values: Vec<Vec<f64>>,
}

impl VelocityProvider for TabulatedVelocity {
    fn velocity(&self, t: f64, _points: &[f64], out: &mut [f64]) {
        let n = self.times.len();
        let j = self.times.partition_point(|s| *s <= t);
        if j == 0 {
            out.copy_from_slice(&self.values[0]);
        } else if j >= n {
            out.copy_from_slice(&self.values[n - 1]);
        } else {
            let (t0, t1) = (self.times[j - 1], self.times[j]);
            let f = (t - t0) / (t1 - t0);
            for ((o, a), b) in out.iter_mut().zip(&self.values[j - 1]).zip(&self.values[j]) {
                *o = (1.0 - f) * a + f * b;
            }
        }
    }
}

/// Binned Nadaraya–Watson estimate of `v^d` at the cell centers of `grid`:
/// deposited mass and momentum are smoothed with a Gaussian of width `h` and
/// divided; cells the kernel does not reach copy their nearest filled
/// neighbour.
pub fn binned_velocity(grid: &GridDensity, snapshot: &ProjectedSnapshot, h: f64) -> Result<Vec<f64>> {
    let d = grid.dim();
    if snapshot.dim != d {
        return Err(Error::Config("snapshot dimension differs from grid dimension".into()));
    }
    let vel = snapshot.velocities.as_ref().ok_or_else(|| Error::Config("snapshot has no projected velocities".into()))?;
    let deposit = |weights: &[f64]| -> Result<GridDensity> {
        let mut g = GridDensity::zeros(grid.lower.clone(), grid.upper.clone(), grid.cells.clone())?;
        let spacing = g.spacing();
        for (y, w) in snapshot.points.chunks(d).zip(weights) {
            let s: Vec<f64> = (0..d).map(|a| (y[a] - g.lower[a]) / spacing[a] - 0.5).collect();
            if s.iter().zip(&g.cells).any(|(x, c)| *x < -0.5 || *x > *c as f64 - 0.5) {
                continue;
            }
            for corner in 0..(1usize << d) {
                let mut idx = 0usize;
                let mut frac = *w;
                for a in 0..d {
                    let base = s[a].floor();
                    let hi = (corner >> a) & 1 == 1;
                    let f = s[a] - base;
                    let i = (base as i64 + hi as i64).clamp(0, g.cells[a] as i64 - 1) as usize;
                    frac *= if hi { f } else { 1.0 - f };
                    idx = idx * g.cells[a] + i;
                }
                g.values[idx] += frac;
            }
        }
        Ok(g)
    };
    let smooth_linear = |g: &GridDensity| -> GridDensity {
        // plain convolution (not mass-normalized), so that signed momenta work
        let mut out = g.clone();
        let hs = g.spacing();
        for axis in 0..d {
            let n = g.cells[axis];
            let reach = ((KERNEL_CUTOFF * h / hs[axis]).ceil() as usize).min(n - 1);
            let stride = g.stride(axis);
            let kernel: Vec<f64> = (0..=reach).map(|j| (-0.5 * (j as f64 * hs[axis] / h).powi(2)).exp()).collect();
            let src = out.values.clone();
            out.values.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..g.len() {
                if src[c] == 0.0 {
                    continue;
                }
                let i = (c / stride) % n;
                for j in i.saturating_sub(reach)..=(i + reach).min(n - 1) {
                    out.values[c - i * stride + j * stride] += src[c] * kernel[i.abs_diff(j)];
                }
            }
        }
        out
    };
    let mass = smooth_linear(&deposit(&snapshot.weights)?);
    let peak = mass.values.iter().cloned().fold(0.0, f64::max);
    let mut out = vec![0.0; grid.len() * d];
    let mut filled = vec![false; grid.len()];
    for a in 0..d {
        let momentum: Vec<f64> = (0..snapshot.len()).map(|i| snapshot.weights[i] * vel[i * d + a]).collect();
        let p = smooth_linear(&deposit(&momentum)?);
        for c in 0..grid.len() {
            if mass.values[c] > 1e-12 * peak {
                out[c * d + a] = p.values[c] / mass.values[c];
                filled[c] = true;
            }
        }
    }
    // dilate filled cells into empty ones
    let mut remaining = filled.iter().filter(|f| !**f).count();
    while remaining > 0 {
        let snapshot_filled = filled.clone();
        let mut progressed = false;
        for c in 0..grid.len() {
            if snapshot_filled[c] {
                continue;
            }
            let idx = grid.multi_index(c);
            let mut acc = vec![0.0; d];
            let mut count = 0;
            for a in 0..d {
                let stride = grid.stride(a);
                for nb in [idx[a].checked_sub(1), Some(idx[a] + 1).filter(|&j| j < grid.cells[a])].into_iter().flatten() {
                    let other = c - idx[a] * stride + nb * stride;
                    if snapshot_filled[other] {
                        for b in 0..d {
                            acc[b] += out[other * d + b];
                        }
                        count += 1;
                    }
                }
            }
            if count > 0 {
                for b in 0..d {
                    out[c * d + b] = acc[b] / count as f64;
                }
                filled[c] = true;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Degenerate("no projected samples inside the density box".into()));
        }
    }
    Ok(out)
}

/// Outcome of one grid solve.
#[derive(Clone, Debug)]
pub struct GridSolution {
    pub times: Vec<f64>,
    pub densities: Vec<GridDensity>,
    pub substeps: usize,
    pub max_cfl: f64,
}

pub const MAX_CFL: f64 = 0.9;

/// First-order upwind finite volumes for `∂_tρ + ∇·(vρ) = 0` with zero flux
/// through the box walls. Face velocities average the adjacent cell-center
/// values. Each macro step is split so that the outflow fraction of every
/// cell stays `≤ 0.9`; the density is recorded at every macro node.
pub fn grid_continuity_solve(
    initial: &GridDensity,
    velocity: &dyn VelocityProvider,
    t0: f64,
    t1: f64,
    dt: f64,
    max_substeps: usize,
) -> Result<GridSolution> {
    if !(dt > 0.0) {
        return Err(Error::Parameter("grid step must be positive".into()));
    }
    let d = initial.dim();
    let n = initial.len();
    let h = initial.spacing();
    let centers = initial.centers();
    let steps = if t1 > t0 { ((t1 - t0) / dt * (1.0 - 1e-12)).ceil() as usize } else { 0 };
    let big = if steps > 0 { (t1 - t0) / steps as f64 } else { 0.0 };
    let mut rho = initial.clone();
    let mut times = vec![t0];
    let mut densities = vec![initial.clone()];
    let mut v = vec![0.0; n * d];
    let mut flux = vec![0.0; n];
    let mut total_sub = 0;
    let mut max_cfl: f64 = 0.0;
    let strides: Vec<usize> = (0..d).map(|a| initial.stride(a)).collect();
    for step in 0..steps {
        let start = t0 + step as f64 * big;
        velocity.velocity(start, &centers, &mut v);
        // per-cell outflow rate, used for the sub-step count
        let face = |v: &[f64], c: usize, a: usize, up: bool| -> Option<f64> {
            let i = (c / strides[a]) % initial.cells[a];
            if up {
                (i + 1 < initial.cells[a]).then(|| 0.5 * (v[c * d + a] + v[(c + strides[a]) * d + a]))
            } else {
                (i > 0).then(|| 0.5 * (v[c * d + a] + v[(c - strides[a]) * d + a]))
            }
        };
        let mut rate: f64 = 0.0;
        for c in 0..n {
            let mut out = 0.0;
            for a in 0..d {
                if let Some(u) = face(&v, c, a, true) {
                    out += u.max(0.0) / h[a];
                }
                if let Some(u) = face(&v, c, a, false) {
                    out += (-u).max(0.0) / h[a];
                }
            }
            rate = rate.max(out);
        }
        if !rate.is_finite() {
            return Err(Error::Degenerate("non-finite velocity on the density grid".into()));
        }
        let sub = ((big * rate / MAX_CFL).ceil() as usize).max(1);
        if sub > max_substeps {
            return Err(Error::Cfl { substeps: max_substeps, required: MAX_CFL / rate });
        }
        let tau = big / sub as f64;
        max_cfl = max_cfl.max(tau * rate);
        for s in 0..sub {
            if s > 0 {
                velocity.velocity(start + s as f64 * tau, &centers, &mut v);
                let mut r: f64 = 0.0;
                for c in 0..n {
                    let mut out = 0.0;
                    for a in 0..d {
                        if let Some(u) = face(&v, c, a, true) {
                            out += u.max(0.0) / h[a];
                        }
                        if let Some(u) = face(&v, c, a, false) {
                            out += (-u).max(0.0) / h[a];
                        }
                    }
                    r = r.max(out);
                }
                if tau * r > 1.0 {
                    return Err(Error::Cfl { substeps: sub, required: MAX_CFL / r });
                }
                max_cfl = max_cfl.max(tau * r);
            }
            flux.iter_mut().for_each(|f| *f = 0.0);
            for a in 0..d {
                let stride = strides[a];
                for c in 0..n {
                    if let Some(u) = face(&v, c, a, true) {
                        let moved = tau / h[a] * if u > 0.0 { u * rho.values[c] } else { u * rho.values[c + stride] };
                        flux[c] -= moved;
                        flux[c + stride] += moved;
                    }
                }
            }
            for (r, f) in rho.values.iter_mut().zip(&flux) {
                *r += f;
            }
        }
        total_sub += sub;
        let mass = rho.mass();
        if (mass - 1.0).abs() > 1e-12 {
            return Err(Error::Degenerate(format!("grid solver lost mass: {mass}")));
        }
        times.push(if step + 1 == steps { t1 } else { t0 + (step + 1) as f64 * big });
        densities.push(rho.clone());
    }
    Ok(GridSolution { times, densities, substeps: total_sub, max_cfl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid;
    use crate::flow::Scheme;
    use crate::measure::{pushforward_curve, sample, SamplerKind, SamplerSpec, SpectralDecay};
    use crate::models::{ModelKind, ModelSpec};
    use rand::Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn grid() -> Grid {
        Grid::new(1, 16, 2.0 * PI).unwrap()
    }

    fn weights() -> Arc<NormWeights> {
        Arc::new(NormWeights::laplacian(grid(), 1))
    }

    fn random_field(rng: &mut ChaCha8Rng, scale: f64) -> SpectralField {
        let coeffs = (0..grid().len())
            .map(|i| {
                let s = scale / (1.0 + grid().k_squared(i));
                Complex64::new(rng.gen_range(-1.0..1.0) * s, rng.gen_range(-1.0..1.0) * s)
            })
            .collect();
        SpectralField::from_coeffs(grid(), 1, coeffs).unwrap()
    }

    #[test]
    fn profile_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Profile {
            center: vec![0.1, -0.2, 0.05],
            radius: 1.3,
            polynomial: Polynomial {
                terms: vec![
                    Monomial { coef: 1.0, powers: vec![] },
                    Monomial { coef: -0.5, powers: vec![2, 0, 1] },
                    Monomial { coef: 2.0, powers: vec![0, 1] },
                ],
            },
        };
        for _ in 0..50 {
            let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = vec![0.0; 3];
            p.value_and_gradient(&y, &mut g);
            for j in 0..3 {
                let mut a = y.clone();
                let mut b = y.clone();
                a[j] += 1e-6;
                b[j] -= 1e-6;
                let fd = (p.value(&a) - p.value(&b)) / 2e-6;
                assert!((fd - g[j]).abs() < 1e-6, "{fd} vs {}", g[j]);
            }
        }
        assert_eq!(p.value(&[5.0, 0.0, 0.0]), 0.0);
        assert!((Profile::bump(2, 1.0).unwrap().value(&[0.0, 0.0]) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn time_bump_derivative() {
        let b = TimeBump::new(0.1, 0.9).unwrap();
        for t in [0.15, 0.3, 0.5, 0.77, 0.88] {
            let fd = (b.value(t + 1e-7) - b.value(t - 1e-7)) / 2e-7;
            assert!((fd - b.derivative(t)).abs() < 1e-6);
        }
        assert_eq!(b.value(0.05), 0.0);
        assert_eq!(b.derivative(0.95), 0.0);
        assert!(TimeBump::new(1.0, 1.0).is_err());
    }

    #[test]
    fn cylindrical_gradient_identity() {
        let w = weights();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = vec![&w.weak_vector(3) + &w.weak_vector(6), w.weak_vector(2), &w.weak_vector(9) * 0.5];
        let basis = ProjectionBasis::orthonormalized(w.clone(), raw).unwrap();
        let phi = CylTestFunction::bump(basis, 1.2)
            .unwrap()
            .with_polynomial(Polynomial::coordinate(1))
            .unwrap()
            .with_time(TimeBump::new(0.0, 1.0).unwrap());
        for seed in 0..20 {
            let z = random_field(&mut rng, 0.6);
            assert!(phi.gradient_check(0.4, &z, 5, seed).unwrap() <= 1e-6);
        }
    }

    fn nls(coupling: f64) -> Arc<crate::models::HamiltonianModel> {
        Arc::new(ModelSpec::new(ModelKind::Nls).with_coupling(coupling).build(grid()).unwrap())
    }

    fn gaussian(seed: u64, amplitude: f64) -> SamplerSpec {
        SamplerSpec {
            kind: SamplerKind::GaussianField {
                decay: SpectralDecay::Power { amplitude, exponent: 1.0, max_mode: None },
                mean: vec![],
            },
            ball: None,
            seed,
        }
    }

    fn tests_on(w: &Arc<NormWeights>, time: TimeBump) -> Vec<CylTestFunction> {
        let b = ProjectionBasis::from_weak_indices(w.clone(), &[3, 4]).unwrap();
        vec![
            CylTestFunction::bump(b.clone(), 0.8).unwrap().with_time(time),
            CylTestFunction::bump(b.clone(), 0.5).unwrap().with_center(vec![0.1, 0.0]).unwrap().with_time(time),
            CylTestFunction::bump(b, 0.8).unwrap().with_polynomial(Polynomial::coordinate(0)).unwrap().with_time(time),
        ]
    }

    #[test]
    fn residual_requires_time_support() {
        let w = weights();
        let m = nls(0.0);
        let mu = sample(&gaussian(1, 0.2), &w, 10).unwrap();
        let flow = FlowMap::new(m.clone(), Scheme::StrangSplitting, 0.01).unwrap();
        let curve = pushforward_curve(&mu, &flow, 0.0, 0.5, 1).unwrap();
        let field = VectorFieldHandle::original(m);
        let b = ProjectionBasis::leading(w.clone(), 1).unwrap();
        let untimed = CylTestFunction::bump(b.clone(), 1.0).unwrap();
        assert!(liouville_residual(&curve, &field, &[untimed]).is_err());
        let late = CylTestFunction::bump(b, 1.0).unwrap().with_time(TimeBump::new(0.2, 0.8).unwrap());
        assert!(liouville_residual(&curve, &field, &[late]).is_err());
    }

    #[test]
    fn frozen_curve_residual_vanishes() {
        let w = weights();
        let m = nls(0.0);
        let zero = EnsembleMeasure::dirac(SpectralField::zeros(grid(), 1), 0.0);
        let curve = MeasureCurve::new((0..=200).map(|j| zero.clone().at_time(j as f64 * 0.005)).collect()).unwrap();
        let field = VectorFieldHandle::original(m);
        for r in liouville_residual(&curve, &field, &tests_on(&w, TimeBump::new(0.0, 1.0).unwrap())).unwrap() {
            assert!(r.abs() < 1e-12, "{r}");
        }
    }

    #[test]
    fn free_transport_residual_is_quadrature_error() {
        // the integrand is a total time derivative vanishing to all orders at
        // the ends of the time support, so the trapezoid rule is spectrally
        // accurate here
        let w = weights();
        let m = nls(0.0);
        let mu = sample(&gaussian(4, 0.3), &w, 50).unwrap();
        let field = VectorFieldHandle::original(m.clone());
        let tests = tests_on(&w, TimeBump::new(0.0, 1.0).unwrap());
        for dt in [1e-2, 5e-3, 1e-3] {
            let flow = FlowMap::new(m.clone(), Scheme::StrangSplitting, dt).unwrap();
            let curve = pushforward_curve(&mu, &flow, 0.0, 1.0, 1).unwrap();
            for r in liouville_residual(&curve, &field, &tests).unwrap() {
                assert!(r.abs() <= 1e-8, "{dt}: {r}");
            }
        }
    }

    #[test]
    fn nonlinear_transport_residual_halves_quadratically() {
        // with a nonlinear Strang curve the residual is the scheme defect
        let w = weights();
        let m = nls(4.0);
        let z = SpectralField::from_coeffs(
            grid(),
            1,
            (0..16)
                .map(|i| {
                    let k2 = grid().k_squared(i);
                    Complex64::new(0.5 * (-k2).exp(), 0.2 * (-0.5 * k2).exp())
                })
                .collect(),
        )
        .unwrap();
        let mu = EnsembleMeasure::dirac(z, 0.0);
        let field = VectorFieldHandle::original(m.clone());
        let tests = tests_on(&w, TimeBump::new(0.0, 1.0).unwrap());
        let run = |dt: f64| {
            let flow = FlowMap::new(m.clone(), Scheme::StrangSplitting, dt).unwrap();
            let curve = pushforward_curve(&mu, &flow, 0.0, 1.0, 1).unwrap();
            liouville_residual(&curve, &field, &tests).unwrap().iter().map(|r| r.abs()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (run(1e-2), run(5e-3));
        assert!(fine > 1e-10);
        let ratio = coarse / fine;
        assert!(ratio > 3.5 && ratio < 4.5, "{ratio}");
    }

    #[test]
    fn streaming_matches_curve_residual() {
        let w = weights();
        let m = nls(1.0);
        let mu = sample(&gaussian(5, 0.3), &w, 40).unwrap();
        let flow = FlowMap::new(m.clone(), Scheme::StrangSplitting, 0.01).unwrap();
        let field = VectorFieldHandle::original(m);
        let tests = tests_on(&w, TimeBump::new(0.0, 0.6).unwrap());
        let curve = pushforward_curve(&mu, &flow, 0.0, 0.6, 2).unwrap();
        let a = liouville_residual(&curve, &field, &tests).unwrap();
        let rows = liouville_particle_integrals(&mu, &flow, 0.0, 0.6, 2, &field, &tests).unwrap();
        for (j, r) in a.iter().enumerate() {
            let b: f64 = rows.iter().zip(mu.weights()).map(|(row, wi)| wi * row[j]).sum();
            assert!((r - b).abs() < 1e-15);
        }
    }

    #[test]
    fn velocity_and_theta_on_single_mode() {
        let m = nls(0.0);
        let c = Complex64::new(0.3, 0.4);
        let k = 2i64;
        let z = SpectralField::single_mode(grid(), 1, 0, &[k], c).unwrap();
        let flow = FlowMap::new(m.clone(), Scheme::StrangSplitting, 0.01).unwrap();
        let curve = pushforward_curve(&EnsembleMeasure::dirac(z, 0.0), &flow, 0.0, 0.7, 5).unwrap();
        let field = VectorFieldHandle::original(m);
        let a = (k * k) as f64;
        let speed = a / (a + 1.0).sqrt() * c.norm();
        let got = velocity_estimate(&curve, &field, NormKind::Z1Dual).unwrap();
        assert!((got - 0.7 * speed).abs() < 1e-12);
        let z0 = velocity_estimate(&curve, &field, NormKind::Z0).unwrap();
        assert!((z0 - 0.7 * a * c.norm()).abs() < 1e-12);
        let th = theta_moment(&curve, &field, 0.5).unwrap();
        assert!((th - 0.7 * theta(speed / 0.5)).abs() < 1e-12);
        assert!(theta_moment(&curve, &field, 1.0).unwrap() < th);
        assert!(theta_moment(&curve, &field, 0.0).is_err());

        let zero = EnsembleMeasure::dirac(SpectralField::zeros(grid(), 1), 0.0);
        let frozen = MeasureCurve::new(vec![zero.clone(), zero.at_time(1.0)]).unwrap();
        assert_eq!(velocity_estimate(&frozen, &field, NormKind::Z1Dual).unwrap(), 0.0);
        assert_eq!(theta_moment(&frozen, &field, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn projection_of_gaussian_cloud() {
        let w = weights();
        let spec = SamplerSpec {
            kind: SamplerKind::GaussianField {
                decay: SpectralDecay::Power { amplitude: 0.4, exponent: 0.5, max_mode: None },
                mean: vec![],
            },
            ball: None,
            seed: 3,
        };
        let n = 20_000;
        let mu = sample(&spec, &w, n).unwrap();
        let basis = ProjectionBasis::orthonormalized(w.clone(), vec![&w.weak_vector(3) + &w.weak_vector(5), w.weak_vector(4)])
            .unwrap();
        let snap = project_ensemble(&mu, &basis, None).unwrap();
        assert!((snap.total_mass() - 1.0).abs() < 1e-12);
        // covariance of ⟨z, e⟩ is Σ_n σ_n² e_n² (a_n+1)^{-1} over real coordinates
        let sig = match &spec.kind {
            SamplerKind::GaussianField { decay, .. } => decay.sigmas(&grid(), 1).unwrap(),
            _ => unreachable!(),
        };
        let mut expect = vec![vec![0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let (ea, eb) = (&basis.vectors()[a], &basis.vectors()[b]);
                for i in 0..grid().len() {
                    let q = 1.0 / (w.symbol()[i] + 1.0).powi(2) * sig[i] * sig[i];
                    let (x, y) = (ea.coeffs()[i], eb.coeffs()[i]);
                    expect[a][b] += q * (x.re * y.re + x.im * y.im);
                }
            }
        }
        let c = snap.covariance();
        for a in 0..2 {
            for b in 0..2 {
                let se = (expect[a][a] * expect[b][b] + expect[a][b].powi(2)).sqrt() / (n as f64).sqrt();
                assert!((c[a][b] - expect[a][b]).abs() < 4.0 * se, "{a}{b}: {} vs {}", c[a][b], expect[a][b]);
            }
        }
        let z = mu.particles()[0].clone();
        let dirac = project_ensemble(&EnsembleMeasure::dirac(z.clone(), 0.0), &basis, None).unwrap();
        assert_eq!(dirac.points, basis.project(&z).unwrap());
    }

    fn cloud(n: usize, d: usize, seed: u64) -> ProjectedSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        ProjectedSnapshot { time: 0.0, dim: d, points, weights: vec![1.0 / n as f64; n], velocities: None, speeds: None }
    }

    #[test]
    fn regression_of_constant_is_exact() {
        let mut snap = cloud(300, 2, 1);
        snap.velocities = Some([0.7, -1.1].repeat(300));
        let queries = vec![0.0, 0.0, 1.0, -0.5, 0.3, 2.0];
        for est in [
            DisintegrationEstimate::nadaraya_watson(),
            DisintegrationEstimate::nadaraya_watson().with_bandwidth(0.05),
            DisintegrationEstimate::knn(15),
        ] {
            for r in est.estimate(&snap, &queries).unwrap() {
                assert!((r.value[0] - 0.7).abs() < 1e-14 && (r.value[1] + 1.1).abs() < 1e-14);
            }
        }
        let far = DisintegrationEstimate::nadaraya_watson().estimate(&snap, &[40.0, 40.0]).unwrap();
        assert!(far[0].flagged);
        assert!(DisintegrationEstimate::nadaraya_watson().estimate(&cloud(10, 2, 1), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn lossless_projection_recovers_field_at_samples() {
        // samples inside span{e_1, e_2}: conditionals are Diracs
        let mut snap = cloud(400, 2, 7);
        let vel: Vec<f64> = snap.points.chunks(2).flat_map(|y| [y[1], -2.0 * y[0]]).collect();
        snap.velocities = Some(vel.clone());
        let est = DisintegrationEstimate::nadaraya_watson().with_bandwidth(1e-4);
        let out = est.estimate(&snap, &snap.points.clone()).unwrap();
        for (i, r) in out.iter().enumerate() {
            assert!((r.value[0] - vel[2 * i]).abs() < 1e-9 && (r.value[1] - vel[2 * i + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_deposit_and_smoothing_preserve_mass() {
        let snap = cloud(1000, 2, 3);
        let g = GridDensity::deposit(vec![-6.0, -6.0], vec![6.0, 6.0], vec![40, 40], &snap.points, &snap.weights).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-12);
        let com = g.center_of_mass();
        let mean = snap.mean();
        for a in 0..2 {
            assert!((com[a] - mean[a]).abs() < 1e-12);
        }
        let s = g.smoothed(0.7);
        assert!((s.mass() - 1.0).abs() < 1e-12);
        assert!(s.values().iter().all(|v| *v >= 0.0));
        assert!(GridDensity::deposit(vec![0.0], vec![1.0], vec![4], &[2.0], &[1.0]).is_err());
    }

    fn blob() -> GridDensity {
        let snap = cloud(2000, 2, 5);
        let pts: Vec<f64> = snap.points.iter().map(|x| 0.3 * x).collect();
        GridDensity::deposit(vec![-3.0, -3.0], vec![3.0, 3.0], vec![60, 60], &pts, &snap.weights).unwrap()
    }

    #[test]
    fn grid_solver_zero_velocity_freezes() {
        let g = blob();
        let sol = grid_continuity_solve(&g, &ConstantVelocity(vec![0.0, 0.0]), 0.0, 1.0, 0.1, 100).unwrap();
        assert_eq!(sol.densities.last().unwrap(), &g);
    }

    #[test]
    fn grid_solver_constant_velocity_moves_center_of_mass() {
        let g = blob();
        let c = vec![0.6, -0.3];
        let sol = grid_continuity_solve(&g, &ConstantVelocity(c.clone()), 0.0, 1.0, 0.05, 100).unwrap();
        let a = g.center_of_mass();
        let b = sol.densities.last().unwrap().center_of_mass();
        for k in 0..2 {
            assert!((b[k] - a[k] - c[k]).abs() < 1e-10, "{} vs {}", b[k] - a[k], c[k]);
        }
        assert!(sol.max_cfl <= MAX_CFL + 1e-12);
        for d in &sol.densities {
            assert!((d.mass() - 1.0).abs() < 1e-12);
            assert!(d.values().iter().all(|v| *v >= 0.0));
        }
        assert!(matches!(
            grid_continuity_solve(&g, &ConstantVelocity(c), 0.0, 1.0, 0.5, 1),
            Err(Error::Cfl { .. })
        ));
    }

    #[test]
    fn grid_solver_rotation() {
        // rigid rotation of an offset blob; compare the center with the
        // analytic rotation, allowing for upwind diffusion pulling it inward
        let snap = cloud(4000, 2, 9);
        let pts: Vec<f64> = snap.points.chunks(2).flat_map(|y| [1.0 + 0.25 * y[0], 0.25 * y[1]]).collect();
        let g = GridDensity::deposit(vec![-2.5, -2.5], vec![2.5, 2.5], vec![100, 100], &pts, &snap.weights).unwrap();
        let rot = LinearVelocity { dim: 2, matrix: vec![0.0, -1.0, 1.0, 0.0] };
        let t = 1.0;
        let sol = grid_continuity_solve(&g, &rot, 0.0, t, 0.02, 1000).unwrap();
        let c0 = g.center_of_mass();
        let c1 = sol.densities.last().unwrap().center_of_mass();
        let expect = [c0[0] * t.cos() - c0[1] * t.sin(), c0[0] * t.sin() + c0[1] * t.cos()];
        let r0 = (c0[0].powi(2) + c0[1].powi(2)).sqrt();
        let r1 = (c1[0].powi(2) + c1[1].powi(2)).sqrt();
        // diffusion scale Δx·|v|·t
        let envelope = 0.05 * r0 * t;
        assert!((r0 - r1).abs() <= envelope, "{r0} {r1}");
        let angle_err = (c1[1].atan2(c1[0]) - expect[1].atan2(expect[0])).abs();
        assert!(angle_err < 0.05, "{angle_err}");
        assert!((sol.densities.last().unwrap().mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binned_velocity_reproduces_linear_field() {
        let mut snap = cloud(20_000, 2, 11);
        let vel: Vec<f64> = snap.points.chunks(2).flat_map(|y| [-y[1], y[0]]).collect();
        snap.velocities = Some(vel);
        let g = GridDensity::zeros(vec![-4.0, -4.0], vec![4.0, 4.0], vec![40, 40]).unwrap();
        let v = binned_velocity(&g, &snap, 0.2).unwrap();
        let centers = g.centers();
        for c in 0..g.len() {
            let y = &centers[2 * c..2 * c + 2];
            if y[0].abs() < 1.0 && y[1].abs() < 1.0 {
                assert!((v[2 * c] + y[1]).abs() < 0.1 && (v[2 * c + 1] - y[0]).abs() < 0.1, "{y:?}");
            }
        }
        assert!(v.iter().all(|x| x.is_finite()));
    }
}
