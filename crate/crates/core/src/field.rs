//! Truncated Fourier fields on the periodic box and the rigged triple
//! `Z1 ⊂ Z0 ⊂ Z1'` built from a nonnegative multiplier `a_k`.
//!
//! Coefficients are normalized so that `‖z‖²_{Z0} = Σ_k |ẑ_k|² = ∫ |z(x)|² dx`,
//! i.e. `z(x) = L^{-d/2} Σ_k ẑ_k e^{ik·x}`. The three norms are
//!
//! ```text
//! ‖z‖²_{Z0}  = Σ |ẑ_k|²
//! ‖z‖²_{Z1}  = Σ (a_k + 1)   |ẑ_k|²
//! ‖z‖²_{Z1'} = Σ (a_k + 1)⁻¹ |ẑ_k|²
//! ```
//!
//! and the weak norm `‖z‖²_{Zw} = Σ_n n⁻² ⟨z, e_n⟩²_{Z1',R}` runs over a fixed
//! real orthonormal basis of the realification of `Z1'`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    dimension: usize,
    modes: usize,
    length: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct GridSpec {
    dimension: usize,
    modes: usize,
    length: f64,
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;
    fn try_from(spec: GridSpec) -> Result<Self> {
        Grid::new(spec.dimension, spec.modes, spec.length)
    }
}

impl From<Grid> for GridSpec {
    fn from(grid: Grid) -> Self {
        GridSpec { dimension: grid.dimension, modes: grid.modes, length: grid.length }
    }
}

impl Grid {
    pub fn new(dimension: usize, modes: usize, length: f64) -> Result<Self> {
        if !(1..=2).contains(&dimension) {
            return Err(Error::Config(format!("grid dimension must be 1 or 2, got {dimension}")));
        }
        if modes < 4 || modes % 2 != 0 {
            return Err(Error::Config(format!("modes per axis must be even and >= 4, got {modes}")));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Config(format!("domain length must be positive, got {length}")));
        }
        Ok(Grid { dimension, modes, length })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Number of Fourier modes, `K^dimension`.
    pub fn len(&self) -> usize {
        self.modes.pow(self.dimension as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight of one grid point, `(L/K)^d`.
    pub fn cell_volume(&self) -> f64 {
        (self.length / self.modes as f64).powi(self.dimension as i32)
    }

    fn signed(&self, i: usize) -> i64 {
        let k = self.modes;
        if i < k / 2 {
            i as i64
        } else {
            i as i64 - k as i64
        }
    }

    fn unsigned(&self, j: i64) -> usize {
        j.rem_euclid(self.modes as i64) as usize
    }

    /// Signed integer mode label `(j_0, j_1)` of a flat index; `j_1 = 0` in 1D.
    pub fn mode_label(&self, index: usize) -> [i64; 2] {
        match self.dimension {
            1 => [self.signed(index), 0],
            _ => [self.signed(index / self.modes), self.signed(index % self.modes)],
        }
    }

    /// Flat index of a signed mode label; labels are taken modulo `K`.
    pub fn index_of(&self, label: &[i64]) -> Result<usize> {
        if label.len() != self.dimension {
            return Err(Error::Config(format!(
                "mode label {label:?} does not match grid dimension {}",
                self.dimension
            )));
        }
        let half = (self.modes / 2) as i64;
        if label.iter().any(|&j| j < -half || j >= half) {
            return Err(Error::Config(format!("mode label {label:?} outside [-K/2, K/2)")));
        }
        Ok(match self.dimension {
            1 => self.unsigned(label[0]),
            _ => self.unsigned(label[0]) * self.modes + self.unsigned(label[1]),
        })
    }

    pub fn wavevector(&self, index: usize) -> [f64; 2] {
        let base = 2.0 * PI / self.length;
        let [a, b] = self.mode_label(index);
        [base * a as f64, base * b as f64]
    }

    pub fn k_squared(&self, index: usize) -> f64 {
        let [a, b] = self.wavevector(index);
        a * a + b * b
    }

    /// Index of `-k` (the Nyquist label maps to itself).
    pub fn negated(&self, index: usize) -> usize {
        let [a, b] = self.mode_label(index);
        match self.dimension {
            1 => self.unsigned(-a),
            _ => self.unsigned(-a) * self.modes + self.unsigned(-b),
        }
    }

    /// Physical coordinates of grid point `index`.
    pub fn point(&self, index: usize) -> [f64; 2] {
        let h = self.length / self.modes as f64;
        match self.dimension {
            1 => [index as f64 * h, 0.0],
            _ => [(index / self.modes) as f64 * h, (index % self.modes) as f64 * h],
        }
    }

    fn forward_scale(&self) -> f64 {
        self.cell_volume() / self.length.powf(self.dimension as f64 / 2.0)
    }

    fn inverse_scale(&self) -> f64 {
        self.length.powf(-(self.dimension as f64) / 2.0)
    }

    /// Physical samples → normalized coefficients, in place.
    pub(crate) fn to_coeffs_in_place(&self, data: &mut [Complex64]) {
        fft::forward(self.dimension, self.modes, data);
        let s = self.forward_scale();
        data.iter_mut().for_each(|c| *c *= s);
    }

    /// Normalized coefficients → physical samples, in place.
    pub(crate) fn to_physical_in_place(&self, data: &mut [Complex64]) {
        fft::inverse(self.dimension, self.modes, data);
        let s = self.inverse_scale();
        data.iter_mut().for_each(|c| *c *= s);
    }
}

/// A point of the truncated phase space: `components` blocks of `K^d`
/// Fourier coefficients, stored component-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    components: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn zeros(grid: Grid, components: usize) -> Self {
        assert!(components >= 1, "a field has at least one component");
        SpectralField { grid, components, coeffs: vec![Complex64::new(0.0, 0.0); grid.len() * components] }
    }

    pub fn from_coeffs(grid: Grid, components: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if components == 0 || coeffs.len() != grid.len() * components {
            return Err(Error::Config(format!(
                "expected {} coefficients for {components} component(s), got {}",
                grid.len() * components,
                coeffs.len()
            )));
        }
        Ok(SpectralField { grid, components, coeffs })
    }

    /// Field whose only nonzero coefficient is `value` at `label` of `component`.
    pub fn single_mode(
        grid: Grid,
        components: usize,
        component: usize,
        label: &[i64],
        value: Complex64,
    ) -> Result<Self> {
        if component >= components {
            return Err(Error::Config(format!("component {component} out of range")));
        }
        let mut z = SpectralField::zeros(grid, components);
        let idx = grid.index_of(label)?;
        z.coeffs[component * grid.len() + idx] = value;
        Ok(z)
    }

    /// Builds a field from physical samples (one block of `K^d` per component).
    pub fn from_physical(grid: Grid, components: usize, mut values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() * components {
            return Err(Error::Config("physical sample count does not match grid".into()));
        }
        for block in values.chunks_mut(grid.len()) {
            grid.to_coeffs_in_place(block);
        }
        SpectralField::from_coeffs(grid, components, values)
    }

    pub fn to_physical(&self) -> Vec<Complex64> {
        let mut values = self.coeffs.clone();
        for block in values.chunks_mut(self.grid.len()) {
            self.grid.to_physical_in_place(block);
        }
        values
    }

    pub fn component_physical(&self, component: usize) -> Vec<Complex64> {
        let mut values = self.component(component).to_vec();
        self.grid.to_physical_in_place(&mut values);
        values
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }

    pub fn component(&self, c: usize) -> &[Complex64] {
        let n = self.grid.len();
        &self.coeffs[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [Complex64] {
        let n = self.grid.len();
        &mut self.coeffs[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn same_shape(&self, other: &SpectralField) -> bool {
        self.grid == other.grid && self.components == other.components
    }

    /// Complex conjugation `z ↦ z̄`, coefficient-wise `ẑ_k ↦ conj(ẑ_{-k})`.
    pub fn conj(&self) -> SpectralField {
        let n = self.grid.len();
        let mut out = SpectralField::zeros(self.grid, self.components);
        for c in 0..self.components {
            for idx in 0..n {
                out.coeffs[c * n + idx] = self.coeffs[c * n + self.grid.negated(idx)].conj();
            }
        }
        out
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: Complex64, other: &SpectralField) {
        debug_assert!(self.same_shape(other));
        self.coeffs.iter_mut().zip(&other.coeffs).for_each(|(x, y)| *x += a * y);
    }

    pub fn scaled(&self, a: Complex64) -> SpectralField {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= a);
        out
    }
}

impl Add for &SpectralField {
    type Output = SpectralField;
    fn add(self, rhs: &SpectralField) -> SpectralField {
        assert!(self.same_shape(rhs), "field shape mismatch");
        let mut out = self.clone();
        out.coeffs.iter_mut().zip(&rhs.coeffs).for_each(|(x, y)| *x += y);
        out
    }
}

impl Sub for &SpectralField {
    type Output = SpectralField;
    fn sub(self, rhs: &SpectralField) -> SpectralField {
        assert!(self.same_shape(rhs), "field shape mismatch");
        let mut out = self.clone();
        out.coeffs.iter_mut().zip(&rhs.coeffs).for_each(|(x, y)| *x -= y);
        out
    }
}

impl Mul<f64> for &SpectralField {
    type Output = SpectralField;
    fn mul(self, rhs: f64) -> SpectralField {
        self.scaled(Complex64::new(rhs, 0.0))
    }
}

impl Mul<Complex64> for &SpectralField {
    type Output = SpectralField;
    fn mul(self, rhs: Complex64) -> SpectralField {
        self.scaled(rhs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Z0,
    Z1,
    Z1Dual,
    Weak,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    Z0,
    Z1Dual,
}

/// Enumeration `(e_n)_{n≥1}` of the real orthonormal basis of `Z1'`:
/// modes by increasing `|k|`, ties broken lexicographically on the signed
/// label and then by component; each mode contributes its real vector
/// followed by its imaginary partner.
#[derive(Clone, Debug)]
pub struct WeakNormBasis {
    order: Vec<usize>,
}

impl WeakNormBasis {
    fn new(grid: &Grid, components: usize) -> Self {
        let n = grid.len();
        let mut order: Vec<usize> = (0..n * components).collect();
        order.sort_by(|&p, &q| {
            let (ip, cp) = (p % n, p / n);
            let (iq, cq) = (q % n, q / n);
            let (lp, lq) = (grid.mode_label(ip), grid.mode_label(iq));
            let np = lp[0] * lp[0] + lp[1] * lp[1];
            let nq = lq[0] * lq[0] + lq[1] * lq[1];
            np.cmp(&nq).then(lp.cmp(&lq)).then(cp.cmp(&cq))
        });
        WeakNormBasis { order }
    }

    /// Number of real basis vectors.
    pub fn len(&self) -> usize {
        2 * self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Storage entry and real/imaginary flag of `e_n` (1-based).
    pub fn entry(&self, n: usize) -> (usize, bool) {
        assert!(n >= 1 && n <= self.len(), "weak basis index {n} out of range");
        (self.order[(n - 1) / 2], (n - 1) % 2 == 1)
    }
}

/// The multiplier `a_k` defining the graph norm, plus the weak basis.
#[derive(Clone, Debug)]
pub struct NormWeights {
    grid: Grid,
    components: usize,
    symbol: Vec<f64>,
    basis: WeakNormBasis,
}

impl NormWeights {
    pub fn new(grid: Grid, components: usize, symbol: Vec<f64>) -> Result<Self> {
        if symbol.len() != grid.len() * components {
            return Err(Error::Config("multiplier length does not match grid".into()));
        }
        if let Some(a) = symbol.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(Error::Parameter(format!("multiplier must be nonnegative, found {a}")));
        }
        let basis = WeakNormBasis::new(&grid, components);
        Ok(NormWeights { grid, components, symbol, basis })
    }

    /// `a_k = |k|²` on every component.
    pub fn laplacian(grid: Grid, components: usize) -> Self {
        let symbol = (0..components).flat_map(|_| (0..grid.len()).map(move |i| grid.k_squared(i))).collect();
        NormWeights::new(grid, components, symbol).expect("laplacian symbol is nonnegative")
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn symbol(&self) -> &[f64] {
        &self.symbol
    }

    pub fn weak_basis(&self) -> &WeakNormBasis {
        &self.basis
    }

    pub fn check(&self, z: &SpectralField) -> Result<()> {
        if z.grid != self.grid || z.components != self.components {
            return Err(Error::Config(format!(
                "field on {:?} x{} does not match weights on {:?} x{}",
                z.grid, z.components, self.grid, self.components
            )));
        }
        Ok(())
    }

    pub fn norm(&self, z: &SpectralField, kind: NormKind) -> Result<f64> {
        self.check(z)?;
        let sq = match kind {
            NormKind::Z0 => z.coeffs.iter().map(|c| c.norm_sqr()).sum(),
            NormKind::Z1 => z.coeffs.iter().zip(&self.symbol).map(|(c, a)| (a + 1.0) * c.norm_sqr()).sum(),
            NormKind::Z1Dual => z.coeffs.iter().zip(&self.symbol).map(|(c, a)| c.norm_sqr() / (a + 1.0)).sum(),
            NormKind::Weak => self
                .weak_coordinates(z)?
                .iter()
                .enumerate()
                .map(|(i, x)| x * x / ((i + 1) as f64).powi(2))
                .sum::<f64>(),
        };
        Ok(f64::sqrt(sq))
    }

    /// Sesquilinear pairing `⟨x, y⟩ = Σ w_k conj(x̂_k) ŷ_k`.
    pub fn inner(&self, x: &SpectralField, y: &SpectralField, pairing: Pairing) -> Result<Complex64> {
        self.check(x)?;
        self.check(y)?;
        Ok(match pairing {
            Pairing::Z0 => x.coeffs.iter().zip(&y.coeffs).map(|(a, b)| a.conj() * b).sum(),
            Pairing::Z1Dual => x
                .coeffs
                .iter()
                .zip(&y.coeffs)
                .zip(&self.symbol)
                .map(|((a, b), w)| a.conj() * b / (w + 1.0))
                .sum(),
        })
    }

    /// Euclidean structure `Re⟨x, y⟩`.
    pub fn inner_real(&self, x: &SpectralField, y: &SpectralField, pairing: Pairing) -> Result<f64> {
        self.inner(x, y, pairing).map(|c| c.re)
    }

    /// All coordinates `⟨z, e_n⟩_{Z1',R}` in weak-basis order.
    pub fn weak_coordinates(&self, z: &SpectralField) -> Result<Vec<f64>> {
        self.check(z)?;
        let mut out = Vec::with_capacity(self.basis.len());
        for &entry in &self.basis.order {
            let s = (self.symbol[entry] + 1.0).sqrt().recip();
            let c = z.coeffs[entry];
            out.push(c.re * s);
            out.push(c.im * s);
        }
        Ok(out)
    }

    /// The basis vector `e_n` (1-based).
    pub fn weak_vector(&self, n: usize) -> SpectralField {
        let (entry, imag) = self.basis.entry(n);
        let mut z = SpectralField::zeros(self.grid, self.components);
        let s = (self.symbol[entry] + 1.0).sqrt();
        z.coeffs[entry] = if imag { Complex64::new(0.0, s) } else { Complex64::new(s, 0.0) };
        z
    }

    /// Field with the given weak-basis coordinates (missing ones are zero).
    pub fn from_weak_coordinates(&self, coords: &[f64]) -> SpectralField {
        let mut z = SpectralField::zeros(self.grid, self.components);
        for (i, x) in coords.iter().enumerate().take(self.basis.len()) {
            let (entry, imag) = self.basis.entry(i + 1);
            let s = (self.symbol[entry] + 1.0).sqrt();
            if imag {
                z.coeffs[entry].im += x * s;
            } else {
                z.coeffs[entry].re += x * s;
            }
        }
        z
    }
}

/// Orthonormal family `{e_1, …, e_d}` of the realification of `Z1'`,
/// defining `π^d`, its transpose and `π̂^d = π^{d,T} ∘ π^d`.
#[derive(Clone, Debug)]
pub struct ProjectionBasis {
    weights: Arc<NormWeights>,
    vectors: Vec<SpectralField>,
}

impl ProjectionBasis {
    /// The first `d` weak-basis vectors.
    pub fn leading(weights: Arc<NormWeights>, d: usize) -> Result<Self> {
        let indices: Vec<usize> = (1..=d).collect();
        ProjectionBasis::from_weak_indices(weights, &indices)
    }

    /// Selected weak-basis vectors (1-based, distinct).
    pub fn from_weak_indices(weights: Arc<NormWeights>, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("projection basis needs d >= 1".into()));
        }
        let mut seen = indices.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != indices.len() {
            return Err(Error::Config("repeated weak basis index".into()));
        }
        let max = weights.basis.len();
        if let Some(bad) = indices.iter().find(|&&n| n == 0 || n > max) {
            return Err(Error::Config(format!("weak basis index {bad} outside 1..={max}")));
        }
        let vectors = indices.iter().map(|&n| weights.weak_vector(n)).collect();
        Ok(ProjectionBasis { weights, vectors })
    }

    /// Gram–Schmidt in `⟨·,·⟩_{Z1',R}` applied to arbitrary vectors.
    pub fn orthonormalized(weights: Arc<NormWeights>, raw: Vec<SpectralField>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Config("projection basis needs d >= 1".into()));
        }
        let mut vectors: Vec<SpectralField> = Vec::with_capacity(raw.len());
        for mut v in raw {
            weights.check(&v)?;
            for _ in 0..2 {
                for e in &vectors {
                    let c = weights.inner_real(e, &v, Pairing::Z1Dual)?;
                    v.axpy(Complex64::new(-c, 0.0), e);
                }
            }
            let n = weights.norm(&v, NormKind::Z1Dual)?;
            if n < 1e-12 {
                return Err(Error::Degenerate("projection vectors are linearly dependent".into()));
            }
            vectors.push(&v * n.recip());
        }
        Ok(ProjectionBasis { weights, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[SpectralField] {
        &self.vectors
    }

    pub fn weights(&self) -> &Arc<NormWeights> {
        &self.weights
    }

    /// `π(z) = (⟨z, e_1⟩_R, …, ⟨z, e_d⟩_R)` in the `Z1'` pairing.
    pub fn project(&self, z: &SpectralField) -> Result<Vec<f64>> {
        self.weights.check(z)?;
        Ok(self.vectors.iter().map(|e| self.pair(z, e)).collect())
    }

    /// Same as [`project`](Self::project), writing into `out`.
    pub fn project_into(&self, z: &SpectralField, out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.vectors) {
            *o = self.pair(z, e);
        }
    }

    fn pair(&self, z: &SpectralField, e: &SpectralField) -> f64 {
        z.coeffs
            .iter()
            .zip(&e.coeffs)
            .zip(&self.weights.symbol)
            .filter(|((_, b), _)| b.re != 0.0 || b.im != 0.0)
            .map(|((a, b), w)| (a.re * b.re + a.im * b.im) / (w + 1.0))
            .sum()
    }

    /// `π^T(y) = Σ y_i e_i`.
    pub fn lift(&self, y: &[f64]) -> Result<SpectralField> {
        if y.len() != self.dim() {
            return Err(Error::Config(format!("expected {} coordinates, got {}", self.dim(), y.len())));
        }
        let mut z = SpectralField::zeros(self.weights.grid, self.weights.components);
        for (yi, e) in y.iter().zip(&self.vectors) {
            z.axpy(Complex64::new(*yi, 0.0), e);
        }
        Ok(z)
    }

    /// `π̂(z) = π^T π z`.
    pub fn project_hat(&self, z: &SpectralField) -> Result<SpectralField> {
        let y = self.project(z)?;
        self.lift(&y)
    }
}
