//! Hamiltonian systems `h(z, z̄) = ⟨z, A z⟩ + h_I(z, z̄)` on the periodic box.
//!
//! Every model exposes the energy, the gradient `∂_z̄ h_I` of its interaction,
//! the free propagator `e^{-itA}` (a Fourier multiplier) and the exact flow of
//! the interaction alone, which the splitting integrator composes with the
//! free propagator.
//!
//! | kind          | `a_k`                          | `∂_z̄ h_I`                                   |
//! |---------------|--------------------------------|---------------------------------------------|
//! | `nls`         | `|k|²`                         | `λ |z|^α z`                                 |
//! | `hartree`     | `|k|² (+ V₀)`                  | `(λ W∗|z|² + V) z`                          |
//! | `klein_gordon`| `ω = √(|k|² + m²)`             | `λ (2ω)^{-1/2} F(φ³)`                       |
//! | `skg`         | `(|k|²/2M, ω)`                 | `(λ φ u, λ (2ω)^{-1/2} F(|u|²))`            |
//!
//! For the relativistic models `φ = w + w̄` with `w` the physical field of
//! `(2ω)^{-1/2} ẑ`.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, NormKind, NormWeights, Pairing, SpectralField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Nls,
    Hartree,
    KleinGordon,
    Skg,
}

/// Two-body kernel `W` given through its Fourier multiplier `Ŵ_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    Zero,
    /// `Ŵ_k = g / (|k|² + m²)`
    Yukawa { g: f64, m: f64 },
    /// `Ŵ_k = g` for `|k| ≤ cutoff`, zero above.
    Box { g: f64, cutoff: f64 },
}

/// External potential of the Hartree model. A constant is absorbed into `A`;
/// anything else lives in the interaction so that `e^{-itA}` stays diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PotentialSpec {
    Zero,
    Constant { value: f64 },
    /// `V(x) = amplitude · cos(k·x)` for the wavevector of `mode`.
    Cosine { amplitude: f64, mode: Vec<i64> },
}

fn default_coupling() -> f64 {
    1.0
}
fn default_power() -> f64 {
    2.0
}
fn default_mass() -> f64 {
    1.0
}
fn default_kernel() -> KernelSpec {
    KernelSpec::Zero
}
fn default_potential() -> PotentialSpec {
    PotentialSpec::Zero
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Coupling `λ`; zero switches the interaction off.
    #[serde(default = "default_coupling")]
    pub coupling: f64,
    /// NLS power `α ≥ 1`.
    #[serde(default = "default_power")]
    pub power: f64,
    /// Meson mass `m` in `ω(k) = √(|k|² + m²)`.
    #[serde(default = "default_mass")]
    pub mass: f64,
    /// Nucleon mass `M` of the S-KG system.
    #[serde(default = "default_mass")]
    pub heavy_mass: f64,
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
    #[serde(default = "default_potential")]
    pub potential: PotentialSpec,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            coupling: default_coupling(),
            power: default_power(),
            mass: default_mass(),
            heavy_mass: default_mass(),
            kernel: default_kernel(),
            potential: default_potential(),
        }
    }

    pub fn with_coupling(mut self, coupling: f64) -> Self {
        self.coupling = coupling;
        self
    }

    pub fn with_power(mut self, power: f64) -> Self {
        self.power = power;
        self
    }

    pub fn with_kernel(mut self, kernel: KernelSpec) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_potential(mut self, potential: PotentialSpec) -> Self {
        self.potential = potential;
        self
    }

    pub fn with_masses(mut self, mass: f64, heavy_mass: f64) -> Self {
        self.mass = mass;
        self.heavy_mass = heavy_mass;
        self
    }

    pub fn build(&self, grid: Grid) -> Result<HamiltonianModel> {
        HamiltonianModel::new(self.clone(), grid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Picture {
    Original,
    Interaction,
}

#[derive(Debug)]
pub struct HamiltonianModel {
    spec: ModelSpec,
    grid: Grid,
    weights: Arc<NormWeights>,
    kernel: Vec<f64>,
    /// `(2ω_k)^{-1/2}` for the relativistic models.
    dressing: Vec<f64>,
    /// Non-constant external potential, physical samples.
    potential: Option<Vec<f64>>,
}

impl HamiltonianModel {
    pub fn new(spec: ModelSpec, grid: Grid) -> Result<Self> {
        if !spec.coupling.is_finite() {
            return Err(Error::Parameter("coupling must be finite".into()));
        }
        if spec.kind == ModelKind::Nls && !(spec.power >= 1.0 && spec.power.is_finite()) {
            return Err(Error::Parameter(format!("NLS power must satisfy α >= 1, got {}", spec.power)));
        }
        if !(spec.mass > 0.0 && spec.heavy_mass > 0.0) {
            return Err(Error::Parameter("masses must be positive".into()));
        }
        let n = grid.len();
        let k2: Vec<f64> = (0..n).map(|i| grid.k_squared(i)).collect();
        let omega: Vec<f64> = k2.iter().map(|q| (q + spec.mass * spec.mass).sqrt()).collect();
        let dressing: Vec<f64> = omega.iter().map(|w| (2.0 * w).sqrt().recip()).collect();

        let mut potential = None;
        let symbol = match spec.kind {
            ModelKind::Nls => k2.clone(),
            ModelKind::Hartree => match &spec.potential {
                PotentialSpec::Zero => k2.clone(),
                PotentialSpec::Constant { value } => {
                    if *value < 0.0 {
                        return Err(Error::Parameter("constant potential must be >= 0 to keep A >= 0".into()));
                    }
                    k2.iter().map(|q| q + value).collect()
                }
                PotentialSpec::Cosine { amplitude, mode } => {
                    let idx = grid.index_of(mode)?;
                    let kv = grid.wavevector(idx);
                    potential = Some(
                        (0..n)
                            .map(|j| {
                                let x = grid.point(j);
                                amplitude * (kv[0] * x[0] + kv[1] * x[1]).cos()
                            })
                            .collect(),
                    );
                    k2.clone()
                }
            },
            ModelKind::KleinGordon => omega.clone(),
            ModelKind::Skg => k2.iter().map(|q| q / (2.0 * spec.heavy_mass)).chain(omega.iter().copied()).collect(),
        };
        if spec.kind != ModelKind::Hartree && spec.potential != PotentialSpec::Zero {
            return Err(Error::Config("external potentials are only supported for the Hartree model".into()));
        }
        let kernel = match spec.kernel {
            KernelSpec::Zero => vec![0.0; n],
            KernelSpec::Yukawa { g, m } => {
                if m <= 0.0 && k2[0] == 0.0 {
                    return Err(Error::Parameter("Yukawa mass must be positive".into()));
                }
                k2.iter().map(|q| g / (q + m * m)).collect()
            }
            KernelSpec::Box { g, cutoff } => k2.iter().map(|q| if q.sqrt() <= cutoff { g } else { 0.0 }).collect(),
        };
        let components = if spec.kind == ModelKind::Skg { 2 } else { 1 };
        let weights = Arc::new(NormWeights::new(grid, components, symbol)?);
        Ok(HamiltonianModel { spec, grid, weights, kernel, dressing, potential })
    }

    /// Replaces the kernel multiplier; it must be real and even in `k`.
    pub fn with_kernel_symbol(mut self, kernel: Vec<f64>) -> Result<Self> {
        if kernel.len() != self.grid.len() {
            return Err(Error::Config("kernel multiplier length does not match grid".into()));
        }
        for (i, w) in kernel.iter().enumerate() {
            if !w.is_finite() || (w - kernel[self.grid.negated(i)]).abs() > 1e-14 * w.abs().max(1.0) {
                return Err(Error::Parameter("kernel multiplier must be finite and even in k".into()));
            }
        }
        self.kernel = kernel;
        Ok(self)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.weights.components()
    }

    pub fn norm_weights(&self) -> &Arc<NormWeights> {
        &self.weights
    }

    pub fn kernel_symbol(&self) -> &[f64] {
        &self.kernel
    }

    pub fn zero_field(&self) -> SpectralField {
        SpectralField::zeros(self.grid, self.components())
    }

    /// True when `∂_z̄ h_I ≡ 0`, i.e. the flow is the free multiplier.
    pub fn is_free(&self) -> bool {
        match self.spec.kind {
            ModelKind::Hartree => {
                (self.spec.coupling == 0.0 || self.kernel.iter().all(|w| *w == 0.0)) && self.potential.is_none()
            }
            _ => self.spec.coupling == 0.0,
        }
    }

    /// `e^{-iτA} z`
    pub fn free_propagate(&self, z: &SpectralField, tau: f64) -> SpectralField {
        let mut out = z.clone();
        self.free_propagate_in_place(&mut out, tau);
        out
    }

    pub(crate) fn free_propagate_in_place(&self, z: &mut SpectralField, tau: f64) {
        for (c, a) in z.coeffs_mut().iter_mut().zip(self.weights.symbol()) {
            *c *= Complex64::from_polar(1.0, -tau * a);
        }
    }

    /// `A z`
    pub fn apply_linear(&self, z: &SpectralField) -> SpectralField {
        let mut out = z.clone();
        for (c, a) in out.coeffs_mut().iter_mut().zip(self.weights.symbol()) {
            *c *= a;
        }
        out
    }

    fn dressed_real_field(&self, alpha: &[Complex64]) -> Vec<f64> {
        let mut w: Vec<Complex64> = alpha.iter().zip(&self.dressing).map(|(c, d)| c * d).collect();
        self.grid.to_physical_in_place(&mut w);
        w.iter().map(|c| 2.0 * c.re).collect()
    }

    /// Hartree mean field `λ W∗|z|² + V` at the grid points.
    fn hartree_potential(&self, phys: &[Complex64]) -> Vec<f64> {
        let lambda = self.spec.coupling;
        let mut pot = vec![0.0; phys.len()];
        if lambda != 0.0 && self.kernel.iter().any(|w| *w != 0.0) {
            let mut rho: Vec<Complex64> = phys.iter().map(|c| Complex64::new(c.norm_sqr(), 0.0)).collect();
            self.grid.to_coeffs_in_place(&mut rho);
            rho.iter_mut().zip(&self.kernel).for_each(|(c, w)| *c *= w);
            self.grid.to_physical_in_place(&mut rho);
            pot.iter_mut().zip(&rho).for_each(|(p, c)| *p = lambda * c.re);
        }
        if let Some(v) = &self.potential {
            pot.iter_mut().zip(v).for_each(|(p, v)| *p += v);
        }
        pot
    }

    /// `∂_z̄ h_I(z, z̄)`
    pub fn interaction_gradient(&self, z: &SpectralField) -> Result<SpectralField> {
        self.weights.check(z)?;
        let lambda = self.spec.coupling;
        if self.is_free() {
            return Ok(self.zero_field());
        }
        let n = self.grid.len();
        let mut out = self.zero_field();
        match self.spec.kind {
            ModelKind::Nls => {
                let alpha = self.spec.power;
                let mut phys = z.component_physical(0);
                phys.iter_mut().for_each(|c| *c *= lambda * c.norm().powf(alpha));
                self.grid.to_coeffs_in_place(&mut phys);
                out.component_mut(0).copy_from_slice(&phys);
            }
            ModelKind::Hartree => {
                let mut phys = z.component_physical(0);
                let pot = self.hartree_potential(&phys);
                phys.iter_mut().zip(&pot).for_each(|(c, p)| *c *= p);
                self.grid.to_coeffs_in_place(&mut phys);
                out.component_mut(0).copy_from_slice(&phys);
            }
            ModelKind::KleinGordon => {
                let phi = self.dressed_real_field(z.component(0));
                let mut cube: Vec<Complex64> = phi.iter().map(|p| Complex64::new(lambda * p * p * p, 0.0)).collect();
                self.grid.to_coeffs_in_place(&mut cube);
                cube.iter_mut().zip(&self.dressing).for_each(|(c, d)| *c *= d);
                out.component_mut(0).copy_from_slice(&cube);
            }
            ModelKind::Skg => {
                let phi = self.dressed_real_field(z.component(1));
                let mut u = z.component_physical(0);
                let mut density: Vec<Complex64> =
                    u.iter().map(|c| Complex64::new(lambda * c.norm_sqr(), 0.0)).collect();
                u.iter_mut().zip(&phi).for_each(|(c, p)| *c *= lambda * p);
                self.grid.to_coeffs_in_place(&mut u);
                self.grid.to_coeffs_in_place(&mut density);
                density.iter_mut().zip(&self.dressing).for_each(|(c, d)| *c *= d);
                out.coeffs_mut()[..n].copy_from_slice(&u);
                out.coeffs_mut()[n..].copy_from_slice(&density);
            }
        }
        if !out.is_finite() {
            return Err(Error::Overflow { norm: self.weights.norm(z, NormKind::Z1).unwrap_or(f64::NAN) });
        }
        Ok(out)
    }

    /// `∂_z̄ h(z, z̄) = A z + ∂_z̄ h_I(z, z̄)`
    pub fn energy_gradient(&self, z: &SpectralField) -> Result<SpectralField> {
        let mut g = self.interaction_gradient(z)?;
        for ((o, c), a) in g.coeffs_mut().iter_mut().zip(z.coeffs()).zip(self.weights.symbol()) {
            *o += c * a;
        }
        Ok(g)
    }

    /// Interaction energy `h_I(z, z̄)` by grid quadrature.
    pub fn interaction_energy(&self, z: &SpectralField) -> Result<f64> {
        self.weights.check(z)?;
        let lambda = self.spec.coupling;
        let vol = self.grid.cell_volume();
        let value = match self.spec.kind {
            ModelKind::Nls => {
                if lambda == 0.0 {
                    return Ok(0.0);
                }
                let p = self.spec.power + 2.0;
                let sum: f64 = z.component_physical(0).iter().map(|c| c.norm().powf(p)).sum();
                2.0 * lambda / p * sum * vol
            }
            ModelKind::Hartree => {
                let phys = z.component_physical(0);
                let mean_field = {
                    // λ W∗ρ without V, to weight the pair term by 1/2
                    let lambda_only = self.hartree_potential(&phys);
                    match &self.potential {
                        Some(v) => lambda_only.iter().zip(v).map(|(p, v)| p - v).collect::<Vec<_>>(),
                        None => lambda_only,
                    }
                };
                let ext = self.potential.as_deref();
                let sum: f64 = phys
                    .iter()
                    .enumerate()
                    .map(|(j, c)| {
                        let rho = c.norm_sqr();
                        0.5 * mean_field[j] * rho + ext.map_or(0.0, |v| v[j] * rho)
                    })
                    .sum();
                sum * vol
            }
            ModelKind::KleinGordon => {
                if lambda == 0.0 {
                    return Ok(0.0);
                }
                let phi = self.dressed_real_field(z.component(0));
                0.25 * lambda * phi.iter().map(|p| p.powi(4)).sum::<f64>() * vol
            }
            ModelKind::Skg => {
                if lambda == 0.0 {
                    return Ok(0.0);
                }
                let phi = self.dressed_real_field(z.component(1));
                let u = z.component_physical(0);
                lambda * phi.iter().zip(&u).map(|(p, c)| p * c.norm_sqr()).sum::<f64>() * vol
            }
        };
        Ok(value)
    }

    /// `h(z, z̄) = ⟨z, A z⟩ + h_I(z, z̄)`
    pub fn energy(&self, z: &SpectralField) -> Result<f64> {
        self.weights.check(z)?;
        let quadratic: f64 =
            z.coeffs().iter().zip(self.weights.symbol()).map(|(c, a)| a * c.norm_sqr()).sum();
        Ok(quadratic + self.interaction_energy(z)?)
    }

    /// Exact flow of `i ∂_t z = ∂_z̄ h_I(z, z̄)` over time `tau`.
    ///
    /// For NLS and Hartree the modulus is frozen, so the flow is a pointwise
    /// phase rotation. For the relativistic models the real field `φ` (and
    /// `|u|` for S-KG) is frozen, so the flow is a phase rotation of `u` and
    /// a linear drift of the meson coefficients.
    pub fn interaction_flow(&self, z: &SpectralField, tau: f64) -> Result<SpectralField> {
        self.weights.check(z)?;
        if self.is_free() {
            return Ok(z.clone());
        }
        let lambda = self.spec.coupling;
        let n = self.grid.len();
        let mut out = z.clone();
        match self.spec.kind {
            ModelKind::Nls => {
                let alpha = self.spec.power;
                let mut phys = z.component_physical(0);
                phys.iter_mut()
                    .for_each(|c| *c *= Complex64::from_polar(1.0, -tau * lambda * c.norm().powf(alpha)));
                self.grid.to_coeffs_in_place(&mut phys);
                out.component_mut(0).copy_from_slice(&phys);
            }
            ModelKind::Hartree => {
                let mut phys = z.component_physical(0);
                let pot = self.hartree_potential(&phys);
                phys.iter_mut().zip(&pot).for_each(|(c, p)| *c *= Complex64::from_polar(1.0, -tau * p));
                self.grid.to_coeffs_in_place(&mut phys);
                out.component_mut(0).copy_from_slice(&phys);
            }
            ModelKind::KleinGordon => {
                let g = self.interaction_gradient(z)?;
                out.axpy(Complex64::new(0.0, -tau), &g);
            }
            ModelKind::Skg => {
                let phi = self.dressed_real_field(z.component(1));
                let mut u = z.component_physical(0);
                let mut density: Vec<Complex64> =
                    u.iter().map(|c| Complex64::new(lambda * c.norm_sqr(), 0.0)).collect();
                u.iter_mut().zip(&phi).for_each(|(c, p)| *c *= Complex64::from_polar(1.0, -tau * lambda * p));
                self.grid.to_coeffs_in_place(&mut u);
                self.grid.to_coeffs_in_place(&mut density);
                out.coeffs_mut()[..n].copy_from_slice(&u);
                for ((a, d), w) in out.coeffs_mut()[n..].iter_mut().zip(&density).zip(&self.dressing) {
                    *a += Complex64::new(0.0, -tau) * d * w;
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::Overflow { norm: self.weights.norm(z, NormKind::Z1).unwrap_or(f64::NAN) });
        }
        Ok(out)
    }

    /// Original picture `v₁(z) = -i ∂_z̄ h`, or interaction picture
    /// `v₂(t, z) = -i e^{itA} ∂_z̄ h_I(e^{-itA} z)`.
    pub fn vector_field(&self, picture: Picture, t: f64, z: &SpectralField) -> Result<SpectralField> {
        let minus_i = Complex64::new(0.0, -1.0);
        let out = match picture {
            Picture::Original => self.energy_gradient(z)?.scaled(minus_i),
            Picture::Interaction => {
                let free = self.free_propagate(z, t);
                let g = self.interaction_gradient(&free)?;
                self.free_propagate(&g, -t).scaled(minus_i)
            }
        };
        if !out.is_finite() {
            return Err(Error::Overflow { norm: self.weights.norm(z, NormKind::Z1).unwrap_or(f64::NAN) });
        }
        Ok(out)
    }

    /// Worst deviation between central differences of `h` along `u` and `iu`
    /// and the pairing `2 Re⟨∂_z̄ h, ·⟩_{Z0}` of the original-picture field.
    pub fn directional_derivative_check(&self, z: &SpectralField, u: &SpectralField, h_step: f64) -> Result<f64> {
        if !(1e-6..=1e-3).contains(&h_step) {
            return Err(Error::Parameter(format!("finite-difference step {h_step} outside [1e-6, 1e-3]")));
        }
        self.weights.check(u)?;
        let v = self.vector_field(Picture::Original, 0.0, z)?;
        let grad = v.scaled(Complex64::new(0.0, 1.0));
        let mut worst: f64 = 0.0;
        for dir in [u.clone(), u.scaled(Complex64::new(0.0, 1.0))] {
            let mut plus = z.clone();
            plus.axpy(Complex64::new(h_step, 0.0), &dir);
            let mut minus = z.clone();
            minus.axpy(Complex64::new(-h_step, 0.0), &dir);
            let fd = (self.energy(&plus)? - self.energy(&minus)?) / (2.0 * h_step);
            let exact = 2.0 * self.weights.inner_real(&grad, &dir, Pairing::Z0)?;
            worst = worst.max((fd - exact).abs());
        }
        Ok(worst)
    }

    /// `‖v₂(t,x) - v₂(t,y)‖_{Z0} / ((‖x‖²_{Z1} + ‖y‖²_{Z1}) ‖x - y‖_{Z0})`
    /// for the interaction-picture field of the Hartree and S-KG models.
    pub fn lipschitz_witness(&self, t: f64, x: &SpectralField, y: &SpectralField) -> Result<f64> {
        if !matches!(self.spec.kind, ModelKind::Hartree | ModelKind::Skg) {
            return Err(Error::Config("Lipschitz witness is defined for the Hartree and S-KG models".into()));
        }
        let diff = self.weights.norm(&(x - y), NormKind::Z0)?;
        if diff == 0.0 {
            return Err(Error::Degenerate("Lipschitz witness needs x != y".into()));
        }
        let vx = self.vector_field(Picture::Interaction, t, x)?;
        let vy = self.vector_field(Picture::Interaction, t, y)?;
        let num = self.weights.norm(&(&vx - &vy), NormKind::Z0)?;
        let nx = self.weights.norm(x, NormKind::Z1)?;
        let ny = self.weights.norm(y, NormKind::Z1)?;
        Ok(num / ((nx * nx + ny * ny) * diff))
    }
}

/// A model together with the picture in which its vector field is read.
#[derive(Clone, Debug)]
pub struct VectorFieldHandle {
    model: Arc<HamiltonianModel>,
    picture: Picture,
}

impl VectorFieldHandle {
    pub fn new(model: Arc<HamiltonianModel>, picture: Picture) -> Self {
        VectorFieldHandle { model, picture }
    }

    pub fn original(model: Arc<HamiltonianModel>) -> Self {
        VectorFieldHandle::new(model, Picture::Original)
    }

    pub fn interaction(model: Arc<HamiltonianModel>) -> Self {
        VectorFieldHandle::new(model, Picture::Interaction)
    }

    pub fn model(&self) -> &Arc<HamiltonianModel> {
        &self.model
    }

    pub fn picture(&self) -> Picture {
        self.picture
    }

    /// Space in which the field takes its values.
    pub fn codomain(&self) -> NormKind {
        match (self.picture, self.model.kind()) {
            (Picture::Interaction, ModelKind::Hartree | ModelKind::Skg) => NormKind::Z0,
            _ => NormKind::Z1Dual,
        }
    }

    pub fn eval(&self, t: f64, z: &SpectralField) -> Result<SpectralField> {
        self.model.vector_field(self.picture, t, z)
    }
}
