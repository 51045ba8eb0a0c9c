//! Measures on pairs (initial point, path) concentrated on characteristics.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{NormKind, SpectralField};
use crate::flow::{duhamel_residual, FlowMap, Trajectory};
use crate::measure::{compensated_sum, EnsembleMeasure};
use crate::models::HamiltonianModel;

#[derive(Clone, Debug)]
pub struct PathEntry {
    pub start: SpectralField,
    pub path: Trajectory,
}

/// Empirical `η = Σ w_i δ_{(x_i, γ_i)}` with every path on one time grid.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    entries: Vec<PathEntry>,
    weights: Vec<f64>,
    origin: f64,
}

impl PathEnsemble {
    pub fn new(entries: Vec<PathEntry>, weights: Vec<f64>, origin: f64) -> Result<Self> {
        if entries.is_empty() || entries.len() != weights.len() {
            return Err(Error::Config("path ensemble needs one weight per entry".into()));
        }
        if (compensated_sum(&weights) - 1.0).abs() > 1e-12 || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Parameter("path weights must be nonnegative and sum to 1".into()));
        }
        let times = &entries[0].path.times;
        for (i, e) in entries.iter().enumerate() {
            if e.path.times != *times {
                return Err(Error::Config(format!("entry {i} uses a different time grid")));
            }
            if e.path.times[0] != origin || e.path.states[0] != e.start {
                return Err(Error::Config(format!("entry {i} does not start at its initial point")));
            }
        }
        Ok(PathEnsemble { entries, weights, origin })
    }

    pub fn entries(&self) -> &[PathEntry] {
        &self.entries
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn times(&self) -> &[f64] {
        &self.entries[0].path.times
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replace one path, keeping its initial point; used to build
    /// deliberately inconsistent ensembles.
    pub fn with_path(mut self, index: usize, path: Trajectory) -> Result<Self> {
        let entry = self.entries.get_mut(index).ok_or_else(|| Error::Config(format!("no entry {index}")))?;
        entry.path = path;
        PathEnsemble::new(self.entries, self.weights, self.origin)
    }
}

/// One characteristic per atom of `μ_s`, recorded every `stride` steps.
pub fn trace(mu: &EnsembleMeasure, flow: &FlowMap, s: f64, t_end: f64, stride: usize) -> Result<PathEnsemble> {
    let paths: Vec<Result<Trajectory>> = mu.particles().par_iter().map(|z| flow.solve_observed(s, t_end, z, stride)).collect();
    let mut entries = Vec::with_capacity(paths.len());
    for (index, (p, z)) in paths.into_iter().zip(mu.particles()).enumerate() {
        let path = p?;
        if let Some(time) = path.terminated_at {
            return Err(Error::ParticleBlowup { index, time });
        }
        entries.push(PathEntry { start: z.clone(), path });
    }
    PathEnsemble::new(entries, mu.weights().to_vec(), s)
}

/// `(e_t)_♯ η` at the nearest stored node; the second value is `|t - node|`.
pub fn marginal(pe: &PathEnsemble, t: f64) -> Result<(EnsembleMeasure, f64)> {
    let times = pe.times();
    let (j, offset) = times
        .iter()
        .enumerate()
        .map(|(j, s)| (j, (s - t).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("paths hold at least one node");
    let particles = pe.entries.iter().map(|e| e.path.states[j].clone()).collect();
    Ok((EnsembleMeasure::new(particles, pe.weights.clone(), times[j])?, offset))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcentrationReport {
    pub worst: f64,
    pub worst_index: usize,
    pub residuals: Vec<f64>,
}

/// Duhamel residual of every path; the largest flags the entry farthest
/// from being a solution.
pub fn concentration_check(pe: &PathEnsemble, model: &HamiltonianModel) -> Result<ConcentrationReport> {
    let residuals = pe
        .entries
        .par_iter()
        .map(|e| duhamel_residual(&e.path, model))
        .collect::<Result<Vec<f64>>>()?;
    let (worst_index, worst) = residuals
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, r)| if r > acc.1 { (i, r) } else { acc });
    Ok(ConcentrationReport { worst, worst_index, residuals })
}

/// `Σ w_i sup_t ‖γ_i(t)‖_{Z1}`
pub fn z1_sup_moment(pe: &PathEnsemble, model: &HamiltonianModel) -> Result<f64> {
    let w = model.norm_weights();
    let sups = pe
        .entries
        .par_iter()
        .map(|e| {
            e.path
                .states
                .iter()
                .map(|z| w.norm(z, NormKind::Z1))
                .try_fold(0.0f64, |m, n| n.map(|n| m.max(n)))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sups.iter().zip(&pe.weights).map(|(s, w)| s * w).sum())
}
