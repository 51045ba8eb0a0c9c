//! Little-endian binary snapshots of fields, ensembles, trajectories and
//! path archives.
//!
//! Every file starts with a four-byte magic, a `u32` version and the grid
//! header `(dimension: u32, modes: u32, components: u32, length: f64)`.
//! Coefficients are stored component-major as `(re: f64, im: f64)` pairs.

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::{Grid, SpectralField};
use crate::flow::Trajectory;
use crate::measure::EnsembleMeasure;
use crate::pathspace::{PathEnsemble, PathEntry};

pub const VERSION: u32 = 1;

const FIELD_MAGIC: &[u8; 4] = b"SPFD";
const ENSEMBLE_MAGIC: &[u8; 4] = b"ENSM";
const TRAJECTORY_MAGIC: &[u8; 4] = b"TRAJ";
const PATH_MAGIC: &[u8; 4] = b"PATH";

fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], grid: &Grid, components: usize) -> Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(grid.dimension() as u32)?;
    w.write_u32::<LE>(grid.modes() as u32)?;
    w.write_u32::<LE>(components as u32)?;
    w.write_f64::<LE>(grid.length())?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(Grid, usize)> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dimension = r.read_u32::<LE>()? as usize;
    let modes = r.read_u32::<LE>()? as usize;
    let components = r.read_u32::<LE>()? as usize;
    let length = r.read_f64::<LE>()?;
    let grid = Grid::new(dimension, modes, length).map_err(|e| Error::Format(e.to_string()))?;
    if components == 0 || components > 2 {
        return Err(Error::Format(format!("unsupported component count {components}")));
    }
    Ok((grid, components))
}

fn write_coeffs<W: Write>(w: &mut W, z: &SpectralField) -> Result<()> {
    for c in z.coeffs() {
        w.write_f64::<LE>(c.re)?;
        w.write_f64::<LE>(c.im)?;
    }
    Ok(())
}

fn read_coeffs<R: Read>(r: &mut R, grid: Grid, components: usize) -> Result<SpectralField> {
    let n = grid.len() * components;
    let mut coeffs = Vec::with_capacity(n);
    for _ in 0..n {
        let re = r.read_f64::<LE>()?;
        let im = r.read_f64::<LE>()?;
        coeffs.push(Complex64::new(re, im));
    }
    SpectralField::from_coeffs(grid, components, coeffs)
}

fn read_count<R: Read>(r: &mut R) -> Result<usize> {
    let n = r.read_u64::<LE>()?;
    usize::try_from(n).map_err(|_| Error::Format(format!("count {n} too large")))
}

pub fn write_field<W: Write>(w: &mut W, z: &SpectralField) -> Result<()> {
    write_header(w, FIELD_MAGIC, z.grid(), z.components())?;
    write_coeffs(w, z)
}

pub fn read_field<R: Read>(r: &mut R) -> Result<SpectralField> {
    let (grid, components) = read_header(r, FIELD_MAGIC)?;
    read_coeffs(r, grid, components)
}

/// Header, `count: u64`, `timestamp: f64`, particle blocks, weight vector.
pub fn write_ensemble<W: Write>(w: &mut W, mu: &EnsembleMeasure) -> Result<()> {
    write_header(w, ENSEMBLE_MAGIC, mu.grid(), mu.components())?;
    w.write_u64::<LE>(mu.len() as u64)?;
    w.write_f64::<LE>(mu.timestamp())?;
    for z in mu.particles() {
        write_coeffs(w, z)?;
    }
    for x in mu.weights() {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

pub fn read_ensemble<R: Read>(r: &mut R) -> Result<EnsembleMeasure> {
    let (grid, components) = read_header(r, ENSEMBLE_MAGIC)?;
    let n = read_count(r)?;
    let timestamp = r.read_f64::<LE>()?;
    let particles = (0..n).map(|_| read_coeffs(r, grid, components)).collect::<Result<Vec<_>>>()?;
    let weights = (0..n).map(|_| r.read_f64::<LE>().map_err(Error::from)).collect::<Result<Vec<_>>>()?;
    EnsembleMeasure::new(particles, weights, timestamp)
}

/// Header, `nodes: u64`, `terminated: u8`, `terminated_at: f64`, times, states.
pub fn write_trajectory<W: Write>(w: &mut W, traj: &Trajectory) -> Result<()> {
    let first = traj.states.first().ok_or_else(|| Error::Format("empty trajectory".into()))?;
    write_header(w, TRAJECTORY_MAGIC, first.grid(), first.components())?;
    w.write_u64::<LE>(traj.len() as u64)?;
    w.write_u8(traj.terminated_at.is_some() as u8)?;
    w.write_f64::<LE>(traj.terminated_at.unwrap_or(0.0))?;
    for t in &traj.times {
        w.write_f64::<LE>(*t)?;
    }
    for z in &traj.states {
        write_coeffs(w, z)?;
    }
    Ok(())
}

pub fn read_trajectory<R: Read>(r: &mut R) -> Result<Trajectory> {
    let (grid, components) = read_header(r, TRAJECTORY_MAGIC)?;
    read_trajectory_body(r, grid, components)
}

fn read_trajectory_body<R: Read>(r: &mut R, grid: Grid, components: usize) -> Result<Trajectory> {
    let n = read_count(r)?;
    let flag = r.read_u8()?;
    let stop = r.read_f64::<LE>()?;
    let times = (0..n).map(|_| r.read_f64::<LE>().map_err(Error::from)).collect::<Result<Vec<_>>>()?;
    let states = (0..n).map(|_| read_coeffs(r, grid, components)).collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { times, states, terminated_at: (flag != 0).then_some(stop) })
}

/// Header, `entries: u64`, `origin: f64`, weights, then per entry the initial
/// point followed by a trajectory body.
pub fn write_paths<W: Write>(w: &mut W, pe: &PathEnsemble) -> Result<()> {
    let first = &pe.entries()[0].start;
    write_header(w, PATH_MAGIC, first.grid(), first.components())?;
    w.write_u64::<LE>(pe.len() as u64)?;
    w.write_f64::<LE>(pe.origin())?;
    for x in pe.weights() {
        w.write_f64::<LE>(*x)?;
    }
    for e in pe.entries() {
        write_coeffs(w, &e.start)?;
        w.write_u64::<LE>(e.path.len() as u64)?;
        w.write_u8(e.path.terminated_at.is_some() as u8)?;
        w.write_f64::<LE>(e.path.terminated_at.unwrap_or(0.0))?;
        for t in &e.path.times {
            w.write_f64::<LE>(*t)?;
        }
        for z in &e.path.states {
            write_coeffs(w, z)?;
        }
    }
    Ok(())
}

pub fn read_paths<R: Read>(r: &mut R) -> Result<PathEnsemble> {
    let (grid, components) = read_header(r, PATH_MAGIC)?;
    let n = read_count(r)?;
    let origin = r.read_f64::<LE>()?;
    let weights = (0..n).map(|_| r.read_f64::<LE>().map_err(Error::from)).collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let start = read_coeffs(r, grid, components)?;
        let path = read_trajectory_body(r, grid, components)?;
        entries.push(PathEntry { start, path });
    }
    PathEnsemble::new(entries, weights, origin)
}
