//! `hamflow` command line: seeded simulations, ensemble snapshots, Liouville
//! diagnostics and the two config-driven experiments.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hamflow::experiment::{run_hypotheses, run_uniqueness, stream_seed, Check, ExperimentConfig, Report};
use hamflow::field::NormKind;
use hamflow::flow::{FlowMap, Scheme};
use hamflow::io;
use hamflow::liouville::{liouville_residual, project_curve, theta_moment, velocity_estimate};
use hamflow::measure::{cyl_distance, pushforward, sliced_w1, EnsembleMeasure, MeasureCurve};
use hamflow::models::{HamiltonianModel, ModelKind, VectorFieldHandle};
use hamflow::pathspace::{concentration_check, marginal, trace, z1_sup_moment};

#[derive(Parser)]
#[command(name = "hamflow", version, about = "Measure-valued flows of Hamiltonian PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve one sampled field and report conservation.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_model)]
        model: Option<ModelKind>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t0: Option<f64>,
        #[arg(long)]
        t1: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Record every `stride` steps.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1e-8)]
        mass_tol: f64,
        #[arg(long, default_value_t = 1e-6)]
        energy_tol: f64,
    },
    /// Draw an ensemble from the configured sampler.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
    },
    /// Push an ensemble forward, writing evenly spaced snapshots.
    Pushforward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Final time; `time.end` from the config when absent.
        #[arg(long)]
        t1: Option<f64>,
        #[arg(long, default_value_t = 1)]
        snapshots: usize,
    },
    /// Weak Liouville residual of a snapshot curve against the config tests.
    Residual {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Fail when any residual exceeds this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Projected clouds of a snapshot curve onto the configured basis.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
    },
    /// θ-moment and velocity estimates of a snapshot curve.
    Theta {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
    /// Trace characteristics and check the path-space representation.
    Pathspace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Particles against the grid continuity solution across the ladder.
    Uniqueness {
        #[command(flatten)]
        common: Common,
    },
    /// Hypothesis battery along the push-forward curve.
    Hypotheses {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    match s {
        "nls" => Ok(ModelKind::Nls),
        "hartree" => Ok(ModelKind::Hartree),
        "klein_gordon" | "kg" => Ok(ModelKind::KleinGordon),
        "skg" => Ok(ModelKind::Skg),
        _ => Err(format!("unknown model {s}; expected nls, hartree, klein_gordon or skg")),
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "strang_splitting" | "strang" => Ok(Scheme::StrangSplitting),
        "rk4_interaction" | "rk4" => Ok(Scheme::Rk4Interaction),
        _ => Err(format!("unknown scheme {s}; expected strang_splitting or rk4_interaction")),
    }
}

struct Outputs {
    dir: PathBuf,
    stem: String,
}

impl Outputs {
    fn new(common: &Common, cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let dir = common.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { dir, stem: format!("{}_{command}", cfg.name) })
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }

    fn report<B: Serialize>(&self, report: &Report<B>) -> Result<bool> {
        let p = self.path(".json");
        fs::write(&p, report.to_json()? + "\n").with_context(|| format!("writing {}", p.display()))?;
        println!("{}", p.display());
        if let Some(name) = &report.first_failure {
            eprintln!("check failed: {name}");
        }
        Ok(report.passed)
    }

    fn csv(&self, suffix: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(suffix))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.iter().map(|x| format!("{x:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Whitespace-separated columns for gnuplot.
    fn dat(&self, suffix: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(suffix))?);
        writeln!(w, "# {}", header.join(" "))?;
        for r in rows {
            let line: Vec<String> = r.iter().map(|x| format!("{x:e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

fn read_ensemble(path: &Path) -> Result<EnsembleMeasure> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    io::read_ensemble(&mut r).with_context(|| format!("reading {}", path.display()))
}

fn write_ensemble(path: &Path, mu: &EnsembleMeasure) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    io::write_ensemble(&mut w, mu)?;
    w.flush()?;
    Ok(())
}

fn read_curve(paths: &[PathBuf]) -> Result<MeasureCurve> {
    let mut snaps = paths.iter().map(|p| read_ensemble(p)).collect::<Result<Vec<_>>>()?;
    snaps.sort_by(|a, b| a.timestamp().total_cmp(&b.timestamp()));
    Ok(MeasureCurve::new(snaps)?)
}

/// Mass of the Schrödinger-type component, or `None` for Klein–Gordon.
fn mass(model: &HamiltonianModel, z: &hamflow::field::SpectralField) -> Option<f64> {
    match model.kind() {
        ModelKind::KleinGordon => None,
        _ => Some(z.component(0).iter().map(|c| c.norm_sqr()).sum()),
    }
}

fn relative_drift(values: &[f64]) -> f64 {
    let v0 = values[0];
    let scale = if v0.abs() > 0.0 { v0.abs() } else { 1.0 };
    values.iter().map(|v| (v - v0).abs()).fold(0.0, f64::max) / scale
}

#[derive(Serialize)]
struct SimulateResults {
    model: ModelKind,
    dt: f64,
    t0: f64,
    t1: f64,
    nodes: usize,
    terminated_at: Option<f64>,
    mass_drift: Option<f64>,
    energy_drift: f64,
    max_z1_norm: f64,
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    common: &Common,
    model: Option<ModelKind>,
    scheme: Option<Scheme>,
    dt: Option<f64>,
    t0: Option<f64>,
    t1: Option<f64>,
    seed: Option<u64>,
    stride: usize,
    mass_tol: f64,
    energy_tol: f64,
) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(m) = model {
        cfg.model.kind = m;
    }
    if let Some(s) = scheme {
        cfg.schemes.insert(0, s);
    }
    if let Some(dt) = dt {
        cfg.time.dt = dt;
    }
    cfg.time.start = t0.unwrap_or(cfg.time.start);
    cfg.time.end = t1.unwrap_or(cfg.time.end);
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let out = Outputs::new(common, &cfg, "simulate")?;
    let m = cfg.build_model()?;
    let z0 = cfg.initial_ensemble(&m, 1, 0)?.particles()[0].clone();
    let flow = FlowMap::new(m.clone(), cfg.scheme(), cfg.time.dt)?;
    let traj = flow.solve_observed(cfg.time.start, cfg.time.end, &z0, stride)?;

    let w = m.norm_weights();
    let mut rows = Vec::with_capacity(traj.len());
    for (t, z) in traj.times.iter().zip(&traj.states) {
        rows.push(vec![*t, mass(&m, z).unwrap_or(f64::NAN), m.energy(z)?, w.norm(z, NormKind::Z1)?]);
    }
    let masses: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let energies: Vec<f64> = rows.iter().map(|r| r[2]).collect();
    let mass_drift = mass(&m, &z0).map(|_| relative_drift(&masses));
    let energy_drift = relative_drift(&energies);
    let mut checks = vec![Check::at_most("no blowup", traj.terminated_at.is_some() as u8 as f64, 0.0)];
    if let Some(d) = mass_drift {
        checks.push(Check::at_most("mass drift", d, mass_tol));
    }
    checks.push(Check::at_most("energy drift", energy_drift, energy_tol));

    let mut f = BufWriter::new(File::create(out.path(".traj"))?);
    io::write_trajectory(&mut f, &traj)?;
    f.flush()?;
    let header = ["t", "mass", "energy", "z1_norm"];
    out.csv(".csv", &header, &rows)?;
    out.dat(".dat", &header, &rows)?;
    let results = SimulateResults {
        model: m.kind(),
        dt: cfg.time.dt,
        t0: cfg.time.start,
        t1: cfg.time.end,
        nodes: traj.len(),
        terminated_at: traj.terminated_at,
        mass_drift,
        energy_drift,
        max_z1_norm: rows.iter().map(|r| r[3]).fold(0.0, f64::max),
    };
    out.report(&Report::new("simulate", &cfg, vec![], checks, results)?)
}

fn sample_cmd(common: &Common, n: usize) -> Result<bool> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = Outputs::new(common, &cfg, "sample")?;
    let m = cfg.build_model()?;
    let mu = cfg.initial_ensemble(&m, n, 1)?;
    let p = out.path(".ensm");
    write_ensemble(&p, &mu)?;
    println!("{}", p.display());
    Ok(true)
}

fn pushforward_cmd(common: &Common, input: &Path, t1: Option<f64>, snapshots: usize) -> Result<bool> {
    let cfg = ExperimentConfig::load(&common.config)?;
    if snapshots == 0 {
        bail!("--snapshots must be positive");
    }
    let out = Outputs::new(common, &cfg, "pushforward")?;
    let m = cfg.build_model()?;
    let flow = FlowMap::new(m, cfg.scheme(), cfg.time.dt)?;
    let mut mu = read_ensemble(input)?;
    let s = mu.timestamp();
    let t1 = t1.unwrap_or(cfg.time.end);
    let p = out.path("_000.ensm");
    write_ensemble(&p, &mu)?;
    println!("{}", p.display());
    for j in 1..=snapshots {
        let t = s + (t1 - s) * j as f64 / snapshots as f64;
        mu = pushforward(&mu, &flow, mu.timestamp(), t)?;
        let p = out.path(&format!("_{j:03}.ensm"));
        write_ensemble(&p, &mu)?;
        println!("{}", p.display());
    }
    Ok(true)
}

#[derive(Serialize)]
struct ResidualResults {
    snapshots: usize,
    residuals: Vec<f64>,
    velocity_z1_dual: f64,
    velocity_z0_interaction: Option<f64>,
}

fn residual_cmd(common: &Common, inputs: &[PathBuf], tolerance: Option<f64>) -> Result<bool> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = Outputs::new(common, &cfg, "residual")?;
    let m = cfg.build_model()?;
    let tests = cfg.test_functions(&m)?;
    let curve = read_curve(inputs)?;
    let field = VectorFieldHandle::original(m.clone());
    let residuals = liouville_residual(&curve, &field, &tests)?;
    let interaction = VectorFieldHandle::interaction(m.clone());
    let prime = match interaction.codomain() {
        NormKind::Z0 => Some(velocity_estimate(&curve, &interaction, NormKind::Z0)?),
        _ => None,
    };
    let checks = match tolerance {
        Some(tol) => residuals.iter().map(|r| Check::at_most("Liouville residual", r.abs(), tol)).collect(),
        None => vec![],
    };
    let rows: Vec<Vec<f64>> = residuals.iter().enumerate().map(|(i, r)| vec![i as f64, *r]).collect();
    out.csv(".csv", &["test", "residual"], &rows)?;
    let results = ResidualResults {
        snapshots: curve.len(),
        residuals,
        velocity_z1_dual: velocity_estimate(&curve, &field, NormKind::Z1Dual)?,
        velocity_z0_interaction: prime,
    };
    out.report(&Report::new("residual", &cfg, vec![], checks, results)?)
}

#[derive(Serialize)]
struct ProjectedSummary {
    time: f64,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
    projected_speed: f64,
    full_speed: f64,
}

fn project_cmd(common: &Common, inputs: &[PathBuf]) -> Result<bool> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = Outputs::new(common, &cfg, "project")?;
    let m = cfg.build_model()?;
    let basis = cfg.basis(&m)?;
    let curve = read_curve(inputs)?;
    let field = VectorFieldHandle::original(m.clone());
    let snaps = project_curve(&curve, &basis, Some(&field))?;
    let d = basis.dim();
    let mut rows = Vec::new();
    let mut summary = Vec::with_capacity(snaps.len());
    for s in &snaps {
        let vel = s.velocities.as_ref().expect("velocities requested");
        let speeds = s.speeds.as_ref().expect("speeds requested");
        let mut projected = 0.0;
        let mut full = 0.0;
        for i in 0..s.len() {
            let mut row = vec![s.time, s.weights[i]];
            row.extend_from_slice(s.point(i));
            row.extend_from_slice(&vel[i * d..(i + 1) * d]);
            rows.push(row);
            projected += s.weights[i] * vel[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
            full += s.weights[i] * speeds[i];
        }
        summary.push(ProjectedSummary {
            time: s.time,
            mean: s.mean(),
            covariance: s.covariance(),
            projected_speed: projected,
            full_speed: full,
        });
    }
    let mut header = vec!["t".to_string(), "weight".to_string()];
    header.extend((0..d).map(|a| format!("y{a}")));
    header.extend((0..d).map(|a| format!("v{a}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(".csv", &header, &rows)?;
    out.dat(".dat", &header, &rows)?;
    // the projected speed never exceeds the full one, up to rounding
    let checks = summary
        .iter()
        .map(|s| Check::at_most("projected speed bounded by full speed", s.projected_speed - s.full_speed, 1e-12 * (1.0 + s.full_speed)))
        .collect();
    out.report(&Report::new("project", &cfg, vec![], checks, summary)?)
}

#[derive(Serialize)]
struct ThetaResults {
    scale: f64,
    theta_moment: f64,
    velocity_z1_dual: f64,
}

fn theta_cmd(common: &Common, inputs: &[PathBuf], scale: f64) -> Result<bool> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = Outputs::new(common, &cfg, "theta")?;
    let m = cfg.build_model()?;
    let curve = read_curve(inputs)?;
    let field = VectorFieldHandle::original(m);
    let results = ThetaResults {
        scale,
        theta_moment: theta_moment(&curve, &field, scale)?,
        velocity_z1_dual: velocity_estimate(&curve, &field, NormKind::Z1Dual)?,
    };
    let checks = vec![Check::at_most("theta-moment finite", if results.theta_moment.is_finite() { 0.0 } else { 1.0 }, 0.0)];
    out.report(&Report::new("theta", &cfg, vec![], checks, results)?)
}

#[derive(Serialize)]
struct PathResults {
    entries: usize,
    nodes: usize,
    marginal_cyl_distance: f64,
    marginal_sliced_w1: f64,
    concentration_worst: f64,
    concentration_worst_index: usize,
    z1_sup_moment: f64,
}

fn pathspace_cmd(common: &Common, input: &Path, stride: usize) -> Result<bool> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = Outputs::new(common, &cfg, "pathspace")?;
    let m: Arc<HamiltonianModel> = cfg.build_model()?;
    let mu = read_ensemble(input)?;
    let flow = FlowMap::new(m.clone(), cfg.scheme(), cfg.time.dt)?;
    let (s, t) = (mu.timestamp(), cfg.time.end);
    let pe = trace(&mu, &flow, s, t, stride)?;
    let (at_end, _) = marginal(&pe, t)?;
    let pushed = pushforward(&mu, &flow, s, t)?;
    let tests = cfg.test_functions(&m)?;
    let cyl = if tests.is_empty() { 0.0 } else { cyl_distance(&at_end, &pushed, &tests)? };
    let sliced = sliced_w1(&at_end, &pushed, m.norm_weights(), 16, stream_seed(cfg.seed, 7))?;
    let conc = concentration_check(&pe, &m)?;
    let sup = z1_sup_moment(&pe, &m)?;
    let mut f = BufWriter::new(File::create(out.path(".paths"))?);
    io::write_paths(&mut f, &pe)?;
    f.flush()?;
    let rows: Vec<Vec<f64>> = conc.residuals.iter().enumerate().map(|(i, r)| vec![i as f64, *r]).collect();
    out.csv(".csv", &["entry", "duhamel_residual"], &rows)?;
    let mut checks = vec![
        Check::at_most("marginal equals push-forward", cyl.max(sliced), 0.0),
    ];
    if let Some(ball) = &cfg.sampler.ball {
        if ball.norm == NormKind::Z1 {
            checks.push(Check::at_most("sup-moment within ball", sup, ball.radius * (1.0 + 1e-3)));
        }
    }
    let results = PathResults {
        entries: pe.len(),
        nodes: pe.times().len(),
        marginal_cyl_distance: cyl,
        marginal_sliced_w1: sliced,
        concentration_worst: conc.worst,
        concentration_worst_index: conc.worst_index,
        z1_sup_moment: sup,
    };
    out.report(&Report::new("pathspace", &cfg, vec![], checks, results)?)
}

fn uniqueness_cmd(common: &Common) -> Result<bool> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = Outputs::new(common, &cfg, "uniqueness")?;
    let report = run_uniqueness(&cfg)?;
    let rows: Vec<Vec<f64>> = report
        .results
        .rungs
        .iter()
        .map(|r| vec![r.rung.n as f64, r.rung.dt, r.rung.dx, r.terminal_l1(), r.terminal_sliced_w1()])
        .collect();
    out.csv(".csv", &["n", "dt", "dx", "terminal_l1", "terminal_sliced_w1"], &rows)?;
    let mut series = Vec::new();
    for r in &report.results.rungs {
        for ((t, l1), w1) in r.times.iter().zip(&r.l1).zip(&r.sliced_w1) {
            series.push(vec![r.rung.dx, *t, *l1, *w1]);
        }
    }
    out.dat(".dat", &["dx", "t", "l1", "sliced_w1"], &series)?;
    out.report(&report)
}

fn hypotheses_cmd(common: &Common) -> Result<bool> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = Outputs::new(common, &cfg, "hypotheses")?;
    let report = run_hypotheses(&cfg)?;
    let rows: Vec<Vec<f64>> = report
        .results
        .snapshots
        .iter()
        .map(|s| {
            vec![
                s.time,
                s.max_z0_norm,
                s.max_z1_norm,
                s.z1_second_moment,
                s.velocity,
                s.velocity_prime.unwrap_or(f64::NAN),
                s.theta,
                s.lipschitz.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    let header = ["t", "max_z0", "max_z1", "z1_second_moment", "velocity", "velocity_prime", "theta", "lipschitz"];
    out.csv(".csv", &header, &rows)?;
    out.dat(".dat", &header, &rows)?;
    out.report(&report)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { common, model, scheme, dt, t0, t1, seed, stride, mass_tol, energy_tol } => {
            simulate(&common, model, scheme, dt, t0, t1, seed, stride, mass_tol, energy_tol)
        }
        Command::Sample { common, n } => sample_cmd(&common, n),
        Command::Pushforward { common, input, t1, snapshots } => pushforward_cmd(&common, &input, t1, snapshots),
        Command::Residual { common, inputs, tolerance } => residual_cmd(&common, &inputs, tolerance),
        Command::Project { common, inputs } => project_cmd(&common, &inputs),
        Command::Theta { common, inputs, scale } => theta_cmd(&common, &inputs, scale),
        Command::Pathspace { common, input, stride } => pathspace_cmd(&common, &input, stride),
        Command::Uniqueness { common } => uniqueness_cmd(&common),
        Command::Hypotheses { common } => hypotheses_cmd(&common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
