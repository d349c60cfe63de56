//! Batch experiments behind the `qctc` binary. Each command is split into a
//! pure computation (`run_*`) and a thin wrapper (`cmd_*`) that writes CSV
//! tables plus a JSON summary with the manifest nested under `"manifest"`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::clustermf::{cluster_channels, evolve_cluster_observed, ClusterSolver, PlaquetteDims};
use crate::config::{Config, Manifest, SolverKind};
use crate::cumulant::{evolve_finite_observed, evolve_td_observed, CumulantStateFinite, FiniteSolver, TdSolver};
use crate::engine::{sample_grid, sweep, Axis, CellOutput, CellRecord, CellStatus, Flow, GridSpec, ScanGrid, SweepOptions};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::liouville::{evolve_exact_observed, pair_matrix, Capacity, GeneratorSpec, ManyBodyState};
use crate::meanfield::{evolve_mf_observed, mf_cell, multistart_delta2, MFState, MfScanOptions, MultistartConfig};
use crate::model::{
    coupling_from_chi, pair_potentials, Boundary, FiniteLattice, Lattice, ModelParams, PairPotentials, TdLattice,
};
use crate::observables::{
    decays_per_atom, fit_scaling, fourier_spectrum, interaction_energies, log_negativity, normalized_fluctuations,
    oscillation_contrast, two_body_rdm, OscillationLabel, ScalingFit, StateRef, TimeSeries, TwoBodyRDM,
};
use crate::site::{Op3, DOWN, MID, UP};

/// Process exit codes of the binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const SOLVER: i32 = 3;
    pub const CHECK_FAILED: i32 = 4;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownInitialState(_) => exit::CONFIG,
        Error::StepUnderflow { .. }
        | Error::NonFinite { .. }
        | Error::TooManySteps { .. }
        | Error::NotFixedPoint { .. }
        | Error::TooManySites { .. }
        | Error::InvalidParameter(_)
        | Error::InvalidLattice(_)
        | Error::DimensionMismatch { .. }
        | Error::NotHermitian(_)
        | Error::Fit(_) => exit::SOLVER,
        _ => exit::OTHER,
    }
}

/// Global command-line options.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: usize,
    pub seed: u64,
    pub resume: bool,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), workers: 0, seed: 0, resume: false }
    }
}

fn write_summary(path: &Path, flat: Map<String, Value>, manifest: &Manifest) -> Result<()> {
    let mut doc = flat;
    doc.insert("manifest".into(), serde_json::to_value(manifest)?);
    write_atomic(path, serde_json::to_string_pretty(&Value::Object(doc))?.as_bytes())
}

fn write_series(path: &Path, ts: &TimeSeries) -> Result<()> {
    let mut buf = Vec::new();
    ts.write_csv(&mut buf)?;
    write_atomic(path, &buf)
}

fn finite_lattice(cfg: &Config) -> Result<(FiniteLattice, PairPotentials)> {
    let lat = FiniteLattice::new(cfg.lattice.nx, cfg.lattice.ny, cfg.model.lattice_constant, cfg.lattice.boundary)?;
    let l = Lattice::Finite(lat.clone());
    let c = coupling_from_chi(cfg.model.chi, cfg.model.kappa, &l)?;
    Ok((lat, pair_potentials(&l, c, cfg.model.kappa)))
}

fn td_potentials(params: &ModelParams, r_cut: f64) -> Result<PairPotentials> {
    let l = Lattice::Thermodynamic(TdLattice::new(r_cut, params.lattice_constant)?);
    let c = coupling_from_chi(params.chi, params.kappa, &l)?;
    Ok(pair_potentials(&l, c, params.kappa))
}

/// Reference site and its nearest neighbour.
fn nn_pair(lat: &FiniteLattice) -> Option<(usize, usize)> {
    if lat.len() < 2 {
        return None;
    }
    let r = lat.reference_site();
    let (x, y) = lat.coords(r);
    let j = if x + 1 < lat.nx {
        r + 1
    } else if x >= 1 {
        r - 1
    } else if y + 1 < lat.ny {
        r + lat.nx
    } else {
        r - lat.nx
    };
    Some((r, j))
}

fn negativity_of(rdm: &TwoBodyRDM) -> f64 {
    log_negativity(rdm).map(|n| n.log_negativity).unwrap_or(f64::NAN)
}

/// Outcome of a single trajectory.
#[derive(Clone, Debug)]
pub struct Trace {
    pub series: TimeSeries,
    pub summary: BTreeMap<String, f64>,
    pub label: OscillationLabel,
}

fn average(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Integrate the configured solver and collect its observables.
pub fn run_trace(cfg: &Config, seed: u64) -> Result<Trace> {
    cfg.validate()?;
    let p = &cfg.model;
    let grid = sample_grid(0.0, cfg.run.t_end, cfg.integrator.dense_output_stride);
    let init = cfg.initial_state(seed)?;
    let ic = &cfg.integrator;
    let neg = cfg.run.negativity;
    let series = match cfg.run.solver {
        SolverKind::Meanfield => {
            let mut ts = TimeSeries::new(&["n_up", "n_0", "n_down"]);
            let s0 = MFState::from_site(&init.homogeneous()?);
            evolve_mf_observed(p, &s0, &grid, ic, |t, s| {
                let m = s.to_matrix();
                ts.push(t, &[m[(UP, UP)].re, m[(MID, MID)].re, m[(DOWN, DOWN)].re]);
                Flow::Continue
            })?;
            ts
        }
        SolverKind::CumulantTd => {
            let (storage, conv) = cfg.storage();
            let solver = TdSolver::new(p, cfg.lattice.r_cut, storage, conv)?;
            let pots = td_potentials(p, cfg.lattice.r_cut)?;
            let mut ts = TimeSeries::new(&["n_up", "n_0", "n_down", "f2", "e_mf", "e_qu", "negativity_nn"]);
            let s0 = solver.initial_state(&init.homogeneous()?);
            evolve_td_observed(&solver, &s0, &grid, ic, |t, s| {
                let e = interaction_energies(StateRef::Td(s), &pots);
                let n = if neg {
                    negativity_of(&two_body_rdm(&s.mean, &s.mean, &s.block_at((1, 0)).expect("r_cut >= 1"), "(1,0)"))
                } else {
                    f64::NAN
                };
                let m = &s.mean;
                ts.push(t, &[m[(UP, UP)].re, m[(MID, MID)].re, m[(DOWN, DOWN)].re, normalized_fluctuations(StateRef::Td(s)), e.e_mf, e.e_qu, n]);
                Flow::Continue
            })?;
            ts
        }
        SolverKind::CumulantFinite => {
            let (lat, pots) = finite_lattice(cfg)?;
            let solver = FiniteSolver::from_potentials(p, &pots)?;
            let pair = nn_pair(&lat);
            let mut ts = TimeSeries::new(&["n_up", "n_0", "n_down", "f2", "e_mf", "e_qu", "negativity_nn"]);
            let s0 = CumulantStateFinite::product(&init.product(lat.len()));
            evolve_finite_observed(&solver, &s0, &grid, ic, |t, s| {
                let e = interaction_energies(StateRef::Finite(s), &pots);
                let n = match pair {
                    Some((i, j)) if neg => negativity_of(&two_body_rdm(&s.means[i], &s.means[j], &s.ordered_block(i, j), "nn")),
                    _ => f64::NAN,
                };
                let pop = |l: usize| average(&s.means.iter().map(|m| m[(l, l)].re).collect::<Vec<_>>());
                ts.push(t, &[pop(UP), pop(MID), pop(DOWN), normalized_fluctuations(StateRef::Finite(s)), e.e_mf, e.e_qu, n]);
                Flow::Continue
            })?;
            ts
        }
        SolverKind::Exact => {
            let (lat, pots) = finite_lattice(cfg)?;
            let n = lat.len();
            let u = match &pots {
                PairPotentials::Finite { u, .. } => u.clone(),
                _ => unreachable!("finite lattice"),
            };
            let spec = GeneratorSpec::new(p, n, u, Capacity::Standard)?;
            let pair = nn_pair(&lat);
            let mut ts = TimeSeries::new(&["n_up", "n_0", "n_down", "f2", "e_mf", "e_qu", "negativity_nn"]);
            evolve_exact_observed(&spec, &ManyBodyState::product(&init.product(n)), &grid, ic, |t, s| {
                let e = interaction_energies(StateRef::Exact(s), &pots);
                let neg_v = match pair {
                    Some((i, j)) if neg => {
                        // zero means: the "cumulant" argument is the full pair matrix
                        let rho = pair_matrix(s, i, j).expect("valid pair");
                        negativity_of(&two_body_rdm(&Op3::zeros(), &Op3::zeros(), &rho, "nn"))
                    }
                    _ => f64::NAN,
                };
                ts.push(t, &[average(&s.populations(UP)), average(&s.populations(MID)), average(&s.populations(DOWN)), normalized_fluctuations(StateRef::Exact(s)), e.e_mf, e.e_qu, neg_v]);
                Flow::Continue
            })?;
            ts
        }
        SolverKind::Cluster => {
            let dims = PlaquetteDims::new(cfg.cluster.cx, cfg.cluster.cy)?;
            let solver = ClusterSolver::new(p, dims, cfg.cluster_r_cut(), cfg.cluster.allow_large)?;
            let n = dims.sites();
            let names = cluster_channels(n);
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut ts = TimeSeries::new(&refs);
            evolve_cluster_observed(&solver, &ManyBodyState::product(&init.product(n)), &grid, ic, |t, s| {
                let up = s.populations(UP);
                let mut row = vec![average(&up), average(&s.populations(MID)), average(&s.populations(DOWN))];
                row.extend(up);
                ts.push(t, &row);
                Flow::Continue
            })?;
            ts
        }
    };
    finish_trace(series, cfg)
}

fn finish_trace(mut ts: TimeSeries, cfg: &Config) -> Result<Trace> {
    let n0 = ts.channel("n_0")?.to_vec();
    let nd = decays_per_atom(&ts.times, &n0, cfg.model.gamma)?;
    ts.add_channel("n_d", nd.clone())?;
    let t_end = *ts.times.last().expect("non-empty grid");
    let start = t_end - cfg.run.window;
    let n_up = ts.channel("n_up")?;
    let c = oscillation_contrast(&ts.times, n_up, start, 0.5 * cfg.run.window)?;
    let spec = fourier_spectrum(&ts.times, n_up, start, t_end)?;
    let mut summary = BTreeMap::new();
    summary.insert("delta2".into(), c.delta2);
    summary.insert("delta2_tau".into(), c.tau);
    summary.insert("delta2_converged".into(), c.converged as u8 as f64);
    summary.insert("n_up_mean".into(), c.mean);
    summary.insert("n_d_final".into(), *nd.last().expect("non-empty"));
    summary.insert("dominant_frequency".into(), spec.dominant.unwrap_or(f64::NAN));
    if let Ok(f2) = ts.channel("f2") {
        summary.insert("f2_final".into(), *f2.last().expect("non-empty"));
    }
    if let Ok(ng) = ts.channel("negativity_nn") {
        let w: Vec<f64> = ts.times.iter().zip(ng).filter(|(t, _)| **t >= start).map(|(_, v)| *v).collect();
        summary.insert("negativity_nn_min_window".into(), w.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    Ok(Trace { label: OscillationLabel::from_delta2(c.delta2), series: ts, summary })
}

fn summary_map(summary: &BTreeMap<String, f64>) -> Map<String, Value> {
    summary.iter().map(|(k, v)| (k.clone(), if v.is_finite() { json!(v) } else { Value::Null })).collect()
}

pub fn cmd_trace(cfg: &Config, opts: &RunOptions) -> Result<Trace> {
    let trace = run_trace(cfg, opts.seed)?;
    write_series(&opts.out.join("trace.csv"), &trace.series)?;
    let mut flat = summary_map(&trace.summary);
    flat.insert("solver".into(), json!(cfg.run.solver.name()));
    flat.insert("label".into(), json!(trace.label.name()));
    write_summary(&opts.out.join("summary.json"), flat, &Manifest::new("trace", cfg, opts.seed, opts.workers))?;
    Ok(trace)
}

/// Long-time δ² of `n_↑` from a thermodynamic-limit cumulant run, plus the
/// final population.
pub fn cumulant_td_delta2(p: &ModelParams, cfg: &Config, r_cut: f64, t_end: f64, window: f64, seed: u64) -> Result<(f64, f64)> {
    let (storage, conv) = cfg.storage();
    let solver = TdSolver::new(p, r_cut, storage, conv)?;
    let s0 = solver.initial_state(&cfg.initial_state(seed)?.homogeneous()?);
    let grid = sample_grid(0.0, t_end, cfg.integrator.dense_output_stride);
    let (mut times, mut n_up) = (Vec::new(), Vec::new());
    let start = t_end - window;
    evolve_td_observed(&solver, &s0, &grid, &cfg.integrator, |t, s| {
        if t >= start - 1e-9 {
            times.push(t);
            n_up.push(s.n_up());
        }
        Flow::Continue
    })?;
    let c = oscillation_contrast(&times, &n_up, times[0], 0.5 * window)?;
    Ok((c.delta2, *n_up.last().expect("non-empty window")))
}

/// Phase label of a scan cell.
pub fn phase_of(rec: &CellRecord) -> &'static str {
    let cum = rec.values.get("cum_delta2").copied();
    let mf = rec.values.get("mf_delta2").copied();
    match (rec.label.as_str(), cum) {
        (_, None) => "unknown",
        ("hopf_unstable", Some(c)) if c > 1e-4 && mf.is_none_or(|m| m > 1e-4) => "qctc_i",
        ("stable", Some(c)) if c > 1e-4 && mf.is_none_or(|m| m < 1e-8) => "qctc_ii",
        ("hopf_unstable", Some(c)) if c < 1e-8 => "damped",
        (_, Some(c)) if c < 1e-8 => "stationary",
        (_, Some(c)) if c > 1e-4 => "oscillatory",
        _ => "marginal",
    }
}

pub fn scan_cell(cfg: &Config, seed: u64, delta: f64, omega: f64) -> Result<CellOutput> {
    let p = ModelParams { delta, omega_lower: omega, ..cfg.model.clone() };
    let s = &cfg.scan;
    let opts = MfScanOptions {
        seeds: s.mf_seeds,
        seed,
        multistart: (s.mf_starts > 0).then_some(MultistartConfig {
            starts: s.mf_starts,
            seed,
            t_end: s.t_end,
            window: s.window,
            stride: cfg.integrator.dense_output_stride,
        }),
        integrator: cfg.integrator.clone(),
    };
    let mut out = mf_cell(&p, &opts)?;
    if s.cumulant {
        let (d2, n_up) = cumulant_td_delta2(&p, cfg, cfg.scan_r_cut(), s.t_end, s.window, seed)?;
        out.values.insert("cum_delta2".into(), d2);
        out.values.insert("cum_n_up".into(), n_up);
        if OscillationLabel::from_delta2(d2) == OscillationLabel::Marginal {
            out.status = Some(CellStatus::Marginal);
        }
    }
    Ok(out)
}

pub fn run_scan(cfg: &Config, opts: &RunOptions, journal: Option<PathBuf>) -> Result<ScanGrid> {
    cfg.validate()?;
    let grid = cfg.scan.grid()?;
    let sweep_opts = SweepOptions { workers: opts.workers, journal, resume: opts.resume };
    sweep(&grid, &sweep_opts, |_, delta, omega| scan_cell(cfg, opts.seed, delta, omega))
}

fn scan_csv(g: &ScanGrid) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let cols = ["mf_max_re", "mf_leading_im", "mf_fixed_points", "mf_delta2", "cum_delta2", "cum_n_up"];
    let mut header = vec!["delta", "omega", "status", "mf_class"];
    header.extend(cols);
    header.push("phase");
    w.write_record(&header).map_err(csv_err)?;
    for c in &g.cells {
        let mut row = vec![format!("{}", c.x), format!("{}", c.y), format!("{:?}", c.status).to_lowercase(), c.label.clone()];
        row.extend(cols.iter().map(|k| c.values.get(*k).map(|v| format!("{v:.6e}")).unwrap_or_default()));
        row.push(phase_of(c).into());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Series(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Series(e.to_string())
}

pub fn cmd_scan(cfg: &Config, opts: &RunOptions) -> Result<ScanGrid> {
    std::fs::create_dir_all(&opts.out)?;
    let g = run_scan(cfg, opts, Some(opts.out.join("scan.journal.jsonl")))?;
    write_atomic(&opts.out.join("scan.csv"), &scan_csv(&g)?)?;
    g.write_json_atomic(&opts.out.join("scan.json"))?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &g.cells {
        *counts.entry(phase_of(c)).or_default() += 1;
    }
    let mut flat = Map::new();
    flat.insert("cells".into(), json!(g.cells.len()));
    flat.insert("failed".into(), json!(g.cells.iter().filter(|c| c.status == CellStatus::Failed).count()));
    for (k, v) in counts {
        flat.insert(format!("phase_{k}"), json!(v));
    }
    write_summary(&opts.out.join("summary.json"), flat, &Manifest::new("scan", cfg, opts.seed, opts.workers))?;
    Ok(g)
}

/// Steady-state fluctuations and energy ratio of one lattice size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeResult {
    pub side: usize,
    pub n: usize,
    pub f2_inf: f64,
    pub f2_previous_window: f64,
    pub converged: bool,
    /// `E_qu/E_mf` averaged over the final window together with its range.
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

/// Periodic lattices use the translation-invariant torus solver (one block
/// per displacement instead of per pair); open ones the general solver.
pub fn run_size(cfg: &Config, side: usize, seed: u64) -> Result<SizeResult> {
    let mut c = cfg.clone();
    c.lattice.nx = side;
    c.lattice.ny = side;
    let (lat, pots) = finite_lattice(&c)?;
    let sc = &cfg.scaling;
    let grid = sample_grid(0.0, sc.t_end, cfg.integrator.dense_output_stride);
    let (mut times, mut f2, mut ratio) = (Vec::new(), Vec::new(), Vec::new());
    let start = sc.t_end - 2.0 * sc.window;
    let init = c.initial_state(seed)?;
    if lat.boundary == Boundary::Periodic {
        let (storage, conv) = cfg.storage();
        let solver = TdSolver::torus(&c.model, side, storage, conv)?;
        let pots = PairPotentials::Thermodynamic {
            entries: solver.layout.ball.iter().cloned().zip(solver.u_ball.iter().cloned()).collect(),
        };
        evolve_td_observed(&solver, &solver.initial_state(&init.homogeneous()?), &grid, &cfg.integrator, |t, s| {
            if t >= start - 1e-9 {
                times.push(t);
                f2.push(normalized_fluctuations(StateRef::Td(s)));
                ratio.push(interaction_energies(StateRef::Td(s), &pots).ratio.unwrap_or(f64::NAN));
            }
            Flow::Continue
        })?;
    } else {
        let solver = FiniteSolver::from_potentials(&c.model, &pots)?;
        let s0 = CumulantStateFinite::product(&init.product(lat.len()));
        evolve_finite_observed(&solver, &s0, &grid, &cfg.integrator, |t, s| {
            if t >= start - 1e-9 {
                times.push(t);
                f2.push(normalized_fluctuations(StateRef::Finite(s)));
                ratio.push(interaction_energies(StateRef::Finite(s), &pots).ratio.unwrap_or(f64::NAN));
            }
            Flow::Continue
        })?;
    }
    let mid = sc.t_end - sc.window;
    let split = times.iter().position(|&t| t >= mid - 1e-9).unwrap_or(0);
    let (prev, last) = (average(&f2[..=split.min(f2.len() - 1)]), average(&f2[split..]));
    let tail = &ratio[split..];
    Ok(SizeResult {
        side,
        n: lat.len(),
        f2_inf: last,
        f2_previous_window: prev,
        converged: (last - prev).abs() <= sc.convergence_tol * last.abs(),
        ratio_mean: average(tail),
        ratio_min: tail.iter().cloned().fold(f64::INFINITY, f64::min),
        ratio_max: tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub sizes: Vec<SizeResult>,
    pub failed: Vec<(usize, String)>,
    pub fit: Option<ScalingFit>,
    pub fit_error: Option<String>,
}

/// Finite-lattice runs over all configured sizes, executed as a resumable
/// sweep (x = side length).
pub fn run_scaling(cfg: &Config, opts: &RunOptions, journal: Option<PathBuf>) -> Result<ScalingReport> {
    cfg.validate()?;
    let grid = GridSpec {
        x: Axis::new("side", cfg.scaling.sizes.iter().map(|&s| s as f64).collect()),
        y: Axis::new("kappa", vec![cfg.model.kappa as f64]),
    };
    let sweep_opts = SweepOptions { workers: opts.workers, journal, resume: opts.resume };
    let g = sweep(&grid, &sweep_opts, |_, side, _| {
        let r = run_size(cfg, side as usize, opts.seed)?;
        let mut values = BTreeMap::new();
        values.insert("n".into(), r.n as f64);
        values.insert("f2_inf".into(), r.f2_inf);
        values.insert("f2_previous_window".into(), r.f2_previous_window);
        values.insert("ratio_mean".into(), r.ratio_mean);
        values.insert("ratio_min".into(), r.ratio_min);
        values.insert("ratio_max".into(), r.ratio_max);
        let label = if r.converged { "converged" } else { "unconverged" };
        Ok(CellOutput { status: Some(CellStatus::Ok), label: label.into(), values })
    })?;
    let mut sizes = Vec::new();
    let mut failed = Vec::new();
    for c in &g.cells {
        if c.status == CellStatus::Failed {
            failed.push((c.x as usize, c.error.clone().unwrap_or_default()));
            continue;
        }
        let v = |k: &str| c.values.get(k).copied().unwrap_or(f64::NAN);
        sizes.push(SizeResult {
            side: c.x as usize,
            n: v("n") as usize,
            f2_inf: v("f2_inf"),
            f2_previous_window: v("f2_previous_window"),
            converged: c.label == "converged",
            ratio_mean: v("ratio_mean"),
            ratio_min: v("ratio_min"),
            ratio_max: v("ratio_max"),
        });
    }
    let points: Vec<(f64, f64)> = sizes.iter().filter(|s| s.converged).map(|s| (s.n as f64, s.f2_inf)).collect();
    let (fit, fit_error) = if points.is_empty() {
        (None, Some("no size converged; fit refused".to_string()))
    } else {
        match fit_scaling(&points) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    Ok(ScalingReport { sizes, failed, fit, fit_error })
}

pub fn cmd_scaling(cfg: &Config, opts: &RunOptions) -> Result<ScalingReport> {
    std::fs::create_dir_all(&opts.out)?;
    let rep = run_scaling(cfg, opts, Some(opts.out.join("scaling.journal.jsonl")))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["side", "n", "f2_inf", "f2_previous_window", "converged", "ratio_mean", "ratio_min", "ratio_max"])
        .map_err(csv_err)?;
    for s in &rep.sizes {
        w.serialize((s.side, s.n, s.f2_inf, s.f2_previous_window, s.converged, s.ratio_mean, s.ratio_min, s.ratio_max))
            .map_err(csv_err)?;
    }
    write_atomic(&opts.out.join("scaling.csv"), &w.into_inner().map_err(|e| Error::Series(e.to_string()))?)?;
    let mut flat = Map::new();
    if let Some(f) = &rep.fit {
        flat.insert("exponent".into(), json!(f.exponent));
        flat.insert("prefactor".into(), json!(f.prefactor));
        flat.insert("power_rms".into(), json!(f.power_rms));
        flat.insert("linear_rms".into(), json!(f.linear_rms));
        flat.insert("linear_slope".into(), json!(f.slope));
    }
    flat.insert("fit_error".into(), json!(rep.fit_error));
    flat.insert("unconverged".into(), json!(rep.sizes.iter().filter(|s| !s.converged).map(|s| s.side).collect::<Vec<_>>()));
    flat.insert("failed".into(), json!(rep.failed));
    write_summary(&opts.out.join("summary.json"), flat, &Manifest::new("scaling", cfg, opts.seed, opts.workers))?;
    if rep.fit.is_none() {
        return Err(Error::Fit(rep.fit_error.clone().unwrap_or_default()));
    }
    Ok(rep)
}

/// Both checks that no mean-field limit cycle hides behind the oscillation.
#[derive(Clone, Debug, Serialize)]
pub struct FalsifyReport {
    pub mf_delta2: Vec<f64>,
    pub mf_stationary: bool,
    /// δ² of the uninterrupted cumulant run over the final window.
    pub cumulant_delta2: f64,
    /// δ² after the cumulants were dropped and mean-field took over.
    pub post_drop_delta2: f64,
    pub post_drop_stationary: bool,
    pub series: TimeSeries,
}

impl FalsifyReport {
    pub fn passed(&self) -> bool {
        self.mf_stationary && self.post_drop_stationary
    }
}

pub fn run_falsify(cfg: &Config, seed: u64) -> Result<FalsifyReport> {
    cfg.validate()?;
    let f = &cfg.falsify;
    let p = &cfg.model;
    let ms = MultistartConfig { starts: f.mf_starts, seed, t_end: f.t_end, window: f.window, stride: cfg.integrator.dense_output_stride };
    let mf_delta2 = multistart_delta2(p, &ms, &cfg.integrator)?;

    let (storage, conv) = cfg.storage();
    let solver = TdSolver::new(p, cfg.lattice.r_cut, storage, conv)?;
    let grid = sample_grid(0.0, f.t_end, cfg.integrator.dense_output_stride);
    let s0 = solver.initial_state(&cfg.initial_state(seed)?.homogeneous()?);
    let mut ts = TimeSeries::new(&["n_up_cumulant"]);
    let mut at_drop = if f.drop_time == 0.0 { Some(s0.clone()) } else { None };
    evolve_td_observed(&solver, &s0, &grid, &cfg.integrator, |t, s| {
        ts.push(t, &[s.n_up()]);
        if at_drop.is_none() && t >= f.drop_time - 1e-9 {
            at_drop = Some(s.drop_cumulants());
        }
        Flow::Continue
    })?;
    let dropped = at_drop.ok_or_else(|| Error::InvalidParameter("drop time beyond the run".into()))?;
    let t_drop = ts.times.iter().copied().find(|&t| t >= f.drop_time - 1e-9).unwrap_or(f.drop_time);
    let tail: Vec<f64> = ts.times.iter().copied().filter(|&t| t >= t_drop - 1e-9).collect();
    let mut after = Vec::with_capacity(tail.len());
    evolve_mf_observed(p, &MFState::from_site(&crate::model::SiteState(dropped.mean)), &tail, &cfg.integrator, |_, s| {
        after.push(s.n_up());
        Flow::Continue
    })?;
    let mut dropped_col = vec![f64::NAN; ts.len() - after.len()];
    dropped_col.extend(&after);
    ts.add_channel("n_up_dropped", dropped_col)?;

    let start = f.t_end - f.window;
    let cum = oscillation_contrast(&ts.times, ts.channel("n_up_cumulant")?, start, 0.5 * f.window)?;
    let post = oscillation_contrast(&tail, &after, start, 0.5 * f.window)?;
    Ok(FalsifyReport {
        mf_stationary: mf_delta2.iter().all(|&d| d < 1e-8),
        mf_delta2,
        cumulant_delta2: cum.delta2,
        post_drop_delta2: post.delta2,
        post_drop_stationary: post.delta2 < 1e-8,
        series: ts,
    })
}

pub fn cmd_falsify(cfg: &Config, opts: &RunOptions) -> Result<FalsifyReport> {
    let rep = run_falsify(cfg, opts.seed)?;
    write_series(&opts.out.join("falsify.csv"), &rep.series)?;
    let verdict = |b: bool| if b { "PASS" } else { "FAIL" };
    let mut flat = Map::new();
    flat.insert("mf_random_starts".into(), json!(verdict(rep.mf_stationary)));
    flat.insert("mf_delta2".into(), json!(rep.mf_delta2));
    flat.insert("cumulant_drop".into(), json!(verdict(rep.post_drop_stationary)));
    flat.insert("cumulant_delta2".into(), json!(rep.cumulant_delta2));
    flat.insert("post_drop_delta2".into(), json!(rep.post_drop_delta2));
    flat.insert("verdict".into(), json!(verdict(rep.passed())));
    write_summary(&opts.out.join("summary.json"), flat, &Manifest::new("falsify", cfg, opts.seed, opts.workers))?;
    Ok(rep)
}

/// Spectrum of one channel of a stored trace.
pub fn run_spectrum(cfg: &Config, input: &Path) -> Result<crate::observables::Spectrum> {
    let ts = TimeSeries::read_csv(BufReader::new(File::open(input)?))?;
    let values = ts.channel(&cfg.spectrum.channel)?;
    let (first, last) = (ts.times[0], *ts.times.last().expect("validated"));
    let t1 = cfg.spectrum.t_stop.unwrap_or(last);
    let t0 = cfg.spectrum.t_start.unwrap_or_else(|| (t1 - cfg.run.window).max(first));
    fourier_spectrum(&ts.times, values, t0, t1)
}

pub fn cmd_spectrum(cfg: &Config, opts: &RunOptions, config_dir: &Path) -> Result<crate::observables::Spectrum> {
    let input = {
        let p = Path::new(&cfg.spectrum.input);
        if p.is_absolute() { p.to_path_buf() } else { config_dir.join(p) }
    };
    let s = run_spectrum(cfg, &input)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(Vec::new()));
    w.write_record(["angular_frequency", "amplitude"]).map_err(csv_err)?;
    for (f, a) in s.frequencies.iter().zip(&s.amplitudes) {
        w.write_record([format!("{f:.12e}"), format!("{a:.12e}")]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Series(e.to_string()))?.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(&opts.out.join("spectrum.csv"), &bytes)?;
    let mut flat = Map::new();
    flat.insert("input".into(), json!(input.display().to_string()));
    flat.insert("channel".into(), json!(cfg.spectrum.channel));
    flat.insert("dominant_frequency".into(), json!(s.dominant));
    flat.insert("short_window".into(), json!(s.short_window));
    write_summary(&opts.out.join("summary.json"), flat, &Manifest::new("spectrum", cfg, opts.seed, opts.workers))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::IntegratorConfig;

    fn base() -> Config {
        let mut c = Config::new(ModelParams::new(-6.0, 4.0, 6.0, -18.0));
        c.run.t_end = 20.0;
        c.run.window = 10.0;
        c.lattice.r_cut = 2.0;
        c
    }

    #[test]
    fn finite_cumulant_matches_exact_for_two_sites() {
        let mut c = base();
        c.run.initial_state = "random_product".into();
        c.integrator = IntegratorConfig::with_tolerances(1e-10, 1e-12);
        c.run.solver = SolverKind::Exact;
        let ex = run_trace(&c, 3).unwrap();
        c.run.solver = SolverKind::CumulantFinite;
        let cu = run_trace(&c, 3).unwrap();
        for name in ["n_up", "n_0", "f2", "e_qu", "negativity_nn"] {
            let (a, b) = (ex.series.channel(name).unwrap(), cu.series.channel(name).unwrap());
            let err = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn every_solver_produces_a_summary() {
        for solver in [SolverKind::Meanfield, SolverKind::CumulantTd, SolverKind::CumulantFinite, SolverKind::Exact, SolverKind::Cluster] {
            let mut c = base();
            c.run.solver = solver;
            c.cluster.cx = 1;
            c.cluster.cy = 2;
            let t = run_trace(&c, 0).unwrap();
            assert!(t.summary["delta2"].is_finite());
            let nd = t.series.channel("n_d").unwrap();
            assert!(nd.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn drop_at_time_zero_is_plain_mean_field() {
        let mut c = base();
        c.falsify.drop_time = 0.0;
        c.falsify.t_end = 20.0;
        c.falsify.window = 10.0;
        c.falsify.mf_starts = 1;
        let rep = run_falsify(&c, 0).unwrap();
        c.run.solver = SolverKind::Meanfield;
        let mf = run_trace(&c, 0).unwrap();
        let a = rep.series.channel("n_up_dropped").unwrap();
        let b = mf.series.channel("n_up").unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn phases_follow_the_thresholds() {
        let rec = |label: &str, mf: f64, cum: f64| CellRecord {
            index: 0,
            ix: 0,
            iy: 0,
            x: 0.0,
            y: 0.0,
            status: CellStatus::Ok,
            label: label.into(),
            values: [("mf_delta2".to_string(), mf), ("cum_delta2".to_string(), cum)].into_iter().collect(),
            error: None,
        };
        assert_eq!(phase_of(&rec("hopf_unstable", 1e-2, 1e-3)), "qctc_i");
        assert_eq!(phase_of(&rec("stable", 1e-12, 1e-3)), "qctc_ii");
        assert_eq!(phase_of(&rec("stable", 1e-3, 1e-3)), "oscillatory");
        assert_eq!(phase_of(&rec("hopf_unstable", 1e-2, 1e-12)), "damped");
        assert_eq!(phase_of(&rec("stable", 1e-12, 1e-12)), "stationary");
        assert_eq!(phase_of(&rec("stable", 1e-12, 1e-6)), "marginal");
    }

    #[test]
    fn periodic_sizes_match_the_per_pair_solver() {
        let mut c = base();
        c.lattice.boundary = Boundary::Periodic;
        c.scaling.t_end = 10.0;
        c.scaling.window = 2.5;
        c.run.solver = SolverKind::CumulantFinite;
        c.run.t_end = 10.0;
        c.run.window = 5.0;
        for side in [3, 4] {
            let torus = run_size(&c, side, 0).unwrap();
            c.lattice.nx = side;
            c.lattice.ny = side;
            let t = run_trace(&c, 0).unwrap().series;
            let tail = |name: &str| -> Vec<f64> {
                t.times.iter().zip(t.channel(name).unwrap()).filter(|(x, _)| **x >= 7.5 - 1e-9).map(|(_, v)| *v).collect()
            };
            let (e_mf, e_qu) = (tail("e_mf"), tail("e_qu"));
            let ratio: Vec<f64> = e_qu.iter().zip(&e_mf).map(|(q, m)| q / m).collect();
            assert_eq!(torus.n, side * side);
            assert!((torus.f2_inf - average(&tail("f2"))).abs() < 1e-7, "{side}: {} vs {}", torus.f2_inf, average(&tail("f2")));
            assert!((torus.ratio_mean - average(&ratio)).abs() < 1e-7);
        }
    }
}
