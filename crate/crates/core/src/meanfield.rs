//! Thermodynamic-limit mean-field dynamics and linear stability analysis.
//!
//! Every site sees the interaction only through `χ⟨n_↑⟩ n_↑`. A single-site
//! density matrix is parameterized by eight real numbers:
//! `(n_↓, n_0, Re ρ_↓0, Im ρ_↓0, Re ρ_↓↑, Im ρ_↓↑, Re ρ_0↑, Im ρ_0↑)`,
//! where `ρ_αβ = ⟨α|ρ|β⟩` and `n_↑ = 1 − n_↓ − n_0`.

use std::collections::BTreeMap;

use nalgebra::{SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    integrate_observed, sample_grid, sweep, CellOutput, CellStatus, Flow, GridSpec, IntegratorConfig, OdeSystem,
    ScanGrid, SweepOptions,
};
use crate::error::{Error, Result};
use crate::model::{ModelParams, SiteState};
use crate::observables::{oscillation_contrast, OscillationLabel};
use crate::site::{local_generator, LocalTerms, Op3, C64, DOWN, MID, UP};

pub const MF_DIM: usize = 8;
pub type Vec8 = SVector<f64, MF_DIM>;
pub type Mat8 = SMatrix<f64, MF_DIM, MF_DIM>;

/// Residual below which a point counts as a fixed point.
pub const FIXED_POINT_TOL: f64 = 1e-11;
/// Fixed points closer than this are merged.
pub const MERGE_TOL: f64 = 1e-7;
pub const NEWTON_MAX_ITER: usize = 100;
pub const RELAX_TIME: f64 = 200.0;
/// Slow dark-state manifolds can need many relaxation rounds before Newton
/// converges.
pub const RELAX_ROUNDS: usize = 20;
/// Real-part threshold separating numerical zero from a genuine crossing.
pub const RE_TOL: f64 = 1e-9;
pub const IM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MFState(pub [f64; MF_DIM]);

const COHERENCES: [(usize, usize); 3] = [(DOWN, MID), (DOWN, UP), (MID, UP)];

impl MFState {
    pub fn from_site(s: &SiteState) -> Self {
        let m = s.matrix();
        let mut x = [0.0; MF_DIM];
        x[0] = m[(DOWN, DOWN)].re;
        x[1] = m[(MID, MID)].re;
        for (k, &(a, b)) in COHERENCES.iter().enumerate() {
            x[2 + 2 * k] = m[(a, b)].re;
            x[3 + 2 * k] = m[(a, b)].im;
        }
        MFState(x)
    }

    /// Trace-1 Hermitian matrix; positivity is not implied.
    pub fn to_matrix(&self) -> Op3 {
        let x = &self.0;
        let mut m = Op3::zeros();
        m[(DOWN, DOWN)] = C64::new(x[0], 0.0);
        m[(MID, MID)] = C64::new(x[1], 0.0);
        m[(UP, UP)] = C64::new(1.0 - x[0] - x[1], 0.0);
        for (k, &(a, b)) in COHERENCES.iter().enumerate() {
            let z = C64::new(x[2 + 2 * k], x[3 + 2 * k]);
            m[(a, b)] = z;
            m[(b, a)] = z.conj();
        }
        m
    }

    pub fn to_site(&self) -> SiteState {
        SiteState(self.to_matrix())
    }

    /// Derivative coordinates of a traceless Hermitian matrix.
    fn from_derivative(m: &Op3) -> Self {
        let mut x = [0.0; MF_DIM];
        x[0] = m[(DOWN, DOWN)].re;
        x[1] = m[(MID, MID)].re;
        for (k, &(a, b)) in COHERENCES.iter().enumerate() {
            x[2 + 2 * k] = m[(a, b)].re;
            x[3 + 2 * k] = m[(a, b)].im;
        }
        MFState(x)
    }

    pub fn n_up(&self) -> f64 {
        1.0 - self.0[0] - self.0[1]
    }

    pub fn as_vector(&self) -> Vec8 {
        Vec8::from_column_slice(&self.0)
    }

    pub fn from_vector(v: &Vec8) -> Self {
        let mut x = [0.0; MF_DIM];
        x.copy_from_slice(v.as_slice());
        MFState(x)
    }
}

/// `L(ρ) − iχ⟨n_↑⟩[n_↑, ρ]` on a full 3×3 matrix.
pub fn mf_rhs_matrix(rho: &Op3, params: &ModelParams) -> Op3 {
    let p = rho[(UP, UP)].re;
    local_generator(&LocalTerms::from(params), rho, params.chi * p)
}

pub fn mf_rhs(state: &MFState, params: &ModelParams) -> MFState {
    MFState::from_derivative(&mf_rhs_matrix(&state.to_matrix(), params))
}

fn residual(state: &MFState, params: &ModelParams) -> f64 {
    mf_rhs(state, params).0.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct MfSystem<'a> {
    params: &'a ModelParams,
}

impl OdeSystem for MfSystem<'_> {
    fn dim(&self) -> usize {
        MF_DIM
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let mut x = [0.0; MF_DIM];
        x.copy_from_slice(y);
        dy.copy_from_slice(&mf_rhs(&MFState(x), self.params).0);
    }
}

/// Integrate the mean-field equations, sampling every grid point.
pub fn evolve_mf_observed<F>(
    params: &ModelParams,
    s0: &MFState,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    mut observer: F,
) -> Result<MFState>
where
    F: FnMut(f64, &MFState) -> Flow,
{
    params.validate()?;
    let sys = MfSystem { params };
    let (y, _) = integrate_observed(&sys, &s0.0, t_grid, cfg, |t, y| {
        let mut x = [0.0; MF_DIM];
        x.copy_from_slice(y);
        observer(t, &MFState(x))
    })?;
    let mut x = [0.0; MF_DIM];
    x.copy_from_slice(&y);
    Ok(MFState(x))
}

/// Sampled `n_↑(t)` and final state.
pub fn evolve_mf(
    params: &ModelParams,
    s0: &MFState,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<(Vec<MFState>, MFState)> {
    let mut out = Vec::with_capacity(t_grid.len());
    let last = evolve_mf_observed(params, s0, t_grid, cfg, |_, s| {
        out.push(*s);
        Flow::Continue
    })?;
    Ok((out, last))
}

/// Central finite-difference Jacobian with Richardson extrapolation
/// between steps `h` and `h/2`; `h_i = rel_step · max(|x_i|, 1)`.
pub fn fd_jacobian<F>(f: F, x: &Vec8, rel_step: f64) -> (Mat8, f64)
where
    F: Fn(&Vec8) -> Vec8,
{
    let central = |scale: f64| {
        let mut j = Mat8::zeros();
        for i in 0..MF_DIM {
            let h = rel_step * scale * x[i].abs().max(1.0);
            let mut xp = *x;
            let mut xm = *x;
            xp[i] += h;
            xm[i] -= h;
            let col = (f(&xp) - f(&xm)) / (xp[i] - xm[i]);
            j.set_column(i, &col);
        }
        j
    };
    let coarse = central(1.0);
    let fine = central(0.5);
    let rich = (fine * 4.0 - coarse) / 3.0;
    let spread = (rich - coarse).amax();
    (rich, spread)
}

/// Jacobian of `mf_rhs` at a fixed point.
pub fn jacobian_at(params: &ModelParams, point: &MFState) -> Result<Mat8> {
    let r = residual(point, params);
    if r.is_nan() || r >= 1e-8 {
        return Err(Error::NotFixedPoint { residual: r });
    }
    Ok(jacobian_unchecked(params, point))
}

fn jacobian_unchecked(params: &ModelParams, point: &MFState) -> Mat8 {
    let f = |v: &Vec8| mf_rhs(&MFState::from_vector(v), params).as_vector();
    fd_jacobian(f, &point.as_vector(), 1e-6).0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Stable,
    HopfUnstable,
    OtherUnstable,
    /// Leading real part within the numerical-zero band.
    Marginal,
}

impl Classification {
    pub fn name(self) -> &'static str {
        match self {
            Classification::Stable => "stable",
            Classification::HopfUnstable => "hopf_unstable",
            Classification::OtherUnstable => "other_unstable",
            Classification::Marginal => "marginal",
        }
    }
}

pub fn classify_fixed_point(eigenvalues: &[C64]) -> Classification {
    let max_re = eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if max_re < -RE_TOL {
        return Classification::Stable;
    }
    if max_re <= RE_TOL {
        return Classification::Marginal;
    }
    // the right-most unstable eigenvalues: those sharing the largest real part
    let leading: Vec<&C64> = eigenvalues
        .iter()
        .filter(|z| z.re > RE_TOL && max_re - z.re <= 1e-7 * max_re.abs().max(1.0))
        .collect();
    let pair = leading.len() == 2 && leading.iter().all(|z| z.im.abs() > IM_TOL) && leading[0].im * leading[1].im < 0.0;
    if pair {
        Classification::HopfUnstable
    } else {
        Classification::OtherUnstable
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub fixed_point: MFState,
    pub eigenvalues: Vec<C64>,
    pub classification: Classification,
}

impl StabilityReport {
    pub fn max_re(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `|Im λ|` of the eigenvalue with the largest real part.
    pub fn leading_im(&self) -> f64 {
        self.eigenvalues
            .iter()
            .max_by(|a, b| a.re.total_cmp(&b.re).then(a.im.abs().total_cmp(&b.im.abs())))
            .map(|z| z.im.abs())
            .unwrap_or(0.0)
    }
}

pub fn stability_report(params: &ModelParams, point: &MFState) -> Result<StabilityReport> {
    let j = jacobian_at(params, point)?;
    let mut eigenvalues: Vec<C64> = j.complex_eigenvalues().iter().cloned().collect();
    eigenvalues.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    let classification = classify_fixed_point(&eigenvalues);
    Ok(StabilityReport { fixed_point: *point, eigenvalues, classification })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FixedPointSearch {
    pub points: Vec<MFState>,
    pub warnings: Vec<String>,
}

/// `all_down`, `all_zero` and `n_random` seeded random states.
pub fn default_seeds(n_random: usize, seed: u64) -> Vec<MFState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![MFState::from_site(&SiteState::all_down()), MFState::from_site(&SiteState::all_zero())];
    out.extend((0..n_random).map(|_| MFState::from_site(&SiteState::random(&mut rng))));
    out
}

fn newton(params: &ModelParams, start: &MFState) -> std::result::Result<MFState, String> {
    let mut x = start.as_vector();
    let f = |v: &Vec8| mf_rhs(&MFState::from_vector(v), params).as_vector();
    let mut fx = f(&x);
    for _ in 0..NEWTON_MAX_ITER {
        let norm = fx.amax();
        if norm < FIXED_POINT_TOL {
            return Ok(MFState::from_vector(&x));
        }
        let j = fd_jacobian(f, &x, 1e-6).0;
        let step = match j.lu().solve(&fx) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => return Err("singular Jacobian".into()),
        };
        let mut lambda = 1.0;
        loop {
            let trial = x - step * lambda;
            let ft = f(&trial);
            if ft.amax() < norm || lambda < 1e-4 {
                x = trial;
                fx = ft;
                break;
            }
            lambda *= 0.5;
        }
    }
    if fx.amax() < FIXED_POINT_TOL {
        Ok(MFState::from_vector(&x))
    } else {
        Err(format!("Newton did not converge in {NEWTON_MAX_ITER} iterations (residual {:.3e})", fx.amax()))
    }
}

fn is_physical(s: &MFState) -> bool {
    s.to_matrix().symmetric_eigenvalues().iter().all(|&e| e > -1e-7 && e < 1.0 + 1e-7)
}

/// Relax every seed for `200/γ`, then polish with damped Newton. The raw
/// seed is tried as a Newton start as well, so unstable points are found
/// even when the relaxed trajectory sits on a limit cycle. Failing seeds keep
/// relaxing in further rounds.
pub fn find_fixed_points(params: &ModelParams, seeds: &[MFState], cfg: &IntegratorConfig) -> Result<FixedPointSearch> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("at least one seed is required".into()));
    }
    params.validate()?;
    let mut out = FixedPointSearch::default();
    for (k, seed) in seeds.iter().enumerate() {
        let mut found = None;
        let mut last_err = String::new();
        let mut try_start = |start: &MFState| match newton(params, start) {
            Ok(p) if is_physical(&p) => Some(p),
            Ok(_) => {
                last_err = "converged to an unphysical point".into();
                None
            }
            Err(e) => {
                last_err = e;
                None
            }
        };
        let mut relaxed = *seed;
        for round in 0..RELAX_ROUNDS {
            relaxed = evolve_mf_observed(params, &relaxed, &[0.0, RELAX_TIME], cfg, |_, _| Flow::Continue)?;
            found = try_start(&relaxed);
            if found.is_none() && round == 0 {
                found = try_start(seed);
            }
            if found.is_some() {
                break;
            }
        }
        match found {
            Some(p) => {
                let dup = out
                    .points
                    .iter()
                    .any(|q| q.0.iter().zip(&p.0).all(|(a, b)| (a - b).abs() < MERGE_TOL));
                if !dup {
                    out.points.push(p);
                }
            }
            None => out.warnings.push(format!("seed {k} dropped: {last_err}")),
        }
    }
    Ok(out)
}

/// Result of the mean-field analysis at one parameter point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointAnalysis {
    pub reports: Vec<StabilityReport>,
    pub classification: Classification,
    pub warnings: Vec<String>,
}

impl PointAnalysis {
    /// The report that decided the point's classification.
    pub fn representative(&self) -> Option<&StabilityReport> {
        self.reports.iter().find(|r| r.classification == self.classification)
    }
}

/// A point is stable if any fixed point is stable, otherwise Hopf if any
/// fixed point is Hopf unstable, then marginal, then other.
pub fn combine(classes: &[Classification]) -> Option<Classification> {
    [
        Classification::Stable,
        Classification::HopfUnstable,
        Classification::Marginal,
        Classification::OtherUnstable,
    ]
    .into_iter()
    .find(|c| classes.contains(c))
}

pub fn analyze_point(params: &ModelParams, seeds: &[MFState], cfg: &IntegratorConfig) -> Result<PointAnalysis> {
    let search = find_fixed_points(params, seeds, cfg)?;
    let mut warnings = search.warnings;
    let mut reports = Vec::with_capacity(search.points.len());
    for p in &search.points {
        match stability_report(params, p) {
            Ok(r) => reports.push(r),
            Err(e) => warnings.push(e.to_string()),
        }
    }
    let classes: Vec<Classification> = reports.iter().map(|r| r.classification).collect();
    let classification = combine(&classes).ok_or_else(|| Error::NotFixedPoint { residual: f64::NAN })?;
    Ok(PointAnalysis { reports, classification, warnings })
}

/// Long-time mean-field δ² from random initial conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultistartConfig {
    pub starts: usize,
    pub seed: u64,
    pub t_end: f64,
    pub window: f64,
    pub stride: f64,
}

impl Default for MultistartConfig {
    fn default() -> Self {
        Self { starts: 3, seed: 0, t_end: 400.0, window: 100.0, stride: 0.05 }
    }
}

/// δ² of `n_↑` over `[t_end − window, t_end]` for each random start. The
/// doubling protocol starts from `window/2`.
pub fn multistart_delta2(params: &ModelParams, ms: &MultistartConfig, cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(ms.seed);
    let t0 = ms.t_end - ms.window;
    let grid = sample_grid(0.0, ms.t_end, ms.stride);
    let mut out = Vec::with_capacity(ms.starts);
    for _ in 0..ms.starts {
        let s0 = MFState::from_site(&SiteState::random(&mut rng));
        let mut times = Vec::new();
        let mut n_up = Vec::new();
        evolve_mf_observed(params, &s0, &grid, cfg, |t, s| {
            if t >= t0 - 1e-12 {
                times.push(t);
                n_up.push(s.n_up());
            }
            Flow::Continue
        })?;
        out.push(oscillation_contrast(&times, &n_up, times[0], 0.5 * ms.window)?.delta2);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfScanOptions {
    pub seeds: usize,
    pub seed: u64,
    /// Also record the multistart δ² per cell.
    pub multistart: Option<MultistartConfig>,
    pub integrator: IntegratorConfig,
}

impl Default for MfScanOptions {
    fn default() -> Self {
        Self { seeds: 8, seed: 0, multistart: None, integrator: IntegratorConfig::default() }
    }
}

/// Full mean-field result for one cell.
pub fn mf_cell(params: &ModelParams, opts: &MfScanOptions) -> Result<CellOutput> {
    let seeds = default_seeds(opts.seeds, opts.seed);
    let a = analyze_point(params, &seeds, &opts.integrator)?;
    let rep = a.representative().expect("classification comes from a report");
    let mut values = BTreeMap::new();
    values.insert("mf_max_re".into(), rep.max_re());
    values.insert("mf_leading_im".into(), rep.leading_im());
    values.insert("mf_fixed_points".into(), a.reports.len() as f64);
    values.insert("mf_n_up_fp".into(), rep.fixed_point.n_up());
    let mut status = if a.classification == Classification::Marginal { CellStatus::Marginal } else { CellStatus::Ok };
    if let Some(ms) = &opts.multistart {
        let d2 = multistart_delta2(params, ms, &opts.integrator)?;
        let worst = d2.iter().cloned().fold(0.0, f64::max);
        values.insert("mf_delta2".into(), worst);
        if OscillationLabel::from_delta2(worst) == OscillationLabel::Marginal {
            status = CellStatus::Marginal;
        }
    }
    Ok(CellOutput { status: Some(status), label: a.classification.name().into(), values })
}

/// Classify every `(Δ, Ω)` cell of `grid` (x = Δ, y = Ω).
pub fn scan_mf_region(base: &ModelParams, grid: &GridSpec, opts: &MfScanOptions, sweep_opts: &SweepOptions) -> Result<ScanGrid> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty scan grid".into()));
    }
    base.validate()?;
    sweep(grid, sweep_opts, |_, delta, omega| {
        let p = ModelParams { delta, omega_lower: omega, ..base.clone() };
        mf_cell(&p, opts)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::{apply_generator, GeneratorSpec, ManyBodyState};
    use crate::site::max_abs;
    use proptest::prelude::*;

    fn random_mf(seed: u64) -> MFState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MFState::from_site(&SiteState::random(&mut rng))
    }

    #[test]
    fn roundtrip_site_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = SiteState::random(&mut rng);
        let back = MFState::from_site(&s).to_site();
        assert!(max_abs(&(back.0 - s.0)) < 1e-15);
    }

    #[test]
    fn chi_zero_matches_exact_single_site() {
        for seed in 0..20 {
            let p = ModelParams::new(1.5 - seed as f64, 0.7, 3.0, 0.0);
            let s = random_mf(seed);
            let d = mf_rhs_matrix(&s.to_matrix(), &p);
            let spec = GeneratorSpec::uncoupled(&p, 1).unwrap();
            let exact = apply_generator(&spec, &ManyBodyState::product(&[s.to_site()])).unwrap();
            assert!(max_abs(&(Op3::from_row_slice(&exact.rho) - d)) < 1e-12);
        }
    }

    #[test]
    fn dark_state_is_fixed() {
        let p = ModelParams::new(-3.0, 0.0, 6.0, -18.0);
        let s = MFState::from_site(&SiteState::all_down());
        assert_eq!(residual(&s, &p), 0.0);
    }

    #[test]
    fn rhs_depends_only_on_chi() {
        let s = random_mf(4);
        let a = mf_rhs(&s, &ModelParams::new(2.0, 3.0, 6.0, -18.0));
        let b = mf_rhs(&s, &ModelParams::new(2.0, 3.0, 6.0, -18.0).with_kappa(1));
        assert_eq!(a, b);
    }

    #[test]
    fn jacobian_exact_on_linear_maps() {
        let a = Mat8::from_fn(|i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * i as f64);
        let x = Vec8::from_fn(|i, _| i as f64 * 0.3 - 1.0);
        let (j, _) = fd_jacobian(|v| a * v, &x, 1e-6);
        assert!((j - a).amax() < 1e-8);
    }

    #[test]
    fn richardson_agrees_with_plain_central_difference() {
        let p = ModelParams::new(-4.0, 3.0, 6.0, -18.0);
        let s = random_mf(11);
        let f = |v: &Vec8| mf_rhs(&MFState::from_vector(v), &p).as_vector();
        let (_, spread) = fd_jacobian(f, &s.as_vector(), 1e-6);
        assert!(spread < 1e-6);
    }

    #[test]
    fn free_atom_spectrum() {
        let p = ModelParams::new(0.0, 0.0, 0.0, 0.0);
        let fp = MFState::from_site(&SiteState::all_down());
        let r = stability_report(&p, &fp).unwrap();
        let has = |re: f64| r.eigenvalues.iter().any(|z| (z.re - re).abs() < 1e-6 && z.im.abs() < 1e-6);
        assert!(has(-1.0));
        assert!(has(-0.5));
        // σ_↓↑ coherence and n_↑ do not decay without drive
        assert_eq!(r.classification, Classification::Marginal);
    }

    #[test]
    fn eigenvalues_closed_under_conjugation() {
        let p = ModelParams::new(-5.0, 4.0, 6.0, -18.0);
        let seeds = default_seeds(4, 1);
        let found = find_fixed_points(&p, &seeds, &IntegratorConfig::default()).unwrap();
        assert!(!found.points.is_empty());
        for fp in &found.points {
            let r = stability_report(&p, fp).unwrap();
            for z in &r.eigenvalues {
                assert!(r.eigenvalues.iter().any(|w| (w - z.conj()).norm() < 1e-8));
            }
        }
    }

    #[test]
    fn classification_rules() {
        let c = |v: &[(f64, f64)]| classify_fixed_point(&v.iter().map(|&(a, b)| C64::new(a, b)).collect::<Vec<_>>());
        assert_eq!(c(&[(-1.0, 0.0); 8]), Classification::Stable);
        let mut v = vec![(-1.0, 0.0); 6];
        v.extend([(0.1, 2.0), (0.1, -2.0)]);
        assert_eq!(c(&v), Classification::HopfUnstable);
        let mut v = vec![(-1.0, 0.0); 7];
        v.push((0.1, 0.0));
        assert_eq!(c(&v), Classification::OtherUnstable);
        let mut v = vec![(-1.0, 0.0); 7];
        v.push((1e-12, 0.0));
        assert_eq!(c(&v), Classification::Marginal);
        // a real unstable mode dominating a complex one is not a Hopf signature
        let mut v = vec![(-1.0, 0.0); 5];
        v.extend([(0.1, 2.0), (0.1, -2.0), (0.5, 0.0)]);
        assert_eq!(c(&v), Classification::OtherUnstable);
    }

    #[test]
    fn dark_fixed_point_without_lower_drive() {
        let p = ModelParams::new(3.0, 0.0, 6.0, -18.0);
        let found = find_fixed_points(&p, &default_seeds(0, 0), &IntegratorConfig::default()).unwrap();
        assert!(found.points.iter().any(|f| (f.0[0] - 1.0).abs() < 1e-9));
    }

    #[test]
    fn chi_zero_fixed_point_matches_long_exact_evolution() {
        let p = ModelParams::new(-2.0, 1.5, 3.0, 0.0);
        let found = find_fixed_points(&p, &default_seeds(2, 3), &IntegratorConfig::default()).unwrap();
        assert_eq!(found.points.len(), 1);
        let spec = GeneratorSpec::uncoupled(&p, 1).unwrap();
        let rho0 = ManyBodyState::product(&[SiteState::all_down()]);
        let traj = crate::liouville::evolve_exact(&spec, &rho0, &[0.0, 500.0], &IntegratorConfig::default()).unwrap();
        let exact = Op3::from_row_slice(&traj[1].rho);
        assert!(max_abs(&(exact - found.points[0].to_matrix())) < 1e-6);
    }

    #[test]
    fn lower_drive_off_row_is_stable() {
        let grid = GridSpec {
            x: crate::engine::Axis::linspace("delta", -20.0, 20.0, 3),
            y: crate::engine::Axis::new("omega", vec![0.0]),
        };
        let opts = MfScanOptions { seeds: 2, ..Default::default() };
        let g = scan_mf_region(&ModelParams::new(0.0, 0.0, 6.0, -18.0), &grid, &opts, &SweepOptions::default()).unwrap();
        assert!(g.cells.iter().all(|c| c.label == "stable"), "{:?}", g.cells);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn derivative_is_trace_free(seed in 0u64..10_000, delta in -40.0f64..40.0, om in 0.0f64..20.0) {
            let p = ModelParams::new(delta, om, 6.0, -18.0);
            let s = random_mf(seed);
            let d = mf_rhs_matrix(&s.to_matrix(), &p);
            prop_assert!(d.trace().norm() < 1e-13);
            prop_assert!(max_abs(&(d - d.adjoint())) < 1e-13);
        }
    }
}
