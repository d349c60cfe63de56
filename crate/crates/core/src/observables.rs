//! Derived quantities: oscillation contrast, fluctuations, interaction
//! energies, two-body states and their negativity, spectra and heating.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, SMatrix};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::cumulant::{Block, CumulantStateFinite, CumulantStateTD};
use crate::error::{Error, Result};
use crate::liouville::ManyBodyState;
use crate::site::{Op3, C64, UP};

/// Sampled trajectory with named real channels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub channels: Vec<(String, Vec<f64>)>,
}

impl TimeSeries {
    pub fn new(names: &[&str]) -> Self {
        Self { times: Vec::new(), channels: names.iter().map(|n| (n.to_string(), Vec::new())).collect() }
    }

    /// Append one sample; `values` follow the channel order.
    pub fn push(&mut self, t: f64, values: &[f64]) {
        debug_assert_eq!(values.len(), self.channels.len());
        self.times.push(t);
        for ((_, ch), v) in self.channels.iter_mut().zip(values) {
            ch.push(*v);
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Series(format!("no channel named {name:?}")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.channels.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (n, ch) in &self.channels {
            if ch.len() != self.times.len() {
                return Err(Error::Series(format!("channel {n:?} has {} samples, expected {}", ch.len(), self.times.len())));
            }
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Series("times must be strictly increasing".into()));
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Series("non-finite time".into()));
        }
        Ok(())
    }

    /// Add a channel after the fact.
    pub fn add_channel(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.times.len() {
            return Err(Error::Series(format!("channel {name:?} length mismatch")));
        }
        self.channels.push((name.to_string(), values));
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend(self.channels.iter().map(|(n, _)| n.clone()));
        wr.write_record(&header).map_err(csv_err)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![fmt_f64(*t)];
            row.extend(self.channels.iter().map(|(_, v)| fmt_f64(v[k])));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Parse CSV with a header row whose first column is time.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.is_empty() {
            return Err(Error::Series("empty header".into()));
        }
        let mut out = TimeSeries {
            times: Vec::new(),
            channels: header.iter().skip(1).map(|n| (n.to_string(), Vec::new())).collect(),
        };
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != header.len() {
                return Err(Error::Series(format!("row {}: {} fields, expected {}", line + 2, rec.len(), header.len())));
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Series(format!("row {}: {s:?}: {e}", line + 2)))
            };
            out.times.push(parse(&rec[0])?);
            for (k, (_, ch)) in out.channels.iter_mut().enumerate() {
                ch.push(parse(&rec[k + 1])?);
            }
        }
        out.validate()?;
        Ok(out)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Series(e.to_string())
}

/// Shortest representation that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

/// δ² over one window with the number of windows used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub delta2: f64,
    pub mean: f64,
    pub tau: f64,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OscillationLabel {
    Oscillatory,
    Stationary,
    Marginal,
}

pub const OSCILLATORY_DELTA2: f64 = 1e-4;
pub const STATIONARY_DELTA2: f64 = 1e-8;

impl OscillationLabel {
    pub fn from_delta2(d2: f64) -> Self {
        if d2 > OSCILLATORY_DELTA2 {
            Self::Oscillatory
        } else if d2 < STATIONARY_DELTA2 {
            Self::Stationary
        } else {
            Self::Marginal
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Oscillatory => "oscillatory",
            Self::Stationary => "stationary",
            Self::Marginal => "marginal",
        }
    }
}

fn interp(times: &[f64], values: &[f64], t: f64) -> f64 {
    let k = times.partition_point(|&s| s <= t);
    if k == 0 {
        return values[0];
    }
    if k >= times.len() {
        return values[times.len() - 1];
    }
    let (t0, t1) = (times[k - 1], times[k]);
    let w = (t - t0) / (t1 - t0);
    values[k - 1] * (1.0 - w) + values[k] * w
}

/// Trapezoidal time averages of `n` and `n²` over `[a, b]`.
fn window_moments(times: &[f64], values: &[f64], a: f64, b: f64) -> (f64, f64) {
    let mut pts: Vec<(f64, f64)> = vec![(a, interp(times, values, a))];
    pts.extend(times.iter().zip(values).filter(|(t, _)| **t > a && **t < b).map(|(t, v)| (*t, *v)));
    pts.push((b, interp(times, values, b)));
    let (mut m1, mut m2) = (0.0, 0.0);
    for w in pts.windows(2) {
        let dt = w[1].0 - w[0].0;
        m1 += 0.5 * dt * (w[0].1 + w[1].1);
        m2 += 0.5 * dt * (w[0].1 * w[0].1 + w[1].1 * w[1].1);
    }
    let len = b - a;
    (m1 / len, m2 / len)
}

/// Time-averaged variance over `[t_start, t_start + tau]`, with no
/// convergence loop.
pub fn delta2_window(times: &[f64], values: &[f64], t_start: f64, tau: f64) -> Result<(f64, f64)> {
    check_window(times, values, t_start, t_start + tau)?;
    let (m1, m2) = window_moments(times, values, t_start, t_start + tau);
    Ok(((m2 - m1 * m1).max(0.0), m1))
}

fn check_window(times: &[f64], values: &[f64], a: f64, b: f64) -> Result<()> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(Error::Series("need at least two samples of equal length".into()));
    }
    let (first, last) = (times[0], times[times.len() - 1]);
    let slack = 1e-9 * (1.0 + last.abs());
    if !(b > a) || a < first - slack || b > last + slack {
        return Err(Error::WindowOutOfRange { start: a, end: b, first, last });
    }
    Ok(())
}

/// δ² with the doubling protocol: τ is doubled while the series allows it
/// until `|δ²(2τ) − δ²(τ)| < max(1e−3 δ², 1e−10)`.
pub fn oscillation_contrast(times: &[f64], values: &[f64], t_start: f64, tau: f64) -> Result<Contrast> {
    let (mut d2, mut mean) = delta2_window(times, values, t_start, tau)?;
    let last = times[times.len() - 1];
    let mut tau = tau;
    let slack = 1e-9 * (1.0 + last.abs());
    while t_start + 2.0 * tau <= last + slack {
        let (next, m) = delta2_window(times, values, t_start, (2.0 * tau).min(last - t_start))?;
        tau *= 2.0;
        let done = (next - d2).abs() < (1e-3 * next).max(1e-10);
        d2 = next;
        mean = m;
        if done {
            return Ok(Contrast { delta2: d2, mean, tau, converged: true });
        }
    }
    Ok(Contrast { delta2: d2, mean, tau, converged: false })
}

/// Borrowed view of any state that carries upper-level populations and
/// two-site correlations.
#[derive(Clone, Copy, Debug)]
pub enum StateRef<'a> {
    Exact(&'a ManyBodyState),
    Td(&'a CumulantStateTD),
    Finite(&'a CumulantStateFinite),
}

/// `F² = ΔN_↑² / N`; in the thermodynamic limit the per-site form
/// `p − p² + Σ_d ⟨n_↑ n_↑(d)⟩_c` summed up to the cutoff.
pub fn normalized_fluctuations(state: StateRef<'_>) -> f64 {
    match state {
        StateRef::Exact(s) => s.n_up_variance() / s.n_sites as f64,
        StateRef::Td(s) => {
            let p = s.mean[(UP, UP)].re;
            p - p * p + s.sum_over_displacements(|_, b| nn_corr(b))
        }
        StateRef::Finite(s) => {
            let n = s.n_sites();
            let mut acc = 0.0;
            for i in 0..n {
                let p = s.means[i][(UP, UP)].re;
                acc += p - p * p;
            }
            for (_, _, b) in s.pairs() {
                acc += 2.0 * nn_corr(b);
            }
            acc / n as f64
        }
    }
}

/// `⟨n_↑ n_↑⟩_c` of a pair block.
pub fn nn_corr(b: &Block) -> f64 {
    b[(3 * UP + UP) * 9 + 3 * UP + UP].re
}

/// Least-squares fits of `F²_∞(N)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// `F² ≈ prefactor · N^exponent`.
    pub exponent: f64,
    pub prefactor: f64,
    /// `F² ≈ slope · N + intercept`.
    pub slope: f64,
    pub intercept: f64,
    /// RMS deviation in `F²` of each fit, directly comparable.
    pub power_rms: f64,
    pub linear_rms: f64,
    /// RMS residual of the log-log regression.
    pub log_rms: f64,
    pub excluded: Vec<usize>,
}

fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn rms(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    (v.iter().map(|r| r * r).sum::<f64>() / v.len() as f64).sqrt()
}

/// Fit power law (log-log) and linear law; non-positive values are excluded.
pub fn fit_scaling(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let mut excluded = Vec::new();
    let mut used = Vec::new();
    for (k, &(n, f)) in points.iter().enumerate() {
        if f > 0.0 && n > 0.0 && f.is_finite() {
            used.push((n, f));
        } else {
            excluded.push(k);
        }
    }
    if used.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 positive points, have {}", used.len())));
    }
    let mut ns: Vec<f64> = used.iter().map(|p| p.0).collect();
    ns.sort_by(f64::total_cmp);
    if ns.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Fit("system sizes must be distinct".into()));
    }
    let lx: Vec<f64> = used.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = used.iter().map(|p| p.1.ln()).collect();
    let (exponent, ln_a) = least_squares(&lx, &ly);
    let prefactor = ln_a.exp();
    let x: Vec<f64> = used.iter().map(|p| p.0).collect();
    let y: Vec<f64> = used.iter().map(|p| p.1).collect();
    let (slope, intercept) = least_squares(&x, &y);
    Ok(ScalingFit {
        exponent,
        prefactor,
        slope,
        intercept,
        power_rms: rms(used.iter().map(|(n, f)| prefactor * n.powf(exponent) - f)),
        linear_rms: rms(used.iter().map(|(n, f)| slope * n + intercept - f)),
        log_rms: rms(lx.iter().zip(&ly).map(|(a, b)| exponent * a + ln_a - b)),
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Energies {
    pub e_mf: f64,
    pub e_qu: f64,
    /// `E_qu / E_mf`, absent when `E_mf` vanishes.
    pub ratio: Option<f64>,
}

impl Energies {
    fn new(e_mf: f64, e_qu: f64) -> Self {
        let ratio = if e_mf.abs() > 1e-300 { Some(e_qu / e_mf) } else { None };
        Self { e_mf, e_qu, ratio }
    }
}

/// Finite systems: `Σ_{i<j} U_ij`-weighted sums. Thermodynamic limit: per
/// site, `E_mf = χ p²` and `E_qu = Σ_d U(d) ⟨n_↑ n_↑(d)⟩_c`.
pub fn interaction_energies(state: StateRef<'_>, couplings: &crate::model::PairPotentials) -> Energies {
    match state {
        StateRef::Exact(s) => {
            let n = s.n_sites;
            let pops = s.populations(UP);
            let (mut e_mf, mut e_qu) = (0.0, 0.0);
            for i in 0..n {
                for j in (i + 1)..n {
                    let u = couplings.get(s.site_order[i], s.site_order[j]);
                    if u == 0.0 {
                        continue;
                    }
                    let pair = crate::liouville::pair_matrix(s, i, j).expect("valid pair");
                    let nn = pair[(3 * UP + UP) * 9 + 3 * UP + UP].re;
                    e_mf += u * pops[i] * pops[j];
                    e_qu += u * (nn - pops[i] * pops[j]);
                }
            }
            Energies::new(e_mf, e_qu)
        }
        StateRef::Td(s) => {
            let p = s.mean[(UP, UP)].re;
            let chi = s.sum_over_displacements(|d, _| couplings_td(couplings, d));
            let e_qu = s.sum_over_displacements(|d, b| couplings_td(couplings, d) * nn_corr(b));
            Energies::new(chi * p * p, e_qu)
        }
        StateRef::Finite(s) => {
            let (mut e_mf, mut e_qu) = (0.0, 0.0);
            for (i, j, b) in s.pairs() {
                let u = couplings.get(i, j);
                e_mf += u * s.means[i][(UP, UP)].re * s.means[j][(UP, UP)].re;
                e_qu += u * nn_corr(b);
            }
            Energies::new(e_mf, e_qu)
        }
    }
}

fn couplings_td(pp: &crate::model::PairPotentials, d: (i64, i64)) -> f64 {
    match pp {
        crate::model::PairPotentials::Thermodynamic { entries } => entries
            .binary_search_by(|(e, _)| e.cmp(&d))
            .map(|k| entries[k].1)
            .unwrap_or(0.0),
        crate::model::PairPotentials::Finite { .. } => 0.0,
    }
}

/// Two-site reduced density matrix over `(↓,0,↑) ⊗ (↓,0,↑)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoBodyRDM {
    pub rho: Block,
    pub pair: String,
    pub min_eigenvalue: f64,
}

pub fn kron3(a: &Op3, b: &Op3) -> Block {
    let mut out = [C64::default(); 81];
    for r1 in 0..3 {
        for c1 in 0..3 {
            let v = a[(r1, c1)];
            for r2 in 0..3 {
                for c2 in 0..3 {
                    out[(3 * r1 + r2) * 9 + 3 * c1 + c2] = v * b[(r2, c2)];
                }
            }
        }
    }
    out
}

fn block_matrix(b: &Block) -> SMatrix<C64, 9, 9> {
    SMatrix::<C64, 9, 9>::from_row_slice(b)
}

fn min_hermitian_eigenvalue(b: &Block) -> f64 {
    let m = block_matrix(b);
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// `ρ_i ⊗ ρ_j + χ_ij`.
pub fn two_body_rdm(rho_i: &Op3, rho_j: &Op3, cumulant: &Block, pair: impl Into<String>) -> TwoBodyRDM {
    let mut rho = kron3(rho_i, rho_j);
    for (r, c) in rho.iter_mut().zip(cumulant) {
        *r += c;
    }
    TwoBodyRDM { min_eigenvalue: min_hermitian_eigenvalue(&rho), rho, pair: pair.into() }
}

pub fn partial_trace_second(b: &Block) -> Op3 {
    Op3::from_fn(|a, c| (0..3).map(|k| b[(3 * a + k) * 9 + 3 * c + k]).sum())
}

pub fn partial_trace_first(b: &Block) -> Op3 {
    Op3::from_fn(|a, c| (0..3).map(|k| b[(3 * k + a) * 9 + 3 * k + c]).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Negativity {
    /// `log₂ ‖ρ^{T₁}‖₁`.
    pub log_negativity: f64,
    /// Smallest eigenvalue of the input (negative values flag truncation
    /// artifacts).
    pub input_min_eigenvalue: f64,
}

pub fn log_negativity(rdm: &TwoBodyRDM) -> Result<Negativity> {
    let m = block_matrix(&rdm.rho);
    let herm = (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if herm > 1e-9 {
        return Err(Error::NotHermitian(herm));
    }
    let mut pt = [C64::default(); 81];
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                for d in 0..3 {
                    pt[(3 * a + c) * 9 + 3 * b + d] = rdm.rho[(3 * b + c) * 9 + 3 * a + d];
                }
            }
        }
    }
    let p = block_matrix(&pt);
    let p = (p + p.adjoint()) * C64::new(0.5, 0.0);
    let norm: f64 = p.symmetric_eigenvalues().iter().map(|l| l.abs()).sum();
    Ok(Negativity { log_negativity: norm.log2(), input_min_eigenvalue: rdm.min_eigenvalue })
}

/// Amplitude spectrum on angular frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Angular frequency of the largest positive-frequency peak.
    pub dominant: Option<f64>,
    /// Fewer than four periods in the window (zero-crossing estimate).
    pub short_window: bool,
    pub sample_step: f64,
}

/// Peaks at or below this amplitude do not count as dominant.
pub const SPECTRUM_FLOOR: f64 = 1e-10;

/// Resample `[t0, t1]` uniformly at the median sample spacing, subtract the
/// mean, apply a Hann taper and take the DFT. Amplitudes are normalized so
/// a sinusoid of amplitude `A` peaks near `A`.
pub fn fourier_spectrum(times: &[f64], values: &[f64], t0: f64, t1: f64) -> Result<Spectrum> {
    check_window(times, values, t0, t1)?;
    let mut gaps: Vec<f64> = times.windows(2).filter(|w| w[0] >= t0 && w[1] <= t1).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return Err(Error::Series("window holds fewer than two samples".into()));
    }
    gaps.sort_by(f64::total_cmp);
    let dt = gaps[gaps.len() / 2];
    let n = ((t1 - t0) / dt).floor() as usize + 1;
    if n < 4 {
        return Err(Error::Series("window holds fewer than four samples".into()));
    }
    let mut x: Vec<f64> = (0..n).map(|k| interp(times, values, t0 + k as f64 * dt)).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    for v in &mut x {
        *v -= mean;
    }
    let crossings = x.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
    let w: Vec<f64> = (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
        .collect();
    let wsum: f64 = w.iter().sum();
    let mut buf: Vec<Complex<f64>> = x.iter().zip(&w).map(|(a, b)| Complex::new(a * b, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2 + 1;
    let df = 2.0 * std::f64::consts::PI / (n as f64 * dt);
    let frequencies: Vec<f64> = (0..half).map(|k| k as f64 * df).collect();
    let amplitudes: Vec<f64> = buf[..half].iter().map(|z| 2.0 * z.norm() / wsum).collect();
    let dominant = amplitudes
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, a)| **a > SPECTRUM_FLOOR)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| frequencies[k]);
    Ok(Spectrum { frequencies, amplitudes, dominant, short_window: crossings < 8, sample_step: dt })
}

/// `n_d(t) = γ ∫₀ᵗ n_0 dτ` by cumulative trapezoid.
pub fn decays_per_atom(times: &[f64], n0: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if times.len() != n0.len() || times.is_empty() {
        return Err(Error::Series("times and n_0 must be nonempty and of equal length".into()));
    }
    if let Some(v) = n0.iter().find(|v| **v < -1e-9) {
        return Err(Error::Series(format!("negative intermediate population {v}")));
    }
    let mut out = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..times.len() {
        let a = n0[k - 1].max(0.0);
        let b = n0[k].max(0.0);
        acc += 0.5 * gamma * (times[k] - times[k - 1]) * (a + b);
        out.push(acc);
    }
    Ok(out)
}

/// Dense matrix view used in tests and diagnostics.
pub fn block_to_dmatrix(b: &Block) -> DMatrix<C64> {
    DMatrix::from_row_slice(9, 9, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SiteState;
    use crate::site::{DOWN, I};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(t1: f64, dt: f64) -> Vec<f64> {
        crate::engine::sample_grid(0.0, t1, dt)
    }

    #[test]
    fn constant_channel_has_no_contrast() {
        let t = grid(100.0, 0.1);
        let v = vec![0.3; t.len()];
        let c = oscillation_contrast(&t, &v, 20.0, 20.0).unwrap();
        assert!(c.delta2.abs() < 1e-15);
        assert!(c.converged);
    }

    #[test]
    fn sinusoid_contrast() {
        let t = grid(400.0, 0.01);
        let w = 2.0 * std::f64::consts::PI / 5.0;
        let v: Vec<f64> = t.iter().map(|s| 0.2 + 0.1 * (w * s).sin()).collect();
        let (d2, _) = delta2_window(&t, &v, 0.0, 50.0).unwrap();
        assert!((d2 - 0.005).abs() < 1e-7);
        let c = oscillation_contrast(&t, &v, 100.0, 25.0).unwrap();
        assert!((c.delta2 - 0.005).abs() < 1e-6);
    }

    #[test]
    fn window_beyond_series_is_rejected() {
        let t = grid(10.0, 0.1);
        let v = vec![0.0; t.len()];
        assert!(matches!(delta2_window(&t, &v, 5.0, 10.0), Err(Error::WindowOutOfRange { .. })));
    }

    #[test]
    fn labels() {
        assert_eq!(OscillationLabel::from_delta2(1e-3), OscillationLabel::Oscillatory);
        assert_eq!(OscillationLabel::from_delta2(1e-9), OscillationLabel::Stationary);
        assert_eq!(OscillationLabel::from_delta2(1e-6), OscillationLabel::Marginal);
    }

    #[test]
    fn product_state_fluctuations_are_binomial() {
        let mut m = Op3::zeros();
        m[(UP, UP)] = C64::new(0.3, 0.0);
        m[(DOWN, DOWN)] = C64::new(0.7, 0.0);
        let s = ManyBodyState::product(&[SiteState(m), SiteState(m), SiteState(m)]);
        assert!((normalized_fluctuations(StateRef::Exact(&s)) - 0.21).abs() < 1e-14);
    }

    #[test]
    fn scaling_fits_recover_injected_laws() {
        let lin: Vec<(f64, f64)> = [9.0f64, 16.0, 25.0, 36.0, 64.0, 100.0].iter().map(|&n| (n, 0.3 * n)).collect();
        let f = fit_scaling(&lin).unwrap();
        assert!((f.exponent - 1.0).abs() < 1e-12);
        assert!(f.linear_rms < 1e-12);
        let pw: Vec<(f64, f64)> = [9.0f64, 16.0, 25.0, 36.0, 64.0, 100.0].iter().map(|&n| (n, 2.0 * n.powf(0.06))).collect();
        let f = fit_scaling(&pw).unwrap();
        assert!((f.exponent - 0.06).abs() < 1e-12);
        assert!((f.prefactor - 2.0).abs() < 1e-12);
        let mut bad = pw.clone();
        bad.push((4.0, -1.0));
        assert_eq!(fit_scaling(&bad).unwrap().excluded, vec![6]);
        assert!(fit_scaling(&pw[..3]).is_err());
    }

    fn bell() -> TwoBodyRDM {
        let mut psi = [C64::default(); 9];
        psi[0] = C64::new(0.5f64.sqrt(), 0.0);
        psi[8] = C64::new(0.5f64.sqrt(), 0.0);
        let mut rho = [C64::default(); 81];
        for r in 0..9 {
            for c in 0..9 {
                rho[r * 9 + c] = psi[r] * psi[c].conj();
            }
        }
        TwoBodyRDM { min_eigenvalue: min_hermitian_eigenvalue(&rho), rho, pair: "bell".into() }
    }

    #[test]
    fn negativity_reference_values() {
        assert!((log_negativity(&bell()).unwrap().log_negativity - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = SiteState::random(&mut rng).0;
        let b = SiteState::random(&mut rng).0;
        let prod = two_body_rdm(&a, &b, &[C64::default(); 81], "prod");
        assert!(log_negativity(&prod).unwrap().log_negativity.abs() < 1e-12);
    }

    fn random_unitary(rng: &mut ChaCha8Rng) -> Op3 {
        let mut h = Op3::zeros();
        for r in 0..3 {
            for c in r..3 {
                let v = C64::new(rng.random_range(-1.0..1.0), if r == c { 0.0 } else { rng.random_range(-1.0..1.0) });
                h[(r, c)] = v;
                h[(c, r)] = v.conj();
            }
        }
        // exp(iH) through the eigen decomposition
        let eig = h.symmetric_eigen();
        let d = Op3::from_diagonal(&eig.eigenvalues.map(|l| (I * l).exp()));
        eig.eigenvectors * d * eig.eigenvectors.adjoint()
    }

    #[test]
    fn negativity_invariant_under_local_unitaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let g = DMatrix::<C64>::from_fn(9, 9, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let rho = &g * g.adjoint();
            let rho = &rho / rho.trace();
            let mut b = [C64::default(); 81];
            for r in 0..9 {
                for c in 0..9 {
                    b[r * 9 + c] = rho[(r, c)];
                }
            }
            let rdm = TwoBodyRDM { min_eigenvalue: 0.0, rho: b, pair: String::new() };
            let u = kron3(&random_unitary(&mut rng), &random_unitary(&mut rng));
            let um = block_to_dmatrix(&u);
            let rot = &um * &rho * um.adjoint();
            let mut rb = [C64::default(); 81];
            for r in 0..9 {
                for c in 0..9 {
                    rb[r * 9 + c] = rot[(r, c)];
                }
            }
            let rot = TwoBodyRDM { min_eigenvalue: 0.0, rho: rb, pair: String::new() };
            let a = log_negativity(&rdm).unwrap().log_negativity;
            let b = log_negativity(&rot).unwrap().log_negativity;
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn non_hermitian_input_rejected() {
        let mut r = bell();
        r.rho[1] = C64::new(0.3, 0.0);
        assert!(log_negativity(&r).is_err());
    }

    #[test]
    fn two_body_rdm_partial_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = SiteState::random(&mut rng).0;
        let b = SiteState::random(&mut rng).0;
        // a cumulant with vanishing partial traces
        let x = SiteState::random(&mut rng).0 - SiteState::random(&mut rng).0;
        let y = SiteState::random(&mut rng).0 - SiteState::random(&mut rng).0;
        let chi = kron3(&x, &y);
        let r = two_body_rdm(&a, &b, &chi, "ab");
        assert!(crate::site::max_abs(&(partial_trace_second(&r.rho) - a)) < 1e-12);
        assert!(crate::site::max_abs(&(partial_trace_first(&r.rho) - b)) < 1e-12);
        let zero = two_body_rdm(&a, &b, &[C64::default(); 81], "ab");
        assert_eq!(zero.rho, kron3(&a, &b));
    }

    #[test]
    fn sinusoid_spectrum() {
        let t = grid(200.0, 0.05);
        let w0 = 1.7;
        let v: Vec<f64> = t.iter().map(|s| 0.4 + 0.05 * (w0 * s).cos()).collect();
        let s = fourier_spectrum(&t, &v, 0.0, 200.0).unwrap();
        let bin = s.frequencies[1];
        assert!((s.dominant.unwrap() - w0).abs() <= bin);
        assert!(!s.short_window);
        let c = fourier_spectrum(&t, &vec![0.4; t.len()], 0.0, 200.0).unwrap();
        assert!(c.dominant.is_none());
        let short = fourier_spectrum(&t, &v, 0.0, 6.0).unwrap();
        assert!(short.short_window);
    }

    #[test]
    fn decays() {
        let t = grid(10.0, 0.5);
        let z = decays_per_atom(&t, &vec![0.0; t.len()], 1.0).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        let c = decays_per_atom(&t, &vec![0.2; t.len()], 1.0).unwrap();
        for (ti, v) in t.iter().zip(&c) {
            assert!((v - 0.2 * ti).abs() < 1e-12);
        }
        assert!(decays_per_atom(&t, &vec![-0.1; t.len()], 1.0).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let mut ts = TimeSeries::new(&["n_up", "n_0"]);
        ts.push(0.0, &[0.1, 0.2]);
        ts.push(0.5, &[0.3, -1.5e-7]);
        let mut buf = Vec::new();
        ts.write_csv(&mut buf).unwrap();
        let back = TimeSeries::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ts);
        assert!(TimeSeries::read_csv("t,a\n1,2\n0,3\n".as_bytes()).is_err());
        assert!(TimeSeries::read_csv("t,a\n1,x\n".as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn contrast_shift_and_scale(shift in -5.0f64..5.0, scale in 0.1f64..10.0, w in 0.5f64..3.0, phase in 0.0f64..6.0) {
            let t = grid(60.0, 0.05);
            let v: Vec<f64> = t.iter().map(|s| (w * s + phase).sin() + 0.3 * (2.3 * w * s).cos()).collect();
            let base = delta2_window(&t, &v, 10.0, 40.0).unwrap().0;
            let moved: Vec<f64> = v.iter().map(|x| scale * x + shift).collect();
            let d = delta2_window(&t, &moved, 10.0, 40.0).unwrap().0;
            prop_assert!((d - scale * scale * base).abs() < 1e-9 * (1.0 + d));
        }

        #[test]
        fn decays_nondecreasing(vals in proptest::collection::vec(0.0f64..1.0, 2..50)) {
            let t: Vec<f64> = (0..vals.len()).map(|k| k as f64 * 0.1).collect();
            let nd = decays_per_atom(&t, &vals, 1.0).unwrap();
            prop_assert!(nd.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
