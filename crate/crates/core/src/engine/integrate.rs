//! Dormand–Prince 5(4) with the standard fourth-order continuous extension.
//!
//! Every solver maps its state onto a flat `f64` vector and implements
//! [`OdeSystem`]; samples are delivered through an observer at requested
//! times using dense output, so large states never have to be stored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on the step size (time in units of 1/γ).
    pub max_step: f64,
    /// First trial step; `0` picks one automatically.
    pub initial_step: f64,
    /// Sampling interval of the emitted time series.
    pub dense_output_stride: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: 0.5,
            initial_step: 0.0,
            dense_output_stride: 0.05,
            max_steps: 50_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        Self { rel_tol, abs_tol, ..Self::default() }
    }

    pub fn with_stride(mut self, stride: f64) -> Self {
        self.dense_output_stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rel_tol > 0.0
            && self.abs_tol > 0.0
            && self.dense_output_stride > 0.0
            && self.max_step > 0.0
            && self.initial_step >= 0.0
            && self.max_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid integrator configuration {self:?}")))
        }
    }
}

pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
    /// Hook applied to every accepted state (e.g. re-symmetrisation).
    fn project(&self, _y: &mut [f64]) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub t_final: f64,
    pub stopped_early: bool,
}

/// Uniform sample times `t0, t0 + stride, ...` up to `t1` (inclusive within
/// rounding).
pub fn sample_grid(t0: f64, t1: f64, stride: f64) -> Vec<f64> {
    let n = ((t1 - t0) / stride + 1e-9).floor() as usize;
    (0..=n).map(|k| t0 + k as f64 * stride).collect()
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

struct Work {
    k: [Vec<f64>; 7],
    ytmp: Vec<f64>,
    ynew: Vec<f64>,
    cont: [Vec<f64>; 5],
    sample: Vec<f64>,
}

impl Work {
    fn new(n: usize) -> Self {
        let z = || vec![0.0; n];
        Self {
            k: [z(), z(), z(), z(), z(), z(), z()],
            ytmp: z(),
            ynew: z(),
            cont: [z(), z(), z(), z(), z()],
            sample: z(),
        }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Integrate from `t_grid[0]` and call `observer` at every time in `t_grid`
/// (ascending). The observer may stop the run early.
pub fn integrate_observed<S, F>(
    sys: &S,
    y0: &[f64],
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    mut observer: F,
) -> Result<(Vec<f64>, IntegrationStats)>
where
    S: OdeSystem + ?Sized,
    F: FnMut(f64, &[f64]) -> Flow,
{
    cfg.validate()?;
    let n = sys.dim();
    if y0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y0.len() });
    }
    if t_grid.is_empty() {
        return Err(Error::InvalidParameter("empty time grid".into()));
    }
    if t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("time grid must be ascending".into()));
    }
    let mut stats = IntegrationStats::default();
    let mut t = t_grid[0];
    let t_end = *t_grid.last().unwrap();
    let mut y = y0.to_vec();
    sys.project(&mut y);
    let mut next = 0usize;
    while next < t_grid.len() && t_grid[next] <= t {
        if observer(t_grid[next], &y) == Flow::Stop {
            stats.t_final = t;
            stats.stopped_early = true;
            return Ok((y, stats));
        }
        next += 1;
    }
    if next == t_grid.len() {
        stats.t_final = t;
        return Ok((y, stats));
    }

    let mut w = Work::new(n);
    sys.rhs(t, &y, &mut w.k[0]);
    stats.rhs_evals += 1;
    if !all_finite(&w.k[0]) {
        return Err(Error::NonFinite { t, snapshot: y });
    }

    let span = t_end - t;
    let mut h = if cfg.initial_step > 0.0 {
        cfg.initial_step
    } else {
        initial_step(&y, &w.k[0], cfg)
    }
    .min(cfg.max_step)
    .min(span);
    let h_min = 1e-14 * t_end.abs().max(1.0);
    let mut last_rejected = false;

    while t < t_end {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(Error::TooManySteps { t, max_steps: cfg.max_steps });
        }
        if h < h_min {
            return Err(if all_finite(&y) {
                Error::StepUnderflow { t, h }
            } else {
                Error::NonFinite { t, snapshot: y }
            });
        }
        if t + h > t_end || t_end - (t + h) < 1e-12 * h {
            h = t_end - t;
        }
        let err = stage(sys, t, h, &y, &mut w, cfg);
        stats.rhs_evals += 6;
        if !err.is_finite() || err > 1.0 {
            stats.rejected += 1;
            let fac = if err.is_finite() { (0.9 * err.powf(-0.2)).max(0.2) } else { 0.1 };
            h *= fac;
            last_rejected = true;
            continue;
        }

        // dense-output coefficients for [t, t + h]
        for i in 0..n {
            let ydiff = w.ynew[i] - y[i];
            let bspl = h * w.k[0][i] - ydiff;
            w.cont[0][i] = y[i];
            w.cont[1][i] = ydiff;
            w.cont[2][i] = bspl;
            w.cont[3][i] = ydiff - h * w.k[6][i] - bspl;
            w.cont[4][i] = h
                * (D1 * w.k[0][i] + D3 * w.k[2][i] + D4 * w.k[3][i] + D5 * w.k[4][i] + D6 * w.k[5][i]
                    + D7 * w.k[6][i]);
        }
        let t_new = if h == t_end - t { t_end } else { t + h };
        let mut stop = false;
        while next < t_grid.len() && t_grid[next] <= t_new {
            let theta = ((t_grid[next] - t) / h).clamp(0.0, 1.0);
            let th1 = 1.0 - theta;
            for i in 0..n {
                w.sample[i] = w.cont[0][i]
                    + theta
                        * (w.cont[1][i]
                            + th1 * (w.cont[2][i] + theta * (w.cont[3][i] + th1 * w.cont[4][i])));
            }
            sys.project(&mut w.sample);
            if observer(t_grid[next], &w.sample) == Flow::Stop {
                stop = true;
                next += 1;
                break;
            }
            next += 1;
        }

        std::mem::swap(&mut y, &mut w.ynew);
        sys.project(&mut y);
        t = t_new;
        // first-same-as-last
        let (head, tail) = w.k.split_at_mut(6);
        head[0].copy_from_slice(&tail[0]);
        stats.accepted += 1;
        if stop {
            stats.t_final = t;
            stats.stopped_early = true;
            return Ok((y, stats));
        }

        let mut fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        if last_rejected {
            fac = fac.min(1.0);
        }
        last_rejected = false;
        h = (h * fac).min(cfg.max_step);
    }
    stats.t_final = t;
    Ok((y, stats))
}

/// Runs the six new stages and the error estimate; leaves the 5th-order
/// solution in `w.ynew` and `f(t+h, ynew)` in `w.k[6]`.
fn stage<S: OdeSystem + ?Sized>(sys: &S, t: f64, h: f64, y: &[f64], w: &mut Work, cfg: &IntegratorConfig) -> f64 {
    let n = y.len();
    let Work { k, ytmp, ynew, .. } = w;
    macro_rules! combo {
        ($($a:expr => $ki:expr),+) => {
            for i in 0..n {
                ytmp[i] = y[i] + h * (0.0 $(+ $a * k[$ki][i])+);
            }
        };
    }
    combo!(A21 => 0);
    sys.rhs(t + C2 * h, ytmp, &mut k[1]);
    combo!(A31 => 0, A32 => 1);
    sys.rhs(t + C3 * h, ytmp, &mut k[2]);
    combo!(A41 => 0, A42 => 1, A43 => 2);
    sys.rhs(t + C4 * h, ytmp, &mut k[3]);
    combo!(A51 => 0, A52 => 1, A53 => 2, A54 => 3);
    sys.rhs(t + C5 * h, ytmp, &mut k[4]);
    combo!(A61 => 0, A62 => 1, A63 => 2, A64 => 3, A65 => 4);
    sys.rhs(t + h, ytmp, &mut k[5]);
    for i in 0..n {
        ynew[i] = y[i] + h * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
    }
    sys.rhs(t + h, ynew, &mut k[6]);
    let mut acc = 0.0;
    for i in 0..n {
        let e = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
        let sk = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(ynew[i].abs());
        acc += (e / sk) * (e / sk);
    }
    (acc / n as f64).sqrt()
}

fn initial_step(y: &[f64], f: &[f64], cfg: &IntegratorConfig) -> f64 {
    let n = y.len() as f64;
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (yi, fi) in y.iter().zip(f) {
        let sk = cfg.abs_tol + cfg.rel_tol * yi.abs();
        d0 += (yi / sk).powi(2);
        d1 += (fi / sk).powi(2);
    }
    let (d0, d1) = ((d0 / n).sqrt(), (d1 / n).sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h.max(1e-8)
}

/// Integrate and collect the state at every time in `t_grid`.
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(t_grid.len());
    integrate_observed(sys, y0, t_grid, cfg, |_, y| {
        out.push(y.to_vec());
        Flow::Continue
    })?;
    Ok(out)
}
