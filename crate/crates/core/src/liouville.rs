//! Exact Lindblad evolution of the full density matrix for a handful of
//! sites.
//!
//! The generator is applied matrix-free: diagonal energies and decay rates
//! are tabulated per basis index, the drive and the quantum jump act on one
//! base-3 digit at a time. Site `k` of an `N`-site register is the `k`-th
//! most significant digit, so `ρ_A ⊗ ρ_B` has site A first.

use num_complex::Complex64;

use crate::engine::{integrate_observed, Flow, IntegratorConfig, OdeSystem};
use crate::error::{Error, Result};
use crate::model::{ModelParams, SiteState};
use crate::site::{as_complex, as_complex_mut, as_real, c, LocalTerms, Op3, C64, DOWN, MID, UP};

/// Dense storage limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Capacity {
    /// Up to 6 sites (729 × 729).
    #[default]
    Standard,
    /// Up to 8 sites, explicit opt-in.
    Extended,
    /// 9 sites, only for 3×3 cluster plaquettes behind their own opt-in.
    Plaquette,
}

impl Capacity {
    pub fn max_sites(self) -> usize {
        match self {
            Capacity::Standard => 6,
            Capacity::Extended => 8,
            Capacity::Plaquette => 9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManyBodyState {
    pub n_sites: usize,
    /// Row-major `3^N × 3^N`.
    pub rho: Vec<C64>,
    /// Lattice site index of every tensor factor.
    pub site_order: Vec<usize>,
}

pub fn dim_of(n_sites: usize) -> usize {
    3usize.pow(n_sites as u32)
}

impl ManyBodyState {
    pub fn new(n_sites: usize, rho: Vec<C64>) -> Result<Self> {
        let d = dim_of(n_sites);
        if rho.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, got: rho.len() });
        }
        Ok(Self { n_sites, rho, site_order: (0..n_sites).collect() })
    }

    pub fn product(sites: &[SiteState]) -> Self {
        let mut rho = vec![c(1.0)];
        let mut d = 1;
        for s in sites {
            let m = s.matrix();
            let nd = d * 3;
            let mut out = vec![C64::default(); nd * nd];
            for r in 0..d {
                for col in 0..d {
                    let v = rho[r * d + col];
                    for a in 0..3 {
                        for b in 0..3 {
                            out[(r * 3 + a) * nd + col * 3 + b] = v * m[(a, b)];
                        }
                    }
                }
            }
            rho = out;
            d = nd;
        }
        Self { n_sites: sites.len(), rho, site_order: (0..sites.len()).collect() }
    }

    pub fn dim(&self) -> usize {
        dim_of(self.n_sites)
    }

    pub fn get(&self, r: usize, col: usize) -> C64 {
        self.rho[r * self.dim() + col]
    }

    pub fn trace(&self) -> C64 {
        let d = self.dim();
        (0..d).map(|k| self.rho[k * d + k]).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for r in 0..d {
            for col in r..d {
                worst = worst.max((self.rho[r * d + col] - self.rho[col * d + r].conj()).norm());
            }
        }
        worst
    }

    pub fn hermitize(&mut self) {
        let d = self.dim();
        hermitize(&mut self.rho, d);
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<C64> {
        let d = self.dim();
        nalgebra::DMatrix::from_row_slice(d, d, &self.rho)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = self.to_dmatrix();
        m.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `⟨n_α⟩` on every site.
    pub fn populations(&self, level: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.n_sites];
        for r in 0..d {
            let p = self.rho[r * d + r].re;
            for (k, o) in out.iter_mut().enumerate() {
                if digit(r, k, self.n_sites) == level {
                    *o += p;
                }
            }
        }
        out
    }

    /// `⟨N_↑²⟩ − ⟨N_↑⟩²` for the total upper-level population.
    pub fn n_up_variance(&self) -> f64 {
        let d = self.dim();
        let (mut m1, mut m2) = (0.0, 0.0);
        for r in 0..d {
            let p = self.rho[r * d + r].re;
            let cnt = (0..self.n_sites).filter(|&k| digit(r, k, self.n_sites) == UP).count() as f64;
            m1 += p * cnt;
            m2 += p * cnt * cnt;
        }
        m2 - m1 * m1
    }
}

fn hermitize(rho: &mut [C64], d: usize) {
    for r in 0..d {
        rho[r * d + r].im = 0.0;
        for col in (r + 1)..d {
            let a = rho[r * d + col];
            let b = rho[col * d + r];
            let h = (a + b.conj()) * 0.5;
            rho[r * d + col] = h;
            rho[col * d + r] = h.conj();
        }
    }
}

#[inline]
fn digit(index: usize, site: usize, n_sites: usize) -> usize {
    (index / 3usize.pow((n_sites - 1 - site) as u32)) % 3
}

/// Everything needed to build the generator of an `N`-site register.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub local: LocalTerms,
    pub n_sites: usize,
    /// Symmetric `N × N` couplings `U_ij` (diagonal ignored).
    pub pair_couplings: Vec<f64>,
    /// Additional `n_↑` energy shift per site.
    pub extra_detunings: Vec<f64>,
}

impl GeneratorSpec {
    pub fn new(params: &ModelParams, n_sites: usize, pair_couplings: Vec<f64>, capacity: Capacity) -> Result<Self> {
        params.validate()?;
        if n_sites == 0 {
            return Err(Error::InvalidParameter("empty register".into()));
        }
        if n_sites > capacity.max_sites() {
            return Err(Error::TooManySites { sites: n_sites, cap: capacity.max_sites() });
        }
        if pair_couplings.len() != n_sites * n_sites {
            return Err(Error::DimensionMismatch { expected: n_sites * n_sites, got: pair_couplings.len() });
        }
        for i in 0..n_sites {
            for j in 0..n_sites {
                let (a, b) = (pair_couplings[i * n_sites + j], pair_couplings[j * n_sites + i]);
                if !a.is_finite() || (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                    return Err(Error::InvalidParameter(format!("pair couplings not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self {
            local: LocalTerms::from(params),
            n_sites,
            pair_couplings,
            extra_detunings: vec![0.0; n_sites],
        })
    }

    /// Non-interacting register.
    pub fn uncoupled(params: &ModelParams, n_sites: usize) -> Result<Self> {
        Self::new(params, n_sites, vec![0.0; n_sites * n_sites], Capacity::Standard)
    }

    pub fn with_extra_detunings(mut self, shifts: Vec<f64>) -> Result<Self> {
        if shifts.len() != self.n_sites {
            return Err(Error::DimensionMismatch { expected: self.n_sites, got: shifts.len() });
        }
        if shifts.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter("extra detunings must be finite".into()));
        }
        self.extra_detunings = shifts;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        dim_of(self.n_sites)
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.pair_couplings[i * self.n_sites + j]
    }

    /// Complex diagonal rate `−i E_r − (γ/2) #0(r)` per basis index.
    fn diagonal(&self, shifts: &[f64]) -> Vec<C64> {
        let n = self.n_sites;
        (0..self.dim())
            .map(|r| {
                let mut e = 0.0;
                let mut mids = 0.0;
                for k in 0..n {
                    match digit(r, k, n) {
                        DOWN => e += self.local.delta,
                        MID => mids += 1.0,
                        _ => {
                            e += shifts[k];
                            for l in (k + 1)..n {
                                if digit(r, l, n) == UP {
                                    e += self.coupling(k, l);
                                }
                            }
                        }
                    }
                }
                C64::new(-0.5 * self.local.gamma * mids, -e)
            })
            .collect()
    }
}

/// Time derivative of `rho` under `spec`, written into `out`.
pub fn apply_generator_into(spec: &GeneratorSpec, rho: &[C64], out: &mut [C64]) -> Result<()> {
    apply_with_shifts(spec, &spec.extra_detunings, rho, out)
}

pub(crate) fn apply_with_shifts(spec: &GeneratorSpec, shifts: &[f64], rho: &[C64], out: &mut [C64]) -> Result<()> {
    let d = spec.dim();
    if rho.len() != d * d || out.len() != d * d {
        return Err(Error::DimensionMismatch { expected: d * d, got: rho.len() });
    }
    let n = spec.n_sites;
    let kdiag = spec.diagonal(shifts);
    let strides: Vec<usize> = (0..n).map(|k| 3usize.pow((n - 1 - k) as u32)).collect();
    let digits: Vec<u8> = (0..d).flat_map(|r| (0..n).map(move |k| digit(r, k, n) as u8)).collect();
    let om = spec.local.omega_lower;
    let wu = spec.local.omega_upper;
    let gamma = spec.local.gamma;
    let mi = C64::new(0.0, -1.0);

    for r in 0..d {
        let rd = &digits[r * n..(r + 1) * n];
        let row = &rho[r * d..(r + 1) * d];
        let orow = &mut out[r * d..(r + 1) * d];
        for col in 0..d {
            orow[col] = (kdiag[r] + kdiag[col].conj()) * row[col];
        }
        for k in 0..n {
            let s = strides[k];
            // left action of the drive on site k: rows mix
            let (lo, hi) = match rd[k] as usize {
                DOWN => (0.0, om),
                MID => (om, wu),
                _ => (wu, 0.0),
            };
            if lo != 0.0 {
                let src = &rho[(r - s) * d..(r - s + 1) * d];
                for col in 0..d {
                    orow[col] += mi * lo * src[col];
                }
            }
            if hi != 0.0 {
                let src = &rho[(r + s) * d..(r + s + 1) * d];
                for col in 0..d {
                    orow[col] += mi * hi * src[col];
                }
            }
            // right action: columns mix, + i ρ V
            for col in 0..d {
                let cdig = digits[col * n + k] as usize;
                let v = match cdig {
                    DOWN => row[col + s] * om,
                    MID => row[col - s] * om + row[col + s] * wu,
                    _ => row[col - s] * wu,
                };
                orow[col] -= mi * v;
            }
            // jump |↓⟩⟨0| ρ |0⟩⟨↓|
            if rd[k] as usize == DOWN {
                let src = &rho[(r + s) * d..(r + s + 1) * d];
                for col in 0..d {
                    if digits[col * n + k] as usize == DOWN {
                        orow[col] += src[col + s] * gamma;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn apply_generator(spec: &GeneratorSpec, rho: &ManyBodyState) -> Result<ManyBodyState> {
    if rho.n_sites != spec.n_sites {
        return Err(Error::DimensionMismatch { expected: spec.n_sites, got: rho.n_sites });
    }
    let mut out = vec![C64::default(); rho.rho.len()];
    apply_generator_into(spec, &rho.rho, &mut out)?;
    Ok(ManyBodyState { n_sites: rho.n_sites, rho: out, site_order: rho.site_order.clone() })
}

struct ExactSystem<'a> {
    spec: &'a GeneratorSpec,
}

impl OdeSystem for ExactSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.spec.dim() * self.spec.dim()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        apply_generator_into(self.spec, as_complex(y), as_complex_mut(dy)).expect("dimensions checked");
    }

    fn project(&self, y: &mut [f64]) {
        hermitize(as_complex_mut(y), self.spec.dim());
    }
}

/// Evolve and hand every sample to `observer`.
pub fn evolve_exact_observed<F>(
    spec: &GeneratorSpec,
    rho0: &ManyBodyState,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    mut observer: F,
) -> Result<()>
where
    F: FnMut(f64, &ManyBodyState) -> Flow,
{
    if rho0.n_sites != spec.n_sites {
        return Err(Error::DimensionMismatch { expected: spec.n_sites, got: rho0.n_sites });
    }
    let sys = ExactSystem { spec };
    let mut sample = rho0.clone();
    integrate_observed(&sys, as_real(&rho0.rho), t_grid, cfg, |t, y| {
        sample.rho.copy_from_slice(as_complex(y));
        observer(t, &sample)
    })?;
    Ok(())
}

pub fn evolve_exact(
    spec: &GeneratorSpec,
    rho0: &ManyBodyState,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<ManyBodyState>> {
    let mut out = Vec::with_capacity(t_grid.len());
    evolve_exact_observed(spec, rho0, t_grid, cfg, |_, s| {
        out.push(s.clone());
        Flow::Continue
    })?;
    Ok(out)
}

/// Partial trace keeping `subset` (in the given order).
pub fn reduced_density_matrix(rho: &ManyBodyState, subset: &[usize]) -> Result<ManyBodyState> {
    let n = rho.n_sites;
    if subset.is_empty() {
        return Err(Error::InvalidSubset("empty subset".into()));
    }
    for (a, &s) in subset.iter().enumerate() {
        if s >= n {
            return Err(Error::InvalidSubset(format!("site {s} out of range for {n} sites")));
        }
        if subset[..a].contains(&s) {
            return Err(Error::InvalidSubset(format!("site {s} repeated")));
        }
    }
    let rest: Vec<usize> = (0..n).filter(|s| !subset.contains(s)).collect();
    let m = subset.len();
    let dk = dim_of(m);
    let dt = dim_of(rest.len());
    let d = rho.dim();
    let strides: Vec<usize> = (0..n).map(|k| 3usize.pow((n - 1 - k) as u32)).collect();
    let compose = |sites: &[usize], idx: usize| -> usize {
        let len = sites.len();
        sites
            .iter()
            .enumerate()
            .map(|(p, &s)| digit(idx, p, len) * strides[s])
            .sum()
    };
    let kept_off: Vec<usize> = (0..dk).map(|i| compose(subset, i)).collect();
    let rest_off: Vec<usize> = (0..dt).map(|i| compose(&rest, i)).collect();
    let mut out = vec![C64::default(); dk * dk];
    for a in 0..dk {
        for b in 0..dk {
            let mut acc = C64::default();
            for &t in &rest_off {
                acc += rho.rho[(kept_off[a] + t) * d + kept_off[b] + t];
            }
            out[a * dk + b] = acc;
        }
    }
    Ok(ManyBodyState {
        n_sites: m,
        rho: out,
        site_order: subset.iter().map(|&s| rho.site_order[s]).collect(),
    })
}

/// Single-site reduced state as a 3×3 matrix.
pub fn site_matrix(rho: &ManyBodyState, site: usize) -> Result<Op3> {
    let r = reduced_density_matrix(rho, &[site])?;
    Ok(Op3::from_row_slice(&r.rho))
}

/// Two-site reduced state as a row-major 9×9 array.
pub fn pair_matrix(rho: &ManyBodyState, i: usize, j: usize) -> Result<[Complex64; 81]> {
    let r = reduced_density_matrix(rho, &[i, j])?;
    let mut out = [C64::default(); 81];
    out.copy_from_slice(&r.rho);
    Ok(out)
}
