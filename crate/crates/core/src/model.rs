//! Physical parameters, lattice geometry, power-law couplings and initial
//! states shared by every solver.
//!
//! All energies are in units of the decay rate and all lengths in units of the
//! lattice constant. Single-site matrices use the fixed basis order
//! `(↓, 0, ↑)` = indices `(0, 1, 2)`.

use nalgebra::Matrix3;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::site::{max_abs, Op3, DOWN, MID, UP};

/// Model parameters of the driven three-level lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Detuning Δ of the lower transition.
    pub delta: f64,
    /// Rabi frequency Ω on the ↓–0 transition.
    pub omega_lower: f64,
    /// Rabi frequency ω on the 0–↑ transition.
    pub omega_upper: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    /// Total interaction energy χ of one site with all others.
    pub chi: f64,
    #[serde(default = "three")]
    pub kappa: u32,
    #[serde(default = "one")]
    pub lattice_constant: f64,
}

fn one() -> f64 {
    1.0
}

fn three() -> u32 {
    3
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            delta: 0.0,
            omega_lower: 0.0,
            omega_upper: 0.0,
            gamma: 1.0,
            chi: 0.0,
            kappa: 3,
            lattice_constant: 1.0,
        }
    }
}

impl ModelParams {
    pub fn new(delta: f64, omega_lower: f64, omega_upper: f64, chi: f64) -> Self {
        Self {
            delta,
            omega_lower,
            omega_upper,
            chi,
            ..Self::default()
        }
    }

    pub fn with_kappa(mut self, kappa: u32) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.delta,
            self.omega_lower,
            self.omega_upper,
            self.gamma,
            self.chi,
            self.lattice_constant,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("all parameters must be finite".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::InvalidParameter(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.kappa < 1 {
            return Err(Error::InvalidParameter("kappa must be >= 1".into()));
        }
        if self.lattice_constant <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lattice_constant must be > 0, got {}",
                self.lattice_constant
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Open,
    /// Minimum-image distances on a torus.
    Periodic,
}

/// Finite `nx × ny` square lattice. Site `(x, y)` has index `x + nx * y`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteLattice {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub boundary: Boundary,
}

impl FiniteLattice {
    pub fn new(nx: usize, ny: usize, spacing: f64, boundary: Boundary) -> Result<Self> {
        if nx * ny < 2 {
            return Err(Error::InvalidLattice(format!("{nx}x{ny} lattice has fewer than 2 sites")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidLattice(format!("spacing must be > 0, got {spacing}")));
        }
        Ok(Self { nx, ny, spacing, boundary })
    }

    pub fn open(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, 1.0, Boundary::Open)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, site: usize) -> (usize, usize) {
        (site % self.nx, site / self.nx)
    }

    pub fn positions(&self) -> Vec<(f64, f64)> {
        (0..self.len())
            .map(|s| {
                let (x, y) = self.coords(s);
                (x as f64 * self.spacing, y as f64 * self.spacing)
            })
            .collect()
    }

    /// Site at (or, for even extents, closest to) the geometric center.
    pub fn reference_site(&self) -> usize {
        (self.nx - 1) / 2 + self.nx * ((self.ny - 1) / 2)
    }

    /// Integer displacement from `i` to `j`, wrapped for periodic boundaries.
    pub fn displacement(&self, i: usize, j: usize) -> (i64, i64) {
        let (xi, yi) = self.coords(i);
        let (xj, yj) = self.coords(j);
        let mut dx = xj as i64 - xi as i64;
        let mut dy = yj as i64 - yi as i64;
        if self.boundary == Boundary::Periodic {
            dx = wrap(dx, self.nx as i64);
            dy = wrap(dy, self.ny as i64);
        }
        (dx, dy)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (dx, dy) = self.displacement(i, j);
        ((dx * dx + dy * dy) as f64).sqrt() * self.spacing
    }
}

/// Minimum-image representative of `d` modulo `n`, in `[-(n-1)/2, n/2]`.
pub fn wrap(d: i64, n: i64) -> i64 {
    let m = d.rem_euclid(n);
    if m > n / 2 {
        m - n
    } else {
        m
    }
}

/// Infinite translation-invariant lattice with all correlation and
/// interaction sums truncated at `r_cut` (in units of the spacing).
#[derive(Clone, Debug, PartialEq)]
pub struct TdLattice {
    pub r_cut: f64,
    pub spacing: f64,
}

impl TdLattice {
    pub fn new(r_cut: f64, spacing: f64) -> Result<Self> {
        if !(r_cut >= 1.0 && r_cut.is_finite()) {
            return Err(Error::InvalidLattice(format!("r_cut must be >= 1 lattice constant, got {r_cut}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidLattice(format!("spacing must be > 0, got {spacing}")));
        }
        Ok(Self { r_cut, spacing })
    }

    /// Largest integer coordinate reachable inside the cutoff disk.
    pub fn extent(&self) -> i64 {
        (self.r_cut + 1e-9).floor() as i64
    }

    /// All integer displacements with `0 < |d| <= r_cut`, sorted
    /// lexicographically. The set is closed under `d -> -d`.
    pub fn displacements(&self) -> Vec<(i64, i64)> {
        let r = self.extent();
        let r2 = self.r_cut * self.r_cut * (1.0 + 1e-12);
        let mut out = Vec::new();
        for dx in -r..=r {
            for dy in -r..=r {
                let n2 = (dx * dx + dy * dy) as f64;
                if n2 > 0.0 && n2 <= r2 {
                    out.push((dx, dy));
                }
            }
        }
        out
    }

    pub fn distance(&self, d: (i64, i64)) -> f64 {
        ((d.0 * d.0 + d.1 * d.1) as f64).sqrt() * self.spacing
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Lattice {
    Finite(FiniteLattice),
    Thermodynamic(TdLattice),
}

impl Lattice {
    /// Distances from the reference site to every other site (finite) or to
    /// every displacement inside the cutoff (thermodynamic limit).
    pub fn reference_distances(&self) -> Vec<f64> {
        match self {
            Lattice::Finite(l) => {
                let r = l.reference_site();
                (0..l.len()).filter(|&j| j != r).map(|j| l.distance(r, j)).collect()
            }
            Lattice::Thermodynamic(l) => l.displacements().into_iter().map(|d| l.distance(d)).collect(),
        }
    }
}

/// Lattice sum `Σ_{j≠0} r_{0j}^{-κ}` around the reference site.
pub fn lattice_sum(kappa: u32, lattice: &Lattice) -> Result<f64> {
    let dists = lattice.reference_distances();
    if dists.is_empty() {
        return Err(Error::InvalidLattice("lattice has no neighbours".into()));
    }
    if let Some(d) = dists.iter().find(|&&d| d <= 0.0) {
        return Err(Error::InvalidLattice(format!("non-positive pair distance {d}")));
    }
    Ok(dists.iter().map(|&r| r.powi(-(kappa as i32))).sum())
}

/// Power-law coupling `C_κ` such that the reference site's total interaction
/// energy equals `chi`.
pub fn coupling_from_chi(chi: f64, kappa: u32, lattice: &Lattice) -> Result<f64> {
    let s = lattice_sum(kappa, lattice)?;
    if s == 0.0 || !s.is_finite() {
        return Err(Error::InvalidLattice(format!("degenerate lattice sum {s}")));
    }
    Ok(chi / s)
}

pub fn power_law(coupling: f64, kappa: u32, r: f64) -> f64 {
    coupling / r.powi(kappa as i32)
}

/// Pair interaction table.
#[derive(Clone, Debug, PartialEq)]
pub enum PairPotentials {
    /// Row-major `N × N` matrix with zero diagonal.
    Finite { n: usize, u: Vec<f64> },
    /// `U(d)` for every displacement inside the cutoff disk.
    Thermodynamic { entries: Vec<((i64, i64), f64)> },
}

impl PairPotentials {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            PairPotentials::Finite { n, u } => u[i * n + j],
            PairPotentials::Thermodynamic { .. } => panic!("site-indexed lookup on a thermodynamic table"),
        }
    }
}

pub fn pair_potentials(lattice: &Lattice, coupling: f64, kappa: u32) -> PairPotentials {
    match lattice {
        Lattice::Finite(l) => {
            let n = l.len();
            let mut u = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        u[i * n + j] = power_law(coupling, kappa, l.distance(i, j));
                    }
                }
            }
            PairPotentials::Finite { n, u }
        }
        Lattice::Thermodynamic(l) => PairPotentials::Thermodynamic {
            entries: l
                .displacements()
                .into_iter()
                .map(|d| (d, power_law(coupling, kappa, l.distance(d))))
                .collect(),
        },
    }
}

/// Single-site density matrix over `(↓, 0, ↑)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiteState(pub Op3);

pub const STATE_TOL: f64 = 1e-9;

impl SiteState {
    pub fn pure(level: usize) -> Self {
        let mut m = Op3::zeros();
        m[(level, level)] = Complex64::new(1.0, 0.0);
        SiteState(m)
    }

    pub fn all_down() -> Self {
        Self::pure(DOWN)
    }

    pub fn all_zero() -> Self {
        Self::pure(MID)
    }

    pub fn matrix(&self) -> &Op3 {
        &self.0
    }

    pub fn population(&self, level: usize) -> f64 {
        self.0[(level, level)].re
    }

    pub fn n_up(&self) -> f64 {
        self.population(UP)
    }

    /// Expectation value `⟨|α⟩⟨β|⟩ = ρ_{βα}`.
    pub fn sigma(&self, alpha: usize, beta: usize) -> Complex64 {
        self.0[(beta, alpha)]
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        let herm = max_abs(&(self.0 - self.0.adjoint()));
        if herm > tol {
            return Err(Error::NotHermitian(herm));
        }
        let tr = self.0.trace();
        if (tr.re - 1.0).abs() > tol || tr.im.abs() > tol {
            return Err(Error::InvalidParameter(format!("trace {tr} != 1")));
        }
        let eig = self.0.symmetric_eigenvalues();
        if eig.iter().any(|&e| e < -tol || e > 1.0 + tol) {
            return Err(Error::InvalidParameter(format!("eigenvalues {eig:?} outside [0, 1]")));
        }
        Ok(())
    }

    /// Density matrix `G G† / tr(G G†)` from a complex Ginibre matrix.
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let mut g = Matrix3::<Complex64>::zeros();
        for v in g.iter_mut() {
            *v = Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
        }
        let rho = g * g.adjoint();
        let tr = rho.trace().re;
        let mut rho = rho / Complex64::new(tr, 0.0);
        hermitize3(&mut rho);
        SiteState(rho)
    }
}

fn hermitize3(m: &mut Op3) {
    let h = (*m + m.adjoint()) * Complex64::new(0.5, 0.0);
    *m = h;
}

/// Initial product states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    AllDown,
    AllZero,
    /// Independent random single-site state on every site.
    RandomProduct { seed: u64 },
    /// One random single-site state copied onto every site (homogeneous).
    RandomSeeded { seed: u64 },
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::AllDown
    }
}

impl InitialState {
    pub fn parse(kind: &str, seed: u64) -> Result<Self> {
        match kind {
            "all_down" => Ok(Self::AllDown),
            "all_zero" => Ok(Self::AllZero),
            "random_product" => Ok(Self::RandomProduct { seed }),
            "random_seeded" => Ok(Self::RandomSeeded { seed }),
            other => Err(Error::UnknownInitialState(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::AllDown => "all_down",
            Self::AllZero => "all_zero",
            Self::RandomProduct { .. } => "random_product",
            Self::RandomSeeded { .. } => "random_seeded",
        }
    }

    /// Per-site states for `n` sites.
    pub fn product(&self, n: usize) -> Vec<SiteState> {
        match *self {
            Self::AllDown => vec![SiteState::all_down(); n],
            Self::AllZero => vec![SiteState::all_zero(); n],
            Self::RandomSeeded { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                vec![SiteState::random(&mut rng); n]
            }
            Self::RandomProduct { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| SiteState::random(&mut rng)).collect()
            }
        }
    }

    /// Single homogeneous state for translation-invariant solvers.
    pub fn homogeneous(&self) -> Result<SiteState> {
        match self {
            Self::RandomProduct { .. } => Err(Error::InvalidParameter(
                "random_product is inhomogeneous; use random_seeded in the thermodynamic limit".into(),
            )),
            _ => Ok(self.product(1)[0]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs())
    }

    #[test]
    fn two_site_coupling_is_chi() {
        let l = Lattice::Finite(FiniteLattice::open(2, 1).unwrap());
        assert_eq!(coupling_from_chi(-18.0, 3, &l).unwrap(), -18.0);
    }

    #[test]
    fn three_by_three_coupling() {
        let l = Lattice::Finite(FiniteLattice::open(3, 3).unwrap());
        // 4 nearest neighbours at 1, 4 diagonal ones at sqrt 2
        let s: f64 = 4.0 + 4.0 * 2f64.powf(-1.5);
        let c = coupling_from_chi(-18.0, 3, &l).unwrap();
        assert!(close(c, -18.0 / s, 1e-14));
        assert!((c - (-3.3245)).abs() < 1e-4);
    }

    #[test]
    fn td_lattice_sum_converges_with_cutoff() {
        // brute-force sum over the square [-R, R]^2 with explicit disk test
        let brute = |r: i64| -> f64 {
            let mut s = 0.0;
            for x in -r..=r {
                for y in -r..=r {
                    let n2 = x * x + y * y;
                    if n2 > 0 && n2 <= r * r {
                        s += (n2 as f64).powf(-1.5);
                    }
                }
            }
            s
        };
        let s40 = lattice_sum(3, &Lattice::Thermodynamic(TdLattice::new(40.0, 1.0).unwrap())).unwrap();
        let s30 = lattice_sum(3, &Lattice::Thermodynamic(TdLattice::new(30.0, 1.0).unwrap())).unwrap();
        assert!(close(s40, brute(40), 1e-12));
        // the 2-D tail of r^-3 falls off like 2π/R, so 30 -> 40 moves the sum by ~0.6%
        let rel = (s40 - s30) / s40;
        assert!((rel - 0.005_923_268_6).abs() < 1e-9);
        let tail = 2.0 * std::f64::consts::PI * (1.0 / 30.0 - 1.0 / 40.0) / s40;
        assert!((rel - tail).abs() / tail < 0.05);
        let c = coupling_from_chi(-18.0, 3, &Lattice::Thermodynamic(TdLattice::new(40.0, 1.0).unwrap())).unwrap();
        assert!(close(c, -18.0 / brute(40), 1e-12));
    }

    #[test]
    fn potentials_reproduce_chi_around_reference() {
        for (nx, ny) in [(3, 3), (4, 4), (5, 3)] {
            let fl = FiniteLattice::open(nx, ny).unwrap();
            let r = fl.reference_site();
            let l = Lattice::Finite(fl);
            let c = coupling_from_chi(-18.0, 3, &l).unwrap();
            let p = pair_potentials(&l, c, 3);
            let total: f64 = (0..nx * ny).filter(|&j| j != r).map(|j| p.get(r, j)).sum();
            assert!(close(total, -18.0, 1e-12));
        }
        let l = Lattice::Thermodynamic(TdLattice::new(12.0, 1.0).unwrap());
        let c = coupling_from_chi(-18.0, 3, &l).unwrap();
        if let PairPotentials::Thermodynamic { entries } = pair_potentials(&l, c, 3) {
            let total: f64 = entries.iter().map(|e| e.1).sum();
            assert!(close(total, -18.0, 1e-12));
        } else {
            unreachable!()
        }
    }

    #[test]
    fn simple_potential_values() {
        assert_eq!(power_law(-18.0, 3, 1.0), -18.0);
        assert_eq!(power_law(-18.0, 3, 2.0), -2.25);
        let c1 = -7.0;
        assert_eq!(power_law(c1, 1, 2.0), c1 / 2.0);
    }

    #[test]
    fn potentials_symmetric_and_displacements_closed() {
        let l = Lattice::Finite(FiniteLattice::new(4, 3, 1.0, Boundary::Periodic).unwrap());
        let p = pair_potentials(&l, 1.0, 3);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(p.get(i, j), p.get(j, i));
                if i != j {
                    assert!(p.get(i, j) > 0.0);
                }
            }
        }
        let td = TdLattice::new(7.5, 1.0).unwrap();
        let ds = td.displacements();
        for &(x, y) in &ds {
            assert!(ds.contains(&(-x, -y)));
        }
    }

    #[test]
    fn empty_lattice_rejected() {
        assert!(FiniteLattice::open(1, 1).is_err());
        assert!(TdLattice::new(0.5, 1.0).is_err());
    }

    #[test]
    fn initial_states() {
        let d = InitialState::AllDown.homogeneous().unwrap();
        assert_eq!(d.population(DOWN), 1.0);
        let z = InitialState::AllZero.homogeneous().unwrap();
        assert_eq!(z.population(MID), 1.0);
        let a = InitialState::RandomSeeded { seed: 7 }.homogeneous().unwrap();
        let b = InitialState::RandomSeeded { seed: 7 }.homogeneous().unwrap();
        assert_eq!(a, b);
        a.check(STATE_TOL).unwrap();
        let prod = InitialState::RandomProduct { seed: 3 }.product(4);
        assert_ne!(prod[0], prod[1]);
        for s in &prod {
            s.check(STATE_TOL).unwrap();
        }
        assert!(matches!(InitialState::parse("ghz", 0), Err(Error::UnknownInitialState(_))));
    }
}
