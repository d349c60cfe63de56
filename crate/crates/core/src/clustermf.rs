//! Cluster mean-field dynamics: exact evolution of one plaquette, with the
//! rest of the lattice entering through self-consistent detunings read from
//! periodically translated copies of the same plaquette.
//!
//! Plaquette sites are numbered row by row, `s = iy·cx + ix`.

use serde::{Deserialize, Serialize};

use crate::engine::{integrate_observed, Flow, IntegratorConfig, OdeSystem};
use crate::error::{Error, Result};
use crate::liouville::{apply_generator, apply_with_shifts, dim_of, Capacity, GeneratorSpec, ManyBodyState};
use crate::model::{coupling_from_chi, power_law, Lattice, ModelParams, TdLattice};
use crate::observables::TimeSeries;
use crate::site::{as_complex, as_complex_mut, as_real, C64, DOWN, MID, UP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaquetteDims {
    pub cx: usize,
    pub cy: usize,
}

impl PlaquetteDims {
    pub fn new(cx: usize, cy: usize) -> Result<Self> {
        if !matches!(cx * cy, 1 | 2 | 4 | 9) || cx == 0 || cy == 0 {
            return Err(Error::InvalidParameter(format!("unsupported plaquette {cx}x{cy}")));
        }
        Ok(Self { cx, cy })
    }

    pub fn sites(&self) -> usize {
        self.cx * self.cy
    }

    pub fn coords(&self, s: usize) -> (i64, i64) {
        ((s % self.cx) as i64, (s / self.cx) as i64)
    }
}

/// Periodic tiling of the plaquette together with the coupling tables it
/// induces.
#[derive(Clone, Debug, PartialEq)]
pub struct Tiling {
    pub dims: PlaquetteDims,
    pub r_cut: f64,
    /// Row-major `n × n` intra-plaquette couplings.
    pub intra: Vec<f64>,
    /// `external[j·n + m]`: summed coupling of site `j` to every copy of
    /// plaquette site `m` outside the home plaquette.
    pub external: Vec<f64>,
}

impl Tiling {
    pub fn new(params: &ModelParams, dims: PlaquetteDims, r_cut: f64) -> Result<Self> {
        params.validate()?;
        let lattice = TdLattice::new(r_cut, params.lattice_constant)?;
        let diameter = (((dims.cx - 1).pow(2) + (dims.cy - 1).pow(2)) as f64).sqrt();
        if diameter > r_cut {
            return Err(Error::InvalidParameter(format!("r_cut {r_cut} is smaller than the plaquette")));
        }
        let coupling = coupling_from_chi(params.chi, params.kappa, &Lattice::Thermodynamic(lattice.clone()))?;
        let u = |d: (i64, i64)| power_law(coupling, params.kappa, lattice.distance(d));
        let n = dims.sites();
        let r2 = r_cut * r_cut * (1.0 + 1e-12);
        let mut intra = vec![0.0; n * n];
        let mut external = vec![0.0; n * n];
        let reach_x = lattice.extent() / dims.cx as i64 + 1;
        let reach_y = lattice.extent() / dims.cy as i64 + 1;
        for j in 0..n {
            let (xj, yj) = dims.coords(j);
            for m in 0..n {
                let (xm, ym) = dims.coords(m);
                if m != j {
                    intra[j * n + m] = u((xm - xj, ym - yj));
                }
                for a in -reach_x..=reach_x {
                    for b in -reach_y..=reach_y {
                        if a == 0 && b == 0 {
                            continue;
                        }
                        let d = (xm + a * dims.cx as i64 - xj, ym + b * dims.cy as i64 - yj);
                        if ((d.0 * d.0 + d.1 * d.1) as f64) <= r2 {
                            external[j * n + m] += u(d);
                        }
                    }
                }
            }
        }
        Ok(Self { dims, r_cut, intra, external })
    }

    pub fn n_sites(&self) -> usize {
        self.dims.sites()
    }
}

/// `Δ̃_j = Σ_m W_jm n_↑^{(m)}` for per-site populations `p`.
pub fn effective_detunings(tiling: &Tiling, p: &[f64]) -> Vec<f64> {
    let n = tiling.n_sites();
    (0..n).map(|j| (0..n).map(|m| tiling.external[j * n + m] * p[m]).sum()).collect()
}

/// Per-site population of `level` read from a flat density matrix.
fn site_populations(rho: &[C64], n: usize, level: usize) -> Vec<f64> {
    let d = dim_of(n);
    let mut p = vec![0.0; n];
    for r in 0..d {
        let w = rho[r * d + r].re;
        let mut x = r;
        for k in (0..n).rev() {
            if x % 3 == level {
                p[k] += w;
            }
            x /= 3;
        }
    }
    p
}

#[derive(Clone, Debug)]
pub struct ClusterSolver {
    pub params: ModelParams,
    pub tiling: Tiling,
    pub spec: GeneratorSpec,
}

impl ClusterSolver {
    /// `allow_large` unlocks the 3×3 plaquette, whose dense state alone needs
    /// several gigabytes.
    pub fn new(params: &ModelParams, dims: PlaquetteDims, r_cut: f64, allow_large: bool) -> Result<Self> {
        let tiling = Tiling::new(params, dims, r_cut)?;
        let capacity = if allow_large { Capacity::Plaquette } else { Capacity::Standard };
        let spec = GeneratorSpec::new(params, dims.sites(), tiling.intra.clone(), capacity)?;
        Ok(Self { params: params.clone(), tiling, spec })
    }

    pub fn n_sites(&self) -> usize {
        self.tiling.n_sites()
    }

    pub fn detunings(&self, rho: &ManyBodyState) -> Vec<f64> {
        effective_detunings(&self.tiling, &rho.populations(UP))
    }
}

/// Time derivative of the plaquette state.
pub fn cluster_rhs(solver: &ClusterSolver, rho: &ManyBodyState) -> Result<ManyBodyState> {
    if rho.n_sites != solver.n_sites() {
        return Err(Error::DimensionMismatch { expected: solver.n_sites(), got: rho.n_sites });
    }
    let spec = solver.spec.clone().with_extra_detunings(solver.detunings(rho))?;
    apply_generator(&spec, rho)
}

struct ClusterSystem<'a> {
    solver: &'a ClusterSolver,
}

impl OdeSystem for ClusterSystem<'_> {
    fn dim(&self) -> usize {
        2 * self.solver.spec.dim().pow(2)
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let rho = as_complex(y);
        let n = self.solver.n_sites();
        let shifts = effective_detunings(&self.solver.tiling, &site_populations(rho, n, UP));
        apply_with_shifts(&self.solver.spec, &shifts, rho, as_complex_mut(dy)).expect("dimensions checked");
    }

    fn project(&self, y: &mut [f64]) {
        let d = self.solver.spec.dim();
        let rho = as_complex_mut(y);
        for r in 0..d {
            for c in r..d {
                let v = 0.5 * (rho[r * d + c] + rho[c * d + r].conj());
                rho[r * d + c] = v;
                rho[c * d + r] = v.conj();
            }
        }
    }
}

pub fn evolve_cluster_observed<F>(
    solver: &ClusterSolver,
    rho0: &ManyBodyState,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    mut observer: F,
) -> Result<ManyBodyState>
where
    F: FnMut(f64, &ManyBodyState) -> Flow,
{
    if rho0.n_sites != solver.n_sites() {
        return Err(Error::DimensionMismatch { expected: solver.n_sites(), got: rho0.n_sites });
    }
    let sys = ClusterSystem { solver };
    let mut sample = rho0.clone();
    let (y, _) = integrate_observed(&sys, as_real(&rho0.rho), t_grid, cfg, |t, y| {
        sample.rho.copy_from_slice(as_complex(y));
        observer(t, &sample)
    })?;
    sample.rho.copy_from_slice(as_complex(&y));
    Ok(sample)
}

/// Channel names of [`evolve_cluster`]: plaquette averages followed by the
/// per-site `n_up_<s>`.
pub fn cluster_channels(n: usize) -> Vec<String> {
    let mut names: Vec<String> = ["n_up", "n_0", "n_down"].iter().map(|s| s.to_string()).collect();
    names.extend((0..n).map(|s| format!("n_up_{s}")));
    names
}

pub fn evolve_cluster(
    solver: &ClusterSolver,
    rho0: &ManyBodyState,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<(TimeSeries, ManyBodyState)> {
    let n = solver.n_sites();
    let names = cluster_channels(n);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut ts = TimeSeries::new(&refs);
    let last = evolve_cluster_observed(solver, rho0, t_grid, cfg, |t, s| {
        let up = s.populations(UP);
        let avg = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        let mut row = vec![avg(&up), avg(&s.populations(MID)), avg(&s.populations(DOWN))];
        row.extend(up);
        ts.push(t, &row);
        Flow::Continue
    })?;
    Ok((ts, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::sample_grid;
    use crate::liouville::{site_matrix, ManyBodyState};
    use crate::meanfield::{evolve_mf, MFState};
    use crate::model::SiteState;
    use crate::observables::oscillation_contrast;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qctc_like() -> ModelParams {
        ModelParams::new(-6.0, 4.0, 6.0, -18.0)
    }

    /// Brute-force lattice walk: every site within the cutoff that lies
    /// outside the home plaquette, folded back onto the plaquette.
    fn walk_detunings(p: &ModelParams, dims: PlaquetteDims, r_cut: f64, pop: &[f64]) -> Vec<f64> {
        let lat = TdLattice::new(r_cut, p.lattice_constant).unwrap();
        let c = coupling_from_chi(p.chi, p.kappa, &Lattice::Thermodynamic(lat.clone())).unwrap();
        (0..dims.sites())
            .map(|j| {
                let (xj, yj) = dims.coords(j);
                lat.displacements()
                    .into_iter()
                    .filter_map(|d| {
                        let (x, y) = (xj + d.0, yj + d.1);
                        let inside = (0..dims.cx as i64).contains(&x) && (0..dims.cy as i64).contains(&y);
                        if inside {
                            return None;
                        }
                        let m = (y.rem_euclid(dims.cy as i64) * dims.cx as i64 + x.rem_euclid(dims.cx as i64)) as usize;
                        Some(power_law(c, p.kappa, lat.distance(d)) * pop[m])
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn detunings_match_lattice_walk() {
        let p = qctc_like();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (cx, cy) in [(1, 1), (1, 2), (2, 1), (2, 2), (3, 3)] {
            let dims = PlaquetteDims::new(cx, cy).unwrap();
            let t = Tiling::new(&p, dims, 7.5).unwrap();
            let pop: Vec<f64> = (0..dims.sites()).map(|_| rng.random_range(0.0..1.0)).collect();
            let got = effective_detunings(&t, &pop);
            let want = walk_detunings(&p, dims, 7.5, &pop);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12 * w.abs().max(1.0), "{cx}x{cy}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn homogeneous_detuning_is_chi_minus_intra() {
        let p = qctc_like();
        let dims = PlaquetteDims::new(2, 2).unwrap();
        let t = Tiling::new(&p, dims, 10.0).unwrap();
        let got = effective_detunings(&t, &[0.3; 4]);
        for j in 0..4 {
            let intra: f64 = (0..4).map(|k| t.intra[j * 4 + k]).sum();
            assert!((got[j] - 0.3 * (p.chi - intra)).abs() < 1e-12);
        }
        assert!(effective_detunings(&t, &[0.0; 4]).iter().all(|&x| x == 0.0));
        let single = Tiling::new(&p, PlaquetteDims::new(1, 1).unwrap(), 10.0).unwrap();
        assert!((effective_detunings(&single, &[0.25])[0] - 0.25 * p.chi).abs() < 1e-12);
    }

    #[test]
    fn single_site_plaquette_is_mean_field() {
        let p = qctc_like();
        let solver = ClusterSolver::new(&p, PlaquetteDims::new(1, 1).unwrap(), 5.0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s0 = SiteState::random(&mut rng);
        let grid = sample_grid(0.0, 20.0, 0.5);
        let cfg = IntegratorConfig::with_tolerances(1e-11, 1e-13);
        let (mf, _) = evolve_mf(&p, &MFState::from_site(&s0), &grid, &cfg).unwrap();
        let mut k = 0;
        evolve_cluster_observed(&solver, &ManyBodyState::product(&[s0]), &grid, &cfg, |_, s| {
            let m = site_matrix(s, 0).unwrap();
            let want = mf[k].to_matrix();
            assert!(crate::site::max_abs(&(m - want)) < 1e-9);
            k += 1;
            Flow::Continue
        })
        .unwrap();
    }

    #[test]
    fn uncoupled_plaquette_stays_a_product() {
        let p = ModelParams::new(1.0, 3.0, 2.0, 0.0);
        let solver = ClusterSolver::new(&p, PlaquetteDims::new(1, 2).unwrap(), 3.0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sites = [SiteState::random(&mut rng), SiteState::random(&mut rng)];
        let last = evolve_cluster_observed(&solver, &ManyBodyState::product(&sites), &[0.0, 3.0], &IntegratorConfig::with_tolerances(1e-11, 1e-13), |_, _| Flow::Continue).unwrap();
        let a = site_matrix(&last, 0).unwrap();
        let b = site_matrix(&last, 1).unwrap();
        let prod = ManyBodyState::product(&[SiteState(a), SiteState(b)]);
        let err = last.rho.iter().zip(&prod.rho).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rhs_matches_generator_with_detunings() {
        let p = qctc_like();
        let solver = ClusterSolver::new(&p, PlaquetteDims::new(2, 2).unwrap(), 6.0, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sites: Vec<SiteState> = (0..4).map(|_| SiteState::random(&mut rng)).collect();
        let rho = ManyBodyState::product(&sites);
        let d = cluster_rhs(&solver, &rho).unwrap();
        assert!(d.trace().norm() < 1e-12);
        let sys = ClusterSystem { solver: &solver };
        let mut dy = vec![0.0; sys.dim()];
        sys.rhs(0.0, as_real(&rho.rho), &mut dy);
        let err = as_complex(&dy).iter().zip(&d.rho).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn undriven_ground_state_is_stationary() {
        let p = ModelParams::new(-5.0, 0.0, 6.0, -18.0);
        let solver = ClusterSolver::new(&p, PlaquetteDims::new(2, 2).unwrap(), 6.0, false).unwrap();
        let rho0 = ManyBodyState::product(&[SiteState::all_down(); 4]);
        let (ts, last) = evolve_cluster(&solver, &rho0, &sample_grid(0.0, 10.0, 0.5), &IntegratorConfig::default()).unwrap();
        assert!(ts.channel("n_up").unwrap().iter().all(|&x| x.abs() < 1e-14));
        assert!(last.rho.iter().zip(&rho0.rho).all(|(a, b)| (a - b).norm() < 1e-14));
    }

    #[test]
    fn equivalent_sites_stay_equal_and_detunings_self_consistent() {
        let p = ModelParams::new(-2.0, 0.5, 6.0, -18.0);
        let solver = ClusterSolver::new(&p, PlaquetteDims::new(2, 2).unwrap(), 6.0, false).unwrap();
        let rho0 = ManyBodyState::product(&[SiteState::all_down(); 4]);
        let grid = sample_grid(0.0, 150.0, 1.0);
        let (ts, last) = evolve_cluster(&solver, &rho0, &grid, &IntegratorConfig::default()).unwrap();
        let per: Vec<&[f64]> = (0..4).map(|s| ts.channel(&format!("n_up_{s}")).unwrap()).collect();
        for k in 0..ts.len() {
            for s in 1..4 {
                assert!((per[s][k] - per[0][k]).abs() < 1e-9);
            }
        }
        let c = oscillation_contrast(&ts.times, ts.channel("n_up").unwrap(), 100.0, 25.0).unwrap();
        assert!(c.delta2 < 1e-8, "{}", c.delta2);
        // at the stationary state the detunings reproduce themselves
        let dt = solver.detunings(&last);
        let next = cluster_rhs(&solver, &last).unwrap();
        assert!(next.rho.iter().all(|z| z.norm() < 1e-6));
        let frozen = solver.spec.clone().with_extra_detunings(dt.clone()).unwrap();
        let later = crate::liouville::evolve_exact(&frozen, &last, &[0.0, 20.0], &IntegratorConfig::default()).unwrap();
        let again = solver.detunings(&later[1]);
        assert!(dt.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn large_plaquette_needs_opt_in() {
        let p = qctc_like();
        let dims = PlaquetteDims::new(3, 3).unwrap();
        assert!(matches!(ClusterSolver::new(&p, dims, 5.0, false), Err(Error::TooManySites { .. })));
        assert!(ClusterSolver::new(&p, dims, 5.0, true).is_ok());
        assert!(PlaquetteDims::new(2, 3).is_err());
    }
}
