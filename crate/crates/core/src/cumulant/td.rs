//! Translation-invariant cumulant equations in the thermodynamic limit.
//!
//! The state is one site mean plus one connected block per displacement
//! `0 < |d| ≤ r_cut`. Blocks may be stored for every displacement, for a
//! half plane (the other half follows from `χ_{−d} = swap(χ_d)`), or for one
//! representative per orbit of the square-lattice point group when the
//! state carries that symmetry (all homogeneous product states do, and the
//! flow preserves it).
//!
//! The same equations describe a homogeneous state on a periodic `L × L`
//! lattice exactly: the ball becomes the set of nonzero minimum-image
//! displacements and every displacement sum wraps around the torus.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::kernel::{g_first, g_second, kron, swap, Block, PairInputs, PairKernel, ZERO_BLOCK};
use crate::engine::{integrate_observed, Flow, IntegrationStats, IntegratorConfig, OdeSystem};
use crate::error::{Error, Result};
use crate::model::{
    coupling_from_chi, power_law, wrap as min_image, Boundary, FiniteLattice, Lattice, ModelParams, SiteState, TdLattice,
};
use crate::site::{as_complex, as_complex_mut, local_generator, n_up_commutator, LocalTerms, Op3, C64, I, UP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdStorage {
    Full,
    HalfPlane,
    /// One block per point-group orbit; requires a symmetric state.
    #[default]
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convolution {
    #[default]
    Auto,
    Direct,
    Fft,
}

/// Displacement bookkeeping for one cutoff and storage mode.
#[derive(Clone, Debug, PartialEq)]
pub struct TdLayout {
    pub lattice: TdLattice,
    pub storage: TdStorage,
    /// Stored displacements.
    pub reps: Vec<(i64, i64)>,
    /// Every displacement in the ball, lexicographic.
    pub ball: Vec<(i64, i64)>,
    /// For each ball entry: stored index and whether the block is swapped.
    pub source: Vec<(usize, bool)>,
    /// Side length of the torus for periodic lattices.
    pub period: Option<i64>,
    extent: i64,
    /// Ball index of each grid cell `(dx + R, dy + R)`, or `usize::MAX`.
    grid_index: Vec<usize>,
}

fn canonical(d: (i64, i64)) -> (i64, i64) {
    let (a, b) = (d.0.abs(), d.1.abs());
    (a.max(b), a.min(b))
}

fn in_half_plane(d: (i64, i64)) -> bool {
    d.0 > 0 || (d.0 == 0 && d.1 > 0)
}

impl TdLayout {
    pub fn new(lattice: TdLattice, storage: TdStorage) -> Self {
        let ball = lattice.displacements();
        let extent = lattice.extent();
        Self::build(lattice, storage, ball, extent, None)
    }

    /// Periodic `side × side` lattice. `lattice.r_cut` is set to the largest
    /// minimum-image distance and only serves as a label.
    pub fn torus(side: usize, spacing: f64, storage: TdStorage) -> Result<Self> {
        if side < 2 {
            return Err(Error::InvalidLattice(format!("torus side must be >= 2, got {side}")));
        }
        let l = side as i64;
        let extent = l / 2;
        let lo = -((l - 1) / 2);
        let mut ball = Vec::with_capacity(side * side - 1);
        for dx in lo..=extent {
            for dy in lo..=extent {
                if (dx, dy) != (0, 0) {
                    ball.push((dx, dy));
                }
            }
        }
        let r_max = ((2 * extent * extent) as f64).sqrt().max(1.0);
        let lattice = TdLattice::new(r_max, spacing)?;
        Ok(Self::build(lattice, storage, ball, extent, Some(l)))
    }

    /// Same lattice, different storage.
    pub fn with_storage(&self, storage: TdStorage) -> Self {
        Self::build(self.lattice.clone(), storage, self.ball.clone(), self.extent, self.period)
    }

    fn build(
        lattice: TdLattice,
        storage: TdStorage,
        ball: Vec<(i64, i64)>,
        extent: i64,
        period: Option<i64>,
    ) -> Self {
        let wrapped = |d: (i64, i64)| match period {
            Some(l) => (min_image(d.0, l), min_image(d.1, l)),
            None => d,
        };
        let side = (2 * extent + 1) as usize;
        let mut grid_index = vec![usize::MAX; side * side];
        for (k, d) in ball.iter().enumerate() {
            grid_index[((d.0 + extent) as usize) * side + (d.1 + extent) as usize] = k;
        }
        let reps: Vec<(i64, i64)> = match storage {
            TdStorage::Full => ball.clone(),
            TdStorage::HalfPlane => ball.iter().cloned().filter(|d| in_half_plane(*d)).collect(),
            TdStorage::Symmetric => ball.iter().cloned().filter(|d| canonical(*d) == *d).collect(),
        };
        let rep_index = |d: (i64, i64)| reps.binary_search(&d).expect("representative present");
        let source = ball
            .iter()
            .map(|&d| match storage {
                TdStorage::Full => (rep_index(d), false),
                TdStorage::HalfPlane if in_half_plane(d) => (rep_index(d), false),
                TdStorage::HalfPlane => (rep_index(wrapped((-d.0, -d.1))), true),
                TdStorage::Symmetric => (rep_index(canonical(d)), false),
            })
            .collect();
        Self { lattice, storage, reps, ball, source, period, extent, grid_index }
    }

    pub fn extent(&self) -> i64 {
        self.extent
    }

    /// Index into `ball`, if `d` lies inside the cutoff (on a torus: if `d`
    /// is not a multiple of the period).
    pub fn ball_index(&self, d: (i64, i64)) -> Option<usize> {
        let d = match self.period {
            Some(l) => (min_image(d.0, l), min_image(d.1, l)),
            None => d,
        };
        let r = self.extent;
        if d.0.abs() > r || d.1.abs() > r {
            return None;
        }
        let side = (2 * r + 1) as usize;
        let k = self.grid_index[((d.0 + r) as usize) * side + (d.1 + r) as usize];
        (k != usize::MAX).then_some(k)
    }

    /// Number of ball displacements mapped onto each stored block.
    pub fn multiplicity(&self) -> Vec<usize> {
        let mut m = vec![0; self.reps.len()];
        for (k, _) in &self.source {
            m[*k] += 1;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CumulantStateTD {
    pub layout: Arc<TdLayout>,
    pub mean: Op3,
    /// One block per `layout.reps` entry, first factor at the origin.
    pub blocks: Vec<Block>,
}

impl CumulantStateTD {
    pub fn product(layout: Arc<TdLayout>, site: &SiteState) -> Self {
        let n = layout.reps.len();
        Self { layout, mean: site.0, blocks: vec![ZERO_BLOCK; n] }
    }

    pub fn n_up(&self) -> f64 {
        self.mean[(UP, UP)].re
    }

    /// Connected block for any displacement in the ball.
    pub fn block_at(&self, d: (i64, i64)) -> Option<Block> {
        let k = self.layout.ball_index(d)?;
        let (src, swapped) = self.layout.source[k];
        Some(if swapped { swap(&self.blocks[src]) } else { self.blocks[src] })
    }

    /// `Σ_{0<|d|≤r_cut} f(d, χ_d)`.
    pub fn sum_over_displacements<F: Fn((i64, i64), &Block) -> f64>(&self, f: F) -> f64 {
        let mut acc = 0.0;
        for (d, &(src, swapped)) in self.layout.ball.iter().zip(&self.layout.source) {
            if swapped {
                acc += f(*d, &swap(&self.blocks[src]));
            } else {
                acc += f(*d, &self.blocks[src]);
            }
        }
        acc
    }

    pub fn drop_cumulants(&self) -> Self {
        Self { layout: self.layout.clone(), mean: self.mean, blocks: vec![ZERO_BLOCK; self.blocks.len()] }
    }

    /// Re-express the state in another storage layout with the same cutoff.
    /// Fails if the target layout cannot represent the state.
    pub fn convert(&self, storage: TdStorage, tol: f64) -> Result<Self> {
        let layout = Arc::new(self.layout.with_storage(storage));
        let mut blocks = vec![ZERO_BLOCK; layout.reps.len()];
        for (k, d) in layout.reps.iter().enumerate() {
            blocks[k] = self.block_at(*d).expect("same ball");
        }
        let out = Self { layout, mean: self.mean, blocks };
        for d in &self.layout.ball {
            let a = self.block_at(*d).unwrap();
            let b = out.block_at(*d).unwrap();
            let err = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            if err > tol {
                return Err(Error::InvalidParameter(format!(
                    "state is not representable in {storage:?} storage (deviation {err:.3e} at {d:?})"
                )));
            }
        }
        Ok(out)
    }

    /// Worst deviation from Hermiticity, unit trace, vanishing partial traces
    /// and (for full storage) exchange symmetry.
    pub fn invariant_error(&self) -> f64 {
        let m = &self.mean;
        let mut worst = (m.trace() - C64::new(1.0, 0.0)).norm().max(crate::site::max_abs(&(m - m.adjoint())));
        for b in &self.blocks {
            worst = worst.max(super::kernel::hermiticity_error(b)).max(super::kernel::partial_trace_error(b));
        }
        if self.layout.storage == TdStorage::Full {
            for d in &self.layout.ball {
                let a = self.block_at(*d).unwrap();
                let b = swap(&self.block_at((-d.0, -d.1)).unwrap());
                worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max));
            }
        }
        worst
    }

    pub fn dim(&self) -> usize {
        2 * (9 + 81 * self.blocks.len())
    }

    pub fn pack_into(&self, y: &mut [f64]) {
        let z = as_complex_mut(y);
        for r in 0..3 {
            for c in 0..3 {
                z[3 * r + c] = self.mean[(r, c)];
            }
        }
        for (k, b) in self.blocks.iter().enumerate() {
            z[9 + 81 * k..9 + 81 * (k + 1)].copy_from_slice(b);
        }
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.pack_into(&mut y);
        y
    }

    pub fn unpack_into(&mut self, y: &[f64]) {
        let z = as_complex(y);
        self.mean = Op3::from_row_slice(&z[..9]);
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.copy_from_slice(&z[9 + 81 * k..9 + 81 * (k + 1)]);
        }
    }
}

/// Sums `B(x) = Σ_m U(m) g(x − m)` for every `x` in the ball.
enum Convolver {
    Direct,
    Fft { size: usize, fwd: Arc<dyn Fft<f64>>, inv: Arc<dyn Fft<f64>>, u_hat: Vec<C64> },
}

impl Convolver {
    fn new(layout: &TdLayout, u_ball: &[f64], method: Convolution) -> Self {
        let r = layout.extent() as usize;
        // Zero padding makes the product in Fourier space a linear
        // convolution; on a torus the cyclic one of size L is what we want.
        let size = match layout.period {
            Some(l) => l as usize,
            None => (3 * r + 1).next_power_of_two().max(4),
        };
        let use_fft = match method {
            Convolution::Direct => false,
            Convolution::Fft => true,
            Convolution::Auto => {
                let direct = (2 * layout.reps.len() * layout.ball.len()) as f64;
                let fft = 20.0 * (size * size) as f64 * (size as f64).log2();
                direct > fft
            }
        };
        if !use_fft {
            return Convolver::Direct;
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let mut u_hat = vec![C64::default(); size * size];
        for (d, u) in layout.ball.iter().zip(u_ball) {
            u_hat[wrap(d.0, size) * size + wrap(d.1, size)] = C64::new(*u, 0.0);
        }
        fft2(&mut u_hat, size, &fwd);
        Convolver::Fft { size, fwd, inv, u_hat }
    }

    /// `g` and the result are indexed like `layout.ball`; only entries listed
    /// in `targets` are guaranteed to be filled.
    fn apply(&self, layout: &TdLayout, u_ball: &[f64], g: &[Op3], targets: &[usize]) -> Vec<Op3> {
        match self {
            Convolver::Direct => {
                let mut out = vec![Op3::zeros(); layout.ball.len()];
                for &t in targets {
                    let x = layout.ball[t];
                    let mut acc = Op3::zeros();
                    for (m, u) in layout.ball.iter().zip(u_ball) {
                        if let Some(k) = layout.ball_index((x.0 - m.0, x.1 - m.1)) {
                            acc += g[k] * C64::new(*u, 0.0);
                        }
                    }
                    out[t] = acc;
                }
                out
            }
            Convolver::Fft { size, fwd, inv, u_hat } => {
                let size = *size;
                let mut out = vec![Op3::zeros(); layout.ball.len()];
                let norm = 1.0 / (size * size) as f64;
                let mut buf = vec![C64::default(); size * size];
                for e in 0..9 {
                    buf.iter_mut().for_each(|v| *v = C64::default());
                    for (d, gk) in layout.ball.iter().zip(g) {
                        buf[wrap(d.0, size) * size + wrap(d.1, size)] = gk[(e / 3, e % 3)];
                    }
                    fft2(&mut buf, size, fwd);
                    for (b, u) in buf.iter_mut().zip(u_hat) {
                        *b *= u;
                    }
                    fft2(&mut buf, size, inv);
                    for (d, o) in layout.ball.iter().zip(out.iter_mut()) {
                        o[(e / 3, e % 3)] = buf[wrap(d.0, size) * size + wrap(d.1, size)] * norm;
                    }
                }
                out
            }
        }
    }
}

fn wrap(x: i64, size: usize) -> usize {
    x.rem_euclid(size as i64) as usize
}

fn fft2(buf: &mut [C64], size: usize, plan: &Arc<dyn Fft<f64>>) {
    plan.process(buf);
    let mut col = vec![C64::default(); size];
    for c in 0..size {
        for r in 0..size {
            col[r] = buf[r * size + c];
        }
        plan.process(&mut col);
        for r in 0..size {
            buf[r * size + c] = col[r];
        }
    }
}

/// Right-hand side of the thermodynamic-limit equations.
pub struct TdSolver {
    pub params: ModelParams,
    pub layout: Arc<TdLayout>,
    /// `U(d)` for every ball displacement.
    pub u_ball: Vec<f64>,
    /// `Σ_d U(d)`, equal to `χ` by construction of the coupling.
    pub chi_sum: f64,
    kernel: PairKernel,
    conv: Convolver,
    /// Ball indices of `d` and `−d` for every stored block.
    targets: Vec<(usize, usize)>,
    target_list: Vec<usize>,
}

impl TdSolver {
    pub fn new(params: &ModelParams, r_cut: f64, storage: TdStorage, method: Convolution) -> Result<Self> {
        params.validate()?;
        let lattice = TdLattice::new(r_cut, params.lattice_constant)?;
        let coupling = coupling_from_chi(params.chi, params.kappa, &Lattice::Thermodynamic(lattice.clone()))?;
        Self::with_layout(params, TdLayout::new(lattice, storage), coupling, method)
    }

    /// Homogeneous states on a periodic `side × side` lattice, with the
    /// coupling normalised like [`FiniteLattice`] with periodic boundaries.
    pub fn torus(params: &ModelParams, side: usize, storage: TdStorage, method: Convolution) -> Result<Self> {
        params.validate()?;
        let lat = FiniteLattice::new(side, side, params.lattice_constant, Boundary::Periodic)?;
        let coupling = coupling_from_chi(params.chi, params.kappa, &Lattice::Finite(lat))?;
        Self::with_layout(params, TdLayout::torus(side, params.lattice_constant, storage)?, coupling, method)
    }

    fn with_layout(params: &ModelParams, layout: TdLayout, coupling: f64, method: Convolution) -> Result<Self> {
        let layout = Arc::new(layout);
        let u_ball: Vec<f64> =
            layout.ball.iter().map(|d| power_law(coupling, params.kappa, layout.lattice.distance(*d))).collect();
        let chi_sum = u_ball.iter().sum();
        let conv = Convolver::new(&layout, &u_ball, method);
        let targets: Vec<(usize, usize)> = layout
            .reps
            .iter()
            .map(|d| (layout.ball_index(*d).expect("rep in ball"), layout.ball_index((-d.0, -d.1)).expect("ball symmetric")))
            .collect();
        let mut target_list: Vec<usize> = targets.iter().flat_map(|&(a, b)| [a, b]).collect();
        target_list.sort_unstable();
        target_list.dedup();
        Ok(Self {
            params: params.clone(),
            layout,
            u_ball,
            chi_sum,
            kernel: PairKernel::new(LocalTerms::from(params)),
            conv,
            targets,
            target_list,
        })
    }

    pub fn uses_fft(&self) -> bool {
        matches!(self.conv, Convolver::Fft { .. })
    }

    pub fn initial_state(&self, site: &SiteState) -> CumulantStateTD {
        CumulantStateTD::product(self.layout.clone(), site)
    }

    fn check(&self, s: &CumulantStateTD) -> Result<()> {
        if *s.layout != *self.layout {
            return Err(Error::DimensionMismatch { expected: self.layout.reps.len(), got: s.blocks.len() });
        }
        Ok(())
    }

    pub fn rhs(&self, s: &CumulantStateTD) -> Result<CumulantStateTD> {
        self.check(s)?;
        let mut out = s.drop_cumulants();
        self.rhs_into(s, &mut out);
        Ok(out)
    }

    pub fn rhs_into(&self, s: &CumulantStateTD, out: &mut CumulantStateTD) {
        let layout = &*self.layout;
        let rho = &s.mean;
        let p = rho[(UP, UP)].re;
        let g1: Vec<Op3> = s.blocks.iter().map(g_first).collect();
        let g2: Vec<Op3> = s.blocks.iter().map(g_second).collect();
        let g_ball: Vec<Op3> =
            layout.source.iter().map(|&(k, swapped)| if swapped { g2[k] } else { g1[k] }).collect();
        let mut gsum = Op3::zeros();
        for (g, u) in g_ball.iter().zip(&self.u_ball) {
            gsum += g * C64::new(*u, 0.0);
        }
        out.mean = local_generator(&self.kernel.local, rho, self.chi_sum * p) - n_up_commutator(&gsum) * I;

        let b = self.conv.apply(layout, &self.u_ball, &g_ball, &self.target_list);
        let rr = kron(rho, rho);
        for (k, &(kd, km)) in self.targets.iter().enumerate() {
            let u = self.u_ball[kd];
            let shift = (self.chi_sum - u) * p;
            let inp = PairInputs {
                rho_i: rho,
                rho_j: rho,
                rr: &rr,
                u,
                shift_i: shift,
                shift_j: shift,
                g_ij: &g1[k],
                g_ji: &g2[k],
                a_i: &b[km],
                a_j: &b[kd],
            };
            self.kernel.pair_rhs(&s.blocks[k], &inp, &mut out.blocks[k]);
        }
    }
}

struct TdSystem<'a> {
    solver: &'a TdSolver,
    scratch_in: std::cell::RefCell<CumulantStateTD>,
    scratch_out: std::cell::RefCell<CumulantStateTD>,
}

impl OdeSystem for TdSystem<'_> {
    fn dim(&self) -> usize {
        self.scratch_in.borrow().dim()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let mut s = self.scratch_in.borrow_mut();
        let mut o = self.scratch_out.borrow_mut();
        s.unpack_into(y);
        self.solver.rhs_into(&s, &mut o);
        o.pack_into(dy);
    }
}

pub fn evolve_td_observed<F>(
    solver: &TdSolver,
    s0: &CumulantStateTD,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    mut observer: F,
) -> Result<(CumulantStateTD, IntegrationStats)>
where
    F: FnMut(f64, &CumulantStateTD) -> Flow,
{
    solver.check(s0)?;
    let sys = TdSystem {
        solver,
        scratch_in: std::cell::RefCell::new(s0.clone()),
        scratch_out: std::cell::RefCell::new(s0.clone()),
    };
    let mut view = s0.clone();
    let (y, stats) = integrate_observed(&sys, &s0.pack(), t_grid, cfg, |t, y| {
        view.unpack_into(y);
        observer(t, &view)
    })?;
    let mut last = s0.clone();
    last.unpack_into(&y);
    Ok((last, stats))
}
