//! Second-order cumulant equations on a finite lattice: one mean per site
//! and one connected block per unordered pair, no distance cutoff.

use nalgebra::DMatrix;

use super::kernel::{g_first, g_second, kron, Block, PairInputs, PairKernel, ZERO_BLOCK};
use crate::engine::{integrate_observed, Flow, IntegrationStats, IntegratorConfig, OdeSystem};
use crate::error::{Error, Result};
use crate::model::{ModelParams, SiteState};
use crate::site::{as_complex, as_complex_mut, local_generator, n_up_commutator, LocalTerms, Op3, C64, UP};

#[inline]
fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * (2 * n - i - 1) / 2 + (j - i - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CumulantStateFinite {
    pub means: Vec<Op3>,
    /// Blocks for `i < j` in row-major triangular order; the first tensor
    /// factor is site `i`.
    pub blocks: Vec<Block>,
}

impl CumulantStateFinite {
    pub fn product(sites: &[SiteState]) -> Self {
        let n = sites.len();
        Self { means: sites.iter().map(|s| s.0).collect(), blocks: vec![ZERO_BLOCK; n * (n.max(1) - 1) / 2] }
    }

    pub fn n_sites(&self) -> usize {
        self.means.len()
    }

    pub fn block(&self, i: usize, j: usize) -> &Block {
        &self.blocks[pair_index(self.n_sites(), i, j)]
    }

    pub fn block_mut(&mut self, i: usize, j: usize) -> &mut Block {
        let n = self.n_sites();
        &mut self.blocks[pair_index(n, i, j)]
    }

    /// Connected block with site `i` as first factor, for any `i ≠ j`.
    pub fn ordered_block(&self, i: usize, j: usize) -> Block {
        if i < j {
            *self.block(i, j)
        } else {
            super::kernel::swap(self.block(j, i))
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, &Block)> {
        let n = self.n_sites();
        (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j))).zip(&self.blocks).map(|((i, j), b)| (i, j, b))
    }

    pub fn drop_cumulants(&self) -> Self {
        Self { means: self.means.clone(), blocks: vec![ZERO_BLOCK; self.blocks.len()] }
    }

    pub fn dim(&self) -> usize {
        2 * (9 * self.means.len() + 81 * self.blocks.len())
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.pack_into(&mut y);
        y
    }

    pub fn pack_into(&self, y: &mut [f64]) {
        let z = as_complex_mut(y);
        for (k, m) in self.means.iter().enumerate() {
            for r in 0..3 {
                for c in 0..3 {
                    z[9 * k + 3 * r + c] = m[(r, c)];
                }
            }
        }
        let off = 9 * self.means.len();
        for (k, b) in self.blocks.iter().enumerate() {
            z[off + 81 * k..off + 81 * (k + 1)].copy_from_slice(b);
        }
    }

    pub fn unpack_into(&mut self, y: &[f64]) {
        let z = as_complex(y);
        for (k, m) in self.means.iter_mut().enumerate() {
            *m = Op3::from_row_slice(&z[9 * k..9 * k + 9]);
        }
        let off = 9 * self.means.len();
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.copy_from_slice(&z[off + 81 * k..off + 81 * (k + 1)]);
        }
    }

    /// Worst Hermiticity / partial-trace / mean-trace deviation.
    pub fn invariant_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for m in &self.means {
            worst = worst.max((m.trace() - C64::new(1.0, 0.0)).norm());
            worst = worst.max(crate::site::max_abs(&(m - m.adjoint())));
        }
        for b in &self.blocks {
            worst = worst.max(super::kernel::hermiticity_error(b)).max(super::kernel::partial_trace_error(b));
        }
        worst
    }
}

/// Equations of motion for a fixed set of pair couplings.
#[derive(Clone, Debug)]
pub struct FiniteSolver {
    pub params: ModelParams,
    pub n: usize,
    /// `U_ij`, symmetric with zero diagonal.
    pub u: DMatrix<f64>,
    kernel: PairKernel,
}

impl FiniteSolver {
    pub fn new(params: &ModelParams, u: DMatrix<f64>) -> Result<Self> {
        params.validate()?;
        let n = u.nrows();
        if u.ncols() != n || n < 1 {
            return Err(Error::DimensionMismatch { expected: n, got: u.ncols() });
        }
        let mut u = u;
        for i in 0..n {
            u[(i, i)] = 0.0;
            for j in 0..n {
                if !u[(i, j)].is_finite() || (u[(i, j)] - u[(j, i)]).abs() > 1e-12 * u[(i, j)].abs().max(1.0) {
                    return Err(Error::InvalidParameter(format!("pair couplings not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { params: params.clone(), n, u, kernel: PairKernel::new(LocalTerms::from(params)) })
    }

    /// Couplings from a potential table.
    pub fn from_potentials(params: &ModelParams, pp: &crate::model::PairPotentials) -> Result<Self> {
        match pp {
            crate::model::PairPotentials::Finite { n, u } => Self::new(params, DMatrix::from_row_slice(*n, *n, u)),
            _ => Err(Error::InvalidLattice("finite solver needs a finite lattice".into())),
        }
    }

    fn check(&self, s: &CumulantStateFinite) -> Result<()> {
        if s.n_sites() != self.n || s.blocks.len() != self.n * (self.n - 1) / 2 {
            return Err(Error::DimensionMismatch { expected: self.n, got: s.n_sites() });
        }
        Ok(())
    }

    pub fn rhs(&self, s: &CumulantStateFinite) -> Result<CumulantStateFinite> {
        self.check(s)?;
        let mut out = s.drop_cumulants();
        self.rhs_into(s, &mut out);
        Ok(out)
    }

    /// `g[e][i, k] = (g_ik)_e`, the correlation of site i with `n_↑` on k.
    fn g_matrices(&self, s: &CumulantStateFinite) -> Vec<DMatrix<C64>> {
        let n = self.n;
        let mut g = vec![DMatrix::<C64>::zeros(n, n); 9];
        for (i, j, b) in s.pairs() {
            let gi = g_first(b);
            let gj = g_second(b);
            for e in 0..9 {
                g[e][(i, j)] = gi[(e / 3, e % 3)];
                g[e][(j, i)] = gj[(e / 3, e % 3)];
            }
        }
        g
    }

    pub fn rhs_into(&self, s: &CumulantStateFinite, out: &mut CumulantStateFinite) {
        let n = self.n;
        let lt = &self.kernel.local;
        let p: Vec<f64> = s.means.iter().map(|m| m[(UP, UP)].re).collect();
        let pv = nalgebra::DVector::from_vec(p.clone());
        let q = &self.u * &pv;
        let g = self.g_matrices(s);
        let uc = self.u.map(|v| C64::new(v, 0.0));
        // m[e][(i, j)] = Σ_k U_ik (g_jk)_e
        let m: Vec<DMatrix<C64>> = g.iter().map(|ge| &uc * ge.transpose()).collect();
        let op = |mats: &[DMatrix<C64>], i: usize, j: usize| Op3::from_fn(|a, b| mats[3 * a + b][(i, j)]);

        for i in 0..n {
            let gamma_i = Op3::from_fn(|a, b| (0..n).map(|k| g[3 * a + b][(i, k)] * self.u[(i, k)]).sum());
            out.means[i] = local_generator(lt, &s.means[i], q[i]) - n_up_commutator(&gamma_i) * crate::site::I;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let u = self.u[(i, j)];
                let chi = s.block(i, j);
                let rr = kron(&s.means[i], &s.means[j]);
                let g_ij = g_first(chi);
                let g_ji = g_second(chi);
                let a_i = op(&m, i, j);
                let a_j = op(&m, j, i);
                let inp = PairInputs {
                    rho_i: &s.means[i],
                    rho_j: &s.means[j],
                    rr: &rr,
                    u,
                    shift_i: q[i] - u * p[j],
                    shift_j: q[j] - u * p[i],
                    g_ij: &g_ij,
                    g_ji: &g_ji,
                    a_i: &a_i,
                    a_j: &a_j,
                };
                self.kernel.pair_rhs(chi, &inp, out.block_mut(i, j));
            }
        }
    }

    /// Same equations, but with `Tr_k[n_k ρ_ijk]` supplied by `triple(i, j, k)`
    /// instead of the closure. Used to cross-check against exact states.
    pub fn rhs_with_triples<F>(&self, s: &CumulantStateFinite, triple: F) -> Result<CumulantStateFinite>
    where
        F: Fn(usize, usize, usize) -> Block,
    {
        self.check(s)?;
        let n = self.n;
        let lt = &self.kernel.local;
        let mut out = s.drop_cumulants();
        // exact mean derivative: Σ_k U_ik Tr_k[n_k ρ_ik] = Q_i ρ_i + Γ_i
        for i in 0..n {
            let mut x = Op3::zeros();
            for k in (0..n).filter(|&k| k != i) {
                let b = s.ordered_block(i, k);
                let p_k = s.means[k][(UP, UP)].re;
                x += (s.means[i] * C64::new(p_k, 0.0) + g_first(&b)) * C64::new(self.u[(i, k)], 0.0);
            }
            out.means[i] = local_generator(lt, &s.means[i], 0.0) - n_up_commutator(&x) * crate::site::I;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let chi = s.block(i, j);
                let rr = kron(&s.means[i], &s.means[j]);
                let mut rho_ij = ZERO_BLOCK;
                for k in 0..81 {
                    rho_ij[k] = rr[k] + chi[k];
                }
                let mut d = ZERO_BLOCK;
                self.kernel.local_pair(&rho_ij, 0.0, 0.0, &mut d);
                let mut xi = ZERO_BLOCK;
                let mut xj = ZERO_BLOCK;
                for k in (0..n).filter(|&k| k != i && k != j) {
                    let t = triple(i, j, k);
                    for e in 0..81 {
                        xi[e] += t[e] * self.u[(i, k)];
                        xj[e] += t[e] * self.u[(j, k)];
                    }
                }
                let u = self.u[(i, j)];
                for e in 0..81 {
                    let (r, c) = (e / 9, e % 9);
                    let (a, cc, b, dd) = (r / 3, r % 3, c / 3, c % 3);
                    let up = |x: usize| (x == UP) as u8 as f64;
                    let w1 = up(a) - up(b);
                    let w2 = up(cc) - up(dd);
                    let wnn = up(a) * up(cc) - up(b) * up(dd);
                    d[e] += C64::new(0.0, -1.0) * (rho_ij[e] * (u * wnn) + xi[e] * w1 + xj[e] * w2);
                }
                let di = kron(&out.means[i], &s.means[j]);
                let dj = kron(&s.means[i], &out.means[j]);
                let blk = out.block_mut(i, j);
                for e in 0..81 {
                    blk[e] = d[e] - di[e] - dj[e];
                }
            }
        }
        Ok(out)
    }

    /// Closure-based third moments, for use with `rhs_with_triples`.
    pub fn closure_triples<'a>(&self, s: &'a CumulantStateFinite) -> impl Fn(usize, usize, usize) -> Block + 'a {
        move |i, j, k| {
            let bik = s.ordered_block(i, k);
            let bjk = s.ordered_block(j, k);
            super::kernel::closure_triple(
                &s.means[i],
                &s.means[j],
                s.means[k][(UP, UP)].re,
                s.block(i, j),
                &g_first(&bik),
                &g_first(&bjk),
            )
        }
    }
}

struct FiniteSystem<'a> {
    solver: &'a FiniteSolver,
    scratch_in: std::cell::RefCell<CumulantStateFinite>,
    scratch_out: std::cell::RefCell<CumulantStateFinite>,
}

impl OdeSystem for FiniteSystem<'_> {
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

pub fn evolve_finite_observed<F>(
    solver: &FiniteSolver,
    s0: &CumulantStateFinite,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    mut observer: F,
) -> Result<(CumulantStateFinite, IntegrationStats)>
where
    F: FnMut(f64, &CumulantStateFinite) -> Flow,
{
    solver.check(s0)?;
    let sys = FiniteSystem {
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
