//! Two-site building blocks shared by the thermodynamic-limit and the
//! finite-lattice solvers.
//!
//! A pair block is a row-major 9×9 array over `(↓,0,↑) ⊗ (↓,0,↑)`; entry
//! `[(3a+c)·9 + 3b+d]` is `⟨a c|X|b d⟩` with the first site's digit first.

use crate::site::{hamiltonian, LocalTerms, Op3, C64, DOWN, MID, UP};

pub type Block = [C64; 81];

pub const ZERO_BLOCK: Block = [C64::new(0.0, 0.0); 81];

#[inline]
pub fn at(r: usize, c: usize) -> usize {
    r * 9 + c
}

/// `Tr₂[(1⊗n_↑) X]`, an operator on the first site.
#[inline]
pub fn g_first(b: &Block) -> Op3 {
    Op3::from_fn(|a, c| b[at(3 * a + UP, 3 * c + UP)])
}

/// `Tr₁[(n_↑⊗1) X]`, an operator on the second site.
#[inline]
pub fn g_second(b: &Block) -> Op3 {
    Op3::from_fn(|a, c| b[at(3 * UP + a, 3 * UP + c)])
}

/// Exchange the two tensor factors.
pub fn swap(b: &Block) -> Block {
    let mut out = ZERO_BLOCK;
    for a in 0..3 {
        for c in 0..3 {
            for bb in 0..3 {
                for d in 0..3 {
                    out[at(3 * a + c, 3 * bb + d)] = b[at(3 * c + a, 3 * d + bb)];
                }
            }
        }
    }
    out
}

pub fn kron(a: &Op3, b: &Op3) -> Block {
    let mut out = ZERO_BLOCK;
    for r1 in 0..3 {
        for c1 in 0..3 {
            let v = a[(r1, c1)];
            for r2 in 0..3 {
                for c2 in 0..3 {
                    out[at(3 * r1 + r2, 3 * c1 + c2)] = v * b[(r2, c2)];
                }
            }
        }
    }
    out
}

pub fn hermiticity_error(b: &Block) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..9 {
        for c in r..9 {
            worst = worst.max((b[at(r, c)] - b[at(c, r)].conj()).norm());
        }
    }
    worst
}

/// Largest entry of either partial trace; zero for a valid cumulant.
pub fn partial_trace_error(b: &Block) -> f64 {
    let mut worst: f64 = 0.0;
    for a in 0..3 {
        for c in 0..3 {
            let t2: C64 = (0..3).map(|k| b[at(3 * a + k, 3 * c + k)]).sum();
            let t1: C64 = (0..3).map(|k| b[at(3 * k + a, 3 * k + c)]).sum();
            worst = worst.max(t1.norm()).max(t2.norm());
        }
    }
    worst
}

#[inline]
fn is_up(x: usize) -> f64 {
    (x == UP) as u8 as f64
}

/// Everything the pair equation needs besides the block itself.
pub struct PairInputs<'a> {
    pub rho_i: &'a Op3,
    pub rho_j: &'a Op3,
    /// `ρ_i ⊗ ρ_j`.
    pub rr: &'a Block,
    pub u: f64,
    /// Mean-field shifts from all third sites, `Σ_{k≠i,j} U_ik p_k`.
    pub shift_i: f64,
    pub shift_j: f64,
    /// `Tr_j[(1⊗n) χ_ij]` on site i and `Tr_i[(n⊗1) χ_ij]` on site j.
    pub g_ij: &'a Op3,
    pub g_ji: &'a Op3,
    /// `Σ_{k≠i,j} U_ik g_jk` on site j and `Σ_{k≠i,j} U_jk g_ik` on site i.
    pub a_i: &'a Op3,
    pub a_j: &'a Op3,
}

/// Local pair terms precomputed for one set of single-site parameters.
#[derive(Clone, Debug)]
pub struct PairKernel {
    pub local: LocalTerms,
    digits: [(usize, usize, usize, usize); 81],
}

impl PairKernel {
    pub fn new(local: LocalTerms) -> Self {
        let mut digits = [(0, 0, 0, 0); 81];
        for (k, dg) in digits.iter_mut().enumerate() {
            let (r, c) = (k / 9, k % 9);
            *dg = (r / 3, r % 3, c / 3, c % 3);
        }
        Self { local, digits }
    }

    /// `(L_i ⊗ 1 + 1 ⊗ L_j) x` where `L` carries the `n_↑` shift given.
    pub fn local_pair(&self, x: &Block, shift_i: f64, shift_j: f64, out: &mut Block) {
        let h1 = hamiltonian(&self.local, shift_i);
        let h2 = hamiltonian(&self.local, shift_j);
        let g = self.local.gamma;
        let mi = C64::new(0.0, -1.0);
        for (k, &(a, c, b, d)) in self.digits.iter().enumerate() {
            let mut acc = C64::default();
            for e in 0..3 {
                acc += h1[(a, e)] * x[at(3 * e + c, 3 * b + d)] - x[at(3 * a + c, 3 * e + d)] * h1[(e, b)];
                acc += h2[(c, e)] * x[at(3 * a + e, 3 * b + d)] - x[at(3 * a + c, 3 * b + e)] * h2[(e, d)];
            }
            let mut v = mi * acc;
            let mids = ((a == MID) as u8 + (b == MID) as u8 + (c == MID) as u8 + (d == MID) as u8) as f64;
            v -= x[k] * (0.5 * g * mids);
            if a == DOWN && b == DOWN {
                v += x[at(3 * MID + c, 3 * MID + d)] * g;
            }
            if c == DOWN && d == DOWN {
                v += x[at(3 * a + MID, 3 * b + MID)] * g;
            }
            out[k] = v;
        }
    }

    /// Time derivative of the connected block `χ_ij` with the third-order
    /// closure already folded into `inp`.
    pub fn pair_rhs(&self, chi: &Block, inp: &PairInputs<'_>, out: &mut Block) {
        self.local_pair(chi, inp.shift_i, inp.shift_j, out);
        let p_i = inp.rho_i[(UP, UP)].re;
        let p_j = inp.rho_j[(UP, UP)].re;
        let u = inp.u;
        let mi = C64::new(0.0, -1.0);
        for (k, &(a, c, b, d)) in self.digits.iter().enumerate() {
            let w1 = is_up(a) - is_up(b);
            let w2 = is_up(c) - is_up(d);
            let wnn = is_up(a) * is_up(c) - is_up(b) * is_up(d);
            if w1 == 0.0 && w2 == 0.0 && wnn == 0.0 {
                continue;
            }
            let rr = inp.rr[k];
            let mut acc = C64::default();
            if wnn != 0.0 {
                acc += (rr + chi[k]) * (u * wnn);
            }
            if w1 != 0.0 {
                let m1 = -rr * (u * p_j) - inp.g_ij[(a, b)] * inp.rho_j[(c, d)] * u + inp.rho_i[(a, b)] * inp.a_i[(c, d)];
                acc += m1 * w1;
            }
            if w2 != 0.0 {
                let m2 = -rr * (u * p_i) - inp.rho_i[(a, b)] * inp.g_ji[(c, d)] * u + inp.a_j[(a, b)] * inp.rho_j[(c, d)];
                acc += m2 * w2;
            }
            out[k] += mi * acc;
        }
    }
}

/// Scalar third-order closure
/// `⟨abc⟩ ≈ ⟨ab⟩⟨c⟩ + ⟨ac⟩⟨b⟩ + ⟨a⟩⟨bc⟩ − 2⟨a⟩⟨b⟩⟨c⟩`, with second moments
/// given through their connected parts.
pub fn third_order_closure(m1: C64, m2: C64, m3: C64, c12: C64, c13: C64, c23: C64) -> C64 {
    let s12 = m1 * m2 + c12;
    let s13 = m1 * m3 + c13;
    let s23 = m2 * m3 + c23;
    s12 * m3 + s13 * m2 + m1 * s23 - m1 * m2 * m3 * 2.0
}

/// Closure of `Tr_k[n_k ρ_ijk]` as an operator on sites `(i, j)`:
/// `p_k (ρ_i⊗ρ_j + χ_ij) + g_ik ⊗ ρ_j + ρ_i ⊗ g_jk`.
pub fn closure_triple(rho_i: &Op3, rho_j: &Op3, p_k: f64, chi_ij: &Block, g_ik: &Op3, g_jk: &Op3) -> Block {
    let rr = kron(rho_i, rho_j);
    let t1 = kron(g_ik, rho_j);
    let t2 = kron(rho_i, g_jk);
    let mut out = ZERO_BLOCK;
    for k in 0..81 {
        out[k] = (rr[k] + chi_ij[k]) * p_k + t1[k] + t2[k];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SiteState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rc(rng: &mut ChaCha8Rng) -> C64 {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    #[test]
    fn closure_with_vanishing_cumulants_is_a_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b, c) = (rc(&mut rng), rc(&mut rng), rc(&mut rng));
        let z = C64::default();
        assert!((third_order_closure(a, b, c, z, z, z) - a * b * c).norm() < 1e-15);
        let c12 = rc(&mut rng);
        assert_eq!(third_order_closure(a, b, z, c12, z, z), z);
    }

    /// Exact moments of `x = μ + A s` with independent Rademacher signs `s`
    /// have vanishing third cumulant, so the closure must be exact.
    #[test]
    fn closure_exact_for_zero_third_cumulant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mu: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let mut m = [0.0; 3];
            let mut s2 = [[0.0; 3]; 3];
            let mut s3 = 0.0;
            for bits in 0..16u32 {
                let s: Vec<f64> = (0..4).map(|k| if bits >> k & 1 == 1 { 1.0 } else { -1.0 }).collect();
                let x: Vec<f64> = (0..3).map(|i| mu[i] + (0..4).map(|k| a[i][k] * s[k]).sum::<f64>()).collect();
                for i in 0..3 {
                    m[i] += x[i] / 16.0;
                    for j in 0..3 {
                        s2[i][j] += x[i] * x[j] / 16.0;
                    }
                }
                s3 += x[0] * x[1] * x[2] / 16.0;
            }
            let c = |i: usize, j: usize| C64::new(s2[i][j] - m[i] * m[j], 0.0);
            let got = third_order_closure(C64::new(m[0], 0.0), C64::new(m[1], 0.0), C64::new(m[2], 0.0), c(0, 1), c(0, 2), c(1, 2));
            assert!((got.re - s3).abs() < 1e-12);
        }
    }

    #[test]
    fn swap_and_partial_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = SiteState::random(&mut rng).0;
        let b = SiteState::random(&mut rng).0;
        let ab = kron(&a, &b);
        assert_eq!(swap(&ab), kron(&b, &a));
        assert_eq!(swap(&swap(&ab)), ab);
        let ga = g_first(&ab);
        let gb = g_second(&ab);
        for r in 0..3 {
            for c in 0..3 {
                assert!((ga[(r, c)] - a[(r, c)] * b[(UP, UP)]).norm() < 1e-15);
                assert!((gb[(r, c)] - b[(r, c)] * a[(UP, UP)]).norm() < 1e-15);
            }
        }
    }
}
