//! Single-site operators and the local part of the generator.

use nalgebra::Matrix3;
use num_complex::Complex64;

use crate::model::ModelParams;

pub type C64 = Complex64;
pub type Op3 = Matrix3<C64>;

pub const DOWN: usize = 0;
pub const MID: usize = 1;
pub const UP: usize = 2;

pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Coefficients of the single-site Hamiltonian and decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTerms {
    pub delta: f64,
    pub omega_lower: f64,
    pub omega_upper: f64,
    pub gamma: f64,
}

impl From<&ModelParams> for LocalTerms {
    fn from(p: &ModelParams) -> Self {
        Self {
            delta: p.delta,
            omega_lower: p.omega_lower,
            omega_upper: p.omega_upper,
            gamma: p.gamma,
        }
    }
}

/// `Δ n_↓ + Ω(σ_↓0 + h.c.) + ω(σ_↑0 + h.c.) + up_shift · n_↑`.
pub fn hamiltonian(t: &LocalTerms, up_shift: f64) -> Op3 {
    let mut h = Op3::zeros();
    h[(DOWN, DOWN)] = c(t.delta);
    h[(DOWN, MID)] = c(t.omega_lower);
    h[(MID, DOWN)] = c(t.omega_lower);
    h[(UP, MID)] = c(t.omega_upper);
    h[(MID, UP)] = c(t.omega_upper);
    h[(UP, UP)] = c(up_shift);
    h
}

pub fn projector(level: usize) -> Op3 {
    let mut m = Op3::zeros();
    m[(level, level)] = c(1.0);
    m
}

/// `|α⟩⟨β|`.
pub fn transition(alpha: usize, beta: usize) -> Op3 {
    let mut m = Op3::zeros();
    m[(alpha, beta)] = c(1.0);
    m
}

/// Decay part `γ(J x J† − ½{n_0, x})` with `J = |↓⟩⟨0|`.
#[inline]
pub fn dissipator(gamma: f64, x: &Op3) -> Op3 {
    let mut out = Op3::zeros();
    out[(DOWN, DOWN)] = x[(MID, MID)] * gamma;
    for k in 0..3 {
        out[(MID, k)] -= x[(MID, k)] * (0.5 * gamma);
        out[(k, MID)] -= x[(k, MID)] * (0.5 * gamma);
    }
    out
}

/// Local generator `−i[h, x] + D(x)` acting linearly on any 3×3 matrix.
pub fn local_generator(t: &LocalTerms, x: &Op3, up_shift: f64) -> Op3 {
    let h = hamiltonian(t, up_shift);
    (h * x - x * h) * (-I) + dissipator(t.gamma, x)
}

/// `[n_↑, x]`, which only rescales entries.
#[inline]
pub fn n_up_commutator(x: &Op3) -> Op3 {
    let mut out = Op3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            let w = (a == UP) as i32 - (b == UP) as i32;
            if w != 0 {
                out[(a, b)] = x[(a, b)] * w as f64;
            }
        }
    }
    out
}

/// Largest entry modulus of any complex matrix.
pub fn max_abs<'a>(it: impl IntoIterator<Item = &'a C64>) -> f64 {
    it.into_iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// View an interleaved `[re, im, re, im, ...]` buffer as complex numbers.
pub fn as_complex(y: &[f64]) -> &[C64] {
    assert!(y.len() % 2 == 0);
    // SAFETY: Complex<f64> is #[repr(C)] { re, im } with the alignment of f64.
    unsafe { std::slice::from_raw_parts(y.as_ptr() as *const C64, y.len() / 2) }
}

pub fn as_complex_mut(y: &mut [f64]) -> &mut [C64] {
    assert!(y.len() % 2 == 0);
    // SAFETY: see `as_complex`.
    unsafe { std::slice::from_raw_parts_mut(y.as_mut_ptr() as *mut C64, y.len() / 2) }
}

pub fn as_real(z: &[C64]) -> &[f64] {
    // SAFETY: see `as_complex`.
    unsafe { std::slice::from_raw_parts(z.as_ptr() as *const f64, z.len() * 2) }
}

pub fn hermitian_part(x: &Op3) -> Op3 {
    (x + x.adjoint()) * c(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_decay_of_intermediate_level() {
        let t = LocalTerms { delta: 0.0, omega_lower: 0.0, omega_upper: 0.0, gamma: 1.0 };
        let d = local_generator(&t, &projector(MID), 0.0);
        let expect = projector(DOWN) - projector(MID);
        assert!(max_abs(&(d - expect)) < 1e-15);
    }

    #[test]
    fn generator_is_trace_free_and_hermiticity_preserving() {
        let t = LocalTerms { delta: -3.0, omega_lower: 1.7, omega_upper: 6.0, gamma: 1.0 };
        let mut x = Op3::zeros();
        for (k, v) in x.iter_mut().enumerate() {
            *v = C64::new((k as f64 * 0.37).sin(), (k as f64 * 1.3).cos());
        }
        let x = hermitian_part(&x);
        let d = local_generator(&t, &x, 2.5);
        assert!(d.trace().norm() < 1e-14);
        assert!(max_abs(&(d - d.adjoint())) < 1e-14);
    }
}
