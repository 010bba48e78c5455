//! Born sensitivity of the Laplace-domain wavefield to one cell velocity, and
//! its derivatives with respect to the damping constant.
//!
//! The kernel is the product of the source→cell and cell→receiver Green's
//! functions times the virtual source 2s²/c³. Expanding the product gives four
//! ray paths (τ_l, ρ_l); the path sums
//!
//!   P_m = Σ_l (−τ_l)^m e^(−sτ_l)/ρ_l = Σ_k C(m,k) A_k B_(m−k)
//!
//! are evaluated through the per-leg brackets A_k, B_k, which stay accurate
//! where mirror and direct paths nearly cancel.

use std::f64::consts::PI;

use crate::error::Result;
use crate::geometry::Point;
use crate::greens::{check_s, ray_pair, RayPair};

/// Traveltimes and signed distance products of the four scattering paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathTerms {
    pub tau: [f64; 4],
    pub rho: [f64; 4],
    source_leg: RayPair,
    receiver_leg: RayPair,
}

pub fn path_terms(src: Point, cell: Point, rcv: Point, c: f64) -> Result<PathTerms> {
    let source_leg = ray_pair(src, cell, c)?;
    let receiver_leg = ray_pair(cell, rcv, c)?;
    Ok(PathTerms::from_legs(source_leg, receiver_leg))
}

impl PathTerms {
    pub fn from_legs(source_leg: RayPair, receiver_leg: RayPair) -> Self {
        let (r3, r4, t3, t4) = (source_leg.r1, source_leg.r2, source_leg.t1, source_leg.t2);
        let (r1, r2, t1, t2) = (receiver_leg.r1, receiver_leg.r2, receiver_leg.t1, receiver_leg.t2);
        PathTerms {
            tau: [t1 + t3, t2 + t3, t1 + t4, t2 + t4],
            rho: [r1 * r3, -r2 * r3, -r1 * r4, r2 * r4],
            source_leg,
            receiver_leg,
        }
    }

    pub fn source_leg(&self) -> &RayPair {
        &self.source_leg
    }

    pub fn receiver_leg(&self) -> &RayPair {
        &self.receiver_leg
    }

    /// Σ_l (−τ_l)^m e^(−sτ_l)/ρ_l summed term by term. Loses accuracy when
    /// the four paths nearly cancel; [`PathTerms::path_sums`] does not.
    pub fn direct_path_sum(&self, s: f64, m: u32) -> f64 {
        self.tau
            .iter()
            .zip(&self.rho)
            .map(|(&t, &r)| (-t).powi(m as i32) * (-s * t).exp() / r)
            .sum()
    }

    /// Path sums P_0..=P_m_max.
    pub fn path_sums(&self, s: f64, m_max: u32) -> Vec<f64> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.source_leg.brackets(s, m_max, &mut a);
        self.receiver_leg.brackets(s, m_max, &mut b);
        leibniz(&a, &b)
    }
}

fn leibniz(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    let mut binom = vec![1.0f64];
    for m in 0..a.len() {
        if m > 0 {
            let mut next = vec![1.0; m + 1];
            for k in 1..m {
                next[k] = binom[k - 1] + binom[k];
            }
            binom = next;
        }
        out.push((0..=m).map(|k| binom[k] * a[k] * b[m - k]).sum());
    }
    out
}

/// f·2/((4π)²c³) = f/(8π²c³).
fn prefactor(f_m: f64, c: f64) -> f64 {
    f_m * 2.0 / ((4.0 * PI) * (4.0 * PI) * c * c * c)
}

/// Combine path sums into the n-th s-derivative of the kernel.
/// `sums` must hold P_0..=P_n.
pub fn kernel_from_sums(f_m: f64, c: f64, s: f64, n: u32, sums: &[f64]) -> f64 {
    let n_us = n as usize;
    let nf = f64::from(n);
    let mut poly = s * s * sums[n_us];
    if n >= 1 {
        poly += 2.0 * nf * s * sums[n_us - 1];
    }
    if n >= 2 {
        poly += nf * (nf - 1.0) * sums[n_us - 2];
    }
    prefactor(f_m, c) * poly
}

/// ∂ũ/∂m_k for a point scatterer at `cell`.
pub fn born_kernel(f_m: f64, src: Point, cell: Point, rcv: Point, c: f64, s: f64) -> Result<f64> {
    born_kernel_s_derivative(f_m, src, cell, rcv, c, s, 0)
}

/// ∂^(n+1)ũ/∂m_k∂sⁿ.
pub fn born_kernel_s_derivative(f_m: f64, src: Point, cell: Point, rcv: Point, c: f64, s: f64, n: u32) -> Result<f64> {
    check_s(s)?;
    let terms = path_terms(src, cell, rcv, c)?;
    Ok(kernel_from_sums(f_m, c, s, n, &terms.path_sums(s, n)))
}

/// Kernels for several gain powers at once, sharing the leg brackets.
pub fn born_kernel_multi(terms: &PathTerms, f_m: f64, c: f64, s: f64, gain_powers: &[u32], out: &mut Vec<f64>) {
    let n_max = gain_powers.iter().copied().max().unwrap_or(0);
    let sums = terms.path_sums(s, n_max);
    out.clear();
    out.extend(gain_powers.iter().map(|&n| kernel_from_sums(f_m, c, s, n, &sums)));
}
