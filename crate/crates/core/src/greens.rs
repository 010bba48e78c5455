//! Laplace-domain Green's function of a homogeneous half-space with a
//! pressure-release free surface, built from a direct ray and its mirror image.
//!
//! Mirror and direct contributions nearly cancel for shallow sources and
//! receivers, so brackets are evaluated through the path difference
//! r2 − r1 = 4 z_a z_b / (r1 + r2) with `expm1`/`ln_1p`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{mirror_point, Point};

/// Direct and mirror-image distances and traveltimes between two points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPair {
    pub r1: f64,
    pub r2: f64,
    pub t1: f64,
    pub t2: f64,
    dr: f64,
    c: f64,
}

pub fn ray_pair(src: Point, rcv: Point, c: f64) -> Result<RayPair> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!("velocity {c} must be positive")));
    }
    if !(src.is_finite() && rcv.is_finite()) {
        return Err(Error::Domain("coordinates must be finite".into()));
    }
    if src.z < 0.0 || rcv.z < 0.0 {
        return Err(Error::Domain(format!(
            "points must not lie above the free surface (z = {}, {})",
            src.z, rcv.z
        )));
    }
    let r1 = src.distance(rcv);
    if r1 == 0.0 {
        return Err(Error::Singularity { x: src.x, z: src.z });
    }
    let r2 = mirror_point(src).distance(rcv);
    let dr = 4.0 * src.z * rcv.z / (r1 + r2);
    Ok(RayPair {
        r1,
        r2,
        t1: r1 / c,
        t2: r2 / c,
        dr,
        c,
    })
}

impl RayPair {
    /// r2 − r1 without cancellation.
    pub fn path_difference(&self) -> f64 {
        self.dr
    }

    /// (−t1)^k e^(−s t1)/r1 − (−t2)^k e^(−s t2)/r2.
    pub fn bracket(&self, s: f64, k: u32) -> f64 {
        let head = neg_pow(self.t1, k) * (-s * self.t1).exp() / self.r1;
        head * self.mirror_factor(s, k, (self.dr / self.r1).ln_1p())
    }

    /// Brackets for orders 0..=k_max.
    pub fn brackets(&self, s: f64, k_max: u32, out: &mut Vec<f64>) {
        out.clear();
        let base = (-s * self.t1).exp() / self.r1;
        let log_ratio = (self.dr / self.r1).ln_1p();
        let mut power = 1.0;
        for k in 0..=k_max {
            out.push(power * base * self.mirror_factor(s, k, log_ratio));
            power *= -self.t1;
        }
    }

    // 1 − (t2/t1)^k (r1/r2) e^(−s(t2 − t1)), with t2/t1 = r2/r1 = 1 + dr/r1.
    fn mirror_factor(&self, s: f64, k: u32, log_ratio: f64) -> f64 {
        -((f64::from(k) - 1.0) * log_ratio - s * self.dr / self.c).exp_m1()
    }
}

fn neg_pow(t: f64, k: u32) -> f64 {
    let p = t.powi(k as i32);
    if k % 2 == 1 {
        -p
    } else {
        p
    }
}

const INV_FOUR_PI: f64 = 1.0 / (4.0 * PI);

/// (1/4π)(e^(−s t1)/r1 − e^(−s t2)/r2).
pub fn greens(src: Point, rcv: Point, c: f64, s: f64) -> Result<f64> {
    check_s(s)?;
    Ok(ray_pair(src, rcv, c)?.bracket(s, 0) * INV_FOUR_PI)
}

/// Green's function scaled by the Laplace-domain source amplitude.
pub fn modeled_field(f_m: f64, src: Point, rcv: Point, c: f64, s: f64) -> Result<f64> {
    Ok(f_m * greens(src, rcv, c, s)?)
}

/// n-th s-derivative of [`modeled_field`]:
/// (f/4π)[(−t1)ⁿ e^(−s t1)/r1 − (−t2)ⁿ e^(−s t2)/r2].
pub fn field_s_derivative(f_m: f64, src: Point, rcv: Point, c: f64, s: f64, n: u32) -> Result<f64> {
    check_s(s)?;
    Ok(f_m * (ray_pair(src, rcv, c)?.bracket(s, n) * INV_FOUR_PI))
}

pub(crate) fn check_s(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("damping constant {s} must be positive")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn literal(src: Point, rcv: Point, c: f64, s: f64, n: u32) -> f64 {
        let r1 = src.distance(rcv);
        let r2 = mirror_point(src).distance(rcv);
        let (t1, t2) = (r1 / c, r2 / c);
        ((-t1).powi(n as i32) * (-s * t1).exp() / r1 - (-t2).powi(n as i32) * (-s * t2).exp() / r2) / (4.0 * PI)
    }

    #[test]
    fn ray_pair_examples() {
        let p = ray_pair(Point::new(0.0, 10.0), Point::new(100.0, 10.0), 1500.0).unwrap();
        assert!((p.r1 - 100.0).abs() < 1e-12);
        assert!((p.r2 - 101.980390271856).abs() < 1e-9);
        assert!((p.t1 - 1.0 / 15.0).abs() < 1e-15);
        assert!((p.path_difference() - (p.r2 - p.r1)).abs() < 1e-12);
        let v = ray_pair(Point::new(0.0, 10.0), Point::new(0.0, 110.0), 1500.0).unwrap();
        assert!((v.r1 - 100.0).abs() < 1e-12 && (v.r2 - 120.0).abs() < 1e-12);
        assert!(matches!(
            ray_pair(Point::new(1.0, 2.0), Point::new(1.0, 2.0), 1500.0),
            Err(Error::Singularity { .. })
        ));
        assert!(ray_pair(Point::new(1.0, 2.0), Point::new(3.0, 2.0), 0.0).is_err());
    }

    #[test]
    fn greens_direct_evaluation() {
        let (src, rcv) = (Point::new(0.0, 10.0), Point::new(100.0, 10.0));
        let r2 = (100.0f64 * 100.0 + 400.0).sqrt();
        let want = ((-2.0f64 / 15.0).exp() / 100.0 - (-2.0 * r2 / 1500.0).exp() / r2) / (4.0 * PI);
        let got = greens(src, rcv, 1500.0, 2.0).unwrap();
        assert!(((got - want) / want).abs() < 1e-12);
        assert!(got > 0.0);
    }

    #[test]
    fn surface_receiver_is_null() {
        let src = Point::new(0.0, 10.0);
        let rcv = Point::new(250.0, 0.0);
        assert_eq!(greens(src, rcv, 2000.0, 5.0).unwrap(), 0.0);
        for n in 0..6 {
            assert_eq!(field_s_derivative(1.3, src, rcv, 2000.0, 5.0, n).unwrap(), 0.0);
        }
    }

    #[test]
    fn source_scaling() {
        let (src, rcv) = (Point::new(0.0, 10.0), Point::new(300.0, 25.0));
        let g = greens(src, rcv, 1800.0, 4.0).unwrap();
        assert_eq!(modeled_field(0.0, src, rcv, 1800.0, 4.0).unwrap(), 0.0);
        assert_eq!(modeled_field(1.0, src, rcv, 1800.0, 4.0).unwrap(), g);
        assert_eq!(modeled_field(2.5, src, rcv, 1800.0, 4.0).unwrap(), 2.5 * g);
        assert_eq!(field_s_derivative(2.5, src, rcv, 1800.0, 4.0, 0).unwrap(), modeled_field(2.5, src, rcv, 1800.0, 4.0).unwrap());
    }

    #[test]
    fn low_order_finite_differences() {
        let (src, rcv, c, s) = (Point::new(0.0, 10.0), Point::new(800.0, 10.0), 1500.0, 2.0);
        let f = |s: f64| modeled_field(1.0, src, rcv, c, s).unwrap();
        let h = 1e-5 * s;
        let d1 = (f(s + h) - f(s - h)) / (2.0 * h);
        let a1 = field_s_derivative(1.0, src, rcv, c, s, 1).unwrap();
        assert!(((a1 - d1) / a1).abs() < 1e-6, "{a1} {d1}");
        let h = 1e-3 * s;
        let d2 = (f(s + h) - 2.0 * f(s) + f(s - h)) / (h * h);
        let a2 = field_s_derivative(1.0, src, rcv, c, s, 2).unwrap();
        assert!(((a2 - d2) / a2).abs() < 1e-4, "{a2} {d2}");
    }

    #[test]
    fn brackets_match_single_orders() {
        let p = ray_pair(Point::new(0.0, 7.0), Point::new(1234.0, 12.0), 2100.0).unwrap();
        let mut out = Vec::new();
        p.brackets(3.5, 6, &mut out);
        for k in 0..=6 {
            let one = p.bracket(3.5, k);
            assert!(((out[k as usize] - one) / one).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn matches_literal_away_from_cancellation(
            sx in -2000.0f64..2000.0, sz in 50.0f64..2000.0,
            rx in -2000.0f64..2000.0, rz in 50.0f64..2000.0,
            c in 1500.0f64..5000.0, s in 0.5f64..12.0, n in 0u32..5,
        ) {
            let (src, rcv) = (Point::new(sx, sz), Point::new(rx, rz));
            prop_assume!(src.distance(rcv) > 1.0);
            let got = field_s_derivative(1.0, src, rcv, c, s, n).unwrap();
            let want = literal(src, rcv, c, s, n);
            let scale = literal(src, rcv, c, s, n).abs().max(1e-300);
            let r1 = src.distance(rcv);
            let t1 = r1 / c;
            let term = t1.powi(n as i32) * (-s * t1).exp() / r1 / (4.0 * PI);
            prop_assert!((got - want).abs() <= 1e-10 * term.max(scale));
        }

        #[test]
        fn reciprocity(
            sx in -2000.0f64..2000.0, sz in 0.0f64..500.0,
            rx in -2000.0f64..2000.0, rz in 0.0f64..500.0,
            s in 0.5f64..12.0, n in 0u32..5,
        ) {
            let (a, b) = (Point::new(sx, sz), Point::new(rx, rz));
            prop_assume!(a.distance(b) > 1.0);
            let ab = field_s_derivative(1.0, a, b, 2500.0, s, n).unwrap();
            let ba = field_s_derivative(1.0, b, a, 2500.0, s, n).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-14 * ab.abs());
        }

        #[test]
        fn positive_when_damping_dominates(
            sx in -2000.0f64..2000.0, sz in 1.0f64..500.0,
            rx in -2000.0f64..2000.0, rz in 1.0f64..500.0,
            c in 1500.0f64..5000.0, s in 0.5f64..12.0,
        ) {
            let (a, b) = (Point::new(sx, sz), Point::new(rx, rz));
            prop_assume!(a.distance(b) > 1.0);
            let p = ray_pair(a, b, c).unwrap();
            if (-s * (p.t2 - p.t1)).exp() < p.r1 / p.r2 {
                prop_assert!(greens(a, b, c, s).unwrap() > 0.0);
            }
        }

        #[test]
        fn homogeneous_in_source(f in -10.0f64..10.0, s in 0.5f64..12.0, n in 0u32..5) {
            let (a, b) = (Point::new(0.0, 10.0), Point::new(900.0, 10.0));
            let one = field_s_derivative(1.0, a, b, 2000.0, s, n).unwrap();
            let scaled = field_s_derivative(f, a, b, 2000.0, s, n).unwrap();
            prop_assert!((scaled - f * one).abs() <= 1e-15 * (f * one).abs());
        }
    }
}
