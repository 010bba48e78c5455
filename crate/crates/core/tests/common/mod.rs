//! Oracles shared by the integration tests: finite-difference weights,
//! double-double arithmetic, and the reference survey layouts.

#![allow(dead_code)]

use laplace_gain::{AcquisitionGeometry, Point, VelocityModel};

/// Fornberg weights for derivatives 0..=m at `z` from samples at `x`.
/// Returns `w[k][j]`: weight of sample j in the k-th derivative.
pub fn fornberg(z: f64, x: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut c = vec![vec![0.0; n]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] *= c4 / c3;
        }
        c1 = c2;
    }
    c
}

/// n-th derivative of `f` at `s` from a central stencil of 2p+1 points spaced `h`.
pub fn central_derivative(f: impl Fn(f64) -> f64, s: f64, h: f64, n: usize, p: usize) -> f64 {
    let offsets: Vec<f64> = (-(p as i64)..=p as i64).map(|j| j as f64).collect();
    let w = fornberg(0.0, &offsets, n);
    let sum: f64 = offsets.iter().zip(&w[n]).map(|(o, w)| w * f(s + o * h)).sum();
    sum / h.powi(n as i32)
}

/// Unevaluated sum hi + lo with |lo| ≤ ulp(hi)/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN2: Dd = Dd {
    hi: 6.931471805599452862e-1,
    lo: 2.319046813846299558e-17,
};

impl Dd {
    pub const fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, b: Dd) -> Dd {
        self.add(b.neg())
    }

    pub fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi));
        Dd { hi, lo }
    }

    pub fn mul_f(self, b: f64) -> Dd {
        self.mul(Dd::new(b))
    }

    pub fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self.sub(b.mul_f(q1));
        let q2 = r.hi / b.hi;
        let r = r.sub(b.mul_f(q2));
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }.add(Dd::new(q3))
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::new(0.0);
        }
        let q = self.hi.sqrt();
        let (p, e) = two_prod(q, q);
        let r = self.sub(Dd { hi: p, lo: e });
        let (hi, lo) = quick_two_sum(q, r.hi / (2.0 * q));
        Dd { hi, lo }
    }

    fn scale(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn exp(self) -> Dd {
        let k = (self.hi / LN2.hi).round();
        let r = self.sub(LN2.mul_f(k)).scale(-10);
        let mut term = Dd::new(1.0);
        let mut sum = Dd::new(1.0);
        for i in 1..=14 {
            term = term.mul(r).div(Dd::new(i as f64));
            sum = sum.add(term);
        }
        for _ in 0..10 {
            sum = sum.mul(sum);
        }
        sum.scale(k as i32)
    }
}

pub fn dd_distance(a: Point, b: Point) -> Dd {
    let (dx, ex) = two_sum(a.x, -b.x);
    let (dz, ez) = two_sum(a.z, -b.z);
    let dx = Dd { hi: dx, lo: ex };
    let dz = Dd { hi: dz, lo: ez };
    dx.mul(dx).add(dz.mul(dz)).sqrt()
}

/// Σ_l e^(−s τ_l)/ρ_l over the four direct/mirror path combinations
/// source → cell → receiver, in double-double.
pub fn four_term_sum_dd(src: Point, cell: Point, rcv: Point, c: f64, s: f64) -> f64 {
    let mirror = |p: Point| Point::new(p.x, -p.z);
    let r1 = dd_distance(src, cell);
    let r2 = dd_distance(mirror(src), cell);
    let r3 = dd_distance(cell, rcv);
    let r4 = dd_distance(mirror(cell), rcv);
    let cd = Dd::new(c);
    let term = |ra: Dd, rb: Dd, sign: f64| {
        let tau = ra.add(rb).div(cd);
        tau.mul_f(-s).exp().div(ra.mul(rb)).mul_f(sign)
    };
    term(r1, r3, 1.0)
        .add(term(r2, r3, -1.0))
        .add(term(r1, r4, -1.0))
        .add(term(r2, r4, 1.0))
        .to_f64()
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// 20×15 cells of 100 m; 8 shots and 32 receivers at 10 m depth.
pub fn layout_small() -> (AcquisitionGeometry, VelocityModel) {
    let shots = linspace(125.0, 1875.0, 8).into_iter().map(|x| Point::new(x, 10.0)).collect();
    let rcv = linspace(100.0 / 3.0, 2000.0 - 100.0 / 3.0, 32)
        .into_iter()
        .map(|x| Point::new(x, 10.0))
        .collect();
    let geom = AcquisitionGeometry::fixed_spread(shots, rcv).unwrap();
    let model = VelocityModel::homogeneous(20, 15, 100.0, 100.0, 0.0, 0.0, 3500.0).unwrap();
    (geom, model)
}

/// 20×20 cells of 100 m starting 50 m below the surface, same acquisition.
pub fn layout_deep() -> (AcquisitionGeometry, VelocityModel) {
    let (geom, _) = layout_small();
    let model = VelocityModel::homogeneous(20, 20, 100.0, 100.0, 0.0, 50.0, 3500.0).unwrap();
    (geom, model)
}

#[test]
fn fornberg_reproduces_polynomials() {
    let x = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let w = fornberg(0.0, &x, 2);
    let d2: f64 = x.iter().zip(&w[2]).map(|(x, w)| w * x * x * x * x).sum();
    assert!(d2.abs() < 1e-12);
    let d2: f64 = x.iter().zip(&w[2]).map(|(x, w)| w * x * x).sum();
    assert!((d2 - 2.0).abs() < 1e-12);
    let d = central_derivative(f64::exp, 0.3, 0.05, 3, 4);
    assert!((d - 0.3f64.exp()).abs() < 1e-9);
}

#[test]
fn double_double_basics() {
    let third = Dd::new(1.0).div(Dd::new(3.0));
    let back = third.mul_f(3.0).sub(Dd::new(1.0));
    assert!(back.to_f64().abs() < 1e-31);
    let e = Dd::new(1.0).exp();
    assert_eq!(e.hi, std::f64::consts::E);
    // Ten squarings cost about ten bits of the 106.
    assert!((e.lo - 1.4456468917292502e-16).abs() < 5e-29);
    let two = Dd::new(2.0).sqrt();
    let sq = two.mul(two).sub(Dd::new(2.0));
    assert!(sq.to_f64().abs() < 1e-30);
    let x = Dd::new(-37.25).exp();
    assert!(((x.to_f64() - (-37.25f64).exp()) / x.to_f64()).abs() < 3e-16);
}
