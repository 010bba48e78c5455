//! Damped and gained Laplace transforms of sampled traces.
//!
//! All transforms use the trapezoidal rule on the native grid t_k = k dt up
//! to the last sample T = (nt - 1) dt, without tapering.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{LaplaceField, Provenance};
use crate::trace_io::SurveyDataset;

pub const DEFAULT_AMPLITUDE_FLOOR: f64 = 1e-28;
pub const DEFAULT_STABILITY_THRESHOLD: f64 = 1e-5;

/// Damping constants and gain powers to evaluate, plus thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub damping_constants: Vec<f64>,
    pub gain_powers: Vec<u32>,
    pub amplitude_floor: f64,
    pub stability_threshold: f64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec {
            damping_constants: (2..=12).map(f64::from).collect(),
            gain_powers: (0..=4).collect(),
            amplitude_floor: DEFAULT_AMPLITUDE_FLOOR,
            stability_threshold: DEFAULT_STABILITY_THRESHOLD,
        }
    }
}

impl TransformSpec {
    pub fn new(damping_constants: Vec<f64>, gain_powers: Vec<u32>) -> Result<Self> {
        let spec = TransformSpec {
            damping_constants,
            gain_powers,
            ..Default::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.damping_constants.is_empty() {
            return Err(Error::Config("damping_constants is empty".into()));
        }
        if self.gain_powers.is_empty() {
            return Err(Error::Config("gain_powers is empty".into()));
        }
        for (i, s) in self.damping_constants.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::Config(format!("damping constant {s} must be positive")));
            }
            if self.damping_constants[..i].contains(s) {
                return Err(Error::Config(format!("damping constant {s} listed twice")));
            }
        }
        for (i, n) in self.gain_powers.iter().enumerate() {
            if self.gain_powers[..i].contains(n) {
                return Err(Error::Config(format!("gain power {n} listed twice")));
            }
        }
        for (name, v) in [
            ("amplitude_floor", self.amplitude_floor),
            ("stability_threshold", self.stability_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// Stability verdict for every (n, s) pair at record length `t_max`.
    pub fn stability_table(&self, t_max: f64) -> Vec<StabilityRow> {
        let mut rows = Vec::new();
        for &n in &self.gain_powers {
            for &s in &self.damping_constants {
                let check = stability_check(n, s, t_max, self.stability_threshold);
                rows.push(StabilityRow { n, s, check });
            }
        }
        rows
    }
}

/// Whether a gained transform enforces the late-time envelope limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StabilityGate {
    Enforce { threshold: f64 },
    Override,
}

impl Default for StabilityGate {
    fn default() -> Self {
        StabilityGate::Enforce {
            threshold: DEFAULT_STABILITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityCheck {
    pub pass: bool,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityRow {
    pub n: u32,
    pub s: f64,
    pub check: StabilityCheck,
}

/// Ratio of the gain envelope tⁿe^(−st) at the record end to its maximum on
/// (0, T]. The maximum sits at t = n/s, or at T when n/s ≥ T.
pub fn stability_check(n: u32, s: f64, t_max: f64, threshold: f64) -> StabilityCheck {
    let n_f = f64::from(n);
    let log_ratio = if n == 0 {
        -s * t_max
    } else if n_f / s < t_max {
        n_f * (t_max * s / n_f).ln() - (s * t_max - n_f)
    } else {
        0.0
    };
    let ratio = log_ratio.exp();
    StabilityCheck {
        pass: ratio <= threshold,
        ratio,
    }
}

fn check_samples<T: Copy + Into<f64>>(trace: &[T]) -> Result<()> {
    match trace.iter().position(|v| !(*v).into().is_finite()) {
        Some(sample) => Err(Error::NonFiniteInput { sample }),
        None => Ok(()),
    }
}

fn check_args(dt: f64, s: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Domain(format!("sample interval {dt} must be positive")));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Domain(format!("damping constant {s} must be positive")));
    }
    Ok(())
}

/// Trapezoid weights times tⁿ e^(−st) on the sample grid.
pub fn gain_weights(nt: usize, dt: f64, s: f64, n: u32) -> Vec<f64> {
    let mut w: Vec<f64> = (0..nt)
        .map(|k| {
            let t = k as f64 * dt;
            t.powi(n as i32) * (-s * t).exp() * dt
        })
        .collect();
    if nt > 0 {
        w[0] *= 0.5;
        w[nt - 1] *= 0.5;
    }
    if nt == 1 {
        w[0] = 0.0;
    }
    w
}

fn weighted_sum<T: Copy + Into<f64>>(trace: &[T], weights: &[f64]) -> f64 {
    trace.iter().zip(weights).map(|(d, w)| (*d).into() * w).sum()
}

/// ∫₀^T d(t) e^(−st) dt.
pub fn laplace_transform_trace<T: Copy + Into<f64>>(trace: &[T], dt: f64, s: f64) -> Result<f64> {
    check_args(dt, s)?;
    check_samples(trace)?;
    Ok(weighted_sum(trace, &gain_weights(trace.len(), dt, s, 0)))
}

/// ∫₀^T tⁿ d(t) e^(−st) dt, the transform of the time-gained trace.
pub fn gained_transform<T: Copy + Into<f64>>(trace: &[T], dt: f64, s: f64, n: u32, gate: StabilityGate) -> Result<f64> {
    check_args(dt, s)?;
    check_samples(trace)?;
    let t_max = trace.len().saturating_sub(1) as f64 * dt;
    if let StabilityGate::Enforce { threshold } = gate {
        if t_max > 0.0 {
            let check = stability_check(n, s, t_max, threshold);
            if !check.pass {
                return Err(Error::Stability {
                    pairs: vec![(n, s, check.ratio)],
                });
            }
        }
    }
    Ok(weighted_sum(trace, &gain_weights(trace.len(), dt, s, n)))
}

/// n-th derivative of the transform with respect to s: (−1)ⁿ × gained transform.
pub fn observed_derivative<T: Copy + Into<f64>>(trace: &[T], dt: f64, s: f64, n: u32, gate: StabilityGate) -> Result<f64> {
    let g = gained_transform(trace, dt, s, n, gate)?;
    Ok(if n % 2 == 1 { -g } else { g })
}

/// ∫₀^T e^(rt) d(t) e^(−st) dt: exponential gain, which acts as a reduced
/// damping constant s − r.
pub fn exponential_gain_transform<T: Copy + Into<f64>>(trace: &[T], dt: f64, s: f64, r: f64) -> Result<f64> {
    check_args(dt, s)?;
    if !(r >= 0.0 && r < s) {
        return Err(Error::Domain(format!(
            "exponential gain rate {r} must satisfy 0 <= r < s = {s}"
        )));
    }
    check_samples(trace)?;
    let nt = trace.len();
    let mut w: Vec<f64> = (0..nt)
        .map(|k| {
            let t = k as f64 * dt;
            (r * t).exp() * (-s * t).exp() * dt
        })
        .collect();
    if nt == 1 {
        w[0] = 0.0;
    } else if nt > 1 {
        w[0] *= 0.5;
        w[nt - 1] *= 0.5;
    }
    Ok(weighted_sum(trace, &w))
}

/// Observed s-derivatives for every trace, damping constant and gain power.
///
/// Fails listing all offending (n, s) pairs unless `force` is set.
pub fn transform_survey(dataset: &SurveyDataset, spec: &TransformSpec, force: bool) -> Result<LaplaceField> {
    spec.validate()?;
    let t_max = dataset.record_length();
    if !force && t_max > 0.0 {
        let failed: Vec<(u32, f64, f64)> = spec
            .stability_table(t_max)
            .into_iter()
            .filter(|row| !row.check.pass)
            .map(|row| (row.n, row.s, row.check.ratio))
            .collect();
        if !failed.is_empty() {
            return Err(Error::Stability { pairs: failed });
        }
    }

    let (nt, dt) = (dataset.nt(), dataset.dt());
    let mut weights = Vec::with_capacity(spec.damping_constants.len() * spec.gain_powers.len());
    for &s in &spec.damping_constants {
        for &n in &spec.gain_powers {
            let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
            let w = gain_weights(nt, dt, s, n);
            weights.push((sign, w));
        }
    }

    let counts: Vec<usize> = (0..dataset.geometry().shot_count())
        .map(|i| dataset.geometry().receiver_count(i))
        .collect();
    let mut field = LaplaceField::zeros(
        &counts,
        spec.damping_constants.clone(),
        spec.gain_powers.clone(),
        Provenance::ObservedDerivative,
    )?;
    field
        .shots_mut()
        .into_par_iter()
        .zip(dataset.gathers().par_iter())
        .for_each(|(out, gather)| {
            for (trace, values) in gather.traces().zip(out.chunks_exact_mut(weights.len())) {
                for (v, (sign, w)) in values.iter_mut().zip(&weights) {
                    *v = sign * weighted_sum(trace, w);
                }
            }
        });
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AcquisitionGeometry, Point};
    use crate::trace_io::ShotGather;
    use proptest::prelude::*;

    fn exp_samples(a: f64, dt: f64, t_max: f64) -> Vec<f64> {
        let nt = (t_max / dt).round() as usize + 1;
        (0..nt).map(|k| (-a * k as f64 * dt).exp()).collect()
    }

    #[test]
    fn zero_trace() {
        assert_eq!(laplace_transform_trace(&[0.0f64; 100], 1e-3, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn closed_forms() {
        let d = exp_samples(1.0, 1e-3, 12.0);
        assert!((laplace_transform_trace(&d, 1e-3, 2.0).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        let one = vec![1.0f64; 12001];
        let want = (1.0 - (-24.0f64).exp()) / 2.0;
        assert!((laplace_transform_trace(&one, 1e-3, 2.0).unwrap() - want).abs() < 1e-6);
        let g = StabilityGate::default();
        assert!((gained_transform(&d, 1e-3, 2.0, 2, g).unwrap() - 2.0 / 27.0).abs() < 1e-6);
        assert!((gained_transform(&d, 1e-3, 2.0, 1, g).unwrap() - 1.0 / 9.0).abs() < 1e-6);
        assert!((observed_derivative(&d, 1e-3, 2.0, 1, g).unwrap() + 1.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn identity_gain_is_plain_transform() {
        let d = exp_samples(0.7, 1e-3, 3.0);
        let g = StabilityGate::Override;
        let plain = laplace_transform_trace(&d, 1e-3, 2.5).unwrap();
        assert_eq!(gained_transform(&d, 1e-3, 2.5, 0, g).unwrap(), plain);
        assert_eq!(observed_derivative(&d, 1e-3, 2.5, 0, g).unwrap(), plain);
        assert_eq!(exponential_gain_transform(&d, 1e-3, 2.5, 0.0).unwrap(), plain);
    }

    #[test]
    fn exponential_shift_examples() {
        let d = exp_samples(1.0, 1e-3, 12.0);
        let v = exponential_gain_transform(&d, 1e-3, 3.0, 1.0).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
        assert!(matches!(exponential_gain_transform(&d, 1e-3, 3.0, 3.0), Err(Error::Domain(_))));
        assert!(exponential_gain_transform(&d, 1e-3, 3.0, -0.1).is_err());
    }

    #[test]
    fn derivative_matches_central_difference() {
        let dt = 1e-3;
        let d: Vec<f64> = (0..6001)
            .map(|k| {
                let t = k as f64 * dt;
                (-(t - 0.8).powi(2) / 0.02).exp() - 0.4 * (-(t - 1.7).powi(2) / 0.05).exp()
            })
            .collect();
        let s = 3.0;
        let h = 1e-4;
        let f = |s: f64| laplace_transform_trace(&d, dt, s).unwrap();
        let g = StabilityGate::Override;
        let d1 = (f(s + h) - f(s - h)) / (2.0 * h);
        let a1 = observed_derivative(&d, dt, s, 1, g).unwrap();
        assert!(((a1 - d1) / a1).abs() < 1e-5, "{a1} vs {d1}");
        let d2 = (f(s + h) - 2.0 * f(s) + f(s - h)) / (h * h);
        let a2 = observed_derivative(&d, dt, s, 2, g).unwrap();
        assert!(((a2 - d2) / a2).abs() < 1e-5, "{a2} vs {d2}");
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            laplace_transform_trace(&[0.0, f64::NAN], 1e-3, 2.0),
            Err(Error::NonFiniteInput { sample: 1 })
        ));
    }

    #[test]
    fn stability_examples() {
        let c0 = stability_check(0, 2.0, 12.0, 1e-5);
        assert!(c0.pass && ((c0.ratio - (-24.0f64).exp()) / c0.ratio).abs() < 1e-12);
        let c4 = stability_check(4, 2.0, 12.0, 1e-5);
        assert!(c4.pass && ((c4.ratio - 2.67e-6) / 2.67e-6).abs() < 0.01);
        let c8 = stability_check(8, 2.0, 12.0, 1e-5);
        assert!(!c8.pass && ((c8.ratio - 7.4e-4) / 7.4e-4).abs() < 0.01);
        // Peak beyond the record: the envelope is still rising at T.
        assert_eq!(stability_check(30, 2.0, 12.0, 1e-5).ratio, 1.0);
    }

    #[test]
    fn gained_transform_enforces_gate() {
        let d = vec![1.0f64; 12001];
        let err = gained_transform(&d, 1e-3, 2.0, 8, StabilityGate::default()).unwrap_err();
        assert!(matches!(err, Error::Stability { .. }));
        assert!(gained_transform(&d, 1e-3, 2.0, 8, StabilityGate::Override).is_ok());
    }

    fn tiny_survey(nt: usize, dt: f64, shots: usize) -> SurveyDataset {
        let src: Vec<Point> = (0..shots).map(|i| Point::new(i as f64 * 100.0, 10.0)).collect();
        let rcv = vec![Point::new(0.0, 10.0), Point::new(50.0, 10.0)];
        let geom = AcquisitionGeometry::fixed_spread(src, rcv).unwrap();
        let gathers = (0..shots)
            .map(|i| {
                let samples = (0..2 * nt)
                    .map(|k| (-((k % nt) as f64 * dt) * (1.0 + i as f64 + (k / nt) as f64)).exp() as f32)
                    .collect();
                ShotGather::new(i, nt, dt, samples).unwrap()
            })
            .collect();
        SurveyDataset::new(geom, gathers, "").unwrap()
    }

    #[test]
    fn survey_matches_per_trace_transform() {
        let ds = tiny_survey(3001, 1e-3, 4);
        let spec = TransformSpec::new(vec![7.0], vec![0]).unwrap();
        let field = transform_survey(&ds, &spec, false).unwrap();
        assert_eq!(field.provenance(), Provenance::ObservedDerivative);
        for (i, g) in ds.gathers().iter().enumerate() {
            for j in 0..2 {
                let want = laplace_transform_trace(g.trace(j), 1e-3, 7.0).unwrap();
                assert_eq!(field.get(i, j, 0, 0), want);
            }
        }
        let full = transform_survey(&ds, &TransformSpec::default(), true).unwrap();
        assert!(full.values().iter().all(|v| v.is_finite()));
        let g = StabilityGate::Override;
        for (is, &s) in full.damping_constants().iter().enumerate() {
            for (jn, &n) in full.gain_powers().iter().enumerate() {
                let want = observed_derivative(ds.gathers()[3].trace(1), 1e-3, s, n, g).unwrap();
                assert_eq!(full.get(3, 1, is, jn), want);
            }
        }
    }

    #[test]
    fn survey_reports_all_failing_pairs() {
        let ds = tiny_survey(12001, 1e-3, 1);
        let spec = TransformSpec::new(vec![2.0, 3.0], vec![4, 8]).unwrap();
        match transform_survey(&ds, &spec, false) {
            Err(Error::Stability { pairs }) => {
                assert!(pairs.iter().all(|p| p.0 == 8));
                assert!(!pairs.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(transform_survey(&ds, &spec, true).is_ok());
    }

    proptest! {
        #[test]
        fn linearity(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            d1 in proptest::collection::vec(0.1f64..1.0, 50),
            d2 in proptest::collection::vec(0.1f64..1.0, 50),
            s in 0.5f64..12.0, n in 0u32..5, r_frac in 0.0f64..0.9,
        ) {
            let dt = 0.01;
            let mix: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
            let g = StabilityGate::Override;
            let check = |lhs: f64, x: f64, y: f64| {
                let scale = (a * x).abs() + (b * y).abs();
                (lhs - (a * x + b * y)).abs() <= 1e-12 * scale
            };
            let t = |d: &[f64]| laplace_transform_trace(d, dt, s).unwrap();
            prop_assert!(check(t(&mix), t(&d1), t(&d2)));
            let gt = |d: &[f64]| gained_transform(d, dt, s, n, g).unwrap();
            prop_assert!(check(gt(&mix), gt(&d1), gt(&d2)));
            let e = |d: &[f64]| exponential_gain_transform(d, dt, s, r_frac * s).unwrap();
            prop_assert!(check(e(&mix), e(&d1), e(&d2)));
        }

        #[test]
        fn ratio_increases_with_power(s in 0.5f64..12.0, t in 1.0f64..20.0) {
            let mut prev = stability_check(0, s, t, 1e-5).ratio;
            for n in 1..20u32 {
                if f64::from(n) / s >= t { break; }
                let r = stability_check(n, s, t, 1e-5).ratio;
                prop_assert!(r >= prev);
                prev = r;
            }
        }
    }
}
