//! Synthetic data with known answers: decaying-exponential traces, Gaussian
//! pulse surveys in a homogeneous half-space, and Laplace-domain Born data.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{LaplaceField, Provenance};
use crate::geometry::{AcquisitionGeometry, Point, VelocityModel};
use crate::greens::{field_s_derivative, ray_pair};
use crate::laplace::TransformSpec;
use crate::sensitivity::{born_kernel_multi, path_terms};
use crate::trace_io::{ShotGather, SurveyDataset};

/// A point velocity perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub position: Point,
    pub delta_v: f64,
}

impl Scatterer {
    pub fn new(position: Point, delta_v: f64) -> Self {
        Scatterer { position, delta_v }
    }

    /// Scatterer at the center of cell (ix, iz).
    pub fn at_cell(model: &VelocityModel, ix: usize, iz: usize, delta_v: f64) -> Self {
        Scatterer::new(model.cell_center(ix, iz), delta_v)
    }
}

/// Samples of e^(−a t) at t_k = k dt.
pub fn exp_trace(a: f64, nt: usize, dt: f64) -> Vec<f32> {
    (0..nt).map(|k| (-a * k as f64 * dt).exp() as f32).collect()
}

/// Unit-area Gaussian of standard deviation `sigma`.
pub fn gaussian(t: f64, sigma: f64) -> f64 {
    (-0.5 * (t / sigma).powi(2)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Second time derivative of [`gaussian`].
pub fn gaussian_second_derivative(t: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    gaussian(t, sigma) * (t * t / (s2 * s2) - 1.0 / s2)
}

/// Laplace transform of the Gaussian pulse relative to a spike: e^(s²σ²/2).
pub fn gaussian_factor(s: f64, sigma: f64) -> f64 {
    (0.5 * s * s * sigma * sigma).exp()
}

/// Direct arrival minus its free-surface ghost, each a Gaussian pulse with
/// 1/(4πr) spreading, scaled by `f`.
pub fn synth_trace(src: Point, rcv: Point, c: f64, sigma: f64, nt: usize, dt: f64, f: f64) -> Result<Vec<f64>> {
    let p = ray_pair(src, rcv, c)?;
    let (a1, a2) = (f / (4.0 * PI * p.r1), f / (4.0 * PI * p.r2));
    Ok((0..nt)
        .map(|k| {
            let t = k as f64 * dt;
            a1 * gaussian(t - p.t1, sigma) - a2 * gaussian(t - p.t2, sigma)
        })
        .collect())
}

/// Options for [`synth_time_traces_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSynthOptions {
    pub source_amplitude: f64,
    pub scatterers: Vec<Scatterer>,
    /// Multiplies every scatterer response (a scatterer volume in m² for
    /// the planar model).
    pub scatterer_volume: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub description: String,
}

impl Default for TimeSynthOptions {
    fn default() -> Self {
        TimeSynthOptions {
            source_amplitude: 1.0,
            scatterers: Vec::new(),
            scatterer_volume: 1.0,
            noise_std: 0.0,
            seed: 0,
            description: String::new(),
        }
    }
}

/// Gaussian-pulse survey in a homogeneous half-space with unit source amplitude.
pub fn synth_time_traces(geometry: &AcquisitionGeometry, c0: f64, wavelet_width: f64, nt: usize, dt: f64) -> Result<SurveyDataset> {
    synth_time_traces_with(geometry, c0, wavelet_width, nt, dt, &TimeSynthOptions::default())
}

/// Gaussian-pulse survey, optionally with Born point scatterers and additive
/// Gaussian noise. Scatterer arrivals at each path time τ_l are
/// w''(t − τ_l)·2/((4π)²c³ρ_l)·Δv·f·volume, whose transform is the Born
/// kernel times the pulse factor.
pub fn synth_time_traces_with(
    geometry: &AcquisitionGeometry,
    c0: f64,
    wavelet_width: f64,
    nt: usize,
    dt: f64,
    opts: &TimeSynthOptions,
) -> Result<SurveyDataset> {
    if !(wavelet_width > 0.0 && dt > 0.0 && nt >= 2 && c0 > 0.0) {
        return Err(Error::Invalid("wavelet width, dt and velocity must be positive and nt >= 2".into()));
    }
    if !(opts.noise_std >= 0.0) {
        return Err(Error::Invalid("noise_std must be non-negative".into()));
    }
    let latest = (nt - 1) as f64 * dt - 5.0 * wavelet_width;
    let f = opts.source_amplitude;
    let born_scale = 2.0 / ((4.0 * PI) * (4.0 * PI) * c0 * c0 * c0) * f * opts.scatterer_volume;

    let gathers = (0..geometry.shot_count())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let src = geometry.shot(i);
            let mut samples = Vec::with_capacity(geometry.receiver_count(i) * nt);
            for &rcv in geometry.receivers(i) {
                let p = ray_pair(src, rcv, c0)?;
                if p.t2 > latest {
                    return Err(window_error(i, p.t2, latest));
                }
                let mut trace = synth_trace(src, rcv, c0, wavelet_width, nt, dt, f)?;
                for sc in &opts.scatterers {
                    let terms = path_terms(src, sc.position, rcv, c0)?;
                    for (&tau, &rho) in terms.tau.iter().zip(&terms.rho) {
                        if tau > latest {
                            return Err(window_error(i, tau, latest));
                        }
                        let amp = born_scale * sc.delta_v / rho;
                        for (k, v) in trace.iter_mut().enumerate() {
                            *v += amp * gaussian_second_derivative(k as f64 * dt - tau, wavelet_width);
                        }
                    }
                }
                samples.extend(trace);
            }
            Ok(samples)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let noise = if opts.noise_std > 0.0 {
        Some(Normal::new(0.0, opts.noise_std).map_err(|e| Error::Invalid(e.to_string()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(gathers.len());
    for (i, samples) in gathers.into_iter().enumerate() {
        let samples = samples
            .into_iter()
            .map(|v| match &noise {
                Some(n) => (v + n.sample(&mut rng)) as f32,
                None => v as f32,
            })
            .collect();
        out.push(ShotGather::new(i, nt, dt, samples)?);
    }
    SurveyDataset::new(geometry.clone(), out, opts.description.clone())
}

fn window_error(shot: usize, t: f64, latest: f64) -> Error {
    Error::Invalid(format!(
        "shot {shot}: arrival at {t:.4} s is past the last usable time {latest:.4} s"
    ))
}

/// Laplace-domain observations: background s-derivatives plus first-order
/// scatterer responses, for every (s, n) of `spec`.
pub fn synth_born_observed(
    geometry: &AcquisitionGeometry,
    c0: f64,
    scatterers: &[Scatterer],
    f_true: f64,
    spec: &TransformSpec,
    model: &VelocityModel,
) -> Result<LaplaceField> {
    if !(f_true > 0.0 && f_true.is_finite()) {
        return Err(Error::Invalid(format!("source amplitude {f_true} must be positive")));
    }
    spec.validate()?;
    for sc in scatterers {
        if model.cell_containing(sc.position).is_none() {
            return Err(Error::Invalid(format!(
                "scatterer at ({}, {}) lies outside the model",
                sc.position.x, sc.position.z
            )));
        }
    }
    let counts: Vec<usize> = (0..geometry.shot_count()).map(|i| geometry.receiver_count(i)).collect();
    let mut field = LaplaceField::zeros(
        &counts,
        spec.damping_constants.clone(),
        spec.gain_powers.clone(),
        Provenance::ObservedDerivative,
    )?;
    let width = spec.damping_constants.len() * spec.gain_powers.len();
    let nn = spec.gain_powers.len();
    field
        .shots_mut()
        .into_par_iter()
        .enumerate()
        .try_for_each(|(i, out)| -> Result<()> {
            let src = geometry.shot(i);
            let mut kernels = Vec::with_capacity(nn);
            for (j, &rcv) in geometry.receivers(i).iter().enumerate() {
                let values = &mut out[j * width..(j + 1) * width];
                let terms: Vec<_> = scatterers
                    .iter()
                    .map(|sc| path_terms(src, sc.position, rcv, c0))
                    .collect::<Result<_>>()?;
                for (is, &s) in spec.damping_constants.iter().enumerate() {
                    for (q, &n) in spec.gain_powers.iter().enumerate() {
                        values[is * nn + q] = field_s_derivative(f_true, src, rcv, c0, s, n)?;
                    }
                    for (sc, t) in scatterers.iter().zip(&terms) {
                        born_kernel_multi(t, f_true, c0, s, &spec.gain_powers, &mut kernels);
                        for q in 0..nn {
                            values[is * nn + q] += kernels[q] * sc.delta_v;
                        }
                    }
                }
            }
            Ok(())
        })?;
    Ok(field)
}
