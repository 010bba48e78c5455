//! One-step model building: per-(s, n) preconditioned gradients, an
//! equal-contribution sum, a parabolic step-length fit on the Born-linearized
//! objective, a bounded update, and resampling to the output grid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{LaplaceField, Provenance};
use crate::geometry::{bilinear_resample, water_mask_from_bathymetry, AcquisitionGeometry, GridSpec, VelocityModel};
use crate::greens::field_s_derivative;
use crate::laplace::{transform_survey, TransformSpec, DEFAULT_AMPLITUDE_FLOOR, DEFAULT_STABILITY_THRESHOLD};
use crate::objective::{assemble, estimate_source, log_residual, precondition, GradientField, KernelContext, ResidualPolicy, SkipCounters};
use crate::trace_io::SurveyDataset;

/// Seafloor description for the water mask.
#[derive(Debug, Clone, PartialEq)]
pub enum Bathymetry {
    /// Same depth under every column.
    Flat(f64),
    /// One depth per gradient-grid column.
    Profile(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub background_velocity: f64,
    pub damping_constants: Vec<f64>,
    pub gain_powers: Vec<u32>,
    pub shot_decimation: usize,
    pub gradient_spacing: f64,
    pub output_spacing: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// First trial step moves the largest cell by this fraction of the background velocity.
    pub step_fraction: f64,
    pub lambda_rel: f64,
    pub hessian_exponent: f64,
    pub weight_norm: WeightNorm,
    /// Largest |log residual| treated as a perfect fit.
    pub residual_tolerance: f64,
    pub amplitude_floor: f64,
    pub stability_threshold: f64,
    pub bathymetry: Option<Bathymetry>,
    /// Velocity assigned to masked cells; the background velocity if unset.
    pub water_velocity: Option<f64>,
    pub model_x_min: Option<f64>,
    pub model_x_max: Option<f64>,
    pub model_depth: Option<f64>,
    /// Run even when some (n, s) pairs fail the stability check.
    pub force: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            background_velocity: 3500.0,
            damping_constants: (2..=12).map(f64::from).collect(),
            gain_powers: (0..=4).collect(),
            shot_decimation: 4,
            gradient_spacing: 200.0,
            output_spacing: 25.0,
            v_min: 1400.0,
            v_max: 8000.0,
            step_fraction: 0.05,
            lambda_rel: 1e-8,
            hessian_exponent: 0.5,
            weight_norm: WeightNorm::MaxAbs,
            residual_tolerance: 1e-12,
            amplitude_floor: DEFAULT_AMPLITUDE_FLOOR,
            stability_threshold: DEFAULT_STABILITY_THRESHOLD,
            bathymetry: None,
            water_velocity: None,
            model_x_min: None,
            model_x_max: None,
            model_depth: None,
            force: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be positive")))
            }
        };
        positive("background_velocity", self.background_velocity)?;
        positive("gradient_spacing", self.gradient_spacing)?;
        positive("output_spacing", self.output_spacing)?;
        positive("v_min", self.v_min)?;
        positive("step_fraction", self.step_fraction)?;
        positive("lambda_rel", self.lambda_rel)?;
        positive("hessian_exponent", self.hessian_exponent)?;
        if !(self.v_max > self.v_min && self.v_max.is_finite()) {
            return Err(Error::Config(format!(
                "velocity bounds [{}, {}] must be ordered",
                self.v_min, self.v_max
            )));
        }
        if self.shot_decimation == 0 {
            return Err(Error::Config("shot_decimation must be at least 1".into()));
        }
        if !(self.residual_tolerance >= 0.0) {
            return Err(Error::Config("residual_tolerance must be non-negative".into()));
        }
        if let Some(v) = self.water_velocity {
            positive("water_velocity", v)?;
        }
        if let Some(d) = self.model_depth {
            positive("model_depth", d)?;
        }
        if let (Some(a), Some(b)) = (self.model_x_min, self.model_x_max) {
            if !(b > a) {
                return Err(Error::Config(format!("model_x_max {b} must exceed model_x_min {a}")));
            }
        }
        match &self.bathymetry {
            Some(Bathymetry::Flat(d)) if !(*d >= 0.0 && d.is_finite()) => {
                return Err(Error::Config(format!("water_depth {d} must be non-negative")))
            }
            Some(Bathymetry::Profile(p)) if p.iter().any(|d| !(*d >= 0.0 && d.is_finite())) => {
                return Err(Error::Config("bathymetry depths must be non-negative".into()))
            }
            _ => {}
        }
        self.transform_spec().validate()
    }

    /// Transform settings; n = 0 is always included for source estimation.
    pub fn transform_spec(&self) -> TransformSpec {
        let mut gain_powers = self.gain_powers.clone();
        if !gain_powers.contains(&0) {
            gain_powers.insert(0, 0);
        }
        TransformSpec {
            damping_constants: self.damping_constants.clone(),
            gain_powers,
            amplitude_floor: self.amplitude_floor,
            stability_threshold: self.stability_threshold,
        }
    }

    pub fn policy(&self) -> ResidualPolicy {
        ResidualPolicy {
            amplitude_floor: self.amplitude_floor,
        }
    }

    /// Coarse grid for gradients: the configured extent, or the acquisition
    /// x-range and max(1000 m, half the largest offset) of depth, snapped
    /// outward to whole cells. Carries the water mask and water velocity.
    pub fn gradient_grid(&self, geometry: &AcquisitionGeometry) -> Result<VelocityModel> {
        let h = self.gradient_spacing;
        let (gx0, gx1) = geometry.x_range();
        let x0 = self.model_x_min.unwrap_or((gx0 / h).floor() * h);
        let x1 = self.model_x_max.unwrap_or_else(|| {
            let hi = (gx1 / h).ceil() * h;
            if hi > x0 {
                hi
            } else {
                x0 + h
            }
        });
        let depth = self
            .model_depth
            .unwrap_or_else(|| ((1000.0f64).max(0.5 * geometry.max_offset()) / h).ceil() * h);
        let nx = (((x1 - x0) / h).round() as usize).max(1);
        let nz = ((depth / h).round() as usize).max(1);
        let mut model = VelocityModel::homogeneous(nx, nz, h, h, x0, 0.0, self.background_velocity)?;
        if let Some(b) = &self.bathymetry {
            let profile = match b {
                Bathymetry::Flat(d) => vec![*d; nx],
                Bathymetry::Profile(p) => p.clone(),
            };
            model = water_mask_from_bathymetry(&model, &profile).map_err(|e| Error::Config(e.to_string()))?;
            let water = self.water_velocity.unwrap_or(self.background_velocity);
            let v = (0..model.len())
                .map(|k| if model.is_masked(k) { water } else { self.background_velocity })
                .collect();
            model = model.with_velocities(v)?;
        }
        Ok(model)
    }
}

/// Norm used to equalize directions before they are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightNorm {
    #[default]
    MaxAbs,
    L2,
}

impl WeightNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightNorm::MaxAbs => "max",
            WeightNorm::L2 => "l2",
        }
    }

    fn of(self, values: &[f64]) -> f64 {
        match self {
            WeightNorm::MaxAbs => values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            WeightNorm::L2 => values.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

impl std::str::FromStr for WeightNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(WeightNorm::MaxAbs),
            "l2" => Ok(WeightNorm::L2),
            _ => Err(Error::Config(format!("unknown weight norm '{s}' (expected max or l2)"))),
        }
    }
}

/// Equal-contribution sum: each direction is scaled to unit max magnitude,
/// the scaled directions are added, and the sum is rescaled to unit max.
/// Returns the combined field and the per-input weights 1/max|g|.
pub fn weighted_sum(directions: &[GradientField]) -> Result<(GradientField, Vec<f64>)> {
    weighted_sum_with(directions, WeightNorm::MaxAbs)
}

/// [`weighted_sum`] with the per-input weights taken as 1/‖g‖ in `norm`.
/// The sum is always rescaled to unit max magnitude.
pub fn weighted_sum_with(directions: &[GradientField], norm: WeightNorm) -> Result<(GradientField, Vec<f64>)> {
    let first = directions
        .first()
        .ok_or_else(|| Error::Invalid("no directions to combine".into()))?;
    let grid = first.grid();
    let mut weights = Vec::with_capacity(directions.len());
    for d in directions {
        if d.grid() != grid {
            return Err(Error::GridMismatch("directions live on different grids".into()));
        }
        let size = norm.of(d.direction());
        if !(size > 0.0) {
            let (s, n) = d.label().unwrap_or((f64::NAN, u32::MAX));
            return Err(Error::ZeroDirection { s, n });
        }
        weights.push(1.0 / size);
    }
    // Terms are summed in sorted order so the result does not depend on the
    // order of the inputs.
    let mut terms = Vec::with_capacity(directions.len());
    let mut sum: Vec<f64> = (0..grid.len())
        .map(|k| {
            terms.clear();
            terms.extend(directions.iter().zip(&weights).map(|(d, w)| d.direction()[k] * w));
            terms.sort_by(f64::total_cmp);
            terms.iter().sum()
        })
        .collect();
    let max = sum.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(max > 0.0) {
        return Err(Error::ZeroDirection {
            s: f64::NAN,
            n: u32::MAX,
        });
    }
    for v in &mut sum {
        *v /= max;
    }
    let mask = first.mask().map(<[bool]>::to_vec);
    Ok((GradientField::from_direction(grid, mask, sum, None), weights))
}

/// Fit E(α) = aα² + bα + c through (0, E0), (α1, E1), (α2, E2). Returns the
/// vertex clamped to [0, 2·max(α1, α2)] when the fit is convex, otherwise the
/// trial with the smallest objective.
pub fn parabolic_step(alpha1: f64, alpha2: f64, e0: f64, e1: f64, e2: f64) -> f64 {
    let fallback = || {
        let mut best = (0.0, e0);
        for (a, e) in [(alpha1, e1), (alpha2, e2)] {
            if e < best.1 && a >= 0.0 {
                best = (a, e);
            }
        }
        best.0
    };
    if !(alpha1 != alpha2 && alpha1 != 0.0 && alpha2 != 0.0) || !(e0.is_finite() && e1.is_finite() && e2.is_finite()) {
        return fallback();
    }
    let s1 = (e1 - e0) / alpha1;
    let s2 = (e2 - e0) / alpha2;
    let a = (s2 - s1) / (alpha2 - alpha1);
    let b = s1 - a * alpha1;
    let span = alpha1.abs().max(alpha2.abs());
    let scale = e0.abs() + e1.abs() + e2.abs();
    if a * span * span > 1e-12 * scale && a > 0.0 {
        let vertex = -b / (2.0 * a);
        let hi = 2.0 * alpha1.max(alpha2);
        if vertex.is_finite() {
            return vertex.clamp(0.0, hi.max(0.0));
        }
    }
    fallback()
}

/// v ← clamp(v + α·direction, v_min, v_max) on unmasked cells.
pub fn apply_update(model: &VelocityModel, direction: &GradientField, alpha: f64, bounds: (f64, f64)) -> Result<VelocityModel> {
    let g = direction.grid();
    if g.nx != model.nx() || g.nz != model.nz() {
        return Err(Error::GridMismatch(format!(
            "direction is {}x{}, model is {}x{}",
            g.nx,
            g.nz,
            model.nx(),
            model.nz()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("step length {alpha} must be finite and non-negative")));
    }
    let (lo, hi) = bounds;
    let v = model
        .velocities()
        .iter()
        .zip(direction.direction())
        .enumerate()
        .map(|(k, (&v, &d))| {
            if model.is_masked(k) {
                v
            } else {
                (v + alpha * d).clamp(lo, hi)
            }
        })
        .collect();
    model.with_velocities(v)
}

/// First-order (Born) prediction of modeled s-derivatives along a direction.
///
/// Base values and increments are kept apart so that residuals at small steps
/// keep full precision.
#[derive(Debug, Clone)]
pub struct BornPredictor {
    base: LaplaceField,
    increment: LaplaceField,
}

impl BornPredictor {
    /// `source` holds per-shot amplitudes for each damping constant, in order.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        geometry: &AcquisitionGeometry,
        c: f64,
        source: &[Vec<f64>],
        grid: &VelocityModel,
        direction: &GradientField,
        damping_constants: &[f64],
        gain_powers: &[u32],
    ) -> Result<Self> {
        let g = direction.grid();
        if g.nx != grid.nx() || g.nz != grid.nz() {
            return Err(Error::GridMismatch("direction and grid differ".into()));
        }
        if source.len() != damping_constants.len() {
            return Err(Error::Invalid("one source vector per damping constant required".into()));
        }
        let counts: Vec<usize> = (0..geometry.shot_count()).map(|i| geometry.receiver_count(i)).collect();
        let mut base = LaplaceField::zeros(&counts, damping_constants.to_vec(), gain_powers.to_vec(), Provenance::ModeledDerivative)?;
        let mut increment = base.clone();
        let nn = gain_powers.len();

        let centers = grid.cell_centers();
        let active: Vec<usize> = (0..centers.len()).filter(|&k| direction.direction()[k] != 0.0).collect();
        let cells = active.iter().map(|&k| centers[k]).collect();
        let dm: Vec<f64> = active.iter().map(|&k| direction.direction()[k]).collect();

        for (is, &s) in damping_constants.iter().enumerate() {
            let ctx = KernelContext {
                geometry,
                c,
                f_m: &source[is],
                cells: Vec::clone(&cells),
                s,
                gain_powers,
            };
            let per_shot = (0..geometry.shot_count())
                .into_par_iter()
                .map(|i| -> Result<(Vec<f64>, Vec<f64>)> {
                    let rc = geometry.receiver_count(i);
                    let mut u = Vec::with_capacity(rc * nn);
                    for &r in geometry.receivers(i) {
                        for &n in gain_powers {
                            u.push(field_s_derivative(source[is][i], geometry.shot(i), r, c, s, n)?);
                        }
                    }
                    let mut inc = vec![0.0; rc * nn];
                    ctx.for_each_kernel(i, |k, j, kernels| {
                        for q in 0..nn {
                            inc[j * nn + q] += kernels[q] * dm[k];
                        }
                    })?;
                    Ok((u, inc))
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, (u, inc)) in per_shot.into_iter().enumerate() {
                for j in 0..geometry.receiver_count(i) {
                    let bt = base.trace_values_mut(i, j);
                    bt[is * nn..(is + 1) * nn].copy_from_slice(&u[j * nn..(j + 1) * nn]);
                    let it = increment.trace_values_mut(i, j);
                    it[is * nn..(is + 1) * nn].copy_from_slice(&inc[j * nn..(j + 1) * nn]);
                }
            }
        }
        Ok(BornPredictor { base, increment })
    }

    pub fn base(&self) -> &LaplaceField {
        &self.base
    }

    pub fn increment(&self) -> &LaplaceField {
        &self.increment
    }

    /// Predicted objective summed over all (s, n) of the predictor, plus per
    /// (s, n) values in axis order and skip counts.
    pub fn objective(&self, alpha: f64, observed: &LaplaceField, policy: &ResidualPolicy) -> Result<PredictedObjective> {
        if observed.receiver_counts() != self.base.receiver_counts() {
            return Err(Error::Invalid("observed field does not match predictor layout".into()));
        }
        let mut per_sn = Vec::new();
        let mut total = 0.0;
        let mut skips = SkipCounters::default();
        for (is, &s) in self.base.damping_constants().iter().enumerate() {
            let os = observed
                .s_index(s)
                .ok_or_else(|| Error::Invalid(format!("observed field has no damping constant {s}")))?;
            for (jn, &n) in self.base.gain_powers().iter().enumerate() {
                let on = observed
                    .n_index(n)
                    .ok_or_else(|| Error::Invalid(format!("observed field has no gain power {n}")))?;
                let floor = policy
                    .floor(observed.max_abs(os, on))
                    .max(policy.floor(self.base.max_abs(is, jn)));
                let mut value = 0.0;
                let mut pairs = 0u64;
                for i in 0..observed.shot_count() {
                    for j in 0..observed.receiver_count(i) {
                        let u = self.base.get(i, j, is, jn);
                        let du = self.increment.get(i, j, is, jn);
                        let d = observed.get(i, j, os, on);
                        if let Some(r) = predicted_residual(u, alpha * du, d, floor, &mut skips) {
                            value += 0.5 * r * r;
                            pairs += 1;
                        }
                    }
                }
                if pairs == 0 {
                    return Err(Error::DegenerateObjective { s, n });
                }
                total += value;
                per_sn.push((s, n, value));
            }
        }
        Ok(PredictedObjective { total, per_sn, skips })
    }
}

/// Born-predicted field at step `alpha`: base + α·increment.
pub fn born_predict_field(predictor: &BornPredictor, alpha: f64) -> LaplaceField {
    let values = predictor
        .base
        .values()
        .iter()
        .zip(predictor.increment.values())
        .map(|(u, du)| if alpha == 0.0 { *u } else { u + alpha * du })
        .collect();
    LaplaceField::from_values(
        &predictor.base.receiver_counts(),
        predictor.base.damping_constants().to_vec(),
        predictor.base.gain_powers().to_vec(),
        values,
        Provenance::ModeledDerivative,
    )
    .expect("predictor layout is valid")
}

/// ln(|u + δ|/|d|) evaluated as ln_1p(((|u| − |d|) ± δ)/|d|) near a fit.
fn predicted_residual(u: f64, delta: f64, d: f64, floor: f64, skips: &mut SkipCounters) -> Option<f64> {
    let predicted = u + delta;
    if delta == 0.0 || (predicted > 0.0) != (u > 0.0) {
        return log_residual(predicted, d, floor, skips);
    }
    // Same sign as the base: |u + δ| = |u| + sgn(u)·δ.
    let signed = if u > 0.0 { delta } else { -delta };
    let u_abs = u.abs() + signed;
    if !(u_abs > floor && d.abs() > floor) {
        skips.below_floor += 1;
        return None;
    }
    if (u > 0.0) != (d > 0.0) {
        skips.sign_mismatch += 1;
        return None;
    }
    let d_abs = d.abs();
    let q = u_abs / d_abs;
    Some(if (0.5..=2.0).contains(&q) {
        (((u.abs() - d_abs) + signed) / d_abs).ln_1p()
    } else {
        q.ln()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedObjective {
    pub total: f64,
    pub per_sn: Vec<(f64, u32, f64)>,
    pub skips: SkipCounters,
}

/// What a build did, for the run manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub shots_total: usize,
    pub shots_used: usize,
    pub gradient_grid: GridSpec,
    pub output_grid: GridSpec,
    pub masked_cells: usize,
    /// Per damping constant: per-shot source amplitudes.
    pub source_estimates: Vec<(f64, Vec<f64>)>,
    /// Per (s, n): weight 1/max|direction|.
    pub weights: Vec<(f64, u32, f64)>,
    /// Per (s, n): pairs left out of the gradient.
    pub skips: Vec<(f64, u32, SkipCounters)>,
    pub max_abs_residual: f64,
    pub no_update: bool,
    pub trial_alphas: [f64; 3],
    pub trial_objectives: [f64; 3],
    pub alpha: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub step_objective: &'static str,
}

impl RunReport {
    /// `key: value` lines.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("shots_total: {}", self.shots_total),
            format!("shots_used: {}", self.shots_used),
            format!(
                "gradient_grid: {}x{} spacing {}x{} origin ({}, {})",
                self.gradient_grid.nx,
                self.gradient_grid.nz,
                self.gradient_grid.dx,
                self.gradient_grid.dz,
                self.gradient_grid.origin_x,
                self.gradient_grid.origin_z
            ),
            format!(
                "output_grid: {}x{} spacing {}x{}",
                self.output_grid.nx, self.output_grid.nz, self.output_grid.dx, self.output_grid.dz
            ),
            format!("masked_cells: {}", self.masked_cells),
            format!("max_abs_residual: {:e}", self.max_abs_residual),
            format!("no_update: {}", self.no_update),
            format!("step_objective: {}", self.step_objective),
            format!(
                "trial_alphas: {}, {}, {}",
                self.trial_alphas[0], self.trial_alphas[1], self.trial_alphas[2]
            ),
            format!(
                "trial_objectives: {:e}, {:e}, {:e}",
                self.trial_objectives[0], self.trial_objectives[1], self.trial_objectives[2]
            ),
            format!("alpha: {}", self.alpha),
            format!("objective_before: {:e}", self.objective_before),
            format!("objective_after: {:e}", self.objective_after),
        ];
        for (s, f) in &self.source_estimates {
            let v: Vec<String> = f.iter().map(|x| format!("{x:e}")).collect();
            out.push(format!("source_estimate s={s}: {}", v.join(", ")));
        }
        for (s, n, w) in &self.weights {
            out.push(format!("weight s={s} n={n}: {w:e}"));
        }
        for (s, n, k) in &self.skips {
            out.push(format!(
                "skipped s={s} n={n}: sign_mismatch={} below_floor={}",
                k.sign_mismatch, k.below_floor
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    /// Updated model on the output grid.
    pub model: VelocityModel,
    /// Updated model on the gradient grid.
    pub coarse_model: VelocityModel,
    /// Combined unit-max direction (zero when no update was needed).
    pub direction: GradientField,
    /// Preconditioned direction per (s, n).
    pub components: Vec<GradientField>,
    pub report: RunReport,
}

/// Full chain from time-domain data.
pub fn build_initial_model(dataset: &SurveyDataset, config: &PipelineConfig) -> Result<BuildOutput> {
    config.validate()?;
    let used = dataset.decimate(config.shot_decimation);
    let observed = transform_survey(&used, &config.transform_spec(), config.force).map_err(|e| e.in_stage("transform"))?;
    let k = config.shot_decimation;
    let mut out = build_core(&observed, used.geometry(), config).map_err(|e| original_shot(e, k))?;
    out.report.shots_total = dataset.geometry().shot_count();
    Ok(out)
}

// Shot indices in errors refer to the decimated survey; report the original.
fn original_shot(err: Error, k: usize) -> Error {
    match err {
        Error::SourceEstimation { shot, s } => Error::SourceEstimation { shot: shot * k, s },
        Error::Stage { stage, source } => original_shot(*source, k).in_stage(stage),
        other => other,
    }
}

/// Chain from Laplace-domain observations (every shot is used; no decimation).
/// `observed` must contain every configured (s, n) and n = 0.
pub fn build_from_observed(observed: &LaplaceField, geometry: &AcquisitionGeometry, config: &PipelineConfig) -> Result<BuildOutput> {
    config.validate()?;
    build_core(observed, geometry, config)
}

fn build_core(observed: &LaplaceField, geometry: &AcquisitionGeometry, config: &PipelineConfig) -> Result<BuildOutput> {
    let c = config.background_velocity;
    let policy = config.policy();
    let grid = config.gradient_grid(geometry).map_err(|e| e.in_stage("grid"))?;
    let s_list = config.damping_constants.clone();
    let n_list = config.gain_powers.clone();

    let source: Vec<Vec<f64>> = s_list
        .par_iter()
        .map(|&s| estimate_source(observed, geometry, c, s, &policy))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("source_estimation"))?;

    let max_abs_residual = max_residual(observed, geometry, c, &source, &s_list, &n_list, &policy).map_err(|e| e.in_stage("residuals"))?;

    let mut report = RunReport {
        shots_total: geometry.shot_count(),
        shots_used: geometry.shot_count(),
        gradient_grid: grid.grid(),
        output_grid: grid.grid(),
        masked_cells: (0..grid.len()).filter(|&k| grid.is_masked(k)).count(),
        source_estimates: s_list.iter().copied().zip(source.iter().cloned()).collect(),
        weights: Vec::new(),
        skips: Vec::new(),
        max_abs_residual,
        no_update: false,
        trial_alphas: [0.0; 3],
        trial_objectives: [0.0; 3],
        alpha: 0.0,
        objective_before: 0.0,
        objective_after: 0.0,
        step_objective: "born-linearized",
    };

    if max_abs_residual <= config.residual_tolerance {
        let zero = GradientField::from_direction(grid.grid(), grid.water_mask().map(<[bool]>::to_vec), vec![0.0; grid.len()], None);
        let model = bilinear_resample(&grid, config.output_spacing, config.output_spacing).map_err(|e| e.in_stage("resample"))?;
        report.no_update = true;
        report.output_grid = model.grid();
        let objective = background_objective(observed, geometry, c, &source, &s_list, &n_list, &policy)?;
        report.objective_before = objective;
        report.objective_after = objective;
        report.trial_objectives = [objective; 3];
        return Ok(BuildOutput {
            model,
            coarse_model: grid,
            direction: zero,
            components: Vec::new(),
            report,
        });
    }

    let per_s: Vec<Vec<GradientField>> = s_list
        .par_iter()
        .zip(source.par_iter())
        .map(|(&s, f_m)| assemble(Some(observed), geometry, c, f_m, &grid, s, &n_list, &policy))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("gradient"))?;

    let mut components = Vec::with_capacity(s_list.len() * n_list.len());
    for field in per_s.iter().flatten() {
        let d = precondition(field, config.lambda_rel, config.hessian_exponent).map_err(|e| e.in_stage("precondition"))?;
        let (s, n) = d.label().unwrap();
        report.skips.push((s, n, d.skips()));
        components.push(d);
    }

    let (direction, weights) = weighted_sum_with(&components, config.weight_norm).map_err(|e| e.in_stage("weighting"))?;
    report.weights = components
        .iter()
        .zip(&weights)
        .map(|(d, w)| {
            let (s, n) = d.label().unwrap();
            (s, n, *w)
        })
        .collect();

    let predictor = BornPredictor::new(geometry, c, &source, &grid, &direction, &s_list, &n_list).map_err(|e| e.in_stage("step_length"))?;
    let eval = |alpha: f64| {
        predictor
            .objective(alpha, observed, &policy)
            .map(|o| o.total)
            .map_err(|e| e.in_stage("step_length"))
    };
    let alpha1 = config.step_fraction * c / direction.max_abs_direction();
    let alpha2 = 2.0 * alpha1;
    let (e0, e1, e2) = (eval(0.0)?, eval(alpha1)?, eval(alpha2)?);
    let trials = [(0.0, e0), (alpha1, e1), (alpha2, e2)];
    let best = trials.iter().copied().fold((0.0, e0), |b, t| if t.1 < b.1 { t } else { b });
    let vertex = parabolic_step(alpha1, alpha2, e0, e1, e2);
    let (alpha, e_alpha) = if trials.iter().any(|t| t.0 == vertex) {
        trials.iter().copied().find(|t| t.0 == vertex).unwrap()
    } else {
        let ev = eval(vertex)?;
        if ev < best.1 {
            (vertex, ev)
        } else {
            best
        }
    };
    report.trial_alphas = [0.0, alpha1, alpha2];
    report.trial_objectives = [e0, e1, e2];
    report.alpha = alpha;
    report.objective_before = e0;
    report.objective_after = e_alpha;

    let coarse_model = apply_update(&grid, &direction, alpha, (config.v_min, config.v_max)).map_err(|e| e.in_stage("update"))?;
    let model = bilinear_resample(&coarse_model, config.output_spacing, config.output_spacing).map_err(|e| e.in_stage("resample"))?;
    report.output_grid = model.grid();
    Ok(BuildOutput {
        model,
        coarse_model,
        direction,
        components,
        report,
    })
}

fn for_each_residual(
    observed: &LaplaceField,
    geometry: &AcquisitionGeometry,
    c: f64,
    source: &[Vec<f64>],
    s_list: &[f64],
    n_list: &[u32],
    policy: &ResidualPolicy,
    mut visit: impl FnMut(f64),
) -> Result<()> {
    for (si, &s) in s_list.iter().enumerate() {
        let is = observed
            .s_index(s)
            .ok_or_else(|| Error::Invalid(format!("observed field has no damping constant {s}")))?;
        for &n in n_list {
            let jn = observed
                .n_index(n)
                .ok_or_else(|| Error::Invalid(format!("observed field has no gain power {n}")))?;
            let mut u = Vec::new();
            let mut u_max: f64 = 0.0;
            for i in 0..geometry.shot_count() {
                for &r in geometry.receivers(i) {
                    let v = field_s_derivative(source[si][i], geometry.shot(i), r, c, s, n)?;
                    u_max = u_max.max(v.abs());
                    u.push(v);
                }
            }
            let floor = policy.floor(observed.max_abs(is, jn)).max(policy.floor(u_max));
            let mut skips = SkipCounters::default();
            let mut t = 0;
            for i in 0..geometry.shot_count() {
                for j in 0..geometry.receiver_count(i) {
                    if let Some(r) = log_residual(u[t], observed.get(i, j, is, jn), floor, &mut skips) {
                        visit(r);
                    }
                    t += 1;
                }
            }
        }
    }
    Ok(())
}

fn max_residual(
    observed: &LaplaceField,
    geometry: &AcquisitionGeometry,
    c: f64,
    source: &[Vec<f64>],
    s_list: &[f64],
    n_list: &[u32],
    policy: &ResidualPolicy,
) -> Result<f64> {
    let mut max: f64 = 0.0;
    for_each_residual(observed, geometry, c, source, s_list, n_list, policy, |r| max = max.max(r.abs()))?;
    Ok(max)
}

fn background_objective(
    observed: &LaplaceField,
    geometry: &AcquisitionGeometry,
    c: f64,
    source: &[Vec<f64>],
    s_list: &[f64],
    n_list: &[u32],
    policy: &ResidualPolicy,
) -> Result<f64> {
    let mut total = 0.0;
    for_each_residual(observed, geometry, c, source, s_list, n_list, policy, |r| total += 0.5 * r * r)?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::sensitivity::born_kernel_s_derivative;

    fn field_on(nx: usize, nz: usize, direction: Vec<f64>, label: Option<(f64, u32)>) -> GradientField {
        let m = VelocityModel::homogeneous(nx, nz, 100.0, 100.0, 0.0, 0.0, 3000.0).unwrap();
        GradientField::from_direction(m.grid(), None, direction, label)
    }

    #[test]
    fn weighted_sum_single() {
        let d = field_on(3, 1, vec![1.0, -4.0, 2.0], Some((2.0, 0)));
        let (sum, w) = weighted_sum(&[d]).unwrap();
        assert_eq!(sum.direction(), &[0.25, -1.0, 0.5]);
        assert_eq!(w, vec![0.25]);
    }

    #[test]
    fn weighted_sum_weights_and_permutation() {
        let a = field_on(3, 1, vec![2.0, 0.0, 1.0], Some((2.0, 0)));
        let b = field_on(3, 1, vec![0.0, 4.0, -1.0], Some((3.0, 0)));
        let c = field_on(3, 1, vec![0.3, -0.7, 0.1], Some((4.0, 0)));
        let (ab, w) = weighted_sum(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(&w[..2], &[0.5, 0.25]);
        let (ba, _) = weighted_sum(&[c, b, a]).unwrap();
        assert_eq!(ab.direction(), ba.direction());
        assert_eq!(ab.max_abs_direction(), 1.0);
    }

    #[test]
    fn weighted_sum_l2_weights() {
        let a = field_on(2, 1, vec![3.0, 4.0], Some((2.0, 0)));
        let b = field_on(2, 1, vec![0.0, -2.0], Some((3.0, 0)));
        let (sum, w) = weighted_sum_with(&[a, b], WeightNorm::L2).unwrap();
        assert_eq!(w, vec![0.2, 0.5]);
        // 0.6 + 0 and 0.8 - 1.0, rescaled by 0.6.
        assert!((sum.direction()[0] - 1.0).abs() < 1e-15);
        assert!((sum.direction()[1] + 1.0 / 3.0).abs() < 1e-15);
        assert_eq!("l2".parse::<WeightNorm>().unwrap(), WeightNorm::L2);
        assert!(matches!("sum".parse::<WeightNorm>(), Err(Error::Config(_))));
    }

    #[test]
    fn weighted_sum_rejects_zero() {
        let a = field_on(2, 1, vec![0.0, 0.0], Some((7.0, 3)));
        assert!(matches!(weighted_sum(&[a]), Err(Error::ZeroDirection { n: 3, .. })));
    }

    #[test]
    fn parabola_cases() {
        assert!((parabolic_step(1.0, 2.0, 1.0, 0.5, 1.0) - 1.0).abs() < 1e-15);
        let v = parabolic_step(1.0, 2.0, 1.0, 0.5, 0.9);
        assert!((v - 0.95 / 0.9).abs() < 1e-12);
        assert_eq!(parabolic_step(1.0, 2.0, 1.0, 2.0, 3.0), 0.0);
        assert_eq!(parabolic_step(1.0, 2.0, 3.0, 2.0, 1.0), 2.0);
        // Convex with the vertex past the trials: clamped.
        assert_eq!(parabolic_step(1.0, 2.0, 10.0, 5.0, 1.0), 4.0);
    }

    proptest::proptest! {
        #[test]
        fn parabola_is_non_negative(
            a1 in 1e-3f64..10.0, k in 1.1f64..3.0,
            e0 in -10.0f64..10.0, e1 in -10.0f64..10.0, e2 in -10.0f64..10.0,
        ) {
            let a = parabolic_step(a1, k * a1, e0, e1, e2);
            proptest::prop_assert!(a.is_finite() && a >= 0.0 && a <= 2.0 * k * a1);
        }

        #[test]
        fn update_respects_mask_and_bounds(
            dir in proptest::collection::vec(-1.0f64..1.0, 6),
            alpha in 0.0f64..1e5,
        ) {
            let mask = vec![true, false, false, true, false, false];
            let m = VelocityModel::new(3, 2, 100.0, 100.0, 0.0, 0.0, vec![1500.0, 3500.0, 3500.0, 1500.0, 3500.0, 3500.0], Some(mask.clone())).unwrap();
            let d = GradientField::from_direction(m.grid(), Some(mask.clone()), dir, None);
            let out = apply_update(&m, &d, alpha, (1400.0, 8000.0)).unwrap();
            for k in 0..6 {
                if mask[k] {
                    proptest::prop_assert_eq!(out.velocities()[k].to_bits(), m.velocities()[k].to_bits());
                } else {
                    proptest::prop_assert!((1400.0..=8000.0).contains(&out.velocities()[k]));
                }
            }
        }
    }

    #[test]
    fn update_cases() {
        let m = VelocityModel::new(2, 1, 100.0, 100.0, 0.0, 0.0, vec![3500.0, 1500.0], Some(vec![false, true])).unwrap();
        let d = GradientField::from_direction(m.grid(), Some(vec![false, true]), vec![1.0, 1.0], None);
        assert_eq!(apply_update(&m, &d, 0.0, (1400.0, 8000.0)).unwrap(), m);
        let up = apply_update(&m, &d, 5500.0, (1400.0, 8000.0)).unwrap();
        assert_eq!(up.velocities(), &[8000.0, 1500.0]);
        let other = VelocityModel::homogeneous(3, 1, 100.0, 100.0, 0.0, 0.0, 3500.0).unwrap();
        assert!(matches!(apply_update(&other, &d, 1.0, (1400.0, 8000.0)), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn predictor_linearity_and_single_cell() {
        let geom = AcquisitionGeometry::fixed_spread(
            vec![Point::new(100.0, 10.0), Point::new(700.0, 10.0)],
            vec![Point::new(50.0, 10.0), Point::new(400.0, 10.0), Point::new(900.0, 10.0)],
        )
        .unwrap();
        let grid = VelocityModel::homogeneous(5, 4, 200.0, 200.0, 0.0, 0.0, 3000.0).unwrap();
        let mut dir = vec![0.0; 20];
        dir[7] = 0.8;
        let d = GradientField::from_direction(grid.grid(), None, dir, None);
        let src = vec![vec![2.0, 3.0]];
        let p = BornPredictor::new(&geom, 3000.0, &src, &grid, &d, &[4.0], &[0, 2]).unwrap();
        let base = born_predict_field(&p, 0.0);
        assert_eq!(base.values(), p.base().values());
        let a = born_predict_field(&p, 5.0);
        let b = born_predict_field(&p, 10.0);
        for ((x, y), z) in a.values().iter().zip(b.values()).zip(base.values()) {
            assert!(((y - z) - 2.0 * (x - z)).abs() <= 1e-12 * (y - z).abs() + 4.0 * f64::EPSILON * z.abs());
        }
        let cell = grid.cell_center(2, 1);
        for (i, f) in [2.0, 3.0].iter().enumerate() {
            for (j, &r) in geom.receivers(i).iter().enumerate() {
                for (jn, n) in [0u32, 2].iter().enumerate() {
                    let k = born_kernel_s_derivative(*f, geom.shot(i), cell, r, 3000.0, 4.0, *n).unwrap();
                    let inc = p.increment().get(i, j, 0, jn);
                    assert!((inc - 0.8 * k).abs() <= 1e-12 * (0.8 * k).abs(), "{inc} {k}");
                }
            }
        }
    }

    #[test]
    fn default_config_echo() {
        let c = PipelineConfig::default();
        assert_eq!(c.background_velocity, 3500.0);
        assert_eq!(c.gradient_spacing, 200.0);
        assert_eq!(c.output_spacing, 25.0);
        assert_eq!(c.shot_decimation, 4);
        assert_eq!(c.damping_constants.len(), 11);
        assert_eq!(c.gain_powers, vec![0, 1, 2, 3, 4]);
        assert!(c.validate().is_ok());
    }
}
