//! Source estimation, the gained logarithmic objective, its gradient with
//! respect to cell velocities, and diagonal pseudo-Hessian preconditioning.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::LaplaceField;
use crate::geometry::{AcquisitionGeometry, GridSpec, Point, VelocityModel};
use crate::greens::{field_s_derivative, greens, ray_pair};
use crate::laplace::DEFAULT_AMPLITUDE_FLOOR;
use crate::sensitivity::{born_kernel_multi, PathTerms};
use crate::trace_io::{GridValues, GridView};

/// Guards on the logarithm of the residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualPolicy {
    /// Relative to the largest observed magnitude at the same (s, n).
    pub amplitude_floor: f64,
}

impl Default for ResidualPolicy {
    fn default() -> Self {
        ResidualPolicy {
            amplitude_floor: DEFAULT_AMPLITUDE_FLOOR,
        }
    }
}

impl ResidualPolicy {
    /// Absolute floor for a set of values whose largest magnitude is `max_abs`.
    pub fn floor(&self, max_abs: f64) -> f64 {
        self.amplitude_floor * max_abs
    }
}

/// Pairs left out of a sum, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipCounters {
    pub sign_mismatch: u64,
    pub below_floor: u64,
}

impl SkipCounters {
    pub fn total(&self) -> u64 {
        self.sign_mismatch + self.below_floor
    }

    pub fn add(&mut self, other: SkipCounters) {
        self.sign_mismatch += other.sign_mismatch;
        self.below_floor += other.below_floor;
    }
}

/// ln(|u|/|d|), computed through ln_1p when the magnitudes are close.
pub fn log_ratio(u_abs: f64, d_abs: f64) -> f64 {
    let q = u_abs / d_abs;
    if (0.5..=2.0).contains(&q) {
        ((u_abs - d_abs) / d_abs).ln_1p()
    } else {
        q.ln()
    }
}

/// ln(|u|/|d|) when both magnitudes exceed `floor` and the signs agree;
/// otherwise `None` with the matching counter incremented.
pub fn log_residual(u: f64, d: f64, floor: f64, skips: &mut SkipCounters) -> Option<f64> {
    if !(u.abs() > floor && d.abs() > floor) {
        skips.below_floor += 1;
        return None;
    }
    if (u > 0.0) != (d > 0.0) {
        skips.sign_mismatch += 1;
        return None;
    }
    Some(log_ratio(u.abs(), d.abs()))
}

fn axis_positions(field: &LaplaceField, s: f64, n: u32) -> Result<(usize, usize)> {
    let is = field
        .s_index(s)
        .ok_or_else(|| Error::Invalid(format!("field has no damping constant {s}")))?;
    let jn = field
        .n_index(n)
        .ok_or_else(|| Error::Invalid(format!("field has no gain power {n}")))?;
    Ok((is, jn))
}

fn check_layout(field: &LaplaceField, geometry: &AcquisitionGeometry) -> Result<()> {
    let counts: Vec<usize> = (0..geometry.shot_count()).map(|i| geometry.receiver_count(i)).collect();
    if field.receiver_counts() != counts {
        return Err(Error::Invalid("field layout does not match acquisition geometry".into()));
    }
    Ok(())
}

/// Per-shot source amplitude: geometric mean of d/G over admissible receivers,
/// from undifferentiated (n = 0) data.
pub fn estimate_source(
    observed: &LaplaceField,
    geometry: &AcquisitionGeometry,
    c: f64,
    s: f64,
    policy: &ResidualPolicy,
) -> Result<Vec<f64>> {
    check_layout(observed, geometry)?;
    let (is, jn) = axis_positions(observed, s, 0)?;
    let d_floor = policy.floor(observed.max_abs(is, jn));
    let mut g = Vec::with_capacity(geometry.shot_count());
    let mut g_max: f64 = 0.0;
    for i in 0..geometry.shot_count() {
        let row = geometry
            .receivers(i)
            .iter()
            .map(|&r| greens(geometry.shot(i), r, c, s))
            .collect::<Result<Vec<f64>>>()?;
        g_max = row.iter().fold(g_max, |m, v| m.max(v.abs()));
        g.push(row);
    }
    let g_floor = policy.floor(g_max);
    let mut out = Vec::with_capacity(g.len());
    for (i, row) in g.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (j, &gij) in row.iter().enumerate() {
            let d = observed.get(i, j, is, jn);
            if d.abs() > d_floor && gij.abs() > g_floor && (d > 0.0) == (gij > 0.0) {
                sum += (d / gij).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::SourceEstimation { shot: i, s });
        }
        out.push((sum / count as f64).exp());
    }
    Ok(out)
}

/// Value of ½ Σ residual² and what was left out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub pairs: u64,
    pub skips: SkipCounters,
}

/// Gained log objective at one (s, n).
pub fn objective(
    modeled: &LaplaceField,
    observed: &LaplaceField,
    s: f64,
    n: u32,
    policy: &ResidualPolicy,
) -> Result<ObjectiveValue> {
    if modeled.receiver_counts() != observed.receiver_counts() {
        return Err(Error::Invalid("modeled and observed fields cover different traces".into()));
    }
    let (ms, mn) = axis_positions(modeled, s, n)?;
    let (os, on) = axis_positions(observed, s, n)?;
    let floor = policy.floor(observed.max_abs(os, on));
    let mut skips = SkipCounters::default();
    let mut value = 0.0;
    let mut pairs = 0;
    for i in 0..observed.shot_count() {
        for j in 0..observed.receiver_count(i) {
            if let Some(r) = log_residual(modeled.get(i, j, ms, mn), observed.get(i, j, os, on), floor, &mut skips) {
                value += 0.5 * r * r;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::DegenerateObjective { s, n });
    }
    Ok(ObjectiveValue { value, pairs, skips })
}

/// Per-cell gradient, pseudo-Hessian diagonal and update direction for one
/// (s, n), or for a combination of them.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    grid: GridSpec,
    mask: Option<Vec<bool>>,
    label: Option<(f64, u32)>,
    gradient: Vec<f64>,
    hessian: Vec<f64>,
    direction: Vec<f64>,
    skips: SkipCounters,
}

impl GradientField {
    pub fn new(model: &VelocityModel, gradient: Vec<f64>, hessian: Vec<f64>, label: Option<(f64, u32)>) -> Result<Self> {
        let len = model.len();
        if gradient.len() != len || hessian.len() != len {
            return Err(Error::GridMismatch(format!(
                "{} gradient and {} Hessian values for {len} cells",
                gradient.len(),
                hessian.len()
            )));
        }
        if gradient.iter().chain(&hessian).any(|v| !v.is_finite()) {
            return Err(Error::Domain("gradient or Hessian value is not finite".into()));
        }
        if hessian.iter().any(|v| *v < 0.0) {
            return Err(Error::Domain("pseudo-Hessian diagonal must be non-negative".into()));
        }
        Ok(GradientField {
            grid: model.grid(),
            mask: model.water_mask().map(<[bool]>::to_vec),
            label,
            gradient,
            hessian,
            direction: vec![0.0; len],
            skips: SkipCounters::default(),
        })
    }

    /// A field holding only a direction (e.g. a weighted combination).
    pub fn from_direction(grid: GridSpec, mask: Option<Vec<bool>>, direction: Vec<f64>, label: Option<(f64, u32)>) -> Self {
        let len = grid.len();
        GradientField {
            grid,
            mask,
            label,
            gradient: vec![0.0; len],
            hessian: vec![0.0; len],
            direction,
            skips: SkipCounters::default(),
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }
    pub fn is_masked(&self, k: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[k])
    }
    /// (s, n) this field was computed for, if any.
    pub fn label(&self) -> Option<(f64, u32)> {
        self.label
    }
    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }
    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }
    pub fn direction(&self) -> &[f64] {
        &self.direction
    }
    pub fn skips(&self) -> SkipCounters {
        self.skips
    }
    pub fn max_abs_direction(&self) -> f64 {
        self.direction.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
    pub fn gradient_view(&self) -> GridView<'_> {
        self.view(&self.gradient)
    }
    pub fn hessian_view(&self) -> GridView<'_> {
        self.view(&self.hessian)
    }
    pub fn direction_view(&self) -> GridView<'_> {
        self.view(&self.direction)
    }
    fn view<'a>(&self, values: &'a [f64]) -> GridView<'a> {
        GridView {
            nx: self.grid.nx,
            nz: self.grid.nz,
            values,
        }
    }
}

impl GridValues for GradientField {
    fn grid_shape(&self) -> (usize, usize) {
        (self.grid.nx, self.grid.nz)
    }
    fn grid_values(&self) -> &[f64] {
        &self.direction
    }
}

/// Everything needed to evaluate kernels and background fields for one
/// damping constant.
pub(crate) struct KernelContext<'a> {
    pub geometry: &'a AcquisitionGeometry,
    pub c: f64,
    pub f_m: &'a [f64],
    pub cells: Vec<Point>,
    pub s: f64,
    pub gain_powers: &'a [u32],
}

impl KernelContext<'_> {
    /// Background s-derivatives, indexed [shot][receiver][n].
    pub fn background(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        (0..self.geometry.shot_count())
            .map(|i| {
                let src = self.geometry.shot(i);
                self.geometry
                    .receivers(i)
                    .iter()
                    .map(|&r| {
                        self.gain_powers
                            .iter()
                            .map(|&n| field_s_derivative(self.f_m[i], src, r, self.c, self.s, n))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Visit every (cell, receiver) pair of shot `i` with kernels for all gain
    /// powers: `visit(k, j, kernels)`.
    pub fn for_each_kernel(&self, i: usize, mut visit: impl FnMut(usize, usize, &[f64])) -> Result<()> {
        let src = self.geometry.shot(i);
        let receivers = self.geometry.receivers(i);
        let mut kernels = Vec::with_capacity(self.gain_powers.len());
        for (k, &cell) in self.cells.iter().enumerate() {
            let source_leg = ray_pair(src, cell, self.c)?;
            for (j, &r) in receivers.iter().enumerate() {
                let terms = PathTerms::from_legs(source_leg, ray_pair(cell, r, self.c)?);
                born_kernel_multi(&terms, self.f_m[i], self.c, self.s, self.gain_powers, &mut kernels);
                visit(k, j, &kernels);
            }
        }
        Ok(())
    }
}

struct ShotPartial {
    gradient: Vec<f64>,
    hessian: Vec<f64>,
}

/// Gradient and pseudo-Hessian for every gain power at one s.
///
/// With `observed = None` only the Hessian is accumulated. Per-shot partial
/// sums are combined in shot order, so the result does not depend on the
/// number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    observed: Option<&LaplaceField>,
    geometry: &AcquisitionGeometry,
    c: f64,
    f_m: &[f64],
    grid: &VelocityModel,
    s: f64,
    gain_powers: &[u32],
    policy: &ResidualPolicy,
) -> Result<Vec<GradientField>> {
    if f_m.len() != geometry.shot_count() {
        return Err(Error::Invalid(format!(
            "{} source amplitudes for {} shots",
            f_m.len(),
            geometry.shot_count()
        )));
    }
    let ctx = KernelContext {
        geometry,
        c,
        f_m,
        cells: grid.cell_centers(),
        s,
        gain_powers,
    };
    let nn = gain_powers.len();
    let background = ctx.background()?;

    let mut u_floor = vec![0.0; nn];
    for shot in &background {
        for trace in shot {
            for (q, v) in trace.iter().enumerate() {
                u_floor[q] = f64::max(u_floor[q], v.abs());
            }
        }
    }
    for v in &mut u_floor {
        *v = policy.floor(*v);
    }

    // Residuals per [shot][receiver][n]; None when the pair is not admissible.
    let mut residuals: Vec<Vec<Vec<Option<f64>>>> = Vec::new();
    let mut data_skips = vec![SkipCounters::default(); nn];
    if let Some(obs) = observed {
        check_layout(obs, geometry)?;
        let is = obs
            .s_index(s)
            .ok_or_else(|| Error::Invalid(format!("observed field has no damping constant {s}")))?;
        let mut d_floor = Vec::with_capacity(nn);
        let mut jns = Vec::with_capacity(nn);
        for &n in gain_powers {
            let jn = obs
                .n_index(n)
                .ok_or_else(|| Error::Invalid(format!("observed field has no gain power {n}")))?;
            d_floor.push(policy.floor(obs.max_abs(is, jn)));
            jns.push(jn);
        }
        for (i, shot) in background.iter().enumerate() {
            let mut rows = Vec::with_capacity(shot.len());
            for (j, trace) in shot.iter().enumerate() {
                let row = (0..nn)
                    .map(|q| {
                        let d = obs.get(i, j, is, jns[q]);
                        let floor = d_floor[q].max(u_floor[q]);
                        log_residual(trace[q], d, floor, &mut data_skips[q])
                    })
                    .collect();
                rows.push(row);
            }
            residuals.push(rows);
        }
    }

    let cells = ctx.cells.len();
    let partials = (0..geometry.shot_count())
        .into_par_iter()
        .map(|i| -> Result<ShotPartial> {
            let mut p = ShotPartial {
                gradient: vec![0.0; cells * nn],
                hessian: vec![0.0; cells * nn],
            };
            let u = &background[i];
            ctx.for_each_kernel(i, |k, j, kernels| {
                for q in 0..nn {
                    let uq = u[j][q];
                    if uq.abs() <= u_floor[q] {
                        continue;
                    }
                    let ratio = kernels[q] / uq;
                    p.hessian[k * nn + q] += ratio * ratio;
                    if let Some(Some(r)) = residuals.get(i).map(|rows| rows[j][q]) {
                        p.gradient[k * nn + q] += ratio * r;
                    }
                }
            })?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut gradient = vec![0.0; cells * nn];
    let mut hessian = vec![0.0; cells * nn];
    for p in &partials {
        for (a, b) in gradient.iter_mut().zip(&p.gradient) {
            *a += b;
        }
        for (a, b) in hessian.iter_mut().zip(&p.hessian) {
            *a += b;
        }
    }

    // Admissible pairs: data-admissible with observations, otherwise those
    // with a modeled value above the floor.
    let mut skips = vec![SkipCounters::default(); nn];
    let mut admissible = vec![0u64; nn];
    for q in 0..nn {
        if observed.is_some() {
            skips[q] = data_skips[q];
            admissible[q] = residuals.iter().flatten().filter(|row| row[q].is_some()).count() as u64;
        } else {
            for trace in background.iter().flatten() {
                if trace[q].abs() > u_floor[q] {
                    admissible[q] += 1;
                } else {
                    skips[q].below_floor += 1;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(nn);
    for (q, &n) in gain_powers.iter().enumerate() {
        if admissible[q] == 0 {
            return Err(Error::DegenerateObjective { s, n });
        }
        let g: Vec<f64> = (0..cells).map(|k| gradient[k * nn + q]).collect();
        let h: Vec<f64> = (0..cells).map(|k| hessian[k * nn + q]).collect();
        let mut field = GradientField::new(grid, g, h, Some((s, n)))?;
        field.skips = skips[q];
        out.push(field);
    }
    Ok(out)
}

/// ∂E(s,n)/∂m_k for every cell of `grid`, with the pseudo-Hessian alongside.
#[allow(clippy::too_many_arguments)]
pub fn gradient(
    observed: &LaplaceField,
    geometry: &AcquisitionGeometry,
    c: f64,
    f_m: &[f64],
    grid: &VelocityModel,
    s: f64,
    n: u32,
    policy: &ResidualPolicy,
) -> Result<GradientField> {
    Ok(assemble(Some(observed), geometry, c, f_m, grid, s, &[n], policy)?.remove(0))
}

/// Gauss–Newton diagonal Σ (kernel / modeled derivative)².
pub fn pseudo_hessian_diag(
    geometry: &AcquisitionGeometry,
    c: f64,
    f_m: &[f64],
    grid: &VelocityModel,
    s: f64,
    n: u32,
    policy: &ResidualPolicy,
) -> Result<Vec<f64>> {
    let field = assemble(None, geometry, c, f_m, grid, s, &[n], policy)?.remove(0);
    Ok(field.hessian)
}

/// direction_k = −g_k / (H_k + λ·max H)^p, zero on masked cells. The maximum
/// is taken over unmasked cells.
pub fn precondition(field: &GradientField, lambda_rel: f64, exponent: f64) -> Result<GradientField> {
    if !(lambda_rel > 0.0 && lambda_rel.is_finite()) {
        return Err(Error::Config(format!("lambda_rel = {lambda_rel} must be positive")));
    }
    if !(exponent > 0.0 && exponent.is_finite()) {
        return Err(Error::Config(format!("hessian_exponent = {exponent} must be positive")));
    }
    let h_max = field
        .hessian
        .iter()
        .enumerate()
        .filter(|(k, _)| !field.is_masked(*k))
        .fold(0.0f64, |m, (_, v)| m.max(*v));
    if h_max <= 0.0 {
        return Err(Error::ZeroHessian);
    }
    let damp = lambda_rel * h_max;
    let direction = field
        .gradient
        .iter()
        .zip(&field.hessian)
        .enumerate()
        .map(|(k, (g, h))| {
            if field.is_masked(k) {
                0.0
            } else if exponent == 1.0 {
                -g / (h + damp)
            } else {
                -g / (h + damp).powf(exponent)
            }
        })
        .collect();
    Ok(GradientField {
        direction,
        ..field.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Provenance;
    use crate::sensitivity::born_kernel_s_derivative;

    fn line_geometry(shots: usize, receivers: usize) -> AcquisitionGeometry {
        let src = (0..shots).map(|i| Point::new(250.0 + 500.0 * i as f64, 10.0)).collect();
        let rcv = (0..receivers).map(|j| Point::new(60.0 + 120.0 * j as f64, 10.0)).collect();
        AcquisitionGeometry::fixed_spread(src, rcv).unwrap()
    }

    fn background_field(geom: &AcquisitionGeometry, c: f64, f: f64, s: &[f64], n: &[u32]) -> LaplaceField {
        let counts: Vec<usize> = (0..geom.shot_count()).map(|i| geom.receiver_count(i)).collect();
        let mut field = LaplaceField::zeros(&counts, s.to_vec(), n.to_vec(), Provenance::ObservedDerivative).unwrap();
        for i in 0..geom.shot_count() {
            for (j, &r) in geom.receivers(i).iter().enumerate() {
                for (is, &sv) in s.iter().enumerate() {
                    for (jn, &nv) in n.iter().enumerate() {
                        field.set(i, j, is, jn, field_s_derivative(f, geom.shot(i), r, c, sv, nv).unwrap());
                    }
                }
            }
        }
        field
    }

    #[test]
    fn log_residual_cases() {
        let mut sk = SkipCounters::default();
        assert_eq!(log_residual(2.0, 2.0, 1e-30, &mut sk), Some(0.0));
        let e = std::f64::consts::E;
        assert!((log_residual(e * 3.0, 3.0, 1e-30, &mut sk).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(log_residual(-1.0, 2.0, 1e-30, &mut sk), None);
        assert_eq!(sk.sign_mismatch, 1);
        assert_eq!(log_residual(1e-40, 2.0, 1e-30, &mut sk), None);
        assert_eq!(sk.below_floor, 1);
    }

    #[test]
    fn source_estimates() {
        let geom = line_geometry(2, 6);
        let obs = background_field(&geom, 3000.0, 3.7, &[4.0], &[0]);
        let f = estimate_source(&obs, &geom, 3000.0, 4.0, &ResidualPolicy::default()).unwrap();
        assert!(f.iter().all(|v| ((v - 3.7) / 3.7).abs() < 1e-12));

        let two = AcquisitionGeometry::fixed_spread(vec![Point::new(0.0, 10.0)], vec![Point::new(100.0, 10.0), Point::new(300.0, 10.0)]).unwrap();
        let mut obs = background_field(&two, 2000.0, 1.0, &[3.0], &[0]);
        obs.set(0, 0, 0, 0, 2.0 * obs.get(0, 0, 0, 0));
        obs.set(0, 1, 0, 0, 8.0 * obs.get(0, 1, 0, 0));
        let f = estimate_source(&obs, &two, 2000.0, 3.0, &ResidualPolicy::default()).unwrap();
        assert!((f[0] - 4.0).abs() < 1e-12);

        let zero = LaplaceField::zeros(&[2], vec![3.0], vec![0], Provenance::Observed).unwrap();
        assert!(matches!(
            estimate_source(&zero, &two, 2000.0, 3.0, &ResidualPolicy::default()),
            Err(Error::SourceEstimation { shot: 0, .. })
        ));
    }

    #[test]
    fn objective_cases() {
        let geom = line_geometry(2, 4);
        let obs = background_field(&geom, 3000.0, 1.0, &[2.0, 5.0], &[0, 1]);
        let p = ResidualPolicy::default();
        assert_eq!(objective(&obs, &obs, 5.0, 1, &p).unwrap().value, 0.0);

        let one = LaplaceField::from_values(&[1], vec![2.0], vec![0], vec![1.0], Provenance::Observed).unwrap();
        let e = LaplaceField::from_values(&[1], vec![2.0], vec![0], vec![std::f64::consts::E], Provenance::Modeled).unwrap();
        assert!((objective(&e, &one, 2.0, 0, &p).unwrap().value - 0.5).abs() < 1e-15);

        let zero = LaplaceField::zeros(&[1], vec![2.0], vec![0], Provenance::Modeled).unwrap();
        assert!(matches!(objective(&zero, &one, 2.0, 0, &p), Err(Error::DegenerateObjective { .. })));
    }

    #[test]
    fn zero_residual_zero_gradient() {
        let geom = line_geometry(2, 5);
        let grid = VelocityModel::homogeneous(5, 4, 200.0, 200.0, 0.0, 0.0, 3000.0).unwrap();
        let obs = background_field(&geom, 3000.0, 2.0, &[3.0], &[0, 2]);
        let p = ResidualPolicy::default();
        for n in [0, 2] {
            let g = gradient(&obs, &geom, 3000.0, &[2.0, 2.0], &grid, 3.0, n, &p).unwrap();
            assert!(g.gradient().iter().all(|v| *v == 0.0));
            assert!(g.hessian().iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn single_term_hessian() {
        let geom = AcquisitionGeometry::fixed_spread(vec![Point::new(0.0, 10.0)], vec![Point::new(400.0, 10.0)]).unwrap();
        let grid = VelocityModel::homogeneous(1, 1, 200.0, 200.0, 100.0, 300.0, 3000.0).unwrap();
        let cell = grid.cell_center(0, 0);
        for n in 0..4 {
            let h = pseudo_hessian_diag(&geom, 3000.0, &[1.5], &grid, 4.0, n, &ResidualPolicy::default()).unwrap();
            let k = born_kernel_s_derivative(1.5, Point::new(0.0, 10.0), cell, Point::new(400.0, 10.0), 3000.0, 4.0, n).unwrap();
            let u = field_s_derivative(1.5, Point::new(0.0, 10.0), Point::new(400.0, 10.0), 3000.0, 4.0, n).unwrap();
            let want = (k / u) * (k / u);
            assert!(((h[0] - want) / want).abs() < 1e-14);
        }
    }

    #[test]
    fn hessian_decreases_with_depth() {
        let geom = line_geometry(3, 12);
        let grid = VelocityModel::homogeneous(1, 10, 200.0, 200.0, 700.0, 0.0, 3500.0).unwrap();
        let h = pseudo_hessian_diag(&geom, 3500.0, &[1.0; 3], &grid, 3.0, 0, &ResidualPolicy::default()).unwrap();
        assert!(h.iter().all(|v| *v >= 0.0));
        assert!(h[2] > h[8]);
    }

    fn simple_field(hessian: Vec<f64>, gradient: Vec<f64>, mask: Option<Vec<bool>>) -> GradientField {
        let n = hessian.len();
        let model = VelocityModel::new(1, n, 100.0, 100.0, 0.0, 0.0, vec![3000.0; n], mask).unwrap();
        GradientField::new(&model, gradient, hessian, None).unwrap()
    }

    #[test]
    fn preconditioning_cases() {
        let f = simple_field(vec![4.0; 3], vec![1.0, -2.0, 0.5], None);
        let d = precondition(&f, 1e-3, 1.0).unwrap();
        for (dir, g) in d.direction().iter().zip(f.gradient()) {
            assert!((dir + g / (4.0 * 1.001)).abs() < 1e-15);
        }
        let masked = simple_field(vec![4.0; 3], vec![1.0, -2.0, 0.5], Some(vec![true, false, false]));
        assert_eq!(precondition(&masked, 1e-3, 1.0).unwrap().direction()[0], 0.0);
        let zero = simple_field(vec![0.0; 3], vec![1.0; 3], None);
        assert!(matches!(precondition(&zero, 1e-3, 1.0), Err(Error::ZeroHessian)));

        // Shallow cell with large diagonal, deep cell with small diagonal.
        let two = simple_field(vec![1.0, 1e-3], vec![1.0, 1e-3], None);
        let a = precondition(&two, 1e-3, 1.0).unwrap();
        let b = precondition(&two, 2e-3, 1.0).unwrap();
        let change = |k: usize| ((a.direction()[k] - b.direction()[k]) / a.direction()[k]).abs();
        assert!(change(1) > change(0));
    }
}
