//! Model grid and acquisition geometry.
//!
//! Coordinates live in the (x, z) plane with the free surface at z = 0 and z
//! positive downward. Velocities sit at cell centers, stored row-major by
//! depth then x (`index = iz * nx + ix`).

use crate::error::{Error, Result};

/// A point in the model plane, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub z: f64,
}

impl Point {
    pub const fn new(x: f64, z: f64) -> Self {
        Point { x, z }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.z - other.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.z.is_finite()
    }
}

/// Image of `p` across the free surface.
pub fn mirror_point(p: Point) -> Point {
    Point::new(p.x, -p.z)
}

/// Shape and placement of a uniform cell grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub dz: f64,
    pub origin_x: f64,
    pub origin_z: f64,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, ix: usize, iz: usize) -> Point {
        Point::new(
            self.origin_x + (ix as f64 + 0.5) * self.dx,
            self.origin_z + (iz as f64 + 0.5) * self.dz,
        )
    }

    pub fn cell_centers(&self) -> Vec<Point> {
        (0..self.nz)
            .flat_map(|iz| (0..self.nx).map(move |ix| (ix, iz)))
            .map(|(ix, iz)| self.cell_center(ix, iz))
            .collect()
    }
}

/// Uniform 2D grid of cell-center velocities (m/s).
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    nx: usize,
    nz: usize,
    dx: f64,
    dz: f64,
    origin_x: f64,
    origin_z: f64,
    velocities: Vec<f64>,
    water_mask: Option<Vec<bool>>,
}

impl VelocityModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        nx: usize,
        nz: usize,
        dx: f64,
        dz: f64,
        origin_x: f64,
        origin_z: f64,
        velocities: Vec<f64>,
        water_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if nx == 0 || nz == 0 {
            return Err(Error::Invalid(format!("grid must have at least one cell, got {nx}x{nz}")));
        }
        if !(dx > 0.0 && dz > 0.0 && dx.is_finite() && dz.is_finite()) {
            return Err(Error::Invalid(format!("cell spacing must be positive, got dx={dx}, dz={dz}")));
        }
        if !(origin_x.is_finite() && origin_z.is_finite()) {
            return Err(Error::Invalid("grid origin must be finite".into()));
        }
        if velocities.len() != nx * nz {
            return Err(Error::Invalid(format!(
                "expected {} velocities, got {}",
                nx * nz,
                velocities.len()
            )));
        }
        if let Some(k) = velocities.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Invalid(format!(
                "velocity at cell {k} is {} (must be finite and positive)",
                velocities[k]
            )));
        }
        if let Some(mask) = &water_mask {
            if mask.len() != nx * nz {
                return Err(Error::Invalid(format!(
                    "water mask has {} entries, grid has {}",
                    mask.len(),
                    nx * nz
                )));
            }
        }
        Ok(VelocityModel {
            nx,
            nz,
            dx,
            dz,
            origin_x,
            origin_z,
            velocities,
            water_mask,
        })
    }

    /// Constant-velocity model without a water mask.
    pub fn homogeneous(
        nx: usize,
        nz: usize,
        dx: f64,
        dz: f64,
        origin_x: f64,
        origin_z: f64,
        velocity: f64,
    ) -> Result<Self> {
        Self::new(nx, nz, dx, dz, origin_x, origin_z, vec![velocity; nx * nz], None)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nz(&self) -> usize {
        self.nz
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn dz(&self) -> f64 {
        self.dz
    }
    pub fn origin_x(&self) -> f64 {
        self.origin_x
    }
    pub fn origin_z(&self) -> f64 {
        self.origin_z
    }
    pub fn len(&self) -> usize {
        self.nx * self.nz
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }
    pub fn water_mask(&self) -> Option<&[bool]> {
        self.water_mask.as_deref()
    }

    pub fn is_masked(&self, k: usize) -> bool {
        self.water_mask.as_ref().is_some_and(|m| m[k])
    }

    pub fn index(&self, ix: usize, iz: usize) -> usize {
        iz * self.nx + ix
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            nx: self.nx,
            nz: self.nz,
            dx: self.dx,
            dz: self.dz,
            origin_x: self.origin_x,
            origin_z: self.origin_z,
        }
    }

    pub fn cell_center(&self, ix: usize, iz: usize) -> Point {
        self.grid().cell_center(ix, iz)
    }

    /// Centers of all cells in storage order.
    pub fn cell_centers(&self) -> Vec<Point> {
        self.grid().cell_centers()
    }

    /// Index of the cell containing `p`, if any.
    pub fn cell_containing(&self, p: Point) -> Option<usize> {
        let fx = (p.x - self.origin_x) / self.dx;
        let fz = (p.z - self.origin_z) / self.dz;
        if fx < 0.0 || fz < 0.0 {
            return None;
        }
        let (ix, iz) = (fx.floor() as usize, fz.floor() as usize);
        (ix < self.nx && iz < self.nz).then(|| self.index(ix, iz))
    }

    /// Same grid, new values. Validation is repeated.
    pub fn with_velocities(&self, velocities: Vec<f64>) -> Result<Self> {
        Self::new(
            self.nx,
            self.nz,
            self.dx,
            self.dz,
            self.origin_x,
            self.origin_z,
            velocities,
            self.water_mask.clone(),
        )
    }

    pub fn with_mask(&self, water_mask: Option<Vec<bool>>) -> Result<Self> {
        Self::new(
            self.nx,
            self.nz,
            self.dx,
            self.dz,
            self.origin_x,
            self.origin_z,
            self.velocities.clone(),
            water_mask,
        )
    }

    pub fn same_grid(&self, other_nx: usize, other_nz: usize) -> bool {
        self.nx == other_nx && self.nz == other_nz
    }
}

/// Source and receiver positions for every shot.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionGeometry {
    shots: Vec<Point>,
    receivers: Vec<Vec<Point>>,
}

impl AcquisitionGeometry {
    pub fn new(shots: Vec<Point>, receivers: Vec<Vec<Point>>) -> Result<Self> {
        if shots.len() != receivers.len() {
            return Err(Error::Invalid(format!(
                "{} shots but {} receiver lists",
                shots.len(),
                receivers.len()
            )));
        }
        for (i, (src, rcvs)) in shots.iter().zip(&receivers).enumerate() {
            if !src.is_finite() || src.z <= 0.0 {
                return Err(Error::Invalid(format!(
                    "shot {i} at ({}, {}) must be finite and below the free surface",
                    src.x, src.z
                )));
            }
            if rcvs.is_empty() {
                return Err(Error::Invalid(format!("shot {i} has no receivers")));
            }
            if let Some(j) = rcvs.iter().position(|r| !r.is_finite() || r.z <= 0.0) {
                return Err(Error::Invalid(format!(
                    "shot {i} receiver {j} at ({}, {}) must be finite and below the free surface",
                    rcvs[j].x, rcvs[j].z
                )));
            }
        }
        Ok(AcquisitionGeometry { shots, receivers })
    }

    /// Every shot records the same receiver spread.
    pub fn fixed_spread(shots: Vec<Point>, receivers: Vec<Point>) -> Result<Self> {
        let lists = vec![receivers; shots.len()];
        Self::new(shots, lists)
    }

    pub fn shot_count(&self) -> usize {
        self.shots.len()
    }
    pub fn shots(&self) -> &[Point] {
        &self.shots
    }
    pub fn shot(&self, i: usize) -> Point {
        self.shots[i]
    }
    pub fn receivers(&self, i: usize) -> &[Point] {
        &self.receivers[i]
    }
    pub fn receiver_count(&self, i: usize) -> usize {
        self.receivers[i].len()
    }
    pub fn total_receivers(&self) -> usize {
        self.receivers.iter().map(Vec::len).sum()
    }

    /// Keep every `k`-th shot starting with the first.
    pub fn decimate(&self, k: usize) -> Self {
        let k = k.max(1);
        AcquisitionGeometry {
            shots: self.shots.iter().step_by(k).copied().collect(),
            receivers: self.receivers.iter().step_by(k).cloned().collect(),
        }
    }

    pub fn max_offset(&self) -> f64 {
        self.shots
            .iter()
            .zip(&self.receivers)
            .flat_map(|(s, rs)| rs.iter().map(move |r| (r.x - s.x).abs()))
            .fold(0.0, f64::max)
    }

    /// Horizontal extent of all sources and receivers.
    pub fn x_range(&self) -> (f64, f64) {
        self.shots
            .iter()
            .chain(self.receivers.iter().flatten())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.x), hi.max(p.x))
            })
    }
}

/// Resample onto a grid of spacing `new_dx` × `new_dz` covering the same
/// extent. Values are bilinear in the input cell centers and clamped to the
/// edge values outside their hull. The water mask, if any, is carried over by
/// nearest input cell.
pub fn bilinear_resample(model: &VelocityModel, new_dx: f64, new_dz: f64) -> Result<VelocityModel> {
    if !(new_dx > 0.0 && new_dz > 0.0 && new_dx.is_finite() && new_dz.is_finite()) {
        return Err(Error::Invalid(format!(
            "resample spacing must be positive, got {new_dx} x {new_dz}"
        )));
    }
    let width = model.nx as f64 * model.dx;
    let depth = model.nz as f64 * model.dz;
    let nx = ((width / new_dx).round() as usize).max(1);
    let nz = ((depth / new_dz).round() as usize).max(1);
    let rx = new_dx / model.dx;
    let rz = new_dz / model.dz;

    // Fractional input-center index for output cell i: clamped, then split
    // into a base index and weight.
    let axis = |i: usize, ratio: f64, n_in: usize| -> (usize, usize, f64) {
        let u = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = (u.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, u - i0 as f64)
    };
    let xs: Vec<_> = (0..nx).map(|i| axis(i, rx, model.nx)).collect();
    let zs: Vec<_> = (0..nz).map(|i| axis(i, rz, model.nz)).collect();

    let v = &model.velocities;
    let mut out = Vec::with_capacity(nx * nz);
    for &(z0, z1, wz) in &zs {
        for &(x0, x1, wx) in &xs {
            let top = (1.0 - wx) * v[z0 * model.nx + x0] + wx * v[z0 * model.nx + x1];
            let bottom = (1.0 - wx) * v[z1 * model.nx + x0] + wx * v[z1 * model.nx + x1];
            out.push((1.0 - wz) * top + wz * bottom);
        }
    }

    let mask = model.water_mask.as_ref().map(|m| {
        let mut fine = Vec::with_capacity(nx * nz);
        for iz in 0..nz {
            let zc = (iz as f64 + 0.5) * new_dz;
            let kz = ((zc / model.dz) as usize).min(model.nz - 1);
            for ix in 0..nx {
                let xc = (ix as f64 + 0.5) * new_dx;
                let kx = ((xc / model.dx) as usize).min(model.nx - 1);
                fine.push(m[kz * model.nx + kx]);
            }
        }
        fine
    });

    VelocityModel::new(nx, nz, new_dx, new_dz, model.origin_x, model.origin_z, out, mask)
}

/// Mask every cell whose center lies strictly above its column's seafloor.
pub fn water_mask_from_bathymetry(model: &VelocityModel, seafloor_depth: &[f64]) -> Result<VelocityModel> {
    if seafloor_depth.len() != model.nx {
        return Err(Error::Invalid(format!(
            "bathymetry has {} columns, model has {}",
            seafloor_depth.len(),
            model.nx
        )));
    }
    if let Some(d) = seafloor_depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::Invalid(format!("seafloor depth {d} must be finite and non-negative")));
    }
    let mut mask = Vec::with_capacity(model.len());
    for iz in 0..model.nz {
        for (ix, floor) in seafloor_depth.iter().enumerate() {
            mask.push(model.cell_center(ix, iz).z < *floor);
        }
    }
    model.with_mask(Some(mask))
}
