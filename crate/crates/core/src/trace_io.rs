//! Survey, grid and diagnostic file formats.
//!
//! SRV and GRD are little-endian binary formats; CSV and PGM are exports for
//! inspection. PGM samples are big-endian as the format requires.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::LaplaceField;
use crate::geometry::{AcquisitionGeometry, Point, VelocityModel};

const SRV_MAGIC: &[u8; 4] = b"LSRV";
const GRD_MAGIC: &[u8; 4] = b"LGRD";
const VERSION: u32 = 1;

/// Traces recorded from one shot, receiver-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotGather {
    shot_index: usize,
    nt: usize,
    dt: f64,
    samples: Vec<f32>,
}

impl ShotGather {
    pub fn new(shot_index: usize, nt: usize, dt: f64, samples: Vec<f32>) -> Result<Self> {
        if nt == 0 {
            return Err(Error::Invalid("gather needs at least one sample per trace".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Invalid(format!("sample interval {dt} must be positive")));
        }
        if samples.is_empty() || samples.len() % nt != 0 {
            return Err(Error::Invalid(format!(
                "{} samples is not a whole number of {nt}-sample traces",
                samples.len()
            )));
        }
        if let Some(k) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample {
                shot: shot_index,
                receiver: k / nt,
                sample: k % nt,
            });
        }
        Ok(ShotGather {
            shot_index,
            nt,
            dt,
            samples,
        })
    }

    pub fn shot_index(&self) -> usize {
        self.shot_index
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn trace_count(&self) -> usize {
        self.samples.len() / self.nt
    }
    pub fn trace(&self, receiver: usize) -> &[f32] {
        &self.samples[receiver * self.nt..(receiver + 1) * self.nt]
    }
    pub fn samples(&self) -> &[f32] {
        &self.samples
    }
    pub fn traces(&self) -> std::slice::ChunksExact<'_, f32> {
        self.samples.chunks_exact(self.nt)
    }
}

/// Time-domain survey: geometry plus one gather per shot.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    geometry: AcquisitionGeometry,
    gathers: Vec<ShotGather>,
    description: String,
}

impl SurveyDataset {
    pub fn new(geometry: AcquisitionGeometry, gathers: Vec<ShotGather>, description: impl Into<String>) -> Result<Self> {
        if geometry.shot_count() != gathers.len() {
            return Err(Error::Invalid(format!(
                "geometry has {} shots, {} gathers supplied",
                geometry.shot_count(),
                gathers.len()
            )));
        }
        if gathers.is_empty() {
            return Err(Error::Invalid("survey has no shots".into()));
        }
        let (nt, dt) = (gathers[0].nt, gathers[0].dt);
        for (i, g) in gathers.iter().enumerate() {
            if g.nt != nt || g.dt.to_bits() != dt.to_bits() {
                return Err(Error::Invalid(format!(
                    "gather {i} has nt={}, dt={} but survey uses nt={nt}, dt={dt}",
                    g.nt, g.dt
                )));
            }
            if g.trace_count() != geometry.receiver_count(i) {
                return Err(Error::Invalid(format!(
                    "gather {i} has {} traces for {} receivers",
                    g.trace_count(),
                    geometry.receiver_count(i)
                )));
            }
        }
        Ok(SurveyDataset {
            geometry,
            gathers,
            description: description.into(),
        })
    }

    pub fn geometry(&self) -> &AcquisitionGeometry {
        &self.geometry
    }
    pub fn gathers(&self) -> &[ShotGather] {
        &self.gathers
    }
    pub fn description(&self) -> &str {
        &self.description
    }
    pub fn nt(&self) -> usize {
        self.gathers[0].nt
    }
    pub fn dt(&self) -> f64 {
        self.gathers[0].dt
    }
    /// Recording length T = (nt - 1) dt.
    pub fn record_length(&self) -> f64 {
        (self.nt() - 1) as f64 * self.dt()
    }

    /// Keep every `k`-th shot starting with the first.
    pub fn decimate(&self, k: usize) -> SurveyDataset {
        let k = k.max(1);
        SurveyDataset {
            geometry: self.geometry.decimate(k),
            gathers: self.gathers.iter().step_by(k).cloned().collect(),
            description: self.description.clone(),
        }
    }
}

pub fn write_survey(dataset: &SurveyDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_survey(dataset, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn encode_survey(ds: &SurveyDataset, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(SRV_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.gathers.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.nt() as u32).to_le_bytes())?;
    w.write_all(&ds.dt().to_le_bytes())?;
    w.write_all(&(ds.description.len() as u32).to_le_bytes())?;
    w.write_all(ds.description.as_bytes())?;
    for (i, gather) in ds.gathers.iter().enumerate() {
        let src = ds.geometry.shot(i);
        w.write_all(&src.x.to_le_bytes())?;
        w.write_all(&src.z.to_le_bytes())?;
        let receivers = ds.geometry.receivers(i);
        w.write_all(&(receivers.len() as u32).to_le_bytes())?;
        for r in receivers {
            w.write_all(&r.x.to_le_bytes())?;
            w.write_all(&r.z.to_le_bytes())?;
        }
        for v in &gather.samples {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_survey(path: impl AsRef<Path>) -> Result<SurveyDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file), path);
    r.magic(SRV_MAGIC, "SRV")?;
    r.version()?;
    let shot_count = r.u32()? as usize;
    let nt = r.u32()? as usize;
    let dt = r.f64()?;
    let desc_len = r.u32()? as usize;
    let description = String::from_utf8(r.bytes(desc_len)?)
        .map_err(|_| Error::Corrupt("description is not valid UTF-8".into()))?;
    if nt == 0 {
        return Err(Error::Corrupt("nt is zero".into()));
    }
    let mut shots = Vec::with_capacity(shot_count.min(1 << 16));
    let mut receivers = Vec::with_capacity(shot_count.min(1 << 16));
    let mut gathers = Vec::with_capacity(shot_count.min(1 << 16));
    for i in 0..shot_count {
        shots.push(Point::new(r.f64()?, r.f64()?));
        let count = r.u32()? as usize;
        let mut rcv = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            rcv.push(Point::new(r.f64()?, r.f64()?));
        }
        let raw = r.bytes(count * nt * 4)?;
        let samples: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        gathers.push(ShotGather::new(i, nt, dt, samples).map_err(|e| match e {
            Error::Invalid(m) => Error::Corrupt(m),
            other => other,
        })?);
        receivers.push(rcv);
    }
    r.finish()?;
    let geometry = AcquisitionGeometry::new(shots, receivers).map_err(|e| Error::Corrupt(e.to_string()))?;
    SurveyDataset::new(geometry, gathers, description).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn write_grid(model: &VelocityModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_grid(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn encode_grid(m: &VelocityModel, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(GRD_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.nx() as u32).to_le_bytes())?;
    w.write_all(&(m.nz() as u32).to_le_bytes())?;
    for v in [m.dx(), m.dz(), m.origin_x(), m.origin_z()] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[m.water_mask().is_some() as u8])?;
    for v in m.velocities() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(mask) = m.water_mask() {
        let bytes: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<VelocityModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file), path);
    r.magic(GRD_MAGIC, "GRD")?;
    r.version()?;
    let nx = r.u32()? as usize;
    let nz = r.u32()? as usize;
    let (dx, dz, ox, oz) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let has_mask = match r.bytes(1)?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::Corrupt(format!("mask flag byte {b}"))),
    };
    let raw = r.bytes(nx * nz * 8)?;
    let values = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mask = if has_mask {
        let raw = r.bytes(nx * nz)?;
        if let Some(b) = raw.iter().find(|b| **b > 1) {
            return Err(Error::Corrupt(format!("mask byte {b}")));
        }
        Some(raw.into_iter().map(|b| b == 1).collect())
    } else {
        None
    };
    r.finish()?;
    VelocityModel::new(nx, nz, dx, dz, ox, oz, values, mask).map_err(|e| Error::Corrupt(e.to_string()))
}

struct Reader<'p, R> {
    inner: R,
    path: &'p Path,
}

impl<'p, R: Read> Reader<'p, R> {
    fn new(inner: R, path: &'p Path) -> Self {
        Reader { inner, path }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("{} is truncated", self.path.display())),
            _ => Error::io(self.path, e),
        })
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        // Read in bounded chunks so a corrupt length cannot force a huge allocation up front.
        let mut out = Vec::with_capacity(n.min(1 << 20));
        let mut chunk = [0u8; 8192];
        let mut left = n;
        while left > 0 {
            let k = left.min(chunk.len());
            self.fill(&mut chunk[..k])?;
            out.extend_from_slice(&chunk[..k]);
            left -= k;
        }
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn magic(&mut self, want: &[u8; 4], kind: &str) -> Result<()> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format(format!("{} is not a {kind} file", self.path.display())),
            _ => Error::io(self.path, e),
        })?;
        if &b != want {
            return Err(Error::Format(format!(
                "{} is not a {kind} file (magic {:?})",
                self.path.display(),
                String::from_utf8_lossy(&b)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(Error::Format(format!("unsupported version {v}"))),
        }
    }

    fn finish(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Corrupt(format!("{} has trailing bytes", self.path.display()))),
            Err(e) => Err(Error::io(self.path, e)),
        }
    }
}

/// Anything exportable as a 2D image: `nz` rows of `nx` values.
pub trait GridValues {
    fn grid_shape(&self) -> (usize, usize);
    fn grid_values(&self) -> &[f64];
}

impl GridValues for VelocityModel {
    fn grid_shape(&self) -> (usize, usize) {
        (self.nx(), self.nz())
    }
    fn grid_values(&self) -> &[f64] {
        self.velocities()
    }
}

/// Borrowed values with an explicit shape.
#[derive(Debug, Clone, Copy)]
pub struct GridView<'a> {
    pub nx: usize,
    pub nz: usize,
    pub values: &'a [f64],
}

impl GridValues for GridView<'_> {
    fn grid_shape(&self) -> (usize, usize) {
        (self.nx, self.nz)
    }
    fn grid_values(&self) -> &[f64] {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Pgm,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "pgm" => Ok(ExportFormat::Pgm),
            other => Err(Error::Config(format!("unknown export format `{other}` (expected csv or pgm)"))),
        }
    }
}

pub fn export_grid(grid: &dyn GridValues, path: impl AsRef<Path>, format: ExportFormat) -> Result<()> {
    let (nx, nz) = grid.grid_shape();
    let values = grid.grid_values();
    if nx * nz != values.len() || values.is_empty() {
        return Err(Error::Invalid(format!(
            "grid shape {nx}x{nz} does not match {} values",
            values.len()
        )));
    }
    let bytes = match format {
        ExportFormat::Csv => grid_csv(nx, values).into_bytes(),
        ExportFormat::Pgm => grid_pgm(nx, nz, values),
    };
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Comma-separated rows, shallowest first. Floats use the shortest text that
/// parses back to the same value.
pub fn grid_csv(nx: usize, values: &[f64]) -> String {
    let mut out = String::new();
    for row in values.chunks(nx) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Affine map of [min, max] onto [0, 65535], rounding half up; a constant
/// grid maps to mid-gray 32768.
pub fn pgm_levels(values: &[f64]) -> Vec<u16> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![32768; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 65535.0 + 0.5).floor().clamp(0.0, 65535.0) as u16)
        .collect()
}

pub fn grid_pgm(nx: usize, nz: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{nx} {nz}\n65535\n").into_bytes();
    for level in pgm_levels(values) {
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

/// One line per (shot, receiver, s, n) with a header row.
pub fn write_field_csv(field: &LaplaceField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "shot,receiver,s,n,value")?;
        for shot in 0..field.shot_count() {
            for rcv in 0..field.receiver_count(shot) {
                for (is, s) in field.damping_constants().iter().enumerate() {
                    for (jn, n) in field.gain_powers().iter().enumerate() {
                        writeln!(w, "{shot},{rcv},{s},{n},{}", field.get(shot, rcv, is, jn))?;
                    }
                }
            }
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}
