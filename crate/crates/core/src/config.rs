//! Text configuration: `key = value` lines under `[section]` headers, lists
//! comma-separated, `#` starts a comment. Keys match the field names of
//! [`PipelineConfig`], [`TransformSpec`](crate::laplace::TransformSpec) and
//! [`SynthConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionGeometry, Point};
use crate::pipeline::{Bathymetry, PipelineConfig};
use crate::synthetics::{Scatterer, TimeSynthOptions};

/// Parameters of a time-domain synthetic survey with a fixed receiver spread.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Half-space velocity; the pipeline background velocity if unset.
    pub velocity: Option<f64>,
    pub shot_start: f64,
    pub shot_spacing: f64,
    pub shot_count: usize,
    pub shot_depth: f64,
    pub receiver_start: f64,
    pub receiver_spacing: f64,
    pub receiver_count: usize,
    pub receiver_depth: f64,
    pub wavelet_width: f64,
    pub nt: usize,
    pub dt: f64,
    pub source_amplitude: f64,
    pub scatterer_x: Vec<f64>,
    pub scatterer_z: Vec<f64>,
    pub scatterer_delta_v: Vec<f64>,
    pub scatterer_volume: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub description: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            velocity: None,
            shot_start: 0.0,
            shot_spacing: 250.0,
            shot_count: 8,
            shot_depth: 10.0,
            receiver_start: 0.0,
            receiver_spacing: 100.0,
            receiver_count: 20,
            receiver_depth: 10.0,
            wavelet_width: 0.004,
            nt: 3001,
            dt: 0.004,
            source_amplitude: 1.0,
            scatterer_x: Vec::new(),
            scatterer_z: Vec::new(),
            scatterer_delta_v: Vec::new(),
            scatterer_volume: 1.0,
            noise_std: 0.0,
            seed: 0,
            description: "synthetic".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shot_count == 0 || self.receiver_count == 0 {
            return Err(Error::Config("shot_count and receiver_count must be at least 1".into()));
        }
        if self.nt < 2 {
            return Err(Error::Config("nt must be at least 2".into()));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("wavelet_width", self.wavelet_width),
            ("shot_depth", self.shot_depth),
            ("receiver_depth", self.receiver_depth),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if let Some(v) = self.velocity {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("velocity = {v} must be positive")));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        let k = self.scatterer_x.len();
        if self.scatterer_z.len() != k || self.scatterer_delta_v.len() != k {
            return Err(Error::Config(
                "scatterer_x, scatterer_z and scatterer_delta_v must have equal lengths".into(),
            ));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<AcquisitionGeometry> {
        let shots = (0..self.shot_count)
            .map(|i| Point::new(self.shot_start + i as f64 * self.shot_spacing, self.shot_depth))
            .collect();
        let receivers = (0..self.receiver_count)
            .map(|j| Point::new(self.receiver_start + j as f64 * self.receiver_spacing, self.receiver_depth))
            .collect();
        AcquisitionGeometry::fixed_spread(shots, receivers).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn options(&self) -> TimeSynthOptions {
        TimeSynthOptions {
            source_amplitude: self.source_amplitude,
            scatterers: self
                .scatterer_x
                .iter()
                .zip(&self.scatterer_z)
                .zip(&self.scatterer_delta_v)
                .map(|((&x, &z), &dv)| Scatterer::new(Point::new(x, z), dv))
                .collect(),
            scatterer_volume: self.scatterer_volume,
            noise_std: self.noise_std,
            seed: self.seed,
            description: self.description.clone(),
        }
    }
}

/// Everything a configuration file can set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synthetic: Option<SynthConfig>,
}

impl RunConfig {
    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let mut out = String::from("[pipeline]\n");
        put(&mut out, "background_velocity", p.background_velocity.to_string());
        put(&mut out, "shot_decimation", p.shot_decimation.to_string());
        put(&mut out, "gradient_spacing", p.gradient_spacing.to_string());
        put(&mut out, "output_spacing", p.output_spacing.to_string());
        put(&mut out, "v_min", p.v_min.to_string());
        put(&mut out, "v_max", p.v_max.to_string());
        put(&mut out, "step_fraction", p.step_fraction.to_string());
        put(&mut out, "lambda_rel", p.lambda_rel.to_string());
        put(&mut out, "hessian_exponent", p.hessian_exponent.to_string());
        put(&mut out, "weight_norm", p.weight_norm.as_str().to_string());
        put(&mut out, "residual_tolerance", p.residual_tolerance.to_string());
        match &p.bathymetry {
            Some(Bathymetry::Flat(d)) => put(&mut out, "water_depth", d.to_string()),
            Some(Bathymetry::Profile(v)) => put(&mut out, "bathymetry", join(v)),
            None => {}
        }
        if let Some(v) = p.water_velocity {
            put(&mut out, "water_velocity", v.to_string());
        }
        if let Some(v) = p.model_x_min {
            put(&mut out, "model_x_min", v.to_string());
        }
        if let Some(v) = p.model_x_max {
            put(&mut out, "model_x_max", v.to_string());
        }
        if let Some(v) = p.model_depth {
            put(&mut out, "model_depth", v.to_string());
        }
        put(&mut out, "force", p.force.to_string());
        out.push_str("\n[transform]\n");
        put(&mut out, "damping_constants", join(&p.damping_constants));
        put(&mut out, "gain_powers", join(&p.gain_powers));
        put(&mut out, "amplitude_floor", p.amplitude_floor.to_string());
        put(&mut out, "stability_threshold", p.stability_threshold.to_string());
        if let Some(s) = &self.synthetic {
            out.push_str("\n[synthetic]\n");
            if let Some(v) = s.velocity {
                put(&mut out, "velocity", v.to_string());
            }
            put(&mut out, "shot_start", s.shot_start.to_string());
            put(&mut out, "shot_spacing", s.shot_spacing.to_string());
            put(&mut out, "shot_count", s.shot_count.to_string());
            put(&mut out, "shot_depth", s.shot_depth.to_string());
            put(&mut out, "receiver_start", s.receiver_start.to_string());
            put(&mut out, "receiver_spacing", s.receiver_spacing.to_string());
            put(&mut out, "receiver_count", s.receiver_count.to_string());
            put(&mut out, "receiver_depth", s.receiver_depth.to_string());
            put(&mut out, "wavelet_width", s.wavelet_width.to_string());
            put(&mut out, "nt", s.nt.to_string());
            put(&mut out, "dt", s.dt.to_string());
            put(&mut out, "source_amplitude", s.source_amplitude.to_string());
            if !s.scatterer_x.is_empty() {
                put(&mut out, "scatterer_x", join(&s.scatterer_x));
                put(&mut out, "scatterer_z", join(&s.scatterer_z));
                put(&mut out, "scatterer_delta_v", join(&s.scatterer_delta_v));
            }
            put(&mut out, "scatterer_volume", s.scatterer_volume.to_string());
            put(&mut out, "noise_std", s.noise_std.to_string());
            put(&mut out, "seed", s.seed.to_string());
            put(&mut out, "description", s.description.clone());
        }
        out
    }
}

fn put(out: &mut String, key: &str, value: String) {
    let _ = writeln!(out, "{key} = {value}");
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let sections = split_sections(text)?;
    let mut cfg = RunConfig::default();
    for (name, entries) in sections {
        let mut sec = Section { name: &name, entries };
        match name.as_str() {
            "pipeline" => read_pipeline(&mut sec, &mut cfg.pipeline)?,
            "transform" => read_transform(&mut sec, &mut cfg.pipeline)?,
            "synthetic" => cfg.synthetic = Some(read_synthetic(&mut sec)?),
            other => return Err(Error::Config(format!("unknown section [{other}]"))),
        }
        sec.finish()?;
    }
    cfg.pipeline.validate()?;
    if let Some(s) = &cfg.synthetic {
        s.validate()?;
    }
    Ok(cfg)
}

type Entries = BTreeMap<String, (String, usize)>;

fn split_sections(text: &str) -> Result<Vec<(String, Entries)>> {
    let mut sections: Vec<(String, Entries)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {lineno}: malformed section header")))?
                .trim()
                .to_string();
            if sections.iter().any(|(n, _)| *n == name) {
                return Err(Error::Config(format!("line {lineno}: section [{name}] repeated")));
            }
            sections.push((name, Entries::new()));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value")))?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        let Some((section, entries)) = sections.last_mut() else {
            return Err(Error::Config(format!("line {lineno}: '{key}' appears before any section")));
        };
        if entries.insert(key.clone(), (value, lineno)).is_some() {
            return Err(Error::Config(format!("line {lineno}: '{key}' repeated in [{section}]")));
        }
    }
    Ok(sections)
}

struct Section<'a> {
    name: &'a str,
    entries: Entries,
}

impl Section<'_> {
    fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn scalar<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some((v, line)) = self.raw(key) {
            *slot = parse_value(&v, key, line)?;
        }
        Ok(())
    }

    fn optional<T: FromStr>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()> {
        if let Some((v, line)) = self.raw(key) {
            *slot = Some(parse_value(&v, key, line)?);
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some((v, line)) = self.raw(key) {
            *slot = parse_list(&v, key, line)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(Error::Config(format!(
                "line {line}: unknown key '{key}' in [{}]",
                self.name
            ))),
        }
    }
}

fn parse_value<T: FromStr>(v: &str, key: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse '{v}' for {key}")))
}

fn parse_list<T: FromStr>(v: &str, key: &str, line: usize) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Err(Error::Config(format!("line {line}: {key} is empty")));
    }
    v.split(',').map(|item| parse_value(item.trim(), key, line)).collect()
}

fn read_pipeline(sec: &mut Section, p: &mut PipelineConfig) -> Result<()> {
    sec.scalar("background_velocity", &mut p.background_velocity)?;
    sec.scalar("shot_decimation", &mut p.shot_decimation)?;
    sec.scalar("gradient_spacing", &mut p.gradient_spacing)?;
    sec.scalar("output_spacing", &mut p.output_spacing)?;
    sec.scalar("v_min", &mut p.v_min)?;
    sec.scalar("v_max", &mut p.v_max)?;
    sec.scalar("step_fraction", &mut p.step_fraction)?;
    sec.scalar("lambda_rel", &mut p.lambda_rel)?;
    sec.scalar("hessian_exponent", &mut p.hessian_exponent)?;
    sec.scalar("weight_norm", &mut p.weight_norm)?;
    sec.scalar("residual_tolerance", &mut p.residual_tolerance)?;
    sec.optional("water_velocity", &mut p.water_velocity)?;
    sec.optional("model_x_min", &mut p.model_x_min)?;
    sec.optional("model_x_max", &mut p.model_x_max)?;
    sec.optional("model_depth", &mut p.model_depth)?;
    sec.scalar("force", &mut p.force)?;
    let mut flat = None;
    sec.optional("water_depth", &mut flat)?;
    let mut profile = Vec::new();
    let had_profile = sec.entries.contains_key("bathymetry");
    sec.list("bathymetry", &mut profile)?;
    p.bathymetry = match (flat, had_profile) {
        (Some(_), true) => return Err(Error::Config("set either water_depth or bathymetry, not both".into())),
        (Some(d), false) => Some(Bathymetry::Flat(d)),
        (None, true) => Some(Bathymetry::Profile(profile)),
        (None, false) => None,
    };
    // Transform keys are accepted here too since they are pipeline fields.
    read_transform(sec, p)
}

fn read_transform(sec: &mut Section, p: &mut PipelineConfig) -> Result<()> {
    sec.list("damping_constants", &mut p.damping_constants)?;
    sec.list("gain_powers", &mut p.gain_powers)?;
    sec.scalar("amplitude_floor", &mut p.amplitude_floor)?;
    sec.scalar("stability_threshold", &mut p.stability_threshold)
}

fn read_synthetic(sec: &mut Section) -> Result<SynthConfig> {
    let mut s = SynthConfig::default();
    sec.optional("velocity", &mut s.velocity)?;
    sec.scalar("shot_start", &mut s.shot_start)?;
    sec.scalar("shot_spacing", &mut s.shot_spacing)?;
    sec.scalar("shot_count", &mut s.shot_count)?;
    sec.scalar("shot_depth", &mut s.shot_depth)?;
    sec.scalar("receiver_start", &mut s.receiver_start)?;
    sec.scalar("receiver_spacing", &mut s.receiver_spacing)?;
    sec.scalar("receiver_count", &mut s.receiver_count)?;
    sec.scalar("receiver_depth", &mut s.receiver_depth)?;
    sec.scalar("wavelet_width", &mut s.wavelet_width)?;
    sec.scalar("nt", &mut s.nt)?;
    sec.scalar("dt", &mut s.dt)?;
    sec.scalar("source_amplitude", &mut s.source_amplitude)?;
    sec.list("scatterer_x", &mut s.scatterer_x)?;
    sec.list("scatterer_z", &mut s.scatterer_z)?;
    sec.list("scatterer_delta_v", &mut s.scatterer_delta_v)?;
    sec.scalar("scatterer_volume", &mut s.scatterer_volume)?;
    sec.scalar("noise_std", &mut s.noise_std)?;
    sec.scalar("seed", &mut s.seed)?;
    sec.scalar("description", &mut s.description)?;
    Ok(s)
}
