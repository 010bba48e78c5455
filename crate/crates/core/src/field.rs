//! Laplace-domain values indexed by (shot, receiver, s, n).

use crate::error::{Error, Result};

/// Where a [`LaplaceField`]'s values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Observed,
    Modeled,
    /// s-derivatives of observed data (gained transforms with sign applied).
    ObservedDerivative,
    /// s-derivatives of modeled wavefields.
    ModeledDerivative,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Observed => "observed",
            Provenance::Modeled => "modeled",
            Provenance::ObservedDerivative => "observed-derivative",
            Provenance::ModeledDerivative => "modeled-derivative",
        }
    }
}

/// Dense field of real Laplace-domain amplitudes.
///
/// Storage is trace-major: all (s, n) values of one trace are contiguous,
/// with n varying fastest. Traces are numbered shot by shot.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceField {
    damping_constants: Vec<f64>,
    gain_powers: Vec<u32>,
    shot_offsets: Vec<usize>,
    values: Vec<f64>,
    provenance: Provenance,
}

impl LaplaceField {
    /// Zero-filled field for the given receivers-per-shot layout.
    pub fn zeros(
        receiver_counts: &[usize],
        damping_constants: Vec<f64>,
        gain_powers: Vec<u32>,
        provenance: Provenance,
    ) -> Result<Self> {
        validate_axes(&damping_constants, &gain_powers)?;
        let mut shot_offsets = Vec::with_capacity(receiver_counts.len() + 1);
        shot_offsets.push(0);
        for (i, &count) in receiver_counts.iter().enumerate() {
            if count == 0 {
                return Err(Error::Invalid(format!("shot {i} has no receivers")));
            }
            shot_offsets.push(shot_offsets[i] + count);
        }
        let traces = *shot_offsets.last().unwrap();
        let len = traces * damping_constants.len() * gain_powers.len();
        Ok(LaplaceField {
            damping_constants,
            gain_powers,
            shot_offsets,
            values: vec![0.0; len],
            provenance,
        })
    }

    /// Field from explicit values in storage order.
    pub fn from_values(
        receiver_counts: &[usize],
        damping_constants: Vec<f64>,
        gain_powers: Vec<u32>,
        values: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut field = Self::zeros(receiver_counts, damping_constants, gain_powers, provenance)?;
        if values.len() != field.values.len() {
            return Err(Error::Invalid(format!(
                "expected {} field values, got {}",
                field.values.len(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("field value {k} is not finite")));
        }
        field.values = values;
        Ok(field)
    }

    pub fn damping_constants(&self) -> &[f64] {
        &self.damping_constants
    }
    pub fn gain_powers(&self) -> &[u32] {
        &self.gain_powers
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn shot_count(&self) -> usize {
        self.shot_offsets.len() - 1
    }
    pub fn trace_count(&self) -> usize {
        *self.shot_offsets.last().unwrap()
    }
    pub fn receiver_count(&self, shot: usize) -> usize {
        self.shot_offsets[shot + 1] - self.shot_offsets[shot]
    }
    pub fn receiver_counts(&self) -> Vec<usize> {
        (0..self.shot_count()).map(|i| self.receiver_count(i)).collect()
    }
    pub fn trace_index(&self, shot: usize, receiver: usize) -> usize {
        debug_assert!(receiver < self.receiver_count(shot));
        self.shot_offsets[shot] + receiver
    }

    /// Position of `s` on the damping axis (exact match).
    pub fn s_index(&self, s: f64) -> Option<usize> {
        self.damping_constants.iter().position(|&v| v == s)
    }

    pub fn n_index(&self, n: u32) -> Option<usize> {
        self.gain_powers.iter().position(|&v| v == n)
    }

    fn offset(&self, trace: usize, is: usize, jn: usize) -> usize {
        (trace * self.damping_constants.len() + is) * self.gain_powers.len() + jn
    }

    /// Value by axis positions (not by s and n values).
    pub fn get(&self, shot: usize, receiver: usize, is: usize, jn: usize) -> f64 {
        self.values[self.offset(self.trace_index(shot, receiver), is, jn)]
    }

    pub fn set(&mut self, shot: usize, receiver: usize, is: usize, jn: usize, value: f64) {
        let k = self.offset(self.trace_index(shot, receiver), is, jn);
        self.values[k] = value;
    }

    /// All (s, n) values of one trace.
    pub fn trace_values(&self, shot: usize, receiver: usize) -> &[f64] {
        let width = self.damping_constants.len() * self.gain_powers.len();
        let start = self.trace_index(shot, receiver) * width;
        &self.values[start..start + width]
    }

    pub fn trace_values_mut(&mut self, shot: usize, receiver: usize) -> &mut [f64] {
        let width = self.damping_constants.len() * self.gain_powers.len();
        let start = self.trace_index(shot, receiver) * width;
        &mut self.values[start..start + width]
    }

    /// Values of one shot, receiver-major, as a contiguous slice.
    pub fn shot_values_mut(&mut self, shot: usize) -> &mut [f64] {
        let width = self.damping_constants.len() * self.gain_powers.len();
        let (a, b) = (self.shot_offsets[shot], self.shot_offsets[shot + 1]);
        &mut self.values[a * width..b * width]
    }

    /// Mutable per-shot chunks, in shot order.
    pub fn shots_mut(&mut self) -> Vec<&mut [f64]> {
        let width = self.damping_constants.len() * self.gain_powers.len();
        let mut out = Vec::with_capacity(self.shot_count());
        let mut rest = self.values.as_mut_slice();
        for i in 0..self.shot_offsets.len() - 1 {
            let count = (self.shot_offsets[i + 1] - self.shot_offsets[i]) * width;
            let (head, tail) = rest.split_at_mut(count);
            out.push(head);
            rest = tail;
        }
        out
    }

    /// Largest magnitude over all traces at one (s, n) position.
    pub fn max_abs(&self, is: usize, jn: usize) -> f64 {
        (0..self.trace_count())
            .map(|t| self.values[self.offset(t, is, jn)].abs())
            .fold(0.0, f64::max)
    }

    pub fn same_layout(&self, other: &LaplaceField) -> bool {
        self.shot_offsets == other.shot_offsets
            && self.damping_constants == other.damping_constants
            && self.gain_powers == other.gain_powers
    }

    /// Keep every `k`-th shot starting with the first.
    pub fn decimate(&self, k: usize) -> LaplaceField {
        let k = k.max(1);
        let counts: Vec<usize> = self.receiver_counts().into_iter().step_by(k).collect();
        let width = self.damping_constants.len() * self.gain_powers.len();
        let mut values = Vec::new();
        for shot in (0..self.shot_count()).step_by(k) {
            let (a, b) = (self.shot_offsets[shot], self.shot_offsets[shot + 1]);
            values.extend_from_slice(&self.values[a * width..b * width]);
        }
        let mut shot_offsets = vec![0];
        for c in counts {
            shot_offsets.push(shot_offsets.last().unwrap() + c);
        }
        LaplaceField {
            damping_constants: self.damping_constants.clone(),
            gain_powers: self.gain_powers.clone(),
            shot_offsets,
            values,
            provenance: self.provenance,
        }
    }
}

fn validate_axes(damping_constants: &[f64], gain_powers: &[u32]) -> Result<()> {
    if damping_constants.is_empty() {
        return Err(Error::Invalid("damping constant list is empty".into()));
    }
    if gain_powers.is_empty() {
        return Err(Error::Invalid("gain power list is empty".into()));
    }
    if let Some(s) = damping_constants.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Invalid(format!("damping constant {s} must be positive")));
    }
    for (i, s) in damping_constants.iter().enumerate() {
        if damping_constants[..i].contains(s) {
            return Err(Error::Invalid(format!("damping constant {s} listed twice")));
        }
    }
    for (i, n) in gain_powers.iter().enumerate() {
        if gain_powers[..i].contains(n) {
            return Err(Error::Invalid(format!("gain power {n} listed twice")));
        }
    }
    Ok(())
}
