//! Waveform containers and the signal-processing front end: companding,
//! resampling, loudness envelopes, pitch tracking, WAV I/O and the additive
//! synthesizer behind the synthetic corpus.

mod envelope;
mod mulaw;
mod pitch;
mod resample;
mod synth;
pub mod wav;

pub use envelope::{extract_envelope, Envelope, ENVELOPE_HOP_S, ENVELOPE_WINDOW_S};
pub use mulaw::{
    bin_edges, decode_code, mu_law_compand, mu_law_decode, mu_law_encode, mu_law_expand,
    EncodeStats, MuLawSequence, QUANT_LEVELS,
};
pub use pitch::{extract_f0, PitchConfig, PitchTrack, F0_HOP_S};
pub use resample::{resample, resample_with, ResamplerConfig};
pub use synth::{synth_tone, Formant, Timbre};

use crate::error::{Error, Result};

/// Mono audio with every sample in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        if let Some((i, v)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(Error::invalid(format!(
                "sample {i} = {v} lies outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Builds a waveform after clamping every sample into `[-1, 1]`.
    /// Non-finite samples become 0.
    pub fn clamped(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(|v| {
                if v.is_finite() {
                    v.clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        Self::new(samples, sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Copy of `[start, start + len)`; fails if the span runs past the end.
    pub fn slice(&self, start: usize, len: usize) -> Result<Waveform> {
        if len == 0 || start + len > self.samples.len() {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) out of bounds for length {}",
                start + len,
                self.samples.len()
            )));
        }
        Ok(Waveform {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        })
    }
}
