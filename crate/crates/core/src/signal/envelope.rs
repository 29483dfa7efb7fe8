use super::Waveform;
use crate::error::{Error, Result};

pub const ENVELOPE_WINDOW_S: f64 = 0.040;
pub const ENVELOPE_HOP_S: f64 = 0.020;

/// Frame-wise mean absolute amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub values: Vec<f64>,
    pub hop_s: f64,
    pub window_s: f64,
}

impl Envelope {
    pub fn new(values: Vec<f64>, hop_s: f64, window_s: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "envelope values must be finite and nonnegative",
            ));
        }
        if !(hop_s > 0.0 && window_s > 0.0) {
            return Err(Error::invalid("envelope hop and window must be positive"));
        }
        Ok(Self {
            values,
            hop_s,
            window_s,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Envelope::new(values, self.hop_s, self.window_s)
    }
}

pub fn extract_envelope(w: &Waveform, window_s: f64, hop_s: f64) -> Result<Envelope> {
    let rate = w.sample_rate_hz() as f64;
    let win = (window_s * rate).round() as usize;
    let hop = (hop_s * rate).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::invalid(
            "envelope window and hop must span at least one sample",
        ));
    }
    if w.len() < win {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one {win}-sample envelope window",
            w.len()
        )));
    }
    let frames = (w.len() - win) / hop + 1;
    let x = w.samples();
    let values = (0..frames)
        .map(|i| {
            let seg = &x[i * hop..i * hop + win];
            seg.iter().map(|v| v.abs()).sum::<f64>() / win as f64
        })
        .collect();
    Envelope::new(values, hop_s, window_s)
}
