use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Kaiser-windowed sinc interpolator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResamplerConfig {
    /// Kernel length measured in samples of the lower of the two rates.
    pub taps: usize,
    pub kaiser_beta: f64,
    /// Passband edge as a fraction of the lower Nyquist frequency.
    pub cutoff: f64,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        Self {
            taps: 48,
            kaiser_beta: 8.0,
            cutoff: 0.95,
        }
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

pub fn resample(w: &Waveform, target_rate_hz: u32) -> Result<Waveform> {
    resample_with(w, target_rate_hz, &ResamplerConfig::default())
}

/// Band-limited resampling. Output length is `round(len * target / source)`.
///
/// Each output sample is a normalized weighted sum of the input, so constant
/// signals pass through unchanged even where the kernel is truncated at the
/// edges.
pub fn resample_with(w: &Waveform, target_rate_hz: u32, cfg: &ResamplerConfig) -> Result<Waveform> {
    if target_rate_hz == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if cfg.taps < 2 || !(cfg.cutoff > 0.0 && cfg.cutoff <= 1.0) {
        return Err(Error::invalid(
            "resampler needs taps >= 2 and cutoff in (0, 1]",
        ));
    }
    let src = w.sample_rate_hz() as u64;
    let dst = target_rate_hz as u64;
    if src == dst {
        return Ok(w.clone());
    }
    let n_in = w.len();
    let n_out = ((n_in as u64 * dst + src / 2) / src) as usize;
    if n_out == 0 {
        return Err(Error::invalid("resampled signal would be empty"));
    }
    let x = w.samples();

    // Cutoff relative to the source sampling rate (cycles per source sample / 0.5).
    let ratio = (dst as f64 / src as f64).min(1.0);
    let fc = cfg.cutoff * ratio;
    // Half-width in source samples: taps/2 periods of the lower rate.
    let half_width = cfg.taps as f64 / 2.0 / ratio;
    let i0_beta = bessel_i0(cfg.kaiser_beta);

    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        // Exact rational position of the output sample on the input grid.
        let pos = (n as u64 * src) as f64 / dst as f64;
        let lo = ((pos - half_width).ceil().max(0.0)) as usize;
        let hi = ((pos + half_width).floor() as usize).min(n_in - 1);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (k, &xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let tau = pos - k as f64;
            let r = tau / half_width;
            let win = if r.abs() >= 1.0 {
                0.0
            } else {
                bessel_i0(cfg.kaiser_beta * (1.0 - r * r).sqrt()) / i0_beta
            };
            let h = fc * sinc(fc * tau) * win;
            acc += h * xk;
            norm += h;
        }
        let v = if norm.abs() > 1e-12 { acc / norm } else { 0.0 };
        out.push(v.clamp(-1.0, 1.0));
    }
    Waveform::new(out, target_rate_hz)
}
