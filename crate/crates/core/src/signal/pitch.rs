use super::Waveform;
use crate::error::{Error, Result};

pub const F0_HOP_S: f64 = 0.005;

/// Frame-wise fundamental frequency; 0 marks an unvoiced frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0_hz: Vec<f64>,
    pub hop_s: f64,
}

impl PitchTrack {
    pub fn new(f0_hz: Vec<f64>, hop_s: f64) -> Result<Self> {
        if f0_hz.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("f0 values must be finite and nonnegative"));
        }
        if !(hop_s > 0.0) {
            return Err(Error::invalid("pitch hop must be positive"));
        }
        Ok(Self { f0_hz, hop_s })
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.f0_hz.iter().filter(|&&f| f > 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchConfig {
    pub hop_s: f64,
    pub f_min: f64,
    pub f_max: f64,
    /// Minimum normalized-autocorrelation peak for a frame to count as voiced.
    pub voicing_threshold: f64,
    /// Frames whose RMS falls below this are unvoiced regardless of shape.
    pub silence_rms: f64,
    /// Low-pass cutoff applied before correlation. Strong resonances far
    /// above the pitch band put closely spaced ripples on the correlation
    /// curve that can outrank the true period.
    pub lowpass_hz: Option<f64>,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            hop_s: F0_HOP_S,
            f_min: 80.0,
            f_max: 1000.0,
            voicing_threshold: 0.5,
            silence_rms: 1e-4,
            lowpass_hz: Some(1500.0),
        }
    }
}

impl PitchConfig {
    pub fn with_band(f_min: f64, f_max: f64) -> Self {
        Self {
            f_min,
            f_max,
            ..Self::default()
        }
    }

    fn lags(&self, rate: f64) -> (usize, usize) {
        let min_lag = (rate / self.f_max).floor().max(2.0) as usize;
        let max_lag = (rate / self.f_min).ceil() as usize;
        (min_lag, max_lag)
    }

    /// Analysis window: two periods of the lowest searchable pitch.
    fn window(&self, rate: f64) -> usize {
        let (_, max_lag) = self.lags(rate);
        2 * max_lag
    }

    /// Samples consumed by one frame (window plus the largest lag).
    pub fn frame_span(&self, rate: u32) -> usize {
        let rate = rate as f64;
        self.window(rate) + self.lags(rate).1 + 1
    }
}

/// Zero-phase Hann-windowed-sinc low-pass; the signal is zero outside its ends.
fn lowpass(x: &[f64], cutoff_hz: f64, rate: f64) -> Vec<f64> {
    let fc = cutoff_hz / rate;
    let half = (6.0 / fc / 2.0).ceil() as usize;
    let taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let m = i as f64 - half as f64;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * m).sin() / (std::f64::consts::PI * m)
            };
            let window = 0.5 + 0.5 * (std::f64::consts::PI * m / (half as f64 + 1.0)).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = taps.iter().sum();
    (0..x.len())
        .map(|n| {
            let lo = n.saturating_sub(half);
            let hi = (n + half).min(x.len() - 1);
            (lo..=hi).map(|j| x[j] * taps[j + half - n]).sum::<f64>() / gain
        })
        .collect()
}

/// Normalized cross-correlation between a window and its lagged copy.
fn nccf(x: &[f64], start: usize, win: usize, lag: usize, e0: f64) -> f64 {
    let a = &x[start..start + win];
    let b = &x[start + lag..start + lag + win];
    let mut dot = 0.0;
    let mut e1 = 0.0;
    for (u, v) in a.iter().zip(b) {
        dot += u * v;
        e1 += v * v;
    }
    let denom = (e0 * e1).sqrt();
    if denom <= 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Autocorrelation pitch tracker with parabolic peak refinement, run on a
/// low-passed copy of the signal.
///
/// The chosen period is the shortest lag whose correlation peak reaches 90%
/// of the best peak in the band; longer multiples of the period correlate
/// just as well and would otherwise cause octave-down errors.
pub fn extract_f0(w: &Waveform, cfg: &PitchConfig) -> Result<PitchTrack> {
    let rate = w.sample_rate_hz() as f64;
    if !(cfg.f_min > 0.0 && cfg.f_min < cfg.f_max && cfg.f_max < rate / 2.0) {
        return Err(Error::invalid(format!(
            "pitch band [{}, {}] must satisfy 0 < f_min < f_max < {}",
            cfg.f_min,
            cfg.f_max,
            rate / 2.0
        )));
    }
    let hop = (cfg.hop_s * rate).round() as usize;
    if hop == 0 {
        return Err(Error::invalid("pitch hop shorter than one sample"));
    }
    let (min_lag, max_lag) = cfg.lags(rate);
    let win = cfg.window(rate);
    let span = cfg.frame_span(w.sample_rate_hz());
    let filtered;
    let x = match cfg.lowpass_hz {
        Some(fc) if fc > 0.0 && fc < rate / 2.0 && !w.is_empty() => {
            filtered = lowpass(w.samples(), fc, rate);
            &filtered[..]
        }
        Some(fc) if !(fc > 0.0) || !fc.is_finite() => {
            return Err(Error::invalid("pitch low-pass cutoff must be positive"));
        }
        _ => w.samples(),
    };
    let frames = if x.len() >= span {
        (x.len() - span) / hop + 1
    } else {
        0
    };

    let mut corr = vec![0.0; max_lag + 2];
    let mut f0 = Vec::with_capacity(frames);
    for i in 0..frames {
        let start = i * hop;
        let seg = &x[start..start + win];
        let e0: f64 = seg.iter().map(|v| v * v).sum();
        if (e0 / win as f64).sqrt() < cfg.silence_rms {
            f0.push(0.0);
            continue;
        }
        let lo = min_lag.saturating_sub(1).max(1);
        for (lag, c) in corr.iter_mut().enumerate().take(max_lag + 2).skip(lo) {
            *c = if lag + win <= x.len() - start {
                nccf(x, start, win, lag, e0)
            } else {
                0.0
            };
        }
        // Interior local maxima inside the band.
        let mut best = f64::NEG_INFINITY;
        let mut peaks = Vec::new();
        for lag in min_lag..=max_lag {
            let c = corr[lag];
            if c >= corr[lag - 1] && c >= corr[lag + 1] {
                peaks.push(lag);
                best = best.max(c);
            }
        }
        if peaks.is_empty() || best < cfg.voicing_threshold {
            f0.push(0.0);
            continue;
        }
        let lag = *peaks
            .iter()
            .find(|&&l| corr[l] >= 0.9 * best)
            .expect("best peak is in the list");
        let (y0, y1, y2) = (corr[lag - 1], corr[lag], corr[lag + 1]);
        let denom = y0 - 2.0 * y1 + y2;
        let delta = if denom.abs() > 1e-12 {
            (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let freq = (rate / (lag as f64 + delta)).clamp(cfg.f_min, cfg.f_max);
        f0.push(freq);
    }
    PitchTrack::new(f0, cfg.hop_s)
}
