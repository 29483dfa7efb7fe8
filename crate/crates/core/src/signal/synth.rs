use std::f64::consts::PI;

use super::{Envelope, PitchTrack, Waveform};
use crate::error::{Error, Result};

/// A Gaussian resonance added to a [`Timbre::Resonant`] voice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Formant {
    pub centre_hz: f64,
    pub bandwidth_hz: f64,
    /// Total amplitude the resonance adds, shared among the harmonics it
    /// covers in proportion to a Gaussian around the centre frequency.
    pub gain: f64,
}

/// Spectral shape of a synthetic voice.
#[derive(Debug, Clone, PartialEq)]
pub enum Timbre {
    /// Fixed relative amplitudes of harmonics 1, 2, 3, ...
    Harmonics(Vec<f64>),
    /// Fixed low-order harmonics plus resonances that reach every harmonic
    /// below Nyquist. Each resonance spreads its gain over the harmonics
    /// under it, so the voice's level and the balance between its parts do
    /// not depend on pitch. Everything fades out over the top 15% of the
    /// band so glides never click.
    Resonant {
        harmonics: Vec<f64>,
        formants: Vec<Formant>,
    },
}

impl Timbre {
    /// The four fixed voices of the synthetic corpus: a distinct five-harmonic
    /// core below 2 kHz and a distinct "singer's formant" between 2.6 and
    /// 3.4 kHz.
    pub fn preset(index: usize) -> Timbre {
        let (harmonics, centre_hz, gain): (&[f64], f64, f64) = match index % 4 {
            0 => (&[1.0, 0.5, 0.3, 0.2, 0.1], 3000.0, 0.8),
            1 => (&[1.0, 0.15, 0.6, 0.1, 0.35], 2600.0, 0.6),
            2 => (&[0.6, 1.0, 0.3, 0.4, 0.1], 3400.0, 1.0),
            _ => (&[1.0, 0.8, 0.1, 0.5, 0.05], 2800.0, 0.5),
        };
        Timbre::Resonant {
            harmonics: harmonics.to_vec(),
            formants: vec![Formant {
                centre_hz,
                bandwidth_hz: 250.0,
                gain,
            }],
        }
    }

    fn validate(&self) -> Result<()> {
        let harmonics = match self {
            Timbre::Harmonics(a) => a,
            Timbre::Resonant {
                harmonics,
                formants,
            } => {
                let ok = formants.iter().all(|f| {
                    f.centre_hz.is_finite()
                        && f.bandwidth_hz > 0.0
                        && f.gain.is_finite()
                        && f.gain >= 0.0
                });
                if !ok {
                    return Err(Error::invalid(
                        "formants need finite parameters, positive bandwidths and gains ≥ 0",
                    ));
                }
                harmonics
            }
        };
        if harmonics.iter().any(|a| !a.is_finite())
            || harmonics.iter().map(|a| a.abs()).sum::<f64>() <= 0.0
        {
            return Err(Error::invalid("timbre needs at least one nonzero harmonic"));
        }
        Ok(())
    }

    /// Fills `out` with the amplitudes of harmonics 1, 2, ... below Nyquist
    /// for fundamental `freq` and returns the normalization that keeps their
    /// sum within ±1. For resonant voices it is independent of `freq`.
    fn amplitudes(&self, freq: f64, nyquist: f64, out: &mut Vec<f64>) -> f64 {
        out.clear();
        match self {
            Timbre::Harmonics(a) => {
                for (k, &amp) in a.iter().enumerate() {
                    if (k + 1) as f64 * freq >= nyquist {
                        break;
                    }
                    out.push(amp);
                }
                a.iter().map(|a| a.abs()).sum()
            }
            Timbre::Resonant {
                harmonics,
                formants,
            } => {
                let fade_start = 0.85 * nyquist;
                let count = (nyquist / freq).ceil() as usize - 1;
                let fade = |h: f64| {
                    if h <= fade_start {
                        1.0
                    } else {
                        (0.5 * PI * (h - fade_start) / (nyquist - fade_start))
                            .cos()
                            .powi(2)
                    }
                };
                out.extend((1..=count).map(|k| harmonics.get(k - 1).copied().unwrap_or(0.0)));
                for f in formants {
                    let shape: Vec<f64> = (1..=count)
                        .map(|k| {
                            (-0.5 * ((k as f64 * freq - f.centre_hz) / f.bandwidth_hz).powi(2))
                                .exp()
                        })
                        .collect();
                    let total: f64 = shape.iter().sum();
                    if total > 0.0 {
                        for (a, g) in out.iter_mut().zip(&shape) {
                            *a += f.gain * g / total;
                        }
                    }
                }
                for (k, a) in out.iter_mut().enumerate() {
                    *a *= fade((k + 1) as f64 * freq);
                }
                harmonics.iter().map(|a| a.abs()).sum::<f64>()
                    + formants.iter().map(|f| f.gain).sum::<f64>()
            }
        }
    }
}

/// Linear interpolation of a frame sequence at time `t`, holding the end values.
fn frame_value(values: &[f64], hop_s: f64, t: f64) -> f64 {
    let pos = t / hop_s;
    if pos <= 0.0 {
        return values[0];
    }
    let i = pos.floor() as usize;
    if i + 1 >= values.len() {
        return *values.last().expect("nonempty");
    }
    let frac = pos - i as f64;
    values[i] * (1.0 - frac) + values[i + 1] * frac
}

/// Additive harmonic synthesis following a pitch contour and an amplitude
/// envelope. Harmonics at or above Nyquist are dropped sample by sample;
/// unvoiced (0 Hz) frames produce silence.
///
/// Output length is the contour duration, `len(f0) * hop`.
pub fn synth_tone(
    f0: &PitchTrack,
    envelope: &Envelope,
    timbre: &Timbre,
    sample_rate_hz: u32,
) -> Result<Waveform> {
    if f0.is_empty() || envelope.is_empty() {
        return Err(Error::invalid("contour and envelope must be nonempty"));
    }
    let duration = f0.len() as f64 * f0.hop_s;
    let env_duration = envelope.len() as f64 * envelope.hop_s;
    if (duration - env_duration).abs() > envelope.hop_s.max(f0.hop_s) + 1e-9 {
        return Err(Error::invalid(format!(
            "contour covers {duration:.4}s but envelope covers {env_duration:.4}s"
        )));
    }
    timbre.validate()?;
    let rate = sample_rate_hz as f64;
    let nyquist = rate / 2.0;
    let n = (duration * rate).round() as usize;
    let mut phase = 0.0f64;
    let mut amps = Vec::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / rate;
        let freq = frame_value(&f0.f0_hz, f0.hop_s, t);
        let amp = frame_value(&envelope.values, envelope.hop_s, t);
        let mut s = 0.0;
        let mut norm = 1.0;
        if freq > 0.0 {
            norm = timbre.amplitudes(freq, nyquist, &mut amps);
            for (k, a) in amps.iter().enumerate() {
                s += a * ((k + 1) as f64 * phase).sin();
            }
        }
        out.push((amp * s / norm).clamp(-1.0, 1.0));
        phase = (phase + 2.0 * PI * freq / rate) % (2.0 * PI);
    }
    Waveform::new(out, sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{extract_f0, PitchConfig};

    fn flat(value: f64, frames: usize, hop: f64) -> Vec<f64> {
        let _ = hop;
        vec![value; frames]
    }

    #[test]
    fn single_harmonic_is_recovered_by_tracker() {
        let f0 = PitchTrack::new(flat(440.0, 100, 0.005), 0.005).unwrap();
        let env = Envelope::new(flat(0.5, 25, 0.02), 0.02, 0.04).unwrap();
        let w = synth_tone(&f0, &env, &Timbre::Harmonics(vec![1.0]), 16_000).unwrap();
        assert_eq!(w.len(), 8000);
        let t = extract_f0(&w, &PitchConfig::default()).unwrap();
        for &f in t.f0_hz.iter().filter(|&&f| f > 0.0) {
            assert!((f - 440.0).abs() / 440.0 < 0.01);
        }
        assert!(t.voiced_count() > 0);
    }

    #[test]
    fn zero_envelope_is_silent() {
        let f0 = PitchTrack::new(flat(300.0, 40, 0.005), 0.005).unwrap();
        let env = Envelope::new(vec![0.0; 10], 0.02, 0.04).unwrap();
        let w = synth_tone(&f0, &env, &Timbre::preset(0), 8000).unwrap();
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn peak_never_exceeds_one() {
        let f0 = PitchTrack::new(flat(200.0, 40, 0.005), 0.005).unwrap();
        let env = Envelope::new(vec![1.0; 10], 0.02, 0.04).unwrap();
        let w = synth_tone(&f0, &env, &Timbre::preset(3), 8000).unwrap();
        assert!(w.samples().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn duration_mismatch_rejected() {
        let f0 = PitchTrack::new(flat(200.0, 200, 0.005), 0.005).unwrap();
        let env = Envelope::new(vec![0.5; 10], 0.02, 0.04).unwrap();
        assert!(synth_tone(&f0, &env, &Timbre::preset(0), 8000).is_err());
    }

    #[test]
    fn harmonics_above_nyquist_dropped() {
        // 1500 Hz at 4 kHz: only the fundamental fits below 2 kHz.
        let f0 = PitchTrack::new(flat(1500.0, 40, 0.005), 0.005).unwrap();
        let env = Envelope::new(vec![1.0; 10], 0.02, 0.04).unwrap();
        let a = synth_tone(&f0, &env, &Timbre::Harmonics(vec![1.0, 0.0, 0.0]), 4000).unwrap();
        let b = synth_tone(
            &f0,
            &env,
            &Timbre::Harmonics(vec![1.0, 0.0, 0.0, 0.0]),
            4000,
        )
        .unwrap();
        assert_eq!(a, b);
        let c = synth_tone(&f0, &env, &Timbre::Harmonics(vec![1.0, 5.0]), 4000).unwrap();
        // second harmonic removed, only the normalization changes
        for (x, y) in a.samples().iter().zip(c.samples()) {
            assert!((x / 6.0 - y).abs() < 1e-12);
        }
    }
    #[test]
    fn presets_carry_energy_above_the_low_band() {
        use crate::signal::resample;
        let f0 = PitchTrack::new(flat(250.0, 100, 0.005), 0.005).unwrap();
        let env = Envelope::new(vec![0.8; 25], 0.02, 0.04).unwrap();
        for p in 0..4 {
            let w = synth_tone(&f0, &env, &Timbre::preset(p), 8000).unwrap();
            let low = resample(&resample(&w, 4000).unwrap(), 8000).unwrap();
            // skip the resampler's edge transients
            let mid = 400..3600;
            let total: f64 = w.samples()[mid.clone()].iter().map(|x| x * x).sum();
            let high: f64 = w.samples()[mid.clone()]
                .iter()
                .zip(&low.samples()[mid])
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            assert!(high / total > 0.01, "preset {p}: {:.4}", high / total);
        }
    }

    #[test]
    fn tracker_follows_every_preset() {
        for p in 0..4 {
            for freq in [110.0, 175.0, 262.0, 392.0, 660.0, 990.0] {
                let f0 = PitchTrack::new(flat(freq, 60, 0.005), 0.005).unwrap();
                let env = Envelope::new(vec![0.6; 15], 0.02, 0.04).unwrap();
                for rate in [8000, 16_000] {
                    let w = synth_tone(&f0, &env, &Timbre::preset(p), rate).unwrap();
                    let t = extract_f0(&w, &PitchConfig::default()).unwrap();
                    assert!(t.voiced_count() > 40);
                    for &f in t.f0_hz.iter().filter(|&&f| f > 0.0) {
                        assert!(
                            (f - freq).abs() / freq < 0.01,
                            "preset {p} at {rate} Hz: {f} vs {freq}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn formant_parameters_are_checked() {
        let f0 = PitchTrack::new(flat(200.0, 40, 0.005), 0.005).unwrap();
        let env = Envelope::new(vec![0.5; 10], 0.02, 0.04).unwrap();
        let bad = Timbre::Resonant {
            harmonics: vec![1.0],
            formants: vec![Formant {
                centre_hz: 500.0,
                bandwidth_hz: 0.0,
                gain: 0.5,
            }],
        };
        assert!(synth_tone(&f0, &env, &bad, 8000).is_err());
        assert!(synth_tone(&f0, &env, &Timbre::Harmonics(vec![0.0]), 8000).is_err());
    }

    #[test]
    fn resonance_leaves_the_low_band_to_the_harmonics() {
        use crate::signal::resample;
        let Timbre::Resonant {
            harmonics,
            formants,
        } = Timbre::preset(0)
        else {
            unreachable!()
        };
        let core_sum: f64 = harmonics.iter().sum();
        let expected = core_sum / (core_sum + formants[0].gain);
        for freq in [180.0, 250.0, 390.0] {
            let f0 = PitchTrack::new(flat(freq, 100, 0.005), 0.005).unwrap();
            let env = Envelope::new(vec![0.8; 25], 0.02, 0.04).unwrap();
            let full = synth_tone(&f0, &env, &Timbre::preset(0), 8000).unwrap();
            let core = synth_tone(&f0, &env, &Timbre::Harmonics(harmonics.clone()), 8000).unwrap();
            let a = resample(&full, 4000).unwrap();
            let b = resample(&core, 4000).unwrap();
            // below 2 kHz: the harmonic core at a pitch-independent level
            let (num, den) = a.samples()[200..1800]
                .iter()
                .zip(&b.samples()[200..1800])
                .fold((0.0, 0.0), |(n, d), (x, y)| (n + x * y, d + y * y));
            let scale = num / den;
            let resid: f64 = a.samples()[200..1800]
                .iter()
                .zip(&b.samples()[200..1800])
                .map(|(x, y)| (x - scale * y).powi(2))
                .sum();
            assert!(
                resid / (scale * scale * den) < 1e-3,
                "{freq} Hz: {}",
                resid / (scale * scale * den)
            );
            assert!(
                (scale - expected).abs() < 5e-3,
                "{freq} Hz: level {scale} vs {expected}"
            );
        }
    }
}
