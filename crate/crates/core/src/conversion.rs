//! User-facing conversions: singer swap, semitone pitch shift and dynamics
//! (envelope expansion / compression).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{
    extract_features, infer_chain, ChainOutput, ConditioningMask, Manipulations, VqModule,
};
use crate::networks::GenerationMode;
use crate::signal::{Envelope, PitchTrack, Waveform};

/// Default curve steepness for both dynamics curves.
pub const DEFAULT_THETA: f64 = 3.0;

/// Multiplies voiced frames by `2^(semitones/12)`; unvoiced frames stay 0.
pub fn shift_pitch(track: &PitchTrack, semitones: f64) -> Result<PitchTrack> {
    if !semitones.is_finite() {
        return Err(Error::invalid("semitone shift must be finite"));
    }
    let ratio = 2f64.powf(semitones / 12.0);
    PitchTrack::new(
        track.f0_hz.iter().map(|&f| f * ratio).collect(),
        track.hop_s,
    )
}

fn check_peak(env: &Envelope, a_max: f64) -> Result<()> {
    if !(a_max > 0.0) || a_max < env.max() {
        return Err(Error::invalid(format!(
            "a_max {a_max} must be positive and at least the envelope maximum {}",
            env.max()
        )));
    }
    Ok(())
}

/// `A_max (e^{θA/A_max} − 1) / (e^θ − 1)`: lowers mid-range amplitudes
/// while fixing 0 and `A_max`.
pub fn expand_envelope(env: &Envelope, theta: f64, a_max: f64) -> Result<Envelope> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::invalid("expansion theta must be positive"));
    }
    check_peak(env, a_max)?;
    let denom = theta.exp_m1();
    let values = env
        .values
        .iter()
        .map(|&a| {
            if a == a_max {
                a_max
            } else {
                (a_max * (theta * a / a_max).exp_m1() / denom).clamp(0.0, a_max)
            }
        })
        .collect();
    env.with_values(values)
}

/// Amplitude below which the compression curve is clamped to zero.
pub fn compression_threshold(theta: f64, a_max: f64) -> f64 {
    a_max * (-1.0f64).exp() / theta
}

/// `A_max (ln(θA/A_max) + 1) / (ln θ + 1)`, clamped below at 0: raises
/// mid-range amplitudes while fixing `A_max`.
pub fn compress_envelope(env: &Envelope, theta: f64, a_max: f64) -> Result<Envelope> {
    if !(theta > 1.0) || !theta.is_finite() {
        return Err(Error::invalid("compression theta must exceed 1"));
    }
    check_peak(env, a_max)?;
    let denom = theta.ln() + 1.0;
    let values = env
        .values
        .iter()
        .map(|&a| {
            if a == a_max {
                a_max
            } else if a <= 0.0 {
                0.0
            } else {
                (a_max * ((theta * a / a_max).ln() + 1.0) / denom).clamp(0.0, a_max)
            }
        })
        .collect();
    env.with_values(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsMode {
    Identity,
    Expand,
    Compress,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsCurveSpec {
    pub mode: DynamicsMode,
    pub theta: f64,
    /// Overrides the per-utterance envelope maximum.
    pub a_max: Option<f64>,
}

impl Default for DynamicsCurveSpec {
    fn default() -> Self {
        Self {
            mode: DynamicsMode::Identity,
            theta: DEFAULT_THETA,
            a_max: None,
        }
    }
}

impl DynamicsCurveSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            DynamicsMode::Identity => Ok(()),
            DynamicsMode::Expand if self.theta > 0.0 => Ok(()),
            DynamicsMode::Compress if self.theta > 1.0 => Ok(()),
            _ => Err(Error::invalid(format!(
                "theta {} invalid for {:?} (expand needs > 0, compress > 1)",
                self.theta, self.mode
            ))),
        }
    }

    pub fn apply(&self, env: &Envelope) -> Result<Envelope> {
        self.validate()?;
        let a_max = self.a_max.unwrap_or_else(|| env.max());
        match self.mode {
            DynamicsMode::Identity => Ok(env.clone()),
            // an all-zero envelope has nothing to remap
            _ if a_max <= 0.0 => Ok(env.clone()),
            DynamicsMode::Expand => expand_envelope(env, self.theta, a_max),
            DynamicsMode::Compress => compress_envelope(env, self.theta, a_max),
        }
    }
}

/// Parses `identity`, `expand[:theta]` or `compress[:theta]`.
impl FromStr for DynamicsCurveSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mode, theta) = match s.split_once(':') {
            Some((m, t)) => (
                m,
                t.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("dynamics theta {t:?} is not a number")))?,
            ),
            None => (s, DEFAULT_THETA),
        };
        let mode = match mode {
            "identity" => DynamicsMode::Identity,
            "expand" => DynamicsMode::Expand,
            "compress" => DynamicsMode::Compress,
            other => return Err(Error::invalid(format!("unknown dynamics mode {other:?}"))),
        };
        let spec = Self {
            mode,
            theta,
            a_max: None,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionRequest {
    pub target_singer: Option<u32>,
    pub semitone_shift: f64,
    pub dynamics: DynamicsCurveSpec,
}

impl Default for ConversionRequest {
    fn default() -> Self {
        Self {
            target_singer: None,
            semitone_shift: 0.0,
            dynamics: DynamicsCurveSpec::default(),
        }
    }
}

impl ConversionRequest {
    pub fn is_pass_through(&self) -> bool {
        self.target_singer.is_none()
            && self.semitone_shift == 0.0
            && self.dynamics.mode == DynamicsMode::Identity
    }

    pub fn pitch_ratio(&self) -> f64 {
        2f64.powf(self.semitone_shift / 12.0)
    }
}

/// Extracts f0 and envelope from `w`, applies the requested pitch shift and
/// dynamics curve, swaps the singer if asked and runs the hierarchy.
pub fn convert(
    bottom: &VqModule,
    upper: &VqModule,
    w: &Waveform,
    source_singer: u32,
    req: &ConversionRequest,
    mode: GenerationMode,
    seed: u64,
) -> Result<ChainOutput> {
    if let Some(t) = req.target_singer {
        bottom.singers.lookup(t)?;
        upper.singers.lookup(t)?;
    }
    let features = extract_features(w)?;
    let features = crate::hierarchy::Features {
        f0: shift_pitch(&features.f0, req.semitone_shift)?,
        envelope: req.dynamics.apply(&features.envelope)?,
    };
    let manip = Manipulations {
        target_singer: req.target_singer,
        features: Some(features),
    };
    infer_chain(
        bottom,
        upper,
        w,
        source_singer,
        &manip,
        &ConditioningMask::default(),
        mode,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(v: Vec<f64>) -> Envelope {
        Envelope::new(v, 0.02, 0.04).unwrap()
    }

    #[test]
    fn semitone_examples() {
        let t = PitchTrack::new(vec![440.0, 0.0, 220.0], 0.005).unwrap();
        let up = shift_pitch(&t, 1.0).unwrap();
        assert!((up.f0_hz[0] - 466.16).abs() < 1e-2);
        assert_eq!(up.f0_hz[1], 0.0);
        assert_eq!(shift_pitch(&t, 0.0).unwrap(), t);
        assert_eq!(
            shift_pitch(&t, 12.0).unwrap().f0_hz,
            vec![880.0, 0.0, 440.0]
        );
    }

    #[test]
    fn curve_examples() {
        let e = expand_envelope(&env(vec![0.0, 0.5, 1.0]), 2.0, 1.0).unwrap();
        assert_eq!(e.values[0], 0.0);
        assert_eq!(e.values[2], 1.0);
        let expect = (1f64.exp() - 1.0) / (2f64.exp() - 1.0);
        assert!((e.values[1] - expect).abs() < 1e-12);
        assert!((e.values[1] - 0.26894).abs() < 1e-5);

        let c = compress_envelope(&env(vec![0.0, 0.5, 1.0]), std::f64::consts::E, 1.0).unwrap();
        assert_eq!(c.values[0], 0.0);
        assert_eq!(c.values[2], 1.0);
        assert!((c.values[1] - (0.5f64.ln() + 2.0) / 2.0).abs() < 1e-12);
        assert!((c.values[1] - 0.6534).abs() < 1e-4);
    }

    #[test]
    fn curve_errors() {
        let e = env(vec![0.2, 0.8]);
        assert!(expand_envelope(&e, 3.0, 0.5).is_err());
        assert!(compress_envelope(&e, 1.0, 1.0).is_err());
        assert!(expand_envelope(&e, 0.0, 1.0).is_err());
    }

    #[test]
    fn dynamics_parsing() {
        let d: DynamicsCurveSpec = "compress:3.0".parse().unwrap();
        assert_eq!((d.mode, d.theta), (DynamicsMode::Compress, 3.0));
        let d: DynamicsCurveSpec = "expand".parse().unwrap();
        assert_eq!((d.mode, d.theta), (DynamicsMode::Expand, DEFAULT_THETA));
        assert!("compress:0.5".parse::<DynamicsCurveSpec>().is_err());
        assert!("louder:2".parse::<DynamicsCurveSpec>().is_err());
        assert!((compression_threshold(3.0, 1.0) - (-1f64).exp() / 3.0).abs() < 1e-15);
    }
}
