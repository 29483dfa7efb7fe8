use super::Waveform;
use crate::error::{Error, Result};

pub const QUANT_LEVELS: usize = 256;
const MU: f64 = 255.0;

/// 8-bit μ-law codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MuLawSequence {
    codes: Vec<u8>,
    sample_rate_hz: u32,
}

impl MuLawSequence {
    pub fn new(codes: Vec<u8>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self {
            codes,
            sample_rate_hz,
        })
    }

    /// Accepts wider integers and rejects anything outside `0..=255`.
    pub fn from_codes(codes: &[i64], sample_rate_hz: u32) -> Result<Self> {
        let codes = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                u8::try_from(c).map_err(|_| {
                    Error::invalid(format!("code {c} at position {i} is outside 0..=255"))
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(codes, sample_rate_hz)
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Number of inputs that had to be clamped into `[-1, 1]` before companding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeStats {
    pub clamped: usize,
}

/// `sign(x) * ln(1 + 255|x|) / ln 256`, for `x` in `[-1, 1]`.
pub fn mu_law_compand(x: f64) -> f64 {
    x.signum() * (MU * x.abs()).ln_1p() / (1.0 + MU).ln()
}

/// Inverse of [`mu_law_compand`].
pub fn mu_law_expand(y: f64) -> f64 {
    y.signum() * ((1.0 + MU).powf(y.abs()) - 1.0) / MU
}

fn code_of(x: f64) -> u8 {
    let y = mu_law_compand(x);
    let bin = ((y + 1.0) * 0.5 * QUANT_LEVELS as f64).floor();
    bin.clamp(0.0, (QUANT_LEVELS - 1) as f64) as u8
}

/// Amplitude-domain edges `[lo, hi]` of the companding bin for `code`.
pub fn bin_edges(code: u8) -> (f64, f64) {
    let step = 2.0 / QUANT_LEVELS as f64;
    let lo = -1.0 + code as f64 * step;
    (mu_law_expand(lo), mu_law_expand(lo + step))
}

pub fn mu_law_encode(w: &Waveform) -> (MuLawSequence, EncodeStats) {
    let mut stats = EncodeStats::default();
    let codes = w
        .samples()
        .iter()
        .map(|&x| {
            let c = x.clamp(-1.0, 1.0);
            if c != x {
                stats.clamped += 1;
            }
            code_of(c)
        })
        .collect();
    (
        MuLawSequence {
            codes,
            sample_rate_hz: w.sample_rate_hz(),
        },
        stats,
    )
}

/// Amplitude at the midpoint of a code's bin.
pub fn decode_code(code: u8) -> f64 {
    DECODE_TABLE.with(|t| t[code as usize])
}

thread_local! {
    static DECODE_TABLE: [f64; QUANT_LEVELS] = {
        let mut t = [0.0; QUANT_LEVELS];
        for (c, v) in t.iter_mut().enumerate() {
            let (lo, hi) = bin_edges(c as u8);
            *v = 0.5 * (lo + hi);
        }
        t
    };
}

pub fn mu_law_decode(m: &MuLawSequence) -> Result<Waveform> {
    if m.is_empty() {
        return Err(Error::invalid("cannot decode an empty code sequence"));
    }
    let samples = m.codes.iter().map(|&c| decode_code(c)).collect();
    Waveform::new(samples, m.sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wf(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    #[test]
    fn extremes_map_to_outer_bins() {
        let (m, _) = mu_law_encode(&wf(vec![1.0, -1.0, 0.0]));
        assert_eq!(m.codes(), &[255, 0, 128]);
    }

    #[test]
    fn zero_round_trips_within_one_bin() {
        let (m, _) = mu_law_encode(&wf(vec![0.0]));
        let back = mu_law_decode(&m).unwrap();
        let (lo, hi) = bin_edges(m.codes()[0]);
        assert!(back.samples()[0].abs() <= hi - lo);
    }

    #[test]
    fn top_code_decodes_to_top_bin_center() {
        let (lo, hi) = bin_edges(255);
        assert_eq!(hi, 1.0);
        assert_eq!(decode_code(255), 0.5 * (lo + hi));
        assert_eq!(decode_code(0), -decode_code(255));
    }

    #[test]
    fn out_of_range_codes_rejected() {
        assert!(MuLawSequence::from_codes(&[0, 255, 256], 8000).is_err());
        assert!(MuLawSequence::from_codes(&[-1], 8000).is_err());
        assert!(MuLawSequence::from_codes(&[3, 200], 8000).is_ok());
    }

    #[test]
    fn clamping_is_counted() {
        let w = Waveform::clamped(vec![2.0, -3.0, 0.5], 8000).unwrap();
        let (_, stats) = mu_law_encode(&w);
        // Waveform::clamped already clipped; the encoder saw nothing to clamp.
        assert_eq!(stats.clamped, 0);
        assert_eq!(w.samples(), &[1.0, -1.0, 0.5]);
    }

    /// Per-code error maxima from the bin edges: the decoded value is the bin
    /// midpoint, so the worst error inside a bin is its half width.
    #[test]
    fn per_code_error_maxima_match_half_widths() {
        for code in 0..=255u8 {
            let (lo, hi) = bin_edges(code);
            let center = decode_code(code);
            let worst = (center - lo).max(hi - center);
            assert!((worst - 0.5 * (hi - lo)).abs() < 1e-15);
            // interior points of the bin encode back to the same code
            for f in [0.001, 0.25, 0.5, 0.75, 0.999] {
                let x = lo + f * (hi - lo);
                assert_eq!(code_of(x), code, "x={x}");
            }
        }
    }

    #[test]
    fn symmetric_companding_off_edges() {
        for i in 1..2000 {
            let x = (i as f64 + 0.37) / 2000.0;
            if x > 1.0 {
                continue;
            }
            assert_eq!(code_of(x) as u16 + code_of(-x) as u16, 255, "x={x}");
        }
    }
}
