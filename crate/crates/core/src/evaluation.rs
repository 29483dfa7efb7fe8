//! Objective metrics, codebook analytics, the upper-module ablation driver
//! and plain-text / SVG report output.

use std::fmt::Write as _;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{
    extract_features, CondOverride, ConditioningMask, Features, Scale, Utterance, VqModule,
};
use crate::networks::GenerationMode;
use crate::quantizer::usage_histogram;
use crate::signal::{
    extract_envelope, resample, Envelope, PitchTrack, Waveform, ENVELOPE_HOP_S, ENVELOPE_WINDOW_S,
};

/// Frames voiced in both tracks, over their common prefix.
fn joint_voiced<'a>(
    reference: &'a PitchTrack,
    rec: &'a PitchTrack,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    reference
        .f0_hz
        .iter()
        .zip(&rec.f0_hz)
        .filter(|(r, o)| **r > 0.0 && **o > 0.0)
        .map(|(r, o)| (*r, *o))
}

/// Mean absolute f0 difference (Hz) over frames voiced in both tracks.
pub fn pitch_mae(reference: &PitchTrack, rec: &PitchTrack) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, o) in joint_voiced(reference, rec) {
        sum += (r - o).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(format!(
            "no jointly voiced frames ({} reference / {} reconstructed voiced)",
            reference.voiced_count(),
            rec.voiced_count()
        )));
    }
    Ok(sum / n as f64)
}

/// Mean relative f0 error of one pair over jointly voiced frames (a ratio).
fn relative_error(reference: &PitchTrack, rec: &PitchTrack) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, o) in joint_voiced(reference, rec) {
        sum += (r - o).abs() / r;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no jointly voiced frames"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mae_hz: f64,
    pub maer_percent: f64,
    pub voiced_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_hz: f64,
    pub maer_percent: f64,
    pub n_samples: usize,
    pub per_sample: Vec<SampleMetrics>,
}

/// Per-sample frame-mean relative error, averaged over samples, in percent.
pub fn maer(refs: &[PitchTrack], recs: &[PitchTrack]) -> Result<f64> {
    Ok(metrics(refs, recs)?.maer_percent)
}

pub fn metrics(refs: &[PitchTrack], recs: &[PitchTrack]) -> Result<MetricsReport> {
    if refs.is_empty() || refs.len() != recs.len() {
        return Err(Error::invalid(format!(
            "need paired, nonempty track lists (got {} and {})",
            refs.len(),
            recs.len()
        )));
    }
    let per_sample = refs
        .iter()
        .zip(recs)
        .map(|(r, o)| {
            Ok(SampleMetrics {
                mae_hz: pitch_mae(r, o)?,
                maer_percent: 100.0 * relative_error(r, o)?,
                voiced_frames: joint_voiced(r, o).count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = per_sample.len() as f64;
    Ok(MetricsReport {
        mae_hz: per_sample.iter().map(|s| s.mae_hz).sum::<f64>() / m,
        maer_percent: per_sample.iter().map(|s| s.maer_percent).sum::<f64>() / m,
        n_samples: per_sample.len(),
        per_sample,
    })
}

/// Pearson correlation over the common prefix of two sequences.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return Err(Error::invalid(
            "correlation needs at least two common values",
        ));
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (va * vb).sqrt())
}

/// Correlation between the envelope of `w` and `target`.
pub fn envelope_correlation(w: &Waveform, target: &Envelope) -> Result<f64> {
    let env = extract_envelope(w, target.window_s, target.hop_s)?;
    correlation(&env.values, &target.values)
}

pub const SPECTRAL_FRAME: usize = 256;
pub const SPECTRAL_HOP: usize = 128;

/// Log-spectral distance (dB): per-frame RMS difference of Hann-windowed
/// log power spectra, averaged over frames. `b` is resampled to `a`'s rate.
pub fn spectral_distance(a: &Waveform, b: &Waveform) -> Result<f64> {
    let b = if b.sample_rate_hz() == a.sample_rate_hz() {
        b.clone()
    } else {
        resample(b, a.sample_rate_hz())?
    };
    let n = a.len().min(b.len());
    if n < SPECTRAL_FRAME {
        return Err(Error::invalid("signals shorter than one spectral frame"));
    }
    let fft = FftPlanner::new().plan_fft_forward(SPECTRAL_FRAME);
    let window: Vec<f64> = (0..SPECTRAL_FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / SPECTRAL_FRAME as f64).cos())
        .collect();
    let log_power = |x: &[f64]| -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = x
            .iter()
            .zip(&window)
            .map(|(s, w)| Complex::new(s * w, 0.0))
            .collect();
        fft.process(&mut buf);
        buf[..SPECTRAL_FRAME / 2 + 1]
            .iter()
            .map(|c| 10.0 * (c.norm_sqr() + 1e-10).log10())
            .collect()
    };
    let (mut total, mut frames) = (0.0, 0usize);
    let mut start = 0;
    while start + SPECTRAL_FRAME <= n {
        let pa = log_power(&a.samples()[start..start + SPECTRAL_FRAME]);
        let pb = log_power(&b.samples()[start..start + SPECTRAL_FRAME]);
        let msd = pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / pa.len() as f64;
        total += msd.sqrt();
        frames += 1;
        start += SPECTRAL_HOP;
    }
    Ok(total / frames as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub scale: Scale,
    pub codebook_size: usize,
    pub used_count: usize,
    /// `(code, frequency)`, most frequent first.
    pub frequencies: Vec<(usize, f64)>,
}

/// Encodes every utterance and aggregates code usage.
pub fn codebook_report(module: &VqModule, corpus: &[Utterance]) -> Result<UsageReport> {
    if corpus.is_empty() {
        return Err(Error::Corpus("usage report needs a nonempty corpus".into()));
    }
    let mut codes = Vec::new();
    for u in corpus {
        let audio = if u.audio.sample_rate_hz() == module.spec.sample_rate_hz {
            u.audio.clone()
        } else {
            resample(&u.audio, module.spec.sample_rate_hz)?
        };
        codes.extend(module.encode(&audio)?.0);
    }
    let k = module.codebook.size();
    let (freq, used) = usage_histogram(&codes, k)?;
    let mut frequencies: Vec<(usize, f64)> = freq.into_iter().enumerate().collect();
    frequencies.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(UsageReport {
        scale: module.spec.scale,
        codebook_size: k,
        used_count: used,
        frequencies,
    })
}

/// Degradations of the upper module compared against the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// Multiplicative noise on f0/envelope and redrawn content codes.
    NoisyConditioning,
    /// The upper module receives the source singer's embedding.
    SourceSinger,
    /// A separately trained upper module conditioned on the bottom output only.
    NoEmbeddings,
}

impl AblationVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::NoisyConditioning => "noisy_conditioning",
            AblationVariant::SourceSinger => "source_singer",
            AblationVariant::NoEmbeddings => "no_embeddings",
        }
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noisy_conditioning" => Ok(AblationVariant::NoisyConditioning),
            "source_singer" => Ok(AblationVariant::SourceSinger),
            "no_embeddings" => Ok(AblationVariant::NoEmbeddings),
            other => Err(Error::invalid(format!(
                "unknown ablation variant {other:?} (expected noisy_conditioning, source_singer or no_embeddings)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub noise_level: f64,
    /// Singer to convert every utterance to; `None` reconstructs.
    pub target_singer: Option<u32>,
    pub mode: GenerationMode,
    pub seed: u64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            noise_level: 0.2,
            target_singer: None,
            mode: GenerationMode::Sample,
            seed: 0,
        }
    }
}

/// Objective numbers for one utterance under one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputScores {
    pub maer_percent: f64,
    pub envelope_correlation: f64,
    pub spectral_distance_db: f64,
}

#[derive(Debug, Clone)]
pub struct AblationSample {
    pub name: String,
    pub pipeline: Waveform,
    pub variant: Waveform,
    pub pipeline_scores: OutputScores,
    pub variant_scores: OutputScores,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub variant: AblationVariant,
    pub samples: Vec<AblationSample>,
}

impl AblationReport {
    pub fn mean(&self, f: impl Fn(&OutputScores) -> f64, variant: bool) -> f64 {
        let vals: Vec<f64> = self
            .samples
            .iter()
            .map(|s| {
                f(if variant {
                    &s.variant_scores
                } else {
                    &s.pipeline_scores
                })
            })
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

/// Scores `output` against the requested `features` and the ground-truth
/// audio `reference`.
pub fn score_output(
    output: &Waveform,
    features: &Features,
    reference: &Waveform,
) -> Result<OutputScores> {
    let got = extract_features(output)?;
    let maer_percent = maer(
        std::slice::from_ref(&features.f0),
        std::slice::from_ref(&got.f0),
    )
    .unwrap_or(100.0);
    Ok(OutputScores {
        maer_percent,
        envelope_correlation: correlation(&got.envelope.values, &features.envelope.values)?,
        spectral_distance_db: spectral_distance(reference, output)?,
    })
}

/// Runs the pipeline and one upper-module degradation on every utterance.
/// Both systems share the same bottom-module output.
pub fn run_ablation(
    bottom: &VqModule,
    upper: &VqModule,
    low_res_only_upper: Option<&VqModule>,
    corpus: &[Utterance],
    variant: AblationVariant,
    opts: &AblationOptions,
) -> Result<AblationReport> {
    if corpus.is_empty() {
        return Err(Error::Corpus("ablation needs a nonempty corpus".into()));
    }
    let variant_upper = match variant {
        AblationVariant::NoEmbeddings => low_res_only_upper.ok_or_else(|| {
            Error::invalid("the no_embeddings variant needs an upper module trained on low-resolution audio only")
        })?,
        _ => upper,
    };
    let mut samples = Vec::with_capacity(corpus.len());
    for u in corpus {
        let features = extract_features(&u.audio)?;
        let base = CondOverride {
            singer: opts.target_singer,
            features: Some(features.clone()),
            mode: opts.mode,
            seed: opts.seed,
            ..Default::default()
        };
        let low = bottom.reconstruct(&u.audio, u.singer, &base)?;
        let pipeline_ov = CondOverride {
            low_res: Some(low.clone()),
            ..base.clone()
        };
        let pipeline = upper.reconstruct(&u.audio, u.singer, &pipeline_ov)?;
        let variant_ov = match variant {
            AblationVariant::NoisyConditioning => CondOverride {
                mask: ConditioningMask {
                    noise_level: opts.noise_level,
                    ..Default::default()
                },
                ..pipeline_ov.clone()
            },
            AblationVariant::SourceSinger => CondOverride {
                singer: None,
                ..pipeline_ov.clone()
            },
            AblationVariant::NoEmbeddings => pipeline_ov.clone(),
        };
        let variant_out = variant_upper.reconstruct(&u.audio, u.singer, &variant_ov)?;
        let reference = resample_to(&u.audio, upper.spec.sample_rate_hz)?;
        samples.push(AblationSample {
            name: u.name.clone(),
            pipeline_scores: score_output(&pipeline, &features, &reference)?,
            variant_scores: score_output(&variant_out, &features, &reference)?,
            pipeline,
            variant: variant_out,
        });
    }
    Ok(AblationReport { variant, samples })
}

fn resample_to(w: &Waveform, rate: u32) -> Result<Waveform> {
    if w.sample_rate_hz() == rate {
        Ok(w.clone())
    } else {
        resample(w, rate)
    }
}

/// Envelope of `w` with the standard analysis window.
pub fn standard_envelope(w: &Waveform) -> Result<Envelope> {
    extract_envelope(w, ENVELOPE_WINDOW_S, ENVELOPE_HOP_S)
}

/// `key = value` lines; the format of every report file.
#[derive(Debug, Clone, Default)]
pub struct KeyValueReport {
    lines: Vec<(String, String)>,
}

impl KeyValueReport {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.lines.push((key.into(), value.to_string()));
        self
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

impl MetricsReport {
    pub fn to_key_value(&self) -> KeyValueReport {
        let mut r = KeyValueReport::default();
        r.push("mae_hz", format!("{:.6}", self.mae_hz))
            .push("maer_percent", format!("{:.6}", self.maer_percent))
            .push("n_samples", self.n_samples);
        for (i, s) in self.per_sample.iter().enumerate() {
            r.push(format!("sample.{i}.mae_hz"), format!("{:.6}", s.mae_hz))
                .push(
                    format!("sample.{i}.maer_percent"),
                    format!("{:.6}", s.maer_percent),
                )
                .push(format!("sample.{i}.voiced_frames"), s.voiced_frames);
        }
        r
    }
}

impl UsageReport {
    pub fn to_key_value(&self) -> KeyValueReport {
        let mut r = KeyValueReport::default();
        r.push("scale", self.scale.as_str())
            .push("codebook_size", self.codebook_size)
            .push("used_count", self.used_count);
        for (code, f) in self.frequencies.iter().filter(|(_, f)| *f > 0.0) {
            r.push(format!("code.{code}"), format!("{f:.6}"));
        }
        r
    }
}

impl AblationReport {
    pub fn to_key_value(&self) -> KeyValueReport {
        let mut r = KeyValueReport::default();
        r.push("variant", self.variant.as_str())
            .push("n_samples", self.samples.len());
        type Getter = fn(&OutputScores) -> f64;
        let fields: [(&str, Getter); 3] = [
            ("maer_percent", |s| s.maer_percent),
            ("envelope_correlation", |s| s.envelope_correlation),
            ("spectral_distance_db", |s| s.spectral_distance_db),
        ];
        for (name, f) in fields {
            let (p, v) = (self.mean(f, false), self.mean(f, true));
            r.push(format!("pipeline.{name}"), format!("{p:.6}"))
                .push(format!("variant.{name}"), format!("{v:.6}"))
                .push(format!("delta.{name}"), format!("{:.6}", v - p));
        }
        for s in &self.samples {
            for (name, f) in fields {
                r.push(
                    format!("{}.pipeline.{name}", s.name),
                    format!("{:.6}", f(&s.pipeline_scores)),
                )
                .push(
                    format!("{}.variant.{name}", s.name),
                    format!("{:.6}", f(&s.variant_scores)),
                );
            }
        }
        r
    }
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 320.0;
const MARGIN: f64 = 40.0;

fn svg_frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{MARGIN}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{b}\" stroke=\"black\"/>\n{body}</svg>\n",
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN,
    )
}

/// Overlaid f0 contours (unvoiced frames break the line).
pub fn f0_plot_svg(title: &str, tracks: &[(&str, &PitchTrack)]) -> String {
    const COLORS: [&str; 4] = ["black", "crimson", "royalblue", "darkgreen"];
    let n = tracks
        .iter()
        .map(|(_, t)| t.len())
        .max()
        .unwrap_or(1)
        .max(2);
    let fmax = tracks
        .iter()
        .flat_map(|(_, t)| t.f0_hz.iter().copied())
        .fold(1.0, f64::max)
        * 1.1;
    let (w, h) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let mut body = String::new();
    for (k, (label, t)) in tracks.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, &f) in t.f0_hz.iter().enumerate() {
            if f <= 0.0 {
                pen_down = false;
                continue;
            }
            let x = MARGIN + w * i as f64 / (n - 1) as f64;
            let y = SVG_H - MARGIN - h * f / fmax;
            let _ = write!(d, "{}{x:.1},{y:.1} ", if pen_down { "L" } else { "M" });
            pen_down = true;
        }
        let _ = writeln!(
            body,
            "<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>"
        );
        let _ = writeln!(
            body,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{label}</text>",
            SVG_W - MARGIN - 120.0,
            MARGIN + 16.0 * k as f64
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"4\" y=\"{MARGIN}\" font-family=\"sans-serif\" font-size=\"10\">{fmax:.0} Hz</text>"
    );
    svg_frame(title, &body)
}

/// Bar chart of code frequencies, most frequent first.
pub fn usage_plot_svg(title: &str, report: &UsageReport) -> String {
    let (w, h) = (SVG_W - 2.0 * MARGIN, SVG_H - 2.0 * MARGIN);
    let k = report.frequencies.len().max(1);
    let top = report.frequencies.first().map_or(1.0, |f| f.1).max(1e-12);
    let bar = w / k as f64;
    let mut body = String::new();
    for (i, (_, f)) in report.frequencies.iter().enumerate() {
        let bh = h * f / top;
        let _ = writeln!(
            body,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"steelblue\"/>",
            MARGIN + bar * i as f64,
            SVG_H - MARGIN - bh,
            (bar * 0.9).max(0.5)
        );
    }
    svg_frame(title, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(v: Vec<f64>) -> PitchTrack {
        PitchTrack::new(v, 0.005).unwrap()
    }

    #[test]
    fn worked_example() {
        let a = track(vec![440.0; 20]);
        let b = track(vec![444.0; 20]);
        assert!((pitch_mae(&a, &b).unwrap() - 4.0).abs() < 1e-12);
        let m = maer(&[a.clone()], &[b]).unwrap();
        assert!((m - 100.0 * 4.0 / 440.0).abs() < 1e-12);
        assert!((m - 0.909).abs() < 1e-3);
        assert_eq!(maer(&[a.clone()], &[a]).unwrap(), 0.0);
    }

    #[test]
    fn unvoiced_frames_are_skipped() {
        let a = track(vec![0.0, 200.0, 200.0, 300.0]);
        let b = track(vec![100.0, 0.0, 210.0, 270.0]);
        assert!((pitch_mae(&a, &b).unwrap() - 20.0).abs() < 1e-12);
        assert!(pitch_mae(&track(vec![0.0; 3]), &track(vec![1.0; 3])).is_err());
        assert!(maer(&[], &[]).is_err());
    }

    #[test]
    fn scale_awareness() {
        let a = track(vec![200.0, 310.0, 415.0]);
        let b = track(vec![190.0, 330.0, 400.0]);
        let c = 2.5;
        let sa = track(a.f0_hz.iter().map(|f| f * c).collect());
        let sb = track(b.f0_hz.iter().map(|f| f * c).collect());
        assert!(
            (maer(&[a.clone()], &[b.clone()]).unwrap()
                - maer(&[sa.clone()], &[sb.clone()]).unwrap())
            .abs()
                < 1e-12
        );
        assert!((pitch_mae(&sa, &sb).unwrap() - c * pitch_mae(&a, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn spectral_distance_of_identical_signals_is_zero() {
        // white noise keeps every bin well above the log floor
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let w = Waveform::new((0..1024).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap();
        assert_eq!(spectral_distance(&w, &w).unwrap(), 0.0);
        let quiet = Waveform::new(w.samples().iter().map(|v| v * 0.1).collect(), 8000).unwrap();
        assert!((spectral_distance(&w, &quiet).unwrap() - 20.0).abs() < 1e-3);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            AblationVariant::NoisyConditioning,
            AblationVariant::SourceSinger,
            AblationVariant::NoEmbeddings,
        ] {
            assert_eq!(v.as_str().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("louder".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn key_value_rendering() {
        let mut r = KeyValueReport::default();
        r.push("a", 1).push("b", "x");
        assert_eq!(r.render(), "a = 1\nb = x\n");
        assert_eq!(r.get("b"), Some("x"));
    }
}
