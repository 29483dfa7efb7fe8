//! Synthetic multi-singer corpus: harmonic "songs" with known f0 and
//! envelope, written as WAV files plus JSON sidecars and a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::Utterance;
use crate::signal::wav::{read_wav, write_wav};
use crate::signal::{
    synth_tone, Envelope, PitchTrack, Timbre, ENVELOPE_HOP_S, ENVELOPE_WINDOW_S, F0_HOP_S,
};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub singers: usize,
    pub songs_per_singer: usize,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    /// Notes are drawn uniformly from this MIDI range (inclusive).
    pub midi_low: u8,
    pub midi_high: u8,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            singers: 4,
            songs_per_singer: 4,
            duration_s: 1.0,
            sample_rate_hz: 8000,
            midi_low: 53,
            midi_high: 67,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.singers == 0 || self.songs_per_singer == 0 || !(self.duration_s >= 0.1) {
            return Err(Error::Config(
                "corpus needs singers, songs and at least 0.1 s per song".into(),
            ));
        }
        if self.midi_low > self.midi_high || self.sample_rate_hz < 2000 {
            return Err(Error::Config("invalid MIDI range or sample rate".into()));
        }
        let top_hz = midi_to_hz(self.midi_high as f64);
        if top_hz >= self.sample_rate_hz as f64 / 2.0 {
            return Err(Error::Config(
                "highest note exceeds the Nyquist frequency".into(),
            ));
        }
        Ok(())
    }
}

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

/// Ground truth of one synthetic song.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub f0: PitchTrack,
    pub envelope: Envelope,
}

/// A melody of held notes (150–300 ms each) under a slowly varying envelope
/// interpolated between knots spaced roughly every 100 ms.
pub fn compose(rng: &mut impl Rng, cfg: &CorpusConfig) -> Result<Score> {
    let frames = (cfg.duration_s / F0_HOP_S).round() as usize;
    let mut f0 = Vec::with_capacity(frames);
    while f0.len() < frames {
        let len = rng.gen_range(30..60);
        let hz = midi_to_hz(rng.gen_range(cfg.midi_low..=cfg.midi_high) as f64);
        f0.extend(std::iter::repeat(hz).take(len));
    }
    f0.truncate(frames);
    let env_frames = ((frames as f64 * F0_HOP_S) / ENVELOPE_HOP_S).round() as usize;
    let knots: Vec<f64> = (0..env_frames / 5 + 2)
        .map(|_| rng.gen_range(0.1..0.9))
        .collect();
    let envelope = (0..env_frames)
        .map(|i| {
            let pos = i as f64 * (knots.len() - 1) as f64 / (env_frames.max(2) - 1) as f64;
            let k = (pos.floor() as usize).min(knots.len() - 2);
            let frac = pos - k as f64;
            knots[k] * (1.0 - frac) + knots[k + 1] * frac
        })
        .collect();
    Ok(Score {
        f0: PitchTrack::new(f0, F0_HOP_S)?,
        envelope: Envelope::new(envelope, ENVELOPE_HOP_S, ENVELOPE_WINDOW_S)?,
    })
}

/// One generated utterance with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub utterance: Utterance,
    pub score: Score,
}

/// Generates `singers × songs_per_singer` utterances. Singer `s` sings with
/// [`Timbre::preset`]`(s)`; each singer gets its own melodies.
pub fn synthesize(cfg: &CorpusConfig) -> Result<Vec<SynthUtterance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.singers * cfg.songs_per_singer);
    for s in 0..cfg.singers {
        for g in 0..cfg.songs_per_singer {
            let score = compose(&mut rng, cfg)?;
            let audio = synth_tone(
                &score.f0,
                &score.envelope,
                &Timbre::preset(s),
                cfg.sample_rate_hz,
            )?;
            out.push(SynthUtterance {
                utterance: Utterance {
                    name: format!("singer{s}_song{g}"),
                    singer: s as u32,
                    audio,
                },
                score,
            });
        }
    }
    Ok(out)
}

/// Per-utterance ground-truth sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub singer: u32,
    pub f0_hop_s: f64,
    pub f0_hz: Vec<f64>,
    pub envelope_hop_s: f64,
    pub envelope_window_s: f64,
    pub envelope: Vec<f64>,
}

impl Sidecar {
    pub fn score(&self) -> Result<Score> {
        Ok(Score {
            f0: PitchTrack::new(self.f0_hz.clone(), self.f0_hop_s)?,
            envelope: Envelope::new(
                self.envelope.clone(),
                self.envelope_hop_s,
                self.envelope_window_s,
            )?,
        })
    }
}

/// A manifest row: utterance name, singer id, WAV and sidecar paths relative
/// to the corpus directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub singer: u32,
    pub wav: String,
    pub sidecar: String,
}

/// Writes a synthetic corpus to `dir`. A non-empty `dir` is only
/// overwritten with `force`.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig, force: bool) -> Result<Vec<ManifestEntry>> {
    if dir.exists() {
        let nonempty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(Error::Corpus(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let utts = synthesize(cfg)?;
    let mut manifest = String::from("name\tsinger\twav\tsidecar\n");
    let mut entries = Vec::with_capacity(utts.len());
    for u in &utts {
        let name = &u.utterance.name;
        let entry = ManifestEntry {
            name: name.clone(),
            singer: u.utterance.singer,
            wav: format!("{name}.wav"),
            sidecar: format!("{name}.json"),
        };
        write_wav(&dir.join(&entry.wav), &u.utterance.audio)?;
        let sidecar = Sidecar {
            singer: entry.singer,
            f0_hop_s: u.score.f0.hop_s,
            f0_hz: u.score.f0.f0_hz.clone(),
            envelope_hop_s: u.score.envelope.hop_s,
            envelope_window_s: u.score.envelope.window_s,
            envelope: u.score.envelope.values.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        let path = dir.join(&entry.sidecar);
        fs::write(&path, json).map_err(|e| Error::io(path, e))?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            entry.name, entry.singer, entry.wav, entry.sidecar
        ));
        entries.push(entry);
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Corpus(format!("{}: malformed line {}", path.display(), n + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        entries.push(ManifestEntry {
            name: cols[0].to_string(),
            singer: cols[1].parse().map_err(|_| bad())?,
            wav: cols[2].to_string(),
            sidecar: cols[3].to_string(),
        });
    }
    if entries.is_empty() {
        return Err(Error::Corpus(format!(
            "{} lists no utterances",
            path.display()
        )));
    }
    Ok(entries)
}

/// A corpus loaded from disk, with ground truth when sidecars are present.
#[derive(Debug, Clone)]
pub struct LoadedUtterance {
    pub utterance: Utterance,
    pub score: Option<Score>,
}

pub fn load_corpus(dir: &Path) -> Result<Vec<LoadedUtterance>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            let audio = read_wav(&dir.join(&e.wav))?;
            let side_path: PathBuf = dir.join(&e.sidecar);
            let score = if side_path.exists() {
                let text =
                    fs::read_to_string(&side_path).map_err(|err| Error::io(&side_path, err))?;
                let side: Sidecar = serde_json::from_str(&text)
                    .map_err(|err| Error::Corpus(format!("{}: {err}", side_path.display())))?;
                Some(side.score()?)
            } else {
                None
            };
            Ok(LoadedUtterance {
                utterance: Utterance {
                    name: e.name,
                    singer: e.singer,
                    audio,
                },
                score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_corpus_shape() {
        let utts = synthesize(&CorpusConfig::default()).unwrap();
        assert_eq!(utts.len(), 16);
        assert_eq!(utts.iter().filter(|u| u.utterance.singer == 3).count(), 4);
        for u in &utts {
            assert_eq!(u.utterance.audio.len(), 8000);
            assert!(u
                .score
                .f0
                .f0_hz
                .iter()
                .all(|&f| (170.0..400.0).contains(&f)));
        }
    }

    #[test]
    fn same_seed_same_audio() {
        let cfg = CorpusConfig {
            singers: 2,
            songs_per_singer: 1,
            ..Default::default()
        };
        let a = synthesize(&cfg).unwrap();
        let b = synthesize(&cfg).unwrap();
        assert_eq!(a[1].utterance.audio, b[1].utterance.audio);
    }
}
