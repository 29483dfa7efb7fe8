//! Per-scale VQ autoencoder modules: independent training and chained
//! low-to-high-rate inference.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{
    CondDims, CondStream, ConditioningBundle, ContentEncoder, DecoderSpec, EncoderSpec,
    FeatureEncoder, FeatureEncoderSpec, GenerationMode, SingerTable, WaveNetDecoder,
    F0_INPUT_SCALE_HZ,
};
use crate::nn::{Adam, Mat, Param, Parameterized};
use crate::quantizer::{quantize, quantize_backward, quantize_batch, Codebook};
use crate::signal::{
    extract_envelope, extract_f0, mu_law_decode, mu_law_encode, resample, Envelope, PitchConfig,
    PitchTrack, Waveform, ENVELOPE_HOP_S, ENVELOPE_WINDOW_S,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Bottom,
    Upper,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Bottom => "bottom",
            Scale::Upper => "upper",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom" => Ok(Scale::Bottom),
            "upper" => Ok(Scale::Upper),
            other => Err(Error::invalid(format!(
                "unknown scale {other:?} (expected bottom or upper)"
            ))),
        }
    }
}

/// Architecture of one module of the hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub scale: Scale,
    pub sample_rate_hz: u32,
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub codebook_size: usize,
    pub pitch: FeatureEncoderSpec,
    pub loudness: FeatureEncoderSpec,
    pub singer_dim: usize,
    /// Rate of the low-resolution audio the upper module is conditioned on;
    /// absent for the bottom module.
    pub low_res_rate_hz: Option<u32>,
}

impl ModuleSpec {
    pub fn uses_low_res_conditioning(&self) -> bool {
        self.low_res_rate_hz.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.in_rate_hz != self.sample_rate_hz {
            return Err(Error::Config(format!(
                "encoder rate {} differs from module rate {}",
                self.encoder.in_rate_hz, self.sample_rate_hz
            )));
        }
        if self.codebook_size == 0 || self.singer_dim == 0 {
            return Err(Error::Config(
                "codebook size and singer dimension must be positive".into(),
            ));
        }
        match (self.scale, self.low_res_rate_hz) {
            (Scale::Bottom, None) => Ok(()),
            (Scale::Upper, Some(r)) if r > 0 && r < self.sample_rate_hz => Ok(()),
            (Scale::Bottom, Some(_)) => Err(Error::Config(
                "the bottom module takes no low-resolution audio".into(),
            )),
            (Scale::Upper, _) => Err(Error::Config(
                "the upper module needs a low-resolution rate below its own".into(),
            )),
        }
    }

    /// Full-size architecture: `D_e = 512`, `K = 320`, `D_id = 128`, 30-layer decoder.
    pub fn full_size(scale: Scale, sample_rate_hz: u32, low_res_rate_hz: Option<u32>) -> Self {
        let n_blocks = match scale {
            Scale::Bottom => 6,
            Scale::Upper => 8,
        };
        let block_channels = (0..n_blocks).map(|i| (64usize << i).min(512)).collect();
        Self {
            scale,
            sample_rate_hz,
            encoder: EncoderSpec {
                n_blocks,
                in_rate_hz: sample_rate_hz,
                latent_dim: 512,
                block_channels,
            },
            decoder: DecoderSpec::default(),
            codebook_size: 320,
            pitch: FeatureEncoderSpec { out_dim: 10 },
            loudness: FeatureEncoderSpec { out_dim: 10 },
            singer_dim: 128,
            low_res_rate_hz,
        }
    }

    /// Miniature architecture used for the 4 kHz / 8 kHz toy hierarchy.
    pub fn toy(scale: Scale) -> Self {
        let (rate, low, n_blocks) = match scale {
            Scale::Bottom => (4000, None, 6),
            Scale::Upper => (8000, Some(4000), 8),
        };
        Self {
            scale,
            sample_rate_hz: rate,
            encoder: EncoderSpec {
                n_blocks,
                in_rate_hz: rate,
                latent_dim: 512,
                block_channels: (0..n_blocks).map(|i| if i < 2 { 8 } else { 16 }).collect(),
            },
            decoder: DecoderSpec {
                n_layers: 8,
                channels: 16,
                skip_channels: 32,
                dilation_cycle: vec![1, 2, 4, 8],
            },
            codebook_size: 32,
            pitch: FeatureEncoderSpec { out_dim: 10 },
            loudness: FeatureEncoderSpec { out_dim: 10 },
            singer_dim: 8,
            low_res_rate_hz: low,
        }
    }

    fn cond_dims(&self) -> CondDims {
        CondDims {
            content: self.encoder.latent_dim,
            pitch: self.pitch.out_dim,
            loudness: self.loudness.out_dim,
            singer: self.singer_dim,
            low_res: self.uses_low_res_conditioning(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Frame length in samples at the module's rate.
    pub frame_length: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to the decoder's
    /// teacher-forced history (companded domain).
    pub input_noise: f64,
    pub clip_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            frame_length: 7680,
            batch_size: 32,
            beta: 0.25,
            iterations: 20_000,
            learning_rate: 2e-4,
            seed: 0,
            input_noise: 0.5,
            clip_norm: 5.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_length == 0 || self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "frame length, batch size and iterations must be positive".into(),
            ));
        }
        if !(self.beta >= 0.0
            && self.learning_rate > 0.0
            && self.input_noise >= 0.0
            && self.clip_norm > 0.0)
        {
            return Err(Error::Config(
                "beta and input noise must be nonnegative; learning rate and clip norm positive"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Which conditioning streams reach the decoder, and how much multiplicative
/// noise is applied to the f0 and envelope values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditioningMask {
    pub use_content: bool,
    pub use_pitch: bool,
    pub use_loudness: bool,
    pub use_singer: bool,
    pub use_low_res: bool,
    pub noise_level: f64,
}

impl Default for ConditioningMask {
    fn default() -> Self {
        Self {
            use_content: true,
            use_pitch: true,
            use_loudness: true,
            use_singer: true,
            use_low_res: true,
            noise_level: 0.0,
        }
    }
}

impl ConditioningMask {
    /// Only the low-resolution audio reaches the decoder.
    pub fn low_res_only() -> Self {
        Self {
            use_content: false,
            use_pitch: false,
            use_loudness: false,
            use_singer: false,
            use_low_res: true,
            noise_level: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::invalid(format!(
                "noise level {} outside [0, 1]",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// Raw (pre-embedding) conditioning for one utterance at one module.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningInputs {
    pub content_codes: Vec<usize>,
    /// Quantized content `[D_e, n]`.
    pub content: Mat,
    /// Length the content sequence spans (the padded input length).
    pub content_span: usize,
    pub f0: PitchTrack,
    pub envelope: Envelope,
    pub singer: Vec<f64>,
    /// Low-rate audio resampled to the module's rate.
    pub low_res: Option<Vec<f64>>,
}

/// Applies a [`ConditioningMask`] to raw conditioning: a nonzero noise level
/// scales every f0 and envelope value by `1 + r·u` with `u` uniform in
/// `[-1, 1]` and redraws the content codes from the empirical code
/// distribution of the input; disabled content, singer and low-resolution
/// streams become zeros. Disabled pitch and loudness streams are zeroed after
/// their feature encoders (see [`VqModule::bundle`]).
pub fn apply_mask(
    inputs: &ConditioningInputs,
    mask: &ConditioningMask,
    codebook: &Codebook,
    seed: u64,
) -> Result<ConditioningInputs> {
    mask.validate()?;
    let mut out = inputs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = mask.noise_level;
    if r > 0.0 {
        for v in &mut out.f0.f0_hz {
            *v *= 1.0 + r * rng.gen_range(-1.0..=1.0);
        }
        for v in &mut out.envelope.values {
            *v *= 1.0 + r * rng.gen_range(-1.0..=1.0);
        }
        if !inputs.content_codes.is_empty() {
            let n = inputs.content_codes.len();
            out.content_codes = (0..n)
                .map(|_| inputs.content_codes[rng.gen_range(0..n)])
                .collect();
            for (t, &c) in out.content_codes.iter().enumerate() {
                for (d, &v) in codebook.entry(c).iter().enumerate() {
                    *out.content.at_mut(d, t) = v;
                }
            }
        }
    }
    if !mask.use_content {
        out.content = Mat::zeros(out.content.rows, out.content.cols);
    }
    if !mask.use_singer {
        out.singer.iter_mut().for_each(|v| *v = 0.0);
    }
    if !mask.use_low_res {
        if let Some(l) = &mut out.low_res {
            l.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// f0 and envelope tracks describing an utterance, independent of rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub f0: PitchTrack,
    pub envelope: Envelope,
}

pub fn extract_features(w: &Waveform) -> Result<Features> {
    Ok(Features {
        f0: extract_f0(w, &PitchConfig::default())?,
        envelope: extract_envelope(w, ENVELOPE_WINDOW_S, ENVELOPE_HOP_S)?,
    })
}

fn f0_input(f0: &PitchTrack) -> Vec<f64> {
    f0.f0_hz.iter().map(|f| f / F0_INPUT_SCALE_HZ).collect()
}

/// Resamples `w` to `rate` and forces the result to exactly `len` samples.
fn resample_exact(w: &Waveform, rate: u32, len: usize) -> Result<Vec<f64>> {
    let mut v = if w.sample_rate_hz() == rate {
        w.samples().to_vec()
    } else {
        resample(w, rate)?.into_samples()
    };
    v.resize(len, 0.0);
    Ok(v)
}

/// One corpus utterance with its speaker label.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub name: String,
    pub singer: u32,
    pub audio: Waveform,
}

/// An utterance prepared for one module: audio and codes at the module rate
/// plus features and (upper module) the aligned low-resolution audio.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub singer: u32,
    pub audio: Vec<f64>,
    pub codes: Vec<u8>,
    pub f0_input: Vec<f64>,
    pub loudness_input: Vec<f64>,
    pub low_res: Option<Vec<f64>>,
}

impl TrainingItem {
    /// The low-resolution audio is the whole utterance resampled down to
    /// the bottom rate and back up, so any frame cut from it is aligned with
    /// the module-rate frame sample for sample.
    pub fn prepare(spec: &ModuleSpec, utt: &Utterance) -> Result<Self> {
        let features = extract_features(&utt.audio)?;
        let audio_w = if utt.audio.sample_rate_hz() == spec.sample_rate_hz {
            utt.audio.clone()
        } else {
            resample(&utt.audio, spec.sample_rate_hz)?
        };
        let low_res = match spec.low_res_rate_hz {
            Some(low) => {
                let down = resample(&audio_w, low)?;
                Some(resample_exact(&down, spec.sample_rate_hz, audio_w.len())?)
            }
            None => None,
        };
        let codes = mu_law_encode(&audio_w).0.codes().to_vec();
        Ok(Self {
            singer: utt.singer,
            audio: audio_w.into_samples(),
            codes,
            f0_input: f0_input(&features.f0),
            loudness_input: features.envelope.values,
            low_res,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub wall_clock_s: f64,
}

impl LossRecord {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }

    pub const TSV_HEADER: &'static str =
        "iteration\tl_rec\tcodebook_loss\tcommitment_loss\twall_clock_s";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.iteration, self.reconstruction, self.codebook, self.commitment, self.wall_clock_s
        )
    }
}

/// Trainable state of one module.
#[derive(Debug, Clone)]
pub struct VqModule {
    pub spec: ModuleSpec,
    pub encoder: ContentEncoder,
    pub codebook: Codebook,
    pub pitch_encoder: FeatureEncoder,
    pub loudness_encoder: FeatureEncoder,
    pub singers: SingerTable,
    pub decoder: WaveNetDecoder,
    /// Completed training iterations.
    pub iterations: u64,
    /// Streams disabled during training stay disabled at inference.
    pub mask: ConditioningMask,
}

impl VqModule {
    pub fn new(spec: ModuleSpec, singer_ids: &[u32], seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ContentEncoder::new(spec.encoder.clone(), &mut rng)?;
        let codebook = Codebook::init(spec.codebook_size, spec.encoder.latent_dim, &mut rng)?;
        let pitch_encoder = FeatureEncoder::new(spec.pitch.clone(), &mut rng)?;
        let loudness_encoder = FeatureEncoder::new(spec.loudness.clone(), &mut rng)?;
        let singers = SingerTable::new(singer_ids, spec.singer_dim, &mut rng)?;
        let decoder = WaveNetDecoder::new(spec.decoder.clone(), spec.cond_dims(), &mut rng)?;
        Ok(Self {
            spec,
            encoder,
            codebook,
            pitch_encoder,
            loudness_encoder,
            singers,
            decoder,
            iterations: 0,
            mask: ConditioningMask::default(),
        })
    }

    pub fn is_trained(&self) -> bool {
        self.iterations > 0
    }

    fn require_trained(&self) -> Result<()> {
        if self.is_trained() {
            Ok(())
        } else {
            Err(Error::Untrained(format!(
                "{} module has no training iterations",
                self.spec.scale.as_str()
            )))
        }
    }

    /// Encodes and quantizes module-rate audio.
    pub fn encode(&self, audio: &Waveform) -> Result<(Vec<usize>, Mat, usize)> {
        let enc = self.encoder.encode(audio)?;
        let q = quantize(&self.codebook, &enc.latents, 0.0)?;
        Ok((q.codes, q.quantized, audio.len() + enc.padding))
    }

    /// Builds the decoder's conditioning for a `len`-sample output; pitch and
    /// loudness embeddings are zeroed when `mask` disables them.
    pub fn bundle(
        &self,
        inputs: &ConditioningInputs,
        len: usize,
        mask: &ConditioningMask,
    ) -> Result<ConditioningBundle> {
        let mut pitch = self.pitch_encoder.encode(&f0_input(&inputs.f0))?;
        if !mask.use_pitch {
            pitch = Mat::zeros(pitch.rows, pitch.cols);
        }
        let mut loud = self.loudness_encoder.encode(&inputs.envelope.values)?;
        if !mask.use_loudness {
            loud = Mat::zeros(loud.rows, loud.cols);
        }
        let low_res = match (&inputs.low_res, self.spec.uses_low_res_conditioning()) {
            (Some(v), true) => Some(CondStream::whole(
                Mat::from_vec(1, v.len(), v.clone()),
                v.len(),
            )),
            (None, true) => return Err(Error::invalid("upper module needs low-resolution audio")),
            _ => None,
        };
        Ok(ConditioningBundle {
            content: CondStream::window(inputs.content.clone(), inputs.content_span, 0),
            pitch: CondStream::whole(pitch, len),
            loudness: CondStream::whole(loud, len),
            singer: inputs.singer.clone(),
            low_res,
        })
    }

    /// Raw conditioning for module-rate audio `audio` with the given features.
    pub fn conditioning_inputs(
        &self,
        audio: &Waveform,
        features: &Features,
        singer: u32,
        low_res: Option<&Waveform>,
    ) -> Result<ConditioningInputs> {
        let (codes, content, span) = self.encode(audio)?;
        let low_res = match (low_res, self.spec.uses_low_res_conditioning()) {
            (Some(w), true) => Some(resample_exact(w, self.spec.sample_rate_hz, audio.len())?),
            (None, true) => return Err(Error::invalid("upper module needs low-resolution audio")),
            (_, false) => None,
        };
        Ok(ConditioningInputs {
            content_codes: codes,
            content,
            content_span: span,
            f0: features.f0.clone(),
            envelope: features.envelope.clone(),
            singer: self.singers.lookup(singer)?,
            low_res,
        })
    }

    /// Encodes `w` at the module rate, conditions on `features` (taken from
    /// `w` unless overridden) and regenerates it autoregressively.
    pub fn reconstruct(&self, w: &Waveform, singer: u32, ov: &CondOverride) -> Result<Waveform> {
        self.require_trained()?;
        let audio = if w.sample_rate_hz() == self.spec.sample_rate_hz {
            w.clone()
        } else {
            resample(w, self.spec.sample_rate_hz)?
        };
        let features = match &ov.features {
            Some(f) => f.clone(),
            None => extract_features(w)?,
        };
        let inputs = self.conditioning_inputs(
            &audio,
            &features,
            ov.singer.unwrap_or(singer),
            ov.low_res.as_ref(),
        )?;
        let mask = ConditioningMask {
            noise_level: ov.mask.noise_level,
            use_content: ov.mask.use_content && self.mask.use_content,
            use_pitch: ov.mask.use_pitch && self.mask.use_pitch,
            use_loudness: ov.mask.use_loudness && self.mask.use_loudness,
            use_singer: ov.mask.use_singer && self.mask.use_singer,
            use_low_res: ov.mask.use_low_res && self.mask.use_low_res,
        };
        let inputs = apply_mask(&inputs, &mask, &self.codebook, ov.seed)?;
        let bundle = self.bundle(&inputs, audio.len(), &mask)?;
        let codes = self.decoder.generate(
            &bundle,
            audio.len(),
            self.spec.sample_rate_hz,
            ov.mode,
            ov.seed,
        )?;
        mu_law_decode(&codes)
    }

    /// Loss terms of one batch of frames; with `backward`, gradients of
    /// `L_rec + codebook + β·commitment` are accumulated into every
    /// parameter (straight-through past the quantizer).
    ///
    /// With `frozen`, the quantizer's assignment from an earlier evaluation
    /// is reused and the quantized content is `z + (e₀ − z₀)`: a smooth
    /// function of the parameters whose true gradient is the
    /// straight-through gradient of the unfrozen loss at that point.
    pub fn batch_loss(
        &mut self,
        items: &[TrainingItem],
        frames: &[(usize, usize)],
        frame_length: usize,
        beta: f64,
        noise: &[Vec<f64>],
        frozen: Option<&FrozenQuantization>,
        backward: bool,
    ) -> Result<BatchLoss> {
        let b = frames.len();
        let xs: Vec<Mat> = frames
            .iter()
            .map(|&(i, o)| {
                Mat::from_vec(
                    1,
                    frame_length,
                    items[i].audio[o..o + frame_length].to_vec(),
                )
            })
            .collect();
        let (zs, enc_cache) = self.encoder.forward_train(&xs);
        let mut qs = quantize_batch(&self.codebook, &zs, beta)?;
        let (codebook_loss, commitment_loss) = match frozen {
            None => (qs[0].codebook_loss, qs[0].commitment_loss),
            Some(f) => {
                let (mut cb, mut commit, mut n) = (0.0, 0.0, 0usize);
                for (k, q) in qs.iter_mut().enumerate() {
                    q.codes = f.codes[k].clone();
                    for (t, &c) in q.codes.iter().enumerate() {
                        let e = self.codebook.entry(c);
                        for (d, &ev) in e.iter().enumerate() {
                            let (z, z0, e0) = (
                                zs[k].at(d, t),
                                f.latents[k].at(d, t),
                                f.quantized[k].at(d, t),
                            );
                            *q.quantized.at_mut(d, t) = z + (e0 - z0);
                            cb += (z0 - ev).powi(2);
                            commit += (z - e0).powi(2);
                        }
                        n += 1;
                    }
                }
                (cb / n as f64, beta * commit / n as f64)
            }
        };
        let snapshot = FrozenQuantization {
            codes: qs.iter().map(|q| q.codes.clone()).collect(),
            latents: zs.clone(),
            quantized: qs.iter().map(|q| q.quantized.clone()).collect(),
        };
        if !self.mask.use_content {
            for q in &mut qs {
                q.quantized = Mat::zeros(q.quantized.rows, q.quantized.cols);
            }
        }
        let mut rec = 0.0;
        let mut d_qs = Vec::with_capacity(b);
        for (k, &(i, o)) in frames.iter().enumerate() {
            let item = &items[i];
            let total = item.audio.len();
            let (mut pitch, pc) = self.pitch_encoder.forward(&item.f0_input)?;
            if !self.mask.use_pitch {
                pitch = Mat::zeros(pitch.rows, pitch.cols);
            }
            let (mut loud, lc) = self.loudness_encoder.forward(&item.loudness_input)?;
            if !self.mask.use_loudness {
                loud = Mat::zeros(loud.rows, loud.cols);
            }
            let singer = if self.mask.use_singer {
                self.singers.lookup(item.singer)?
            } else {
                vec![0.0; self.spec.singer_dim]
            };
            let low_res = item.low_res.as_ref().map(|l| {
                let mut v = l[o..o + frame_length].to_vec();
                if !self.mask.use_low_res {
                    v.iter_mut().for_each(|x| *x = 0.0);
                }
                CondStream::whole(Mat::from_vec(1, frame_length, v), frame_length)
            });
            let bundle = ConditioningBundle {
                content: CondStream::whole(qs[k].quantized.clone(), frame_length),
                pitch: CondStream::window(pitch, total, o),
                loudness: CondStream::window(loud, total, o),
                singer,
                low_res,
            };
            let target = &item.codes[o..o + frame_length];
            let mut x_in = WaveNetDecoder::teacher_inputs(target);
            x_in.data
                .iter_mut()
                .zip(&noise[k])
                .for_each(|(x, n)| *x += n);
            if !backward {
                rec += self.decoder.loss(&bundle, &x_in, target)? / b as f64;
                continue;
            }
            let (loss, g) =
                self.decoder
                    .loss_and_backward(&bundle, &x_in, target, 1.0 / b as f64)?;
            rec += loss / b as f64;
            if self.mask.use_pitch {
                self.pitch_encoder.backward(&pc, &g.pitch);
            }
            if self.mask.use_loudness {
                self.loudness_encoder.backward(&lc, &g.loudness);
            }
            if self.mask.use_singer {
                self.singers.accumulate_grad(item.singer, &g.singer)?;
            }
            d_qs.push(if self.mask.use_content {
                g.content
            } else {
                Mat::zeros(g.content.rows, g.content.cols)
            });
        }
        if backward {
            let dz = quantize_backward(&mut self.codebook, &zs, &qs, &d_qs, beta, 1.0);
            self.encoder.backward(&enc_cache, &dz);
        }
        Ok(BatchLoss {
            reconstruction: rec,
            codebook: codebook_loss,
            commitment: commitment_loss,
            quantization: snapshot,
        })
    }
}

/// Quantizer state captured during one batch evaluation.
#[derive(Debug, Clone)]
pub struct FrozenQuantization {
    pub codes: Vec<Vec<usize>>,
    pub latents: Vec<Mat>,
    pub quantized: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub reconstruction: f64,
    pub codebook: f64,
    /// Already multiplied by β.
    pub commitment: f64,
    pub quantization: FrozenQuantization,
}

impl BatchLoss {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment
    }
}

impl Parameterized for VqModule {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.encoder
            .params(&crate::nn::join(prefix, "encoder"), out);
        self.codebook
            .params(&crate::nn::join(prefix, "codebook"), out);
        self.pitch_encoder
            .params(&crate::nn::join(prefix, "pitch_encoder"), out);
        self.loudness_encoder
            .params(&crate::nn::join(prefix, "loudness_encoder"), out);
        self.singers
            .params(&crate::nn::join(prefix, "singers"), out);
        self.decoder
            .params(&crate::nn::join(prefix, "decoder"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.encoder
            .params_mut(&crate::nn::join(prefix, "encoder"), out);
        self.codebook
            .params_mut(&crate::nn::join(prefix, "codebook"), out);
        self.pitch_encoder
            .params_mut(&crate::nn::join(prefix, "pitch_encoder"), out);
        self.loudness_encoder
            .params_mut(&crate::nn::join(prefix, "loudness_encoder"), out);
        self.singers
            .params_mut(&crate::nn::join(prefix, "singers"), out);
        self.decoder
            .params_mut(&crate::nn::join(prefix, "decoder"), out);
    }
}

/// Inference-time replacements for parts of a module's conditioning.
#[derive(Debug, Clone)]
pub struct CondOverride {
    pub singer: Option<u32>,
    pub features: Option<Features>,
    pub low_res: Option<Waveform>,
    pub mask: ConditioningMask,
    pub mode: GenerationMode,
    pub seed: u64,
}

impl Default for CondOverride {
    fn default() -> Self {
        Self {
            singer: None,
            features: None,
            low_res: None,
            mask: ConditioningMask::default(),
            mode: GenerationMode::Sample,
            seed: 0,
        }
    }
}

/// Loss history of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    pub history: Vec<LossRecord>,
}

/// Trains `module` on `corpus` for `cfg.iterations` further iterations.
///
/// Frames are drawn uniformly over (utterance, offset) pairs from a stream
/// seeded by `cfg.seed` and the module's iteration counter, so a run is fully
/// determined by its seed, corpus and starting state. If `log` is given, one
/// tab-separated record per iteration is written to it.
pub fn train_module(
    module: &mut VqModule,
    corpus: &[Utterance],
    cfg: &TrainingConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Corpus("training corpus is empty".into()));
    }
    let known = module.singers.ids();
    if let Some(u) = corpus.iter().find(|u| !known.contains(&u.singer)) {
        return Err(Error::UnknownSinger {
            id: u.singer,
            known,
        });
    }
    let factor = module.spec.encoder.downsample_factor();
    if cfg.frame_length % factor != 0 {
        return Err(Error::Config(format!(
            "frame length {} is not a multiple of the encoder downsampling factor {factor}",
            cfg.frame_length
        )));
    }
    let items = corpus
        .iter()
        .map(|u| TrainingItem::prepare(&module.spec, u))
        .collect::<Result<Vec<_>>>()?;
    if let Some(short) = items.iter().find(|it| it.audio.len() < cfg.frame_length) {
        return Err(Error::Corpus(format!(
            "utterance of {} samples is shorter than the {}-sample frame",
            short.audio.len(),
            cfg.frame_length
        )));
    }

    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ module.iterations.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let normal =
        rand_distr::Normal::new(0.0, cfg.input_noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut opt = Adam::new(cfg.learning_rate, Some(cfg.clip_norm));
    let mut report = TrainingReport::default();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{}", LossRecord::TSV_HEADER).map_err(|e| Error::io("training log", e))?;
    }
    let start = Instant::now();
    for _ in 0..cfg.iterations {
        let frames: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let i = rng.gen_range(0..items.len());
                let o = rng.gen_range(0..=items[i].audio.len() - cfg.frame_length);
                (i, o)
            })
            .collect();
        let noise: Vec<Vec<f64>> = frames
            .iter()
            .map(|_| {
                if cfg.input_noise > 0.0 {
                    (0..cfg.frame_length)
                        .map(|_| rand_distr::Distribution::sample(&normal, &mut rng))
                        .collect()
                } else {
                    vec![0.0; cfg.frame_length]
                }
            })
            .collect();
        module.zero_grad();
        let loss = module.batch_loss(
            &items,
            &frames,
            cfg.frame_length,
            cfg.beta,
            &noise,
            None,
            true,
        )?;
        opt.update(&mut module.named_params_mut());
        module.iterations += 1;
        let rec = LossRecord {
            iteration: module.iterations,
            reconstruction: loss.reconstruction,
            codebook: loss.codebook,
            commitment: loss.commitment,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", rec.to_tsv()).map_err(|e| Error::io("training log", e))?;
        }
        report.history.push(rec);
    }
    Ok(report)
}

/// Pitch, dynamics and identity changes applied along the chain.
#[derive(Debug, Clone, Default)]
pub struct Manipulations {
    pub target_singer: Option<u32>,
    /// Replacement features (already shifted / remapped), shared by both modules.
    pub features: Option<Features>,
}

/// Output of [`infer_chain`] with the intermediate low-rate audio.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub low: Waveform,
    pub output: Waveform,
    /// The features both modules were conditioned on.
    pub features: Features,
}

/// Bottom module at its rate, then the upper module conditioned on the
/// bottom output. `upper_mask` degrades the upper module's conditioning.
pub fn infer_chain(
    bottom: &VqModule,
    upper: &VqModule,
    w: &Waveform,
    source_singer: u32,
    manip: &Manipulations,
    upper_mask: &ConditioningMask,
    mode: GenerationMode,
    seed: u64,
) -> Result<ChainOutput> {
    if upper.spec.low_res_rate_hz != Some(bottom.spec.sample_rate_hz) {
        return Err(Error::invalid(format!(
            "upper module expects {:?} Hz low-resolution audio but the bottom module runs at {} Hz",
            upper.spec.low_res_rate_hz, bottom.spec.sample_rate_hz
        )));
    }
    let features = match &manip.features {
        Some(f) => f.clone(),
        None => extract_features(w)?,
    };
    let ov = CondOverride {
        singer: manip.target_singer,
        features: Some(features.clone()),
        low_res: None,
        mask: ConditioningMask::default(),
        mode,
        seed,
    };
    let low = bottom.reconstruct(w, source_singer, &ov)?;
    let upper_ov = CondOverride {
        low_res: Some(low.clone()),
        mask: *upper_mask,
        ..ov
    };
    let output = upper.reconstruct(w, source_singer, &upper_ov)?;
    Ok(ChainOutput {
        low,
        output,
        features,
    })
}
