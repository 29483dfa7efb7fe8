//! The four commands. Each one is a plain function of the resolved
//! configuration so it can be driven from tests as well as from `main`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hvq_core::checkpoint::{load_checkpoint, save_checkpoint};
use hvq_core::conversion::{compression_threshold, convert, ConversionRequest, DynamicsMode};
use hvq_core::corpus::{load_corpus, write_corpus, ManifestEntry, MANIFEST_FILE};
use hvq_core::evaluation::{
    codebook_report, f0_plot_svg, metrics, run_ablation, usage_plot_svg, AblationOptions,
    AblationVariant, KeyValueReport,
};
use hvq_core::hierarchy::{
    extract_features, train_module, ConditioningMask, Scale, TrainingReport, Utterance, VqModule,
};
use hvq_core::networks::GenerationMode;
use hvq_core::signal::wav::{read_wav, write_wav};
use hvq_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Checkpoint directory names under `paths.checkpoint_dir`.
pub const BOTTOM_CHECKPOINT: &str = "bottom";
pub const UPPER_CHECKPOINT: &str = "upper";
pub const LOW_RES_ONLY_CHECKPOINT: &str = "upper_low_res_only";

pub fn checkpoint_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.checkpoint_dir.join(name)
}

pub fn cmd_synth_data(cfg: &RunConfig, force: bool) -> Result<Vec<ManifestEntry>> {
    write_corpus(&cfg.paths.corpus_dir, &cfg.corpus_config(), force)
}

fn read_corpus(cfg: &RunConfig) -> Result<Vec<Utterance>> {
    let dir = &cfg.paths.corpus_dir;
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Corpus(format!(
            "no corpus at {} (run synth-data first)",
            dir.display()
        )));
    }
    Ok(load_corpus(dir)?.into_iter().map(|u| u.utterance).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from an existing checkpoint instead of starting afresh.
    pub resume: bool,
    /// Upper scale only: condition on the low-resolution audio alone.
    pub low_res_only: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub report: TrainingReport,
    pub iterations: u64,
}

/// Trains one module from the corpus alone; no other module's checkpoint
/// is read.
pub fn cmd_train(cfg: &RunConfig, scale: Scale, opts: TrainOptions) -> Result<TrainSummary> {
    if opts.low_res_only && scale != Scale::Upper {
        return Err(Error::Config(
            "--low-res-only applies to the upper scale only".into(),
        ));
    }
    let corpus = read_corpus(cfg)?;
    let name = match (scale, opts.low_res_only) {
        (Scale::Bottom, _) => BOTTOM_CHECKPOINT,
        (Scale::Upper, false) => UPPER_CHECKPOINT,
        (Scale::Upper, true) => LOW_RES_ONLY_CHECKPOINT,
    };
    let ckpt = checkpoint_path(cfg, name);
    let spec = cfg.module(scale).clone();
    let mut module = if opts.resume && ckpt.exists() {
        let (m, _) = load_checkpoint(&ckpt)?;
        if m.spec != spec {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different {} module spec",
                ckpt.display(),
                scale.as_str()
            )));
        }
        m
    } else {
        let mut ids: Vec<u32> = corpus.iter().map(|u| u.singer).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut m = VqModule::new(spec, &ids, cfg.seed)?;
        if opts.low_res_only {
            m.mask = ConditioningMask::low_res_only();
        }
        m
    };

    let mut log = Vec::new();
    let report = train_module(&mut module, &corpus, &cfg.training_config(), Some(&mut log))?;
    fs::create_dir_all(&cfg.paths.checkpoint_dir)
        .map_err(|e| Error::io(&cfg.paths.checkpoint_dir, e))?;
    let loss_log = cfg.paths.checkpoint_dir.join(format!("{name}.loss.tsv"));
    let text = String::from_utf8(log).expect("log is utf-8");
    let appending = opts.resume && loss_log.exists();
    let body = if appending {
        text.split_once('\n').map_or("", |(_, rest)| rest)
    } else {
        text.as_str()
    };
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(appending)
        .truncate(!appending)
        .open(&loss_log)
        .map_err(|e| Error::io(&loss_log, e))?;
    file.write_all(body.as_bytes())
        .map_err(|e| Error::io(&loss_log, e))?;

    let snapshot = serde_json::to_value(cfg).expect("config serializes");
    save_checkpoint(&ckpt, &module, snapshot)?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        loss_log,
        iterations: module.iterations,
        report,
    })
}

fn load_pair(cfg: &RunConfig) -> Result<(VqModule, VqModule)> {
    let (bottom, _) = load_checkpoint(&checkpoint_path(cfg, BOTTOM_CHECKPOINT))?;
    let (upper, _) = load_checkpoint(&checkpoint_path(cfg, UPPER_CHECKPOINT))?;
    Ok((bottom, upper))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertOptions {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Singer who sings the input.
    pub source_singer: u32,
    pub request: ConversionRequest,
    pub mode: GenerationMode,
    pub seed: u64,
}

/// What `convert` did, written next to the output WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionRecord {
    pub input: PathBuf,
    pub source_singer: u32,
    pub request: ConversionRequest,
    pub pitch_ratio: f64,
    /// Envelope peak the dynamics curve was anchored to.
    pub a_max: f64,
    /// Compression only: amplitudes at or below this map to zero.
    pub clamp_threshold: Option<f64>,
    pub mode: GenerationMode,
    pub seed: u64,
    pub output_rate_hz: u32,
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    output.with_extension("json")
}

pub fn cmd_convert(cfg: &RunConfig, opts: &ConvertOptions) -> Result<ConversionRecord> {
    let (bottom, upper) = load_pair(cfg)?;
    let w = read_wav(&opts.input)?;
    let out = convert(
        &bottom,
        &upper,
        &w,
        opts.source_singer,
        &opts.request,
        opts.mode,
        opts.seed,
    )?;
    write_wav(&opts.output, &out.output)?;

    let a_max = match opts.request.dynamics.a_max {
        Some(a) => a,
        None => extract_features(&w)?.envelope.max(),
    };
    let clamp_threshold = (opts.request.dynamics.mode == DynamicsMode::Compress)
        .then(|| compression_threshold(opts.request.dynamics.theta, a_max));
    let record = ConversionRecord {
        input: opts.input.clone(),
        source_singer: opts.source_singer,
        request: opts.request.clone(),
        pitch_ratio: opts.request.pitch_ratio(),
        a_max,
        clamp_threshold,
        mode: opts.mode,
        seed: opts.seed,
        output_rate_hz: out.output.sample_rate_hz(),
    };
    let path = sidecar_path(&opts.output);
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Maer,
    Usage,
    Ablation,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maer" => Ok(Self::Maer),
            "usage" => Ok(Self::Usage),
            "ablation" => Ok(Self::Ablation),
            other => Err(Error::invalid(format!(
                "unknown metric {other:?} (maer|usage|ablation)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub metric: Metric,
    /// Ablation only.
    pub variant: Option<AblationVariant>,
    /// MAER only: pitch shift applied before conversion.
    pub semitones: f64,
    /// MAER only: score the ground-truth contours against themselves,
    /// without any model.
    pub ground_truth: bool,
    /// Usage only.
    pub scale: Scale,
    /// Evaluate at most this many utterances (in manifest order).
    pub limit: Option<usize>,
    pub mode: GenerationMode,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Maer,
            variant: None,
            semitones: 0.0,
            ground_truth: false,
            scale: Scale::Bottom,
            limit: None,
            mode: GenerationMode::Sample,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: KeyValueReport,
    pub files: Vec<PathBuf>,
}

fn write_text(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<EvalOutput> {
    let report_dir = &cfg.paths.report_dir;
    fs::create_dir_all(report_dir).map_err(|e| Error::io(report_dir, e))?;
    let mut files = Vec::new();
    let take = opts.limit.unwrap_or(usize::MAX);
    let report = match opts.metric {
        Metric::Maer => {
            let (refs, recs) = if opts.ground_truth {
                let dir = &cfg.paths.corpus_dir;
                let scores = load_corpus(dir)?
                    .into_iter()
                    .take(take)
                    .map(|u| {
                        u.score.map(|s| s.f0).ok_or_else(|| {
                            Error::Corpus(format!(
                                "{} has no ground-truth sidecar",
                                u.utterance.name
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (scores.clone(), scores)
            } else {
                let (bottom, upper) = load_pair(cfg)?;
                let req = ConversionRequest {
                    semitone_shift: opts.semitones,
                    ..Default::default()
                };
                let mut refs = Vec::new();
                let mut recs = Vec::new();
                for u in read_corpus(cfg)?.into_iter().take(take) {
                    let out = convert(
                        &bottom, &upper, &u.audio, u.singer, &req, opts.mode, opts.seed,
                    )?;
                    recs.push(extract_features(&out.output)?.f0);
                    refs.push(out.features.f0);
                }
                (refs, recs)
            };
            let m = metrics(&refs, &recs)?;
            let svg = f0_plot_svg(
                &format!("f0, shift {} semitones", opts.semitones),
                &[("requested", &refs[0]), ("output", &recs[0])],
            );
            write_text(report_dir.join("maer_f0.svg"), &svg, &mut files)?;
            let mut kv = m.to_key_value();
            kv.push("semitones", opts.semitones);
            write_text(report_dir.join("maer.txt"), &kv.render(), &mut files)?;
            kv
        }
        Metric::Usage => {
            let name = match opts.scale {
                Scale::Bottom => BOTTOM_CHECKPOINT,
                Scale::Upper => UPPER_CHECKPOINT,
            };
            let (module, _) = load_checkpoint(&checkpoint_path(cfg, name))?;
            let corpus: Vec<Utterance> = read_corpus(cfg)?.into_iter().take(take).collect();
            let usage = codebook_report(&module, &corpus)?;
            let tag = opts.scale.as_str();
            write_text(
                report_dir.join(format!("usage_{tag}.svg")),
                &usage_plot_svg(&format!("{tag} codebook usage"), &usage),
                &mut files,
            )?;
            let kv = usage.to_key_value();
            write_text(
                report_dir.join(format!("usage_{tag}.txt")),
                &kv.render(),
                &mut files,
            )?;
            kv
        }
        Metric::Ablation => {
            let variant = opts
                .variant
                .ok_or_else(|| Error::invalid("--metric ablation needs --variant"))?;
            let (bottom, upper) = load_pair(cfg)?;
            let low_res_only = match variant {
                AblationVariant::NoEmbeddings => {
                    Some(load_checkpoint(&checkpoint_path(cfg, LOW_RES_ONLY_CHECKPOINT))?.0)
                }
                _ => None,
            };
            let corpus: Vec<Utterance> = read_corpus(cfg)?.into_iter().take(take).collect();
            let ab = run_ablation(
                &bottom,
                &upper,
                low_res_only.as_ref(),
                &corpus,
                variant,
                &AblationOptions {
                    mode: opts.mode,
                    seed: opts.seed,
                    ..Default::default()
                },
            )?;
            let root = report_dir.join(format!("ablation_{}", variant.as_str()));
            for sub in ["pipeline", "variant"] {
                let d = root.join(sub);
                fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
            for s in &ab.samples {
                for (sub, w) in [("pipeline", &s.pipeline), ("variant", &s.variant)] {
                    let p = root.join(sub).join(format!("{}.wav", s.name));
                    write_wav(&p, w)?;
                    files.push(p);
                }
            }
            let kv = ab.to_key_value();
            write_text(root.join("deltas.txt"), &kv.render(), &mut files)?;
            kv
        }
    };
    Ok(EvalOutput { report, files })
}
