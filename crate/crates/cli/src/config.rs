//! Run configuration: built-in defaults, overridden by a TOML file, overridden
//! by command-line flags.
//!
//! The file may set any subset of keys at any depth; everything else keeps
//! its default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use hvq_core::corpus::CorpusConfig;
use hvq_core::hierarchy::{ModuleSpec, Scale, TrainingConfig};
use hvq_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds corpus synthesis, parameter initialization and frame sampling.
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    /// `training.seed` is ignored in favor of the top-level `seed`.
    pub training: TrainingConfig,
    pub bottom: ModuleSpec,
    pub upper: ModuleSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            training: TrainingConfig {
                frame_length: 512,
                batch_size: 8,
                iterations: 1500,
                learning_rate: 1e-3,
                ..TrainingConfig::default()
            },
            bottom: ModuleSpec::toy(Scale::Bottom),
            upper: ModuleSpec::toy(Scale::Upper),
        }
    }
}

/// Values given on the command line; `None` leaves the file/default value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub corpus_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a (possibly partial) TOML document on top of the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut merged, file);
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults, then `file` if given, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, flags: &Overrides) {
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(p) = &flags.corpus_dir {
            self.paths.corpus_dir = p.clone();
        }
        if let Some(p) = &flags.checkpoint_dir {
            self.paths.checkpoint_dir = p.clone();
        }
        if let Some(p) = &flags.report_dir {
            self.paths.report_dir = p.clone();
        }
        if let Some(n) = flags.iterations {
            self.training.iterations = n;
        }
        if let Some(lr) = flags.learning_rate {
            self.training.learning_rate = lr;
        }
        if let Some(b) = flags.batch_size {
            self.training.batch_size = b;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.training.validate()?;
        self.bottom.validate()?;
        self.upper.validate()?;
        if self.bottom.scale != Scale::Bottom || self.upper.scale != Scale::Upper {
            return Err(Error::Config(
                "`bottom` and `upper` must carry their own scale tags".into(),
            ));
        }
        if self.upper.low_res_rate_hz != Some(self.bottom.sample_rate_hz) {
            return Err(Error::Config(format!(
                "upper module is conditioned on {:?} Hz audio but the bottom module runs at {} Hz",
                self.upper.low_res_rate_hz, self.bottom.sample_rate_hz
            )));
        }
        Ok(())
    }

    pub fn module(&self, scale: Scale) -> &ModuleSpec {
        match scale {
            Scale::Bottom => &self.bottom,
            Scale::Upper => &self.upper,
        }
    }

    /// Training settings with the run seed applied.
    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.training.clone()
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&d.to_toml()).unwrap(), d);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), d);
    }

    #[test]
    fn partial_nested_override_keeps_siblings() {
        let c = RunConfig::from_toml_str("[upper.decoder]\nn_layers = 4\n").unwrap();
        assert_eq!(c.upper.decoder.n_layers, 4);
        assert_eq!(
            c.upper.decoder.channels,
            RunConfig::default().upper.decoder.channels
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "bogus = 1",
            "[training]\nlearning_rat = 0.1",
            "[bottom.encoder]\nblocks = 3",
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err();
            assert_eq!(err.category(), "config", "{text}");
        }
    }

    #[test]
    fn precedence_is_defaults_then_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 7\n[training]\niterations = 40\nbatch_size = 3\n[paths]\nreport_dir = \"file-reports\"\n",
        )
        .unwrap();
        let flags = Overrides {
            iterations: Some(5),
            report_dir: Some("flag-reports".into()),
            ..Default::default()
        };
        let c = RunConfig::resolve(Some(&path), &flags).unwrap();
        let d = RunConfig::default();
        // default layer
        assert_eq!(c.training.learning_rate, d.training.learning_rate);
        assert_eq!(c.paths.corpus_dir, d.paths.corpus_dir);
        // file layer
        assert_eq!(c.seed, 7);
        assert_eq!(c.training.batch_size, 3);
        // flag layer beats the file
        assert_eq!(c.training.iterations, 5);
        assert_eq!(c.paths.report_dir, PathBuf::from("flag-reports"));
        assert_eq!(c.training_config().seed, 7);
    }

    #[test]
    fn inconsistent_rates_are_rejected() {
        let err = RunConfig::from_toml_str("[upper]\nlow_res_rate_hz = 2000\n").unwrap_err();
        assert_eq!(err.category(), "config");
    }
}
