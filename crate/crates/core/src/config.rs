//! Declarative TOML run configuration. Sections mirror the module configs;
//! command-line flags override file values.
//!
//! ```toml
//! seed = 42
//! runs_dir = "runs"
//!
//! [synth]
//! out_dir = "raw"
//! families = 4
//! per_family = 200
//!
//! [convert]
//! input = "raw"
//! output = "images"
//! image_size = 32
//!
//! [experiment]
//! per_class = 100
//!
//! [acgan]
//! epochs = 60
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{AcganSection, CnnSection, ElmSection, ExperimentConfig};

fn default_bytes_per_sample() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub out_dir: PathBuf,
    pub families: usize,
    pub per_family: usize,
    #[serde(default = "default_bytes_per_sample")]
    pub bytes_per_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertSection {
    pub input: PathBuf,
    pub output: PathBuf,
    pub image_size: usize,
}

/// Experiment settings; unset fields fall back to the `convert` and `synth`
/// sections (corpus directory, image size, family count).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub dataset: Option<String>,
    pub corpus_dir: Option<PathBuf>,
    pub image_size: Option<usize>,
    pub num_families: Option<usize>,
    pub gan_per_class: Option<usize>,
    pub per_class: Option<usize>,
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub runs_dir: Option<PathBuf>,
    pub synth: Option<SynthSection>,
    pub convert: Option<ConvertSection>,
    pub experiment: Option<ExperimentSection>,
    #[serde(default)]
    pub acgan: AcganSection,
    #[serde(default)]
    pub cnn: CnnSection,
    #[serde(default)]
    pub elm: ElmSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.runs_dir.as_mut() {
            fix(p);
        }
        if let Some(s) = self.synth.as_mut() {
            fix(&mut s.out_dir);
        }
        if let Some(c) = self.convert.as_mut() {
            fix(&mut c.input);
            fix(&mut c.output);
        }
        if let Some(p) = self.experiment.as_mut().and_then(|e| e.corpus_dir.as_mut()) {
            fix(p);
        }
    }

    pub fn seed_or(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    /// Resolves the experiment, with `seed` overriding the file's seed.
    pub fn experiment_config(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let section = self.experiment.clone().unwrap_or_default();
        let corpus_dir =
            section.corpus_dir.or_else(|| self.convert.as_ref().map(|c| c.output.clone())).ok_or_else(|| {
                Error::field("experiment.corpus_dir", "missing (and no [convert] section to infer it from)")
            })?;
        let image_size =
            section.image_size.or_else(|| self.convert.as_ref().map(|c| c.image_size)).ok_or_else(|| {
                Error::field("experiment.image_size", "missing (and no [convert] section to infer it from)")
            })?;
        let num_families =
            section.num_families.or_else(|| self.synth.as_ref().map(|s| s.families)).ok_or_else(|| {
                Error::field("experiment.num_families", "missing (and no [synth] section to infer it from)")
            })?;
        let defaults: ExperimentConfig =
            toml::from_str(&format!("corpus_dir = ''\nimage_size = {image_size}\nnum_families = {num_families}"))
                .expect("minimal experiment config parses");
        let cfg = ExperimentConfig {
            dataset: section.dataset.unwrap_or(defaults.dataset),
            corpus_dir,
            image_size,
            num_families,
            gan_per_class: section.gan_per_class,
            per_class: section.per_class.unwrap_or(defaults.per_class),
            train_fraction: section.train_fraction.unwrap_or(defaults.train_fraction),
            seed: self.seed_or(seed),
            acgan: self.acgan.clone(),
            cnn: self.cnn.clone(),
            elm: self.elm.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
