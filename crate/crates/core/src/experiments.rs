//! The evaluation protocol: train the GAN on real images, sample one fake
//! class per family, and ask independent classifiers to separate all `2K`
//! classes. Confusion matrices are also condensed to the four real/fake
//! outcomes and collapsed to a binary real-versus-fake accuracy.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acgan::{self, GanConfig, TrainOptions};
use crate::corpus::{self, DatasetManifest, Realness, SampleRecord, FAKE_SUFFIX};
use crate::error::{Error, Result};
use crate::evaluators::cnn::{self, Cnn, CnnConfig};
use crate::evaluators::elm;
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::plot;

/// Environment variable that overrides the root directory for run outputs.
pub const RUNS_ENV: &str = "MALIMG_FORGE_RUNS";

/// Class name of a family's generated counterpart.
pub fn fake_class_name(family: &str) -> String {
    format!("{family}{FAKE_SUFFIX}")
}

/// Splits a class name into its family and realness.
pub fn parse_class_label(label: &str) -> Result<(&str, Realness)> {
    let (family, realness) = match label.strip_suffix(FAKE_SUFFIX) {
        Some(family) => (family, Realness::Fake),
        None => (label, Realness::Real),
    };
    if family.is_empty() || family.trim() != family {
        return Err(Error::UnknownLabel(label.to_string()));
    }
    Ok((family, realness))
}

/// Merges real samples with generated ones into `2K` classes: `<family>` and
/// `<family>_fake`, real classes first.
pub fn build_real_fake_dataset(real: &DatasetManifest, fake: &DatasetManifest) -> Result<DatasetManifest> {
    if fake.is_empty() {
        return Err(Error::Empty("fake manifest has no records".into()));
    }
    if real.is_empty() {
        return Err(Error::Empty("real manifest has no records".into()));
    }
    if real.image_size() != fake.image_size() {
        return Err(Error::Config(format!(
            "real images are {0}x{0} but fakes are {1}x{1}",
            real.image_size(),
            fake.image_size()
        )));
    }
    let families = |m: &DatasetManifest| -> BTreeSet<String> {
        m.records()
            .iter()
            .map(|r| r.family.name.strip_suffix(FAKE_SUFFIX).unwrap_or(&r.family.name).to_string())
            .collect()
    };
    let (real_families, fake_families) = (families(real), families(fake));
    if let Some(f) = real_families.symmetric_difference(&fake_families).next() {
        let side = if real_families.contains(f) { "real" } else { "fake" };
        return Err(Error::Config(format!("family `{f}` appears only on the {side} side")));
    }
    let mut records = Vec::with_capacity(real.len() + fake.len());
    for r in real.records() {
        records.push(SampleRecord::new(r.path.clone(), r.family.name.clone(), Realness::Real, r.byte_length));
    }
    for r in fake.records() {
        let family = r.family.name.strip_suffix(FAKE_SUFFIX).unwrap_or(&r.family.name);
        records.push(SampleRecord::new(r.path.clone(), fake_class_name(family), Realness::Fake, r.byte_length));
    }
    DatasetManifest::from_records(records, real.image_size(), real.seed())
}

/// Samples `per_class` real images per family, adds the fakes (when given)
/// as `<family>_fake` classes and splits everything with one stratified split.
pub fn classification_split(
    real_pool: &DatasetManifest,
    fakes: Option<&DatasetManifest>,
    per_class: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<corpus::Split> {
    let real = corpus::stratified_sample(real_pool, per_class, seed.wrapping_add(4))?;
    let dataset = match fakes {
        Some(f) => build_real_fake_dataset(&real, f)?,
        None => real,
    };
    corpus::split_train_test(&dataset, train_fraction, seed.wrapping_add(5))
}

/// Outcome columns of a condensed matrix.
pub const CONDENSED_COLUMNS: [&str; 4] = ["real_same", "fake_same", "real_other", "fake_other"];

/// Counts by true realness (rows: real, fake) and outcome (columns: predicted
/// real of the same family, fake of the same family, real of another family,
/// fake of another family).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CondensedMatrix {
    pub counts: [[u64; 4]; 2],
}

impl CondensedMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, realness: Realness) -> u64 {
        self.counts[realness as usize].iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("true,{}\n", CONDENSED_COLUMNS.join(","));
        for (name, row) in ["real", "fake"].iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Maps every cell of a real+fake confusion matrix to one condensed cell.
pub fn condense(cm: &ConfusionMatrix) -> Result<CondensedMatrix> {
    let parsed: Vec<(&str, Realness)> = cm.labels().iter().map(|l| parse_class_label(l)).collect::<Result<_>>()?;
    let mut out = CondensedMatrix::default();
    for (t, row) in cm.counts().iter().enumerate() {
        let (true_family, true_kind) = parsed[t];
        for (p, &count) in row.iter().enumerate() {
            let (pred_family, pred_kind) = parsed[p];
            let column = match (pred_family == true_family, pred_kind) {
                (true, Realness::Real) => 0,
                (true, Realness::Fake) => 1,
                (false, Realness::Real) => 2,
                (false, Realness::Fake) => 3,
            };
            out.counts[true_kind as usize][column] += count;
        }
    }
    Ok(out)
}

/// Fraction of samples whose predicted realness matches the true one,
/// regardless of family.
pub fn real_fake_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let c = condense(cm)?;
    let total = c.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix has no counts".into()));
    }
    let correct = c.counts[0][0] + c.counts[0][2] + c.counts[1][1] + c.counts[1][3];
    Ok(correct as f64 / total as f64)
}

fn default_dataset() -> String {
    "synth".into()
}
fn default_train_fraction() -> f64 {
    0.7
}
fn default_per_class() -> usize {
    100
}

/// AC-GAN settings of an experiment; size and class count default to the
/// experiment's and must agree with them when given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcganSection {
    pub image_size: Option<usize>,
    pub num_classes: Option<usize>,
    #[serde(default = "AcganSection::default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "AcganSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "AcganSection::default_num_batches")]
    pub num_batches: usize,
    #[serde(default = "AcganSection::default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "AcganSection::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AcganSection::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AcganSection::default_width_divisor")]
    pub width_divisor: usize,
    pub seed: Option<u64>,
    /// Save a checkpoint every this many epochs (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl AcganSection {
    fn default_latent_dim() -> usize {
        acgan::DEFAULT_LATENT_DIM
    }
    fn default_epochs() -> usize {
        60
    }
    fn default_num_batches() -> usize {
        10
    }
    fn default_learning_rate() -> f64 {
        2e-4
    }
    fn default_beta1() -> f64 {
        0.5
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_width_divisor() -> usize {
        1
    }

    pub fn to_config(&self, image_size: usize, num_classes: usize, seed: u64) -> Result<GanConfig> {
        check_match("acgan.image_size", self.image_size, image_size)?;
        check_match("acgan.num_classes", self.num_classes, num_classes)?;
        let config = GanConfig {
            image_size,
            num_classes,
            latent_dim: self.latent_dim,
            epochs: self.epochs,
            num_batches: self.num_batches,
            seed: self.seed.unwrap_or(seed),
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            width_divisor: self.width_divisor,
        };
        config.validate().map_err(|e| prefix_field("acgan", e))?;
        Ok(config)
    }
}

impl Default for AcganSection {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

/// CNN settings; `num_classes` counts real and fake classes (`2K`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSection {
    pub image_size: Option<usize>,
    pub num_classes: Option<usize>,
    #[serde(default = "CnnSection::default_epochs")]
    pub epochs: usize,
    #[serde(default = "CnnSection::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "CnnSection::default_learning_rate")]
    pub learning_rate: f64,
    pub seed: Option<u64>,
}

impl CnnSection {
    fn default_epochs() -> usize {
        30
    }
    fn default_batch_size() -> usize {
        64
    }
    fn default_learning_rate() -> f64 {
        1e-3
    }

    pub fn to_config(&self, image_size: usize, num_classes: usize, seed: u64) -> Result<CnnConfig> {
        check_match("cnn.image_size", self.image_size, image_size)?;
        check_match("cnn.num_classes", self.num_classes, num_classes)?;
        let config = CnnConfig {
            image_size,
            num_classes,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed.unwrap_or(seed),
            learning_rate: self.learning_rate,
        };
        config.validate().map_err(|e| prefix_field("cnn", e))?;
        Ok(config)
    }
}

impl Default for CnnSection {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElmSection {
    /// Defaults by image size: 5000 (32), 50 000 (64), 20 000 (128).
    pub hidden_units: Option<usize>,
    pub seed: Option<u64>,
}

impl ElmSection {
    pub fn hidden_units_for(&self, image_size: usize) -> usize {
        self.hidden_units.unwrap_or_else(|| elm::default_hidden_units(image_size))
    }
}

fn check_match(field: &str, given: Option<usize>, expected: usize) -> Result<()> {
    match given {
        Some(v) if v != expected => Err(Error::field(field, format!("{v} disagrees with the experiment's {expected}"))),
        _ => Ok(()),
    }
}

fn prefix_field(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidField { field, reason } => Error::InvalidField { field: format!("{section}.{field}"), reason },
        other => other,
    }
}

/// Everything that determines one run of the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    /// Root of the image corpus, laid out as `<family>/<image>`.
    pub corpus_dir: PathBuf,
    pub image_size: usize,
    /// Number of real families `K`; the corpus must hold exactly this many.
    pub num_families: usize,
    /// Real images per family used for GAN training and testing (all when absent).
    pub gan_per_class: Option<usize>,
    /// Images per class in the real+fake classification dataset.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub acgan: AcganSection,
    #[serde(default)]
    pub cnn: CnnSection,
    #[serde(default)]
    pub elm: ElmSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_families < 1 {
            return Err(Error::field("num_families", "must be at least 1"));
        }
        if self.per_class < 2 {
            return Err(Error::field("per_class", "at least 2 samples per class are needed for a split"));
        }
        if let Some(g) = self.gan_per_class {
            if g < 2 {
                return Err(Error::field("gan_per_class", "at least 2 samples per class are needed for a split"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::field("train_fraction", format!("{} is not in (0, 1)", self.train_fraction)));
        }
        self.gan_config()?;
        self.cnn_config()?;
        if self.elm.hidden_units == Some(0) {
            return Err(Error::field("elm.hidden_units", "must be at least 1"));
        }
        Ok(())
    }

    pub fn gan_config(&self) -> Result<GanConfig> {
        self.acgan.to_config(self.image_size, self.num_families, self.seed)
    }

    pub fn cnn_config(&self) -> Result<CnnConfig> {
        self.cnn.to_config(self.image_size, 2 * self.num_families, self.seed)
    }

    pub fn elm_hidden_units(&self) -> usize {
        self.elm.hidden_units_for(self.image_size)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Root under which run directories are created: the environment override,
/// else `fallback`.
pub fn runs_root(fallback: &Path) -> PathBuf {
    std::env::var_os(RUNS_ENV).map(PathBuf::from).unwrap_or_else(|| fallback.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "detail")]
pub enum StageStatus {
    Ok,
    Failed(String),
    Skipped,
}

pub const STAGES: [&str; 6] = ["corpus", "acgan", "fakes", "dataset", "cnn", "elm"];

/// Contents of `summary.json`. Accuracies are percentages with one decimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acgan_balanced_acc: Option<f64>,
    pub cnn_test_acc: Option<f64>,
    pub cnn_balanced_acc: Option<f64>,
    pub elm_test_acc: Option<f64>,
    pub elm_balanced_acc: Option<f64>,
    pub cnn_real_fake_acc: Option<f64>,
    pub elm_real_fake_acc: Option<f64>,
    pub cnn_condensed: Option<CondensedMatrix>,
    pub elm_condensed: Option<CondensedMatrix>,
    pub classes: Vec<String>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub stages: Vec<(String, StageStatus)>,
}

impl Summary {
    pub fn succeeded(&self) -> bool {
        self.stages.iter().all(|(_, s)| *s == StageStatus::Ok)
    }

    pub fn failed_stage(&self) -> Option<(&str, &str)> {
        self.stages.iter().find_map(|(name, s)| match s {
            StageStatus::Failed(msg) => Some((name.as_str(), msg.as_str())),
            _ => None,
        })
    }
}

/// Ratio as a percentage rounded to one decimal.
pub fn percent(ratio: f64) -> f64 {
    (ratio * 1000.0).round() / 10.0
}

pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub summary: Summary,
    /// Unrounded figures for programmatic checks.
    pub acgan_trace: Option<acgan::TrainingTrace>,
    pub acgan_accuracy: Option<f64>,
    pub cnn_report: Option<EvalReport>,
    pub elm_report: Option<EvalReport>,
}

/// Runs every stage under `<runs_root>/<config hash>/`. Stage failures are
/// recorded in the summary (later stages are skipped) rather than returned;
/// only invalid configuration or an unwritable run directory is an `Err`.
pub fn run_experiment(config: &ExperimentConfig, runs_root: &Path) -> Result<ExperimentOutcome> {
    config.validate()?;
    let hash = config.hash();
    let run_dir = runs_root.join(&hash);
    for sub in ["acgan", "cnn", "elm", "plots", "matrices"] {
        let d = run_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut runner = Runner {
        config,
        run_dir: run_dir.clone(),
        outcome: ExperimentOutcome {
            run_dir: run_dir.clone(),
            summary: Summary {
                acgan_balanced_acc: None,
                cnn_test_acc: None,
                cnn_balanced_acc: None,
                elm_test_acc: None,
                elm_balanced_acc: None,
                cnn_real_fake_acc: None,
                elm_real_fake_acc: None,
                cnn_condensed: None,
                elm_condensed: None,
                classes: Vec::new(),
                config_hash: hash,
                config: config.clone(),
                stages: STAGES.iter().map(|s| (s.to_string(), StageStatus::Skipped)).collect(),
            },
            acgan_trace: None,
            acgan_accuracy: None,
            cnn_report: None,
            elm_report: None,
        },
    };
    runner.run();
    let summary_path = run_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&runner.outcome.summary)?;
    fs::write(&summary_path, json + "\n").map_err(|e| Error::io(&summary_path, e))?;
    Ok(runner.outcome)
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    run_dir: PathBuf,
    outcome: ExperimentOutcome,
}

impl Runner<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Option<T> {
        info!("stage {name}");
        let result = f(self);
        let status = match &result {
            Ok(_) => StageStatus::Ok,
            Err(e) => {
                error!("stage {name} failed: {e}");
                StageStatus::Failed(e.to_string())
            }
        };
        if let Some(entry) = self.outcome.summary.stages.iter_mut().find(|(s, _)| s == name) {
            entry.1 = status;
        }
        result.ok()
    }

    fn run(&mut self) {
        let cfg = self.config;
        let Some(pool) = self.stage("corpus", |_| load_corpus(cfg)) else { return };
        let Some(model) = self.stage("acgan", |r| r.train_gan(&pool)) else { return };
        let fakes_dir = self.run_dir.join("acgan").join("fakes");
        let Some(fakes) = self.stage("fakes", |_| {
            acgan::sample_fake_dataset(&model, cfg.per_class, &fakes_dir, cfg.seed.wrapping_add(3))
        }) else {
            return;
        };
        let Some(split) = self.stage("dataset", |r| r.build_dataset(&pool, &fakes)) else { return };
        self.outcome.summary.classes = split.train.class_names();
        // the two classifiers are independent: a CNN failure does not skip the ELM
        self.stage("cnn", |r| r.run_cnn(&split));
        self.stage("elm", |r| r.run_elm(&split));
    }

    fn train_gan(&mut self, pool: &DatasetManifest) -> Result<acgan::GanModel> {
        let cfg = self.config;
        let dir = self.run_dir.join("acgan");
        let gan_pool = match cfg.gan_per_class {
            Some(p) => corpus::stratified_sample(pool, p, cfg.seed)?,
            None => pool.clone(),
        };
        let split = corpus::split_train_test(&gan_pool, cfg.train_fraction, cfg.seed)?;
        split.train.write_csv(&dir.join("train_manifest.csv"))?;
        split.test.write_csv(&dir.join("test_manifest.csv"))?;
        let gan_config = cfg.gan_config()?;
        let options = TrainOptions {
            held_out: Some(&split.test),
            checkpoint_dir: Some(dir.join("checkpoints")),
            checkpoint_every: cfg.acgan.checkpoint_every,
        };
        let (model, trace) = acgan::train_acgan(&split.train, &gan_config, &options)?;
        model.save(&dir.join("model.ckpt"))?;
        trace.write_csv(&dir.join("trace.csv"))?;
        plot::line_plot(
            &[(&trace.g_losses(), plot::BLUE), (&trace.d_losses(), plot::ORANGE)],
            &self.run_dir.join("plots").join("acgan_loss.png"),
            800,
            400,
        )?;
        let accuracy = acgan::discriminator_accuracy(&model, &split.test)?;
        info!("discriminator balanced accuracy {:.3}", accuracy);
        self.outcome.summary.acgan_balanced_acc = Some(percent(accuracy));
        self.outcome.acgan_accuracy = Some(accuracy);
        self.outcome.acgan_trace = Some(trace);
        Ok(model)
    }

    fn build_dataset(&mut self, pool: &DatasetManifest, fakes: &DatasetManifest) -> Result<corpus::Split> {
        let cfg = self.config;
        let split = classification_split(pool, Some(fakes), cfg.per_class, cfg.train_fraction, cfg.seed)?;
        split.train.write_csv(&self.run_dir.join("cnn").join("train_manifest.csv"))?;
        split.test.write_csv(&self.run_dir.join("cnn").join("test_manifest.csv"))?;
        Ok(split)
    }

    fn write_matrices(&mut self, name: &str, report: &EvalReport) -> Result<CondensedMatrix> {
        let matrices = self.run_dir.join("matrices");
        let plots = self.run_dir.join("plots");
        report.confusion.write_csv(&matrices.join(format!("{name}_confusion.csv")))?;
        let condensed = condense(&report.confusion)?;
        let path = matrices.join(format!("{name}_condensed.csv"));
        fs::write(&path, condensed.to_csv()).map_err(|e| Error::io(&path, e))?;
        plot::heatmap(report.confusion.counts(), &plots.join(format!("{name}_confusion.png")), 24)?;
        let rows: Vec<Vec<u64>> = condensed.counts.iter().map(|r| r.to_vec()).collect();
        plot::heatmap(&rows, &plots.join(format!("{name}_condensed.png")), 48)?;
        let path = self.run_dir.join(name).join("report.json");
        fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))?;
        Ok(condensed)
    }

    fn run_cnn(&mut self, split: &corpus::Split) -> Result<()> {
        let cnn_config = self.config.cnn_config()?;
        let (model, report) = cnn::train_cnn(Cnn::build(&cnn_config)?, split)?;
        model.save(&self.run_dir.join("cnn").join("model.ckpt"))?;
        let losses: Vec<f64> = model.history.iter().map(|h| h.loss).collect();
        let train_acc: Vec<f64> = model.history.iter().map(|h| h.train_accuracy).collect();
        plot::line_plot(
            &[(&losses, plot::BLUE), (&train_acc, plot::GREEN)],
            &self.run_dir.join("plots").join("cnn_training.png"),
            800,
            400,
        )?;
        let condensed = self.write_matrices("cnn", &report)?;
        let s = &mut self.outcome.summary;
        s.cnn_test_acc = Some(percent(report.accuracy));
        s.cnn_balanced_acc = Some(percent(report.balanced_accuracy));
        s.cnn_real_fake_acc = Some(percent(real_fake_accuracy(&report.confusion)?));
        s.cnn_condensed = Some(condensed);
        self.outcome.cnn_report = Some(report);
        Ok(())
    }

    fn run_elm(&mut self, split: &corpus::Split) -> Result<()> {
        let cfg = self.config;
        let seed = cfg.elm.seed.unwrap_or(cfg.seed);
        let (model, report) = elm::train_elm(split, cfg.elm_hidden_units(), seed)?;
        model.save(&self.run_dir.join("elm").join("model.bin"))?;
        let condensed = self.write_matrices("elm", &report)?;
        let s = &mut self.outcome.summary;
        s.elm_test_acc = Some(percent(report.accuracy));
        s.elm_balanced_acc = Some(percent(report.balanced_accuracy));
        s.elm_real_fake_acc = Some(percent(real_fake_accuracy(&report.confusion)?));
        s.elm_condensed = Some(condensed);
        self.outcome.elm_report = Some(report);
        Ok(())
    }
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let load = corpus::load_image_corpus(&cfg.corpus_dir, cfg.image_size)?;
    if !load.skipped.is_empty() {
        info!("skipped {} unreadable images", load.skipped.len());
    }
    let manifest = load.manifest;
    if manifest.num_classes() != cfg.num_families {
        return Err(Error::field(
            "num_families",
            format!("config says {}, corpus holds {}", cfg.num_families, manifest.num_classes()),
        ));
    }
    Ok(manifest)
}

/// Every `summary.json` directly under `runs_root`, sorted by run directory.
pub fn collect_summaries(runs_root: &Path) -> Result<Vec<(PathBuf, Summary)>> {
    let mut out = Vec::new();
    if !runs_root.is_dir() {
        return Err(Error::Config(format!("runs directory {} does not exist", runs_root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs_root)
        .map_err(|e| Error::io(runs_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    dirs.sort();
    for dir in dirs {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        out.push((dir, serde_json::from_str(&text)?));
    }
    Ok(out)
}

/// Writes `report.csv` and a grouped bar chart (CNN multiclass, CNN
/// real-vs-fake, ELM multiclass, ELM real-vs-fake per run) under `runs_root`.
pub fn write_report(runs_root: &Path) -> Result<Vec<(PathBuf, Summary)>> {
    let runs = collect_summaries(runs_root)?;
    let mut csv = String::from(
        "run,dataset,image_size,acgan_balanced_acc,cnn_test_acc,cnn_real_fake_acc,elm_test_acc,elm_real_fake_acc\n",
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
    let mut bars = Vec::new();
    for (dir, s) in &runs {
        let run = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        csv.push_str(&format!(
            "{run},{},{},{},{},{},{},{}\n",
            s.config.dataset,
            s.config.image_size,
            fmt(s.acgan_balanced_acc),
            fmt(s.cnn_test_acc),
            fmt(s.cnn_real_fake_acc),
            fmt(s.elm_test_acc),
            fmt(s.elm_real_fake_acc)
        ));
        for v in [s.cnn_test_acc, s.cnn_real_fake_acc, s.elm_test_acc, s.elm_real_fake_acc] {
            bars.push(v.unwrap_or(0.0));
        }
    }
    let path = runs_root.join("report.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    plot::bar_chart(&bars, 4, 100.0, &runs_root.join("report.png"), 300)?;
    Ok(runs)
}
