//! Command-line entry point. Every subcommand prints one summary line on
//! success; exit codes are 0 (success), 64 (usage), 65 (configuration) and
//! 1 (runtime failure).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::warn;

use crate::acgan::{self, GanModel, TrainOptions};
use crate::config::RunConfig;
use crate::convert;
use crate::corpus::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::evaluators::cnn::{self, Cnn};
use crate::evaluators::elm;
use crate::experiments::{self, condense, percent, real_fake_accuracy};
use crate::metrics::EvalReport;
use crate::plot;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_CONFIG: i32 = 65;

#[derive(Debug, Parser)]
#[command(name = "malimg-forge", version, about = "Malware images, AC-GAN forgeries and CNN/ELM evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random choice (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `experiment` and `report`: the runs root)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus of per-family binary files
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        families: Option<usize>,
        #[arg(long)]
        per_family: Option<usize>,
        #[arg(long)]
        bytes: Option<usize>,
    },
    /// Convert `<input>/<family>/<file>` binaries to n×n grayscale PNGs
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        /// Manifest path (default `<out-dir>/manifest.csv`)
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the AC-GAN on an image corpus
    TrainAcgan {
        #[command(flatten)]
        common: Common,
        /// Image corpus laid out as `<family>/<image>.png`
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        num_batches: Option<usize>,
        #[arg(long)]
        width_divisor: Option<usize>,
    },
    /// Generate fake images per class from a trained AC-GAN checkpoint
    SampleFakes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Train and evaluate the CNN on real (and optionally fake) classes
    EvalCnn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: EvalData,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train and evaluate the ELM on real (and optionally fake) classes
    EvalElm {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: EvalData,
        #[arg(long)]
        hidden_units: Option<usize>,
    },
    /// Run the full protocol under `<runs root>/<config hash>/`
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate and chart every run under the runs root
    Report {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct EvalData {
    /// Real image corpus directory
    #[arg(long)]
    real: Option<PathBuf>,
    /// Manifest CSV of generated images, added as `<family>_fake` classes
    #[arg(long)]
    fakes: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(line) => {
            println!("{line}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("--{flag} is required (or set it in the config file)")))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::Synth { common, families, per_family, bytes } => {
            let cfg = load_config(&common)?;
            let section = cfg.synth.as_ref();
            let out = required(common.out_dir.or_else(|| section.map(|s| s.out_dir.clone())), "out-dir")?;
            let families = required(families.or(section.map(|s| s.families)), "families")?;
            let per_family = required(per_family.or(section.map(|s| s.per_family)), "per-family")?;
            let bytes = bytes.or(section.map(|s| s.bytes_per_sample)).unwrap_or(4096);
            corpus::synth_corpus(&out, families, per_family, bytes, cfg.seed_or(common.seed))?;
            Ok(format!("wrote {} synthetic files ({families} families) to {}", families * per_family, out.display()))
        }
        Command::Convert { common, input, size, manifest } => {
            let cfg = load_config(&common)?;
            let section = cfg.convert.as_ref();
            let input = required(input.or_else(|| section.map(|c| c.input.clone())), "input")?;
            let out = required(common.out_dir.or_else(|| section.map(|c| c.output.clone())), "out-dir")?;
            let size = required(size.or(section.map(|c| c.image_size)), "size")?;
            let report = run_convert(&input, size, &out, manifest.as_deref())?;
            Ok(format!(
                "converted {} files to {size}x{size} images in {} ({} too short, {} unreadable)",
                report.manifest.len(),
                out.display(),
                report.too_short.len(),
                report.skipped.len()
            ))
        }
        Command::TrainAcgan { common, corpus: corpus_dir, size, epochs, num_batches, width_divisor } => {
            let cfg = load_config(&common)?;
            let seed = cfg.seed_or(common.seed);
            let corpus_dir = required(corpus_dir.or_else(|| cfg.convert.as_ref().map(|c| c.output.clone())), "corpus")?;
            let size = required(size.or(cfg.convert.as_ref().map(|c| c.image_size)), "size")?;
            let out = required(common.out_dir, "out-dir")?;
            let mut section = cfg.acgan.clone();
            section.epochs = epochs.unwrap_or(section.epochs);
            section.num_batches = num_batches.unwrap_or(section.num_batches);
            section.width_divisor = width_divisor.unwrap_or(section.width_divisor);
            let pool = corpus::load_image_corpus(&corpus_dir, size)?.manifest;
            let gan_config = section.to_config(size, pool.num_classes(), seed)?;
            let fraction = cfg.experiment.as_ref().and_then(|e| e.train_fraction).unwrap_or(0.7);
            let split = corpus::split_train_test(&pool, fraction, seed)?;
            create_dir(&out)?;
            split.train.write_csv(&out.join("train_manifest.csv"))?;
            split.test.write_csv(&out.join("test_manifest.csv"))?;
            let options = TrainOptions {
                held_out: Some(&split.test),
                checkpoint_dir: Some(out.join("checkpoints")),
                checkpoint_every: section.checkpoint_every,
            };
            let (model, trace) = acgan::train_acgan(&split.train, &gan_config, &options)?;
            model.save(&out.join("model.ckpt"))?;
            trace.write_csv(&out.join("trace.csv"))?;
            plot::line_plot(
                &[(&trace.g_losses(), plot::BLUE), (&trace.d_losses(), plot::ORANGE)],
                &out.join("loss.png"),
                800,
                400,
            )?;
            let accuracy = acgan::discriminator_accuracy(&model, &split.test)?;
            Ok(format!(
                "trained AC-GAN for {} epochs on {} images; discriminator balanced accuracy {:.1}%",
                gan_config.epochs,
                split.train.len(),
                percent(accuracy)
            ))
        }
        Command::SampleFakes { common, model, per_class } => {
            let cfg = load_config(&common)?;
            let out = required(common.out_dir, "out-dir")?;
            let per_class = per_class.or(cfg.experiment.as_ref().and_then(|e| e.per_class)).unwrap_or(100);
            let model = GanModel::<f32>::load(&model)?;
            let manifest = acgan::sample_fake_dataset(&model, per_class, &out, cfg.seed_or(common.seed))?;
            manifest.write_csv(&out.join("manifest.csv"))?;
            Ok(format!(
                "generated {} fake images ({} classes) in {}",
                manifest.len(),
                manifest.num_classes(),
                out.display()
            ))
        }
        Command::EvalCnn { common, data, epochs } => {
            let cfg = load_config(&common)?;
            let seed = cfg.seed_or(common.seed);
            let (split, out) = eval_split(&common, &cfg, &data, seed)?;
            let mut section = cfg.cnn.clone();
            section.epochs = epochs.unwrap_or(section.epochs);
            let cnn_config = section.to_config(split.train.image_size(), split.train.num_classes(), seed)?;
            let (model, report) = cnn::train_cnn(Cnn::build(&cnn_config)?, &split)?;
            model.save(&out.join("model.ckpt"))?;
            write_eval(&out, &report, "CNN")
        }
        Command::EvalElm { common, data, hidden_units } => {
            let cfg = load_config(&common)?;
            let seed = cfg.seed_or(common.seed);
            let (split, out) = eval_split(&common, &cfg, &data, seed)?;
            let hidden = hidden_units.unwrap_or_else(|| cfg.elm.hidden_units_for(split.train.image_size()));
            if hidden == 0 {
                return Err(Error::field("hidden_units", "must be at least 1"));
            }
            let (model, report) = elm::train_elm(&split, hidden, cfg.elm.seed.unwrap_or(seed))?;
            model.save(&out.join("model.bin"))?;
            write_eval(&out, &report, "ELM")
        }
        Command::Experiment { common } => {
            let cfg = load_config(&common)?;
            if common.config.is_none() {
                return Err(Error::Config("--config is required for `experiment`".into()));
            }
            let exp = cfg.experiment_config(common.seed)?;
            let seed = exp.seed;
            if let Some(s) = &cfg.synth {
                corpus::synth_corpus(&s.out_dir, s.families, s.per_family, s.bytes_per_sample, seed)?;
            }
            if let Some(c) = &cfg.convert {
                run_convert(&c.input, c.image_size, &c.output, None)?;
            }
            let root = common
                .out_dir
                .unwrap_or_else(|| experiments::runs_root(cfg.runs_dir.as_deref().unwrap_or(Path::new("runs"))));
            let outcome = experiments::run_experiment(&exp, &root)?;
            let s = &outcome.summary;
            if let Some((stage, msg)) = s.failed_stage() {
                return Err(Error::Checkpoint(format!(
                    "stage {stage} failed: {msg} (partial artifacts in {})",
                    outcome.run_dir.display()
                )));
            }
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.1}%")).unwrap_or_else(|| "n/a".into());
            Ok(format!(
                "run {}: acgan {} | cnn {} (real/fake {}) | elm {} (real/fake {})",
                outcome.run_dir.display(),
                fmt(s.acgan_balanced_acc),
                fmt(s.cnn_test_acc),
                fmt(s.cnn_real_fake_acc),
                fmt(s.elm_test_acc),
                fmt(s.elm_real_fake_acc)
            ))
        }
        Command::Report { common } => {
            let cfg = load_config(&common)?;
            let root = common
                .out_dir
                .unwrap_or_else(|| experiments::runs_root(cfg.runs_dir.as_deref().unwrap_or(Path::new("runs"))));
            let runs = experiments::write_report(&root)?;
            Ok(format!("summarised {} runs into {}", runs.len(), root.join("report.csv").display()))
        }
    }
}

fn run_convert(input: &Path, size: usize, out: &Path, manifest: Option<&Path>) -> Result<convert::ConversionReport> {
    let report = convert::convert_corpus(input, size, out)?;
    for s in &report.skipped {
        warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| out.join("manifest.csv"));
    report.manifest.write_csv(&path)?;
    Ok(report)
}

fn eval_split(common: &Common, cfg: &RunConfig, data: &EvalData, seed: u64) -> Result<(corpus::Split, PathBuf)> {
    let size = required(data.size.or(cfg.convert.as_ref().map(|c| c.image_size)), "size")?;
    let real_dir = required(data.real.clone().or_else(|| cfg.convert.as_ref().map(|c| c.output.clone())), "real")?;
    let out = required(common.out_dir.clone(), "out-dir")?;
    let section = cfg.experiment.clone().unwrap_or_default();
    let per_class = data.per_class.or(section.per_class).unwrap_or(100);
    let fraction = section.train_fraction.unwrap_or(0.7);
    let pool = corpus::load_image_corpus(&real_dir, size)?.manifest;
    let fakes = data.fakes.as_deref().map(|p| DatasetManifest::read_csv(p, size, seed)).transpose()?;
    let split = experiments::classification_split(&pool, fakes.as_ref(), per_class, fraction, seed)?;
    create_dir(&out)?;
    split.train.write_csv(&out.join("train_manifest.csv"))?;
    split.test.write_csv(&out.join("test_manifest.csv"))?;
    Ok((split, out))
}

fn write_eval(out: &Path, report: &EvalReport, name: &str) -> Result<String> {
    write_json(&out.join("report.json"), report)?;
    report.confusion.write_csv(&out.join("confusion.csv"))?;
    plot::heatmap(report.confusion.counts(), &out.join("confusion.png"), 24)?;
    let has_fakes = report.confusion.labels().iter().any(|l| l.ends_with(corpus::FAKE_SUFFIX));
    let mut line = format!(
        "{name} test accuracy {:.1}% (balanced {:.1}%) over {} classes",
        percent(report.accuracy),
        percent(report.balanced_accuracy),
        report.confusion.size()
    );
    if has_fakes {
        let condensed = condense(&report.confusion)?;
        let path = out.join("condensed.csv");
        fs::write(&path, condensed.to_csv()).map_err(|e| Error::io(&path, e))?;
        line.push_str(&format!("; real-vs-fake {:.1}%", percent(real_fake_accuracy(&report.confusion)?)));
    }
    Ok(line)
}
