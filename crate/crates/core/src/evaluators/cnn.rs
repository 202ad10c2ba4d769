//! Small convolutional classifier: two valid 3×3 convolutions with max
//! pooling, then dense layers of 128 and 50 units and a softmax output.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels_by_name;
use crate::convert::load_scaled_images;
use crate::corpus::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::nn::checkpoint::{self, load_sequential, sequential_arrays, ArrayTable};
use crate::nn::layers::{Act, Activation, Conv2d, Dropout, Flatten, Linear, MaxPool2};
use crate::nn::loss::{argmax, softmax_ce, softmax_rows};
use crate::nn::optim::Adam;
use crate::nn::{Ctx, Init, Layer, Mode, Scalar, Sequential, Tensor};

fn default_learning_rate() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

impl CnnConfig {
    pub fn new(image_size: usize, num_classes: usize) -> Self {
        CnnConfig {
            image_size,
            num_classes,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            learning_rate: default_learning_rate(),
        }
    }

    /// Side length after each convolution + pooling stage.
    fn stage_sizes(&self) -> (usize, usize) {
        let s1 = self.image_size.saturating_sub(2) / 2;
        (s1, s1.saturating_sub(2) / 2)
    }

    /// Width of the flattened features entering the first dense layer.
    pub fn flat_features(&self) -> usize {
        let s2 = self.stage_sizes().1;
        15 * s2 * s2
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_sizes().1 == 0 {
            return Err(Error::field(
                "image_size",
                format!("{} is too small for two convolution + pooling stages (need at least 10)", self.image_size),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::field("num_classes", "a classifier needs at least 2 classes"));
        }
        if self.epochs == 0 {
            return Err(Error::field("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::field("batch_size", "must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::field("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Loss and training accuracy after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

pub struct Cnn<S: Scalar = f32> {
    pub config: CnnConfig,
    pub classes: Vec<String>,
    pub history: Vec<EpochStats>,
    net: Sequential<S>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: CnnConfig,
    classes: Vec<String>,
}

pub fn build_cnn(config: &CnnConfig) -> Result<Cnn> {
    Cnn::build(config)
}

impl<S: Scalar> Cnn<S> {
    pub fn build(config: &CnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net = Sequential::new();
        net.push(Conv2d::new(1, 30, 3, 1, 0, Init::Glorot, Init::Zeros, &mut rng))
            .push(Act::new(Activation::Relu))
            .push(MaxPool2::new())
            .push(Conv2d::new(30, 15, 3, 1, 0, Init::Glorot, Init::Zeros, &mut rng))
            .push(Act::new(Activation::Relu))
            .push(MaxPool2::new())
            .push(Dropout::new(0.25, false))
            .push(Flatten::new())
            .push(Linear::new(config.flat_features(), 128, Init::Glorot, Init::Zeros, &mut rng))
            .push(Act::new(Activation::Relu))
            .push(Dropout::new(0.5, false))
            .push(Linear::new(128, 50, Init::Glorot, Init::Zeros, &mut rng))
            .push(Act::new(Activation::Relu))
            .push(Linear::new(50, config.num_classes, Init::Glorot, Init::Zeros, &mut rng));
        Ok(Cnn {
            config: config.clone(),
            classes: (0..config.num_classes).map(|k| format!("class{k:02}")).collect(),
            history: Vec::new(),
            net,
        })
    }

    pub fn with_classes(mut self, classes: Vec<String>) -> Result<Self> {
        if classes.len() != self.config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for a {}-class network",
                classes.len(),
                self.config.num_classes
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    /// `(name, parameter count)` per trainable layer, in order.
    pub fn parameter_report(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, p) in self.net.named_params() {
            let layer = name.split('.').next().unwrap_or_default().to_string();
            match out.last_mut() {
                Some((l, n)) if *l == layer => *n += p.value.len(),
                _ => out.push((layer, p.value.len())),
            }
        }
        out
    }

    pub fn parameter_snapshot(&self) -> Vec<f32> {
        sequential_arrays(&self.net, "net").into_iter().flat_map(|a| a.data).collect()
    }

    fn tensor(&self, values: &[f64]) -> Tensor<S> {
        let n = self.config.image_size;
        Tensor::new(vec![values.len() / (n * n), 1, n, n], values.iter().map(|&v| S::lit(v)).collect())
    }

    /// Softmax class probabilities, one row of `K` per image (`N×n²` input).
    pub fn predict_proba(&self, images: &[f64]) -> Vec<Vec<f64>> {
        let n2 = self.config.image_size * self.config.image_size;
        let k = self.config.num_classes;
        let mut out = Vec::with_capacity(images.len() / n2);
        for chunk in images.chunks(256 * n2) {
            let logits = self.net.infer(self.tensor(chunk));
            let probs = softmax_rows(logits.data(), k);
            out.extend(probs.chunks(k).map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()));
        }
        out
    }

    pub fn predict(&self, images: &[f64]) -> Vec<usize> {
        self.predict_proba(images).iter().map(|r| argmax(r)).collect()
    }

    /// Mini-batch training with Adam on in-memory images; records per-epoch stats.
    pub fn fit(&mut self, images: &[f64], labels: &[usize]) -> Result<()> {
        let n2 = self.config.image_size * self.config.image_size;
        let k = self.config.num_classes;
        if labels.is_empty() || images.len() != labels.len() * n2 {
            return Err(Error::Shape {
                expected: format!("{} images of {n2} values", labels.len()),
                got: format!("{} values", images.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(1));
        let mut ctx = Ctx::new(Mode::Train, ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(2)));
        let mut opt = Adam::<S>::new(self.config.learning_rate, 0.9, 0.999);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct) = (0.0, 0);
            for chunk in order.chunks(self.config.batch_size) {
                let mut batch = Vec::with_capacity(chunk.len() * n2);
                let mut y = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    batch.extend_from_slice(&images[i * n2..(i + 1) * n2]);
                    y.push(labels[i]);
                }
                self.net.zero_grad();
                let logits = self.net.forward(self.tensor(&batch), &mut ctx);
                let (loss, grad) = softmax_ce(logits.data(), k, &y);
                correct += logits.data().chunks(k).zip(&y).filter(|(r, &t)| argmax(r) == t).count();
                self.net.backward(Tensor::new(logits.shape().to_vec(), grad));
                opt.step(self.net.params_mut());
                let loss = loss.to_f64().unwrap_or(f64::NAN);
                if !loss.is_finite() {
                    return Err(Error::NonFinite { what: "classifier loss".into(), iteration: epoch });
                }
                loss_sum += loss * chunk.len() as f64;
            }
            let stats = EpochStats {
                epoch,
                loss: loss_sum / labels.len() as f64,
                train_accuracy: correct as f64 / labels.len() as f64,
            };
            if (epoch + 1) % 10 == 0 || epoch + 1 == self.config.epochs {
                info!(
                    "cnn epoch {}/{}: loss {:.4} train acc {:.3}",
                    epoch + 1,
                    self.config.epochs,
                    stats.loss,
                    stats.train_accuracy
                );
            }
            self.history.push(stats);
        }
        Ok(())
    }

    /// Writes the parameter file and a `.json` sidecar with config and class names.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, &sequential_arrays(&self.net, "net"))?;
        let sidecar = Sidecar { config: self.config.clone(), classes: self.classes.clone() };
        let json = crate::acgan::sidecar_path(path);
        fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = crate::acgan::sidecar_path(path);
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        let mut cnn = Self::build(&sidecar.config)?.with_classes(sidecar.classes)?;
        let mut table = ArrayTable::new(checkpoint::read(path)?);
        load_sequential(&mut cnn.net, "net", &mut table)?;
        Ok(cnn)
    }
}

/// Class names of a training manifest after checking they match the network.
fn training_classes(config: &CnnConfig, train: &DatasetManifest) -> Result<Vec<String>> {
    if train.is_empty() {
        return Err(Error::Empty("training manifest has no records".into()));
    }
    if train.num_classes() < 2 {
        return Err(Error::Config("a classifier needs at least 2 classes in the training set".into()));
    }
    if train.num_classes() != config.num_classes {
        return Err(Error::field(
            "num_classes",
            format!("config says {}, training set holds {}", config.num_classes, train.num_classes()),
        ));
    }
    Ok(train.class_names())
}

/// Trains on `split.train` and reports on `split.test`. Every test class must
/// also occur in the training set.
pub fn train_cnn(cnn: Cnn, split: &Split) -> Result<(Cnn, EvalReport)> {
    let classes = training_classes(&cnn.config, &split.train)?;
    for name in split.test.class_names() {
        if !classes.contains(&name) {
            return Err(Error::Config(format!("class `{name}` is absent from the training set")));
        }
    }
    let mut cnn = cnn.with_classes(classes)?;
    let images = load_scaled_images(&split.train)?;
    cnn.fit(&images, &split.train.labels())?;
    let report = evaluate_cnn(&cnn, &split.test)?;
    Ok((cnn, report))
}

pub fn evaluate_cnn<S: Scalar>(cnn: &Cnn<S>, test: &DatasetManifest) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test manifest has no records".into()));
    }
    let truth = labels_by_name(&cnn.classes, test)?;
    let predicted = cnn.predict(&load_scaled_images(test)?);
    EvalReport::from_predictions(cnn.classes.clone(), &truth, &predicted)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_and_validation() {
        assert_eq!(CnnConfig::new(64, 20).flat_features(), 2940);
        assert_eq!(CnnConfig::new(32, 4).flat_features(), 15 * 6 * 6);
        assert!(CnnConfig::new(10, 2).validate().is_ok());
        assert!(CnnConfig::new(9, 2).validate().is_err());
        assert!(CnnConfig::new(32, 1).validate().is_err());
    }

    #[test]
    fn parameter_counts() {
        let cnn = build_cnn(&CnnConfig::new(64, 20)).unwrap();
        let report = cnn.parameter_report();
        assert_eq!(report[0].1, 30 * (3 * 3 + 1));
        assert_eq!(report[1].1, 15 * (30 * 9 + 1));
        // 128·(2940 + 1): the dense-layer count printed for 64×64 inputs
        assert_eq!(report[2].1, 376_448);
        assert_eq!(report[3].1, 6450);
        assert_eq!(report[4].1, 20 * 51);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let cnn = build_cnn(&CnnConfig::new(64, 20)).unwrap();
        let images: Vec<f64> = (0..3 * 64 * 64).map(|i| ((i % 13) as f64 / 6.0) - 1.0).collect();
        for row in cnn.predict_proba(&images) {
            assert_eq!(row.len(), 20);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn initialisation_is_seeded() {
        let c = CnnConfig::new(16, 3);
        assert_eq!(build_cnn(&c).unwrap().parameter_snapshot(), build_cnn(&c).unwrap().parameter_snapshot());
        let other = CnnConfig { seed: 1, ..c };
        assert_ne!(
            build_cnn(&other).unwrap().parameter_snapshot(),
            build_cnn(&CnnConfig::new(16, 3)).unwrap().parameter_snapshot()
        );
    }

    #[test]
    fn learns_a_trivial_task() {
        let mut c = CnnConfig::new(12, 2);
        c.epochs = 40;
        c.batch_size = 8;
        let mut cnn = build_cnn(&c).unwrap();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..32 {
            let y = i % 2;
            images.extend((0..144).map(|p| if (p / 12 < 6) == (y == 0) { 1.0 } else { -1.0 }));
            labels.push(y);
        }
        cnn.fit(&images, &labels).unwrap();
        assert_eq!(cnn.predict(&images), labels);
        assert_eq!(cnn.history.len(), 40);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cnn =
            build_cnn(&CnnConfig::new(16, 3)).unwrap().with_classes(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cnn.ckpt");
        cnn.save(&path).unwrap();
        let back = Cnn::<f32>::load(&path).unwrap();
        assert_eq!(back.parameter_snapshot(), cnn.parameter_snapshot());
        assert_eq!(back.classes, cnn.classes);
    }
}
