//! Auxiliary-classifier GAN over single-channel `n×n` images.
//!
//! The generator multiplies a learned class embedding into the latent noise,
//! projects to `128·(n/4)²` features and upsamples twice to `n×n` with a tanh
//! output. The discriminator is four stride-2 convolution blocks followed by
//! two heads on the flattened `128·(n/16)²` features: a validity score and
//! per-class scores, both sigmoid.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::convert::{load_scaled_images, ScaledImage};
use crate::corpus::{DatasetManifest, Realness, SampleRecord};
use crate::error::{Error, Result};
use crate::evaluators::labels_by_name;
use crate::metrics::balanced_accuracy;
use crate::nn::checkpoint::{self, load_sequential, ArrayTable, NamedArray};
use crate::nn::layers::{Act, Activation, BatchNorm, Conv2d, Dropout, Flatten, Linear, Upsample2x};
use crate::nn::loss::{argmax, bce_with_logits, renormalized_sigmoid_ce, sigmoid};
use crate::nn::optim::Adam;
use crate::nn::{to_f32, Ctx, Init, Layer, Mode, Param, Scalar, Sequential, Tensor};

pub const DEFAULT_LATENT_DIM: usize = 100;

fn default_latent_dim() -> usize {
    DEFAULT_LATENT_DIM
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub image_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub epochs: usize,
    /// Batches per epoch; the batch size is `ceil(N / num_batches)`.
    pub num_batches: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Divides every channel width; 1 is the full-size model.
    #[serde(default = "default_width_divisor")]
    pub width_divisor: usize,
}

impl GanConfig {
    pub fn new(image_size: usize, num_classes: usize) -> Self {
        GanConfig {
            image_size,
            num_classes,
            latent_dim: DEFAULT_LATENT_DIM,
            epochs: 1,
            num_batches: 1,
            seed: 0,
            learning_rate: default_learning_rate(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            width_divisor: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::field(
                "image_size",
                format!("{} must be a positive multiple of 16 for the discriminator stack", self.image_size),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::field("num_classes", "must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::field("latent_dim", "must be at least 1"));
        }
        if self.num_batches == 0 {
            return Err(Error::field("num_batches", "must be at least 1"));
        }
        if ![1, 2, 4, 8, 16].contains(&self.width_divisor) {
            return Err(Error::field("width_divisor", "must be one of 1, 2, 4, 8, 16"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::field("learning_rate", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::field(name, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    fn width(&self, full: usize) -> usize {
        full / self.width_divisor
    }

    /// Channels entering the generator's convolution stack.
    pub fn generator_channels(&self) -> usize {
        self.width(128)
    }

    /// Out-features of the generator projection: `128·(n/4)²` at full width.
    pub fn generator_projection_features(&self) -> usize {
        let s = self.image_size / 4;
        self.generator_channels() * s * s
    }

    /// In-features of both discriminator heads: `128·(n/16)²` at full width.
    pub fn discriminator_flat_features(&self) -> usize {
        let s = self.image_size / 16;
        self.width(128) * s * s
    }
}

/// Samples per batch when an epoch is split into `num_batches` batches.
pub fn batch_size_for(samples: usize, num_batches: usize) -> usize {
    samples.div_ceil(num_batches.max(1))
}

/// Latent noise (`B×latent_dim`, row-major) with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub noise: Vec<f64>,
    pub labels: Vec<usize>,
    pub latent_dim: usize,
}

impl LatentBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Standard-normal noise with labels uniform over the configured classes.
pub fn sample_latent(batch: usize, config: &GanConfig, seed: u64) -> LatentBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_latent_with(batch, config.latent_dim, config.num_classes, &mut rng)
}

fn sample_latent_with(batch: usize, latent_dim: usize, classes: usize, rng: &mut impl Rng) -> LatentBatch {
    let noise = (0..batch * latent_dim).map(|_| StandardNormal.sample(rng)).collect();
    let labels = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    LatentBatch { noise, labels, latent_dim }
}

pub struct Generator<S: Scalar> {
    embedding: Param<S>,
    projection: Linear<S>,
    body: Sequential<S>,
    latent_dim: usize,
    channels: usize,
    init_size: usize,
    cache: Option<(Vec<usize>, Vec<S>)>,
}

impl<S: Scalar> Generator<S> {
    fn new(config: &GanConfig, rng: &mut ChaCha8Rng) -> Self {
        let conv_init = Init::Normal { mean: 0.0, std: 0.02 };
        let bn_init = Init::Normal { mean: 1.0, std: 0.02 };
        let c1 = config.generator_channels();
        let c2 = config.width(64);
        let embedding = Param::new(
            "embedding",
            vec![config.num_classes, config.latent_dim],
            Init::Normal { mean: 0.0, std: 1.0 }.sample(config.num_classes * config.latent_dim, 1, 1, rng),
        );
        let projection = Linear::uniform_fan_in(config.latent_dim, config.generator_projection_features(), rng);
        let mut body = Sequential::new();
        body.push(BatchNorm::new(c1, 0.1, bn_init, rng))
            .push(Upsample2x)
            .push(Conv2d::new(c1, c1, 3, 1, 1, conv_init, Init::Zeros, rng))
            .push(BatchNorm::new(c1, 0.1, bn_init, rng))
            .push(Act::new(Activation::LeakyRelu(0.2)))
            .push(Upsample2x)
            .push(Conv2d::new(c1, c2, 3, 1, 1, conv_init, Init::Zeros, rng))
            .push(BatchNorm::new(c2, 0.1, bn_init, rng))
            .push(Act::new(Activation::LeakyRelu(0.2)))
            .push(Conv2d::new(c2, 1, 3, 1, 1, conv_init, Init::Zeros, rng))
            .push(Act::new(Activation::Tanh));
        Generator {
            embedding,
            projection,
            body,
            latent_dim: config.latent_dim,
            channels: c1,
            init_size: config.image_size / 4,
            cache: None,
        }
    }

    fn conditioned(&self, noise: &[S], labels: &[usize]) -> Tensor<S> {
        let l = self.latent_dim;
        let mut input = Vec::with_capacity(noise.len());
        for (b, &y) in labels.iter().enumerate() {
            let emb = &self.embedding.value[y * l..(y + 1) * l];
            input.extend(noise[b * l..(b + 1) * l].iter().zip(emb).map(|(&z, &e)| z * e));
        }
        Tensor::new(vec![labels.len(), l], input)
    }

    fn unflatten(&self, t: Tensor<S>) -> Tensor<S> {
        let b = t.batch();
        t.reshape(vec![b, self.channels, self.init_size, self.init_size])
    }

    /// Out-features of the latent projection.
    pub fn projection_features(&self) -> usize {
        self.projection.out_features
    }

    pub fn forward(&mut self, noise: &[S], labels: &[usize], ctx: &mut Ctx) -> Tensor<S> {
        let input = self.conditioned(noise, labels);
        let projected = self.projection.forward(input, ctx);
        let out = self.body.forward(self.unflatten(projected), ctx);
        self.cache = Some((labels.to_vec(), noise.to_vec()));
        out
    }

    pub fn infer(&self, noise: &[S], labels: &[usize]) -> Tensor<S> {
        let projected = self.projection.infer(self.conditioned(noise, labels));
        self.body.infer(self.unflatten(projected))
    }

    pub fn backward(&mut self, grad: Tensor<S>) {
        let (labels, noise) = self.cache.take().expect("backward before forward");
        let g = self.body.backward(grad);
        let b = g.batch();
        let g = self.projection.backward(g.reshape(vec![b, self.projection.out_features]));
        let l = self.latent_dim;
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..l {
                self.embedding.grad[y * l + j] += g.data()[i * l + j] * noise[i * l + j];
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = vec![&mut self.embedding];
        v.extend(self.projection.params_mut());
        v.extend(self.body.params_mut());
        v
    }

    fn named_arrays(&self) -> Vec<(String, &[usize], &[S])> {
        let mut v: Vec<(String, &[usize], &[S])> =
            vec![("generator.embedding".into(), self.embedding.shape.as_slice(), self.embedding.value.as_slice())];
        for p in self.projection.params() {
            v.push((format!("generator.projection.{}", p.name), &p.shape, &p.value));
        }
        for (name, p) in self.body.named_params() {
            v.push((format!("generator.body.{name}"), &p.shape, &p.value));
        }
        v
    }
}

pub struct Discriminator<S: Scalar> {
    body: Sequential<S>,
    adversarial: Linear<S>,
    auxiliary: Linear<S>,
    num_classes: usize,
}

/// Head outputs before the sigmoid.
pub struct HeadLogits<S> {
    pub validity: Vec<S>,
    pub classes: Vec<S>,
}

impl<S: Scalar> Discriminator<S> {
    fn new(config: &GanConfig, rng: &mut ChaCha8Rng) -> Self {
        let conv_init = Init::Normal { mean: 0.0, std: 0.02 };
        let bn_init = Init::Normal { mean: 1.0, std: 0.02 };
        let widths = [1, config.width(16), config.width(32), config.width(64), config.width(128)];
        let mut body = Sequential::new();
        for i in 0..4 {
            body.push(Conv2d::new(widths[i], widths[i + 1], 3, 2, 1, conv_init, Init::Zeros, rng))
                .push(Act::new(Activation::LeakyRelu(0.2)))
                .push(Dropout::new(0.25, true));
            if i > 0 {
                body.push(BatchNorm::new(widths[i + 1], 0.1, bn_init, rng));
            }
        }
        body.push(Flatten::new());
        let flat = config.discriminator_flat_features();
        Discriminator {
            body,
            adversarial: Linear::uniform_fan_in(flat, 1, rng),
            auxiliary: Linear::uniform_fan_in(flat, config.num_classes, rng),
            num_classes: config.num_classes,
        }
    }

    pub fn flat_features(&self) -> usize {
        self.adversarial.in_features
    }

    pub fn forward(&mut self, images: Tensor<S>, ctx: &mut Ctx) -> HeadLogits<S> {
        let flat = self.body.forward(images, ctx);
        let validity = self.adversarial.forward(flat.clone(), ctx).into_data();
        let classes = self.auxiliary.forward(flat, ctx).into_data();
        HeadLogits { validity, classes }
    }

    pub fn infer(&self, images: Tensor<S>) -> HeadLogits<S> {
        let flat = self.body.infer(images);
        HeadLogits {
            validity: self.adversarial.infer(flat.clone()).into_data(),
            classes: self.auxiliary.infer(flat).into_data(),
        }
    }

    /// Backpropagates head-logit gradients; returns the gradient on the images.
    pub fn backward(&mut self, d_validity: Vec<S>, d_classes: Vec<S>) -> Tensor<S> {
        let b = d_validity.len();
        let mut g = self.adversarial.backward(Tensor::new(vec![b, 1], d_validity));
        let g2 = self.auxiliary.backward(Tensor::new(vec![b, self.num_classes], d_classes));
        for (a, v) in g.data_mut().iter_mut().zip(g2.data()) {
            *a += *v;
        }
        self.body.backward(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = self.body.params_mut();
        v.extend(self.adversarial.params_mut());
        v.extend(self.auxiliary.params_mut());
        v
    }

    fn named_arrays(&self) -> Vec<(String, &[usize], &[S])> {
        let mut v: Vec<(String, &[usize], &[S])> = Vec::new();
        for (name, p) in self.body.named_params() {
            v.push((format!("discriminator.body.{name}"), &p.shape, &p.value));
        }
        for p in self.adversarial.params() {
            v.push((format!("discriminator.adversarial.{}", p.name), &p.shape, &p.value));
        }
        for p in self.auxiliary.params() {
            v.push((format!("discriminator.auxiliary.{}", p.name), &p.shape, &p.value));
        }
        v
    }
}

/// Generator and discriminator with the configuration that built them.
pub struct GanModel<S: Scalar = f32> {
    pub config: GanConfig,
    /// Class names by index; used to name sampled fake families.
    pub classes: Vec<String>,
    pub generator: Generator<S>,
    pub discriminator: Discriminator<S>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: GanConfig,
    classes: Vec<String>,
}

/// Builds a freshly initialised model; identical seeds give identical parameters.
pub fn build_gan(config: &GanConfig, seed: u64) -> Result<GanModel> {
    GanModel::build(config, seed)
}

impl<S: Scalar> GanModel<S> {
    pub fn build(config: &GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(config, &mut rng);
        let discriminator = Discriminator::new(config, &mut rng);
        Ok(GanModel {
            config: config.clone(),
            classes: (0..config.num_classes).map(|k| format!("class{k:02}")).collect(),
            generator,
            discriminator,
        })
    }

    pub fn with_classes(mut self, classes: Vec<String>) -> Result<Self> {
        if classes.len() != self.config.num_classes {
            return Err(Error::Config(format!(
                "{} class names for a {}-class model",
                classes.len(),
                self.config.num_classes
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&y| y >= self.config.num_classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes: self.config.num_classes }),
            None => Ok(()),
        }
    }

    fn image_tensor(&self, values: Vec<S>) -> Tensor<S> {
        let n = self.config.image_size;
        let b = values.len() / (n * n);
        Tensor::new(vec![b, 1, n, n], values)
    }

    /// Training-mode generator pass; activations stay cached for
    /// [`Self::generator_step_loss`].
    pub fn generate_for_training(&mut self, noise: &[S], labels: &[usize], ctx: &mut Ctx) -> Tensor<S> {
        self.generator.forward(noise, labels, ctx)
    }

    /// Generator loss `½(BCE(valid=1) + class CE)` on images produced by the
    /// preceding [`Self::generate_for_training`] call; leaves generator
    /// gradients accumulated (zeroed first).
    pub fn generator_step_loss(&mut self, fake: Tensor<S>, labels: &[usize], ctx: &mut Ctx) -> S {
        for p in self.generator.params_mut() {
            p.zero_grad();
        }
        let heads = self.discriminator.forward(fake, ctx);
        let half = S::lit(0.5);
        let (adv, d_adv) = bce_with_logits(&heads.validity, &vec![S::one(); labels.len()]);
        let (aux, d_aux) = renormalized_sigmoid_ce(&heads.classes, self.config.num_classes, labels);
        let d_img = self
            .discriminator
            .backward(d_adv.into_iter().map(|g| g * half).collect(), d_aux.into_iter().map(|g| g * half).collect());
        self.generator.backward(d_img);
        half * (adv + aux)
    }

    /// Discriminator loss: mean over the real and fake halves of
    /// `½(BCE + class CE)`; leaves discriminator gradients accumulated (zeroed first).
    pub fn discriminator_step_loss(
        &mut self,
        real: Tensor<S>,
        real_labels: &[usize],
        fake: Tensor<S>,
        fake_labels: &[usize],
        ctx: &mut Ctx,
    ) -> S {
        for p in self.discriminator.params_mut() {
            p.zero_grad();
        }
        let k = self.config.num_classes;
        let quarter = S::lit(0.25);
        let mut total = S::zero();
        for (images, labels, target) in [(real, real_labels, S::one()), (fake, fake_labels, S::zero())] {
            let heads = self.discriminator.forward(images, ctx);
            let (adv, d_adv) = bce_with_logits(&heads.validity, &vec![target; labels.len()]);
            let (aux, d_aux) = renormalized_sigmoid_ce(&heads.classes, k, labels);
            total += quarter * (adv + aux);
            self.discriminator.backward(
                d_adv.into_iter().map(|g| g * quarter).collect(),
                d_aux.into_iter().map(|g| g * quarter).collect(),
            );
        }
        total
    }

    fn named_arrays(&self) -> Vec<(String, &[usize], &[S])> {
        let mut v = self.generator.named_arrays();
        v.extend(self.discriminator.named_arrays());
        v
    }

    fn named_buffers(&self) -> Vec<(String, &[S])> {
        let mut v: Vec<(String, &[S])> = Vec::new();
        for (name, b) in self.generator.body.named_buffers() {
            v.push((format!("generator.body.{name}"), &b.value));
        }
        for (name, b) in self.discriminator.body.named_buffers() {
            v.push((format!("discriminator.body.{name}"), &b.value));
        }
        v
    }

    /// All parameters and buffers flattened in a fixed order.
    pub fn parameter_snapshot(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for (_, _, v) in self.named_arrays() {
            out.extend(to_f32(v));
        }
        for (_, v) in self.named_buffers() {
            out.extend(to_f32(v));
        }
        out
    }

    /// Writes the parameter file and a `.json` sidecar holding the configuration.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<NamedArray> = self
            .named_arrays()
            .into_iter()
            .map(|(name, shape, v)| NamedArray { name, shape: shape.to_vec(), data: to_f32(v) })
            .collect();
        for (name, v) in self.named_buffers() {
            arrays.push(NamedArray { name, shape: vec![v.len()], data: to_f32(v) });
        }
        checkpoint::write(path, &arrays)?;
        let sidecar = Sidecar { config: self.config.clone(), classes: self.classes.clone() };
        let json_path = sidecar_path(path);
        fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json_path = sidecar_path(path);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        let mut model = Self::build(&sidecar.config, 0)?.with_classes(sidecar.classes)?;
        let mut table = ArrayTable::new(checkpoint::read(path)?);
        model.generator.embedding.value = table.take("generator.embedding", model.generator.embedding.value.len())?;
        for p in model.generator.projection.params_mut() {
            p.value = table.take(&format!("generator.projection.{}", p.name), p.value.len())?;
        }
        load_sequential(&mut model.generator.body, "generator.body", &mut table)?;
        load_sequential(&mut model.discriminator.body, "discriminator.body", &mut table)?;
        for p in model.discriminator.adversarial.params_mut() {
            p.value = table.take(&format!("discriminator.adversarial.{}", p.name), p.value.len())?;
        }
        for p in model.discriminator.auxiliary.params_mut() {
            p.value = table.take(&format!("discriminator.auxiliary.{}", p.name), p.value.len())?;
        }
        Ok(model)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Generates one image per latent row with the generator in evaluation mode.
pub fn generate<S: Scalar>(model: &GanModel<S>, latent: &LatentBatch) -> Result<Vec<ScaledImage>> {
    model.check_labels(&latent.labels)?;
    if latent.latent_dim != model.config.latent_dim {
        return Err(Error::Shape {
            expected: format!("latent dim {}", model.config.latent_dim),
            got: latent.latent_dim.to_string(),
        });
    }
    let n = model.config.image_size;
    let noise: Vec<S> = latent.noise.iter().map(|&v| S::lit(v)).collect();
    let out = model.generator.infer(&noise, &latent.labels);
    out.data()
        .chunks(n * n)
        .map(|c| ScaledImage::new(n, c.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrimination {
    /// Probability that each image is real.
    pub validity: Vec<f64>,
    /// Per-class sigmoid scores, one row per image.
    pub class_scores: Vec<Vec<f64>>,
}

impl Discrimination {
    pub fn predicted_classes(&self) -> Vec<usize> {
        self.class_scores.iter().map(|r| argmax(r)).collect()
    }
}

fn discriminate_values<S: Scalar>(model: &GanModel<S>, values: &[f64]) -> Discrimination {
    let heads = model.discriminator.infer(model.image_tensor(values.iter().map(|&v| S::lit(v)).collect()));
    let k = model.config.num_classes;
    let f = |v: &S| sigmoid(*v).to_f64().unwrap_or(f64::NAN);
    Discrimination {
        validity: heads.validity.iter().map(f).collect(),
        class_scores: heads.classes.chunks(k).map(|r| r.iter().map(f).collect()).collect(),
    }
}

/// Runs both discriminator heads (evaluation mode) over a batch of images.
pub fn discriminate<S: Scalar>(model: &GanModel<S>, images: &[ScaledImage]) -> Result<Discrimination> {
    let n = model.config.image_size;
    if let Some(bad) = images.iter().find(|i| i.size() != n) {
        return Err(Error::Shape { expected: format!("{n}x{n} image"), got: format!("{0}x{0}", bad.size()) });
    }
    let values: Vec<f64> = images.iter().flat_map(|i| i.values().iter().copied()).collect();
    Ok(discriminate_values(model, &values))
}

/// Per-iteration losses plus per-epoch class accuracy on a held-out batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub iterations: Vec<TraceEntry>,
    pub epoch_accuracy: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: f64,
}

impl TrainingTrace {
    pub fn g_losses(&self) -> Vec<f64> {
        self.iterations.iter().map(|e| e.g_loss).collect()
    }

    pub fn d_losses(&self) -> Vec<f64> {
        self.iterations.iter().map(|e| e.d_loss).collect()
    }

    /// Mean generator loss over the iterations of the given epochs.
    pub fn mean_g_loss(&self, epochs: std::ops::Range<usize>) -> Option<f64> {
        let v: Vec<f64> = self.iterations.iter().filter(|e| epochs.contains(&e.epoch)).map(|e| e.g_loss).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// CSV `iteration,g_loss,d_loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,g_loss,d_loss\n");
        for e in &self.iterations {
            out.push_str(&format!("{},{},{}\n", e.iteration, e.g_loss, e.d_loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Optional behaviour of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Source of the per-epoch accuracy batch; the training set when absent.
    pub held_out: Option<&'a DatasetManifest>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Persist a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

const ACCURACY_BATCH: usize = 256;

/// Trains on every record of `train`; class indices come from the manifest.
pub fn train_acgan(
    train: &DatasetManifest,
    config: &GanConfig,
    options: &TrainOptions,
) -> Result<(GanModel, TrainingTrace)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training manifest has no records".into()));
    }
    if train.image_size() != config.image_size {
        return Err(Error::field(
            "image_size",
            format!("config says {}, manifest holds {}", config.image_size, train.image_size()),
        ));
    }
    if train.num_classes() != config.num_classes {
        return Err(Error::field(
            "num_classes",
            format!("config says {}, manifest holds {}", config.num_classes, train.num_classes()),
        ));
    }
    let images = load_scaled_images(train)?;
    let labels = train.labels();
    let (probe_images, probe_labels) = match options.held_out {
        Some(m) => {
            let take = m.len().min(ACCURACY_BATCH);
            let imgs = load_scaled_images(m)?;
            let n2 = config.image_size * config.image_size;
            (imgs[..take * n2].to_vec(), m.labels()[..take].to_vec())
        }
        None => {
            let take = labels.len().min(ACCURACY_BATCH);
            let n2 = config.image_size * config.image_size;
            (images[..take * n2].to_vec(), labels[..take].to_vec())
        }
    };
    let model = GanModel::build(config, config.seed)?.with_classes(train.class_names())?;
    train_on_arrays(model, &images, &labels, (&probe_images, &probe_labels), options)
}

/// Training loop over in-memory scaled images (`N×n²`, row-major).
pub fn train_on_arrays<S: Scalar>(
    mut model: GanModel<S>,
    images: &[f64],
    labels: &[usize],
    probe: (&[f64], &[usize]),
    options: &TrainOptions,
) -> Result<(GanModel<S>, TrainingTrace)> {
    let config = model.config.clone();
    model.check_labels(labels)?;
    let n2 = config.image_size * config.image_size;
    let samples = labels.len();
    if samples == 0 || images.len() != samples * n2 {
        return Err(Error::Shape {
            expected: format!("{samples} images of {n2} values"),
            got: format!("{} values", images.len()),
        });
    }
    let data: Vec<S> = images.iter().map(|&v| S::lit(v)).collect();
    let batch_size = batch_size_for(samples, config.num_batches);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut ctx = Ctx::new(Mode::Train, ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)));
    let mut g_opt = Adam::<S>::new(config.learning_rate, config.beta1, config.beta2);
    let mut d_opt = Adam::<S>::new(config.learning_rate, config.beta1, config.beta2);
    let mut trace = TrainingTrace::default();
    let mut order: Vec<usize> = (0..samples).collect();
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let b = chunk.len();
            let mut real = Vec::with_capacity(b * n2);
            let mut real_labels = Vec::with_capacity(b);
            for &i in chunk {
                real.extend_from_slice(&data[i * n2..(i + 1) * n2]);
                real_labels.push(labels[i]);
            }
            let latent = sample_latent_with(b, config.latent_dim, config.num_classes, &mut rng);
            let noise: Vec<S> = latent.noise.iter().map(|&v| S::lit(v)).collect();

            let fake = model.generate_for_training(&noise, &latent.labels, &mut ctx);

            let real = model.image_tensor(real);
            let d_loss = model.discriminator_step_loss(real, &real_labels, fake.clone(), &latent.labels, &mut ctx);
            d_opt.step(model.discriminator.params_mut());

            let g_loss = model.generator_step_loss(fake, &latent.labels, &mut ctx);
            g_opt.step(model.generator.params_mut());

            let (g_loss, d_loss) = (g_loss.to_f64().unwrap_or(f64::NAN), d_loss.to_f64().unwrap_or(f64::NAN));
            if !g_loss.is_finite() || !d_loss.is_finite() {
                return Err(Error::NonFinite { what: format!("loss (g={g_loss}, d={d_loss})"), iteration });
            }
            trace.iterations.push(TraceEntry { iteration, epoch, g_loss, d_loss });
            iteration += 1;
        }
        let scores = discriminate_values(&model, probe.0);
        let acc = balanced_accuracy(config.num_classes, probe.1, &scores.predicted_classes())?;
        trace.epoch_accuracy.push((epoch, acc));
        if let Some(last) = trace.iterations.last() {
            info!(
                "epoch {}/{}: g_loss {:.4} d_loss {:.4} class acc {:.3}",
                epoch + 1,
                config.epochs,
                last.g_loss,
                last.d_loss,
                acc
            );
        }
        if options.checkpoint_every > 0 && (epoch + 1) % options.checkpoint_every == 0 {
            if let Some(dir) = &options.checkpoint_dir {
                model.save(&dir.join(format!("epoch_{:05}.ckpt", epoch + 1)))?;
            }
        }
    }
    Ok((model, trace))
}

/// Balanced accuracy of the auxiliary head's argmax over real test images.
pub fn discriminator_accuracy<S: Scalar>(model: &GanModel<S>, test: &DatasetManifest) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test manifest has no records".into()));
    }
    let truth = labels_by_name(&model.classes, test)?;
    let images = load_scaled_images(test)?;
    let n2 = model.config.image_size * model.config.image_size;
    let mut predicted = Vec::with_capacity(truth.len());
    for chunk in images.chunks(64 * n2) {
        predicted.extend(discriminate_values(model, chunk).predicted_classes());
    }
    balanced_accuracy(model.config.num_classes, &truth, &predicted)
}

/// Writes `per_class` generated images for every class to
/// `out_dir/<family>/fake_<i>.png` and returns their manifest (realness = fake).
pub fn sample_fake_dataset<S: Scalar>(
    model: &GanModel<S>,
    per_class: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(per_class * model.config.num_classes);
    for (class, family) in model.classes.iter().enumerate() {
        let mut written = 0;
        while written < per_class {
            let b = (per_class - written).min(64);
            let noise = (0..b * model.config.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let latent = LatentBatch { noise, labels: vec![class; b], latent_dim: model.config.latent_dim };
            for img in generate(model, &latent)? {
                let path = out_dir.join(family).join(format!("fake_{written:05}.png"));
                img.to_gray().write_png(&path)?;
                let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
                records.push(SampleRecord::new(path, family.clone(), Realness::Fake, len));
                written += 1;
            }
        }
    }
    DatasetManifest::from_records(records, model.config.image_size, seed)
}

/// Which loss a gradient probe differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GanLoss {
    Generator,
    Discriminator,
}

/// One analytic-versus-numeric comparison for a single parameter element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientProbe {
    pub loss: GanLoss,
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientProbe {
    /// `|a − n| / max(|a|, |n|, 1e-6)`. The floor covers gradients that are
    /// identically zero (a bias feeding a batch-normalised layer), where both
    /// values are pure rounding noise.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(GRAD_CHECK_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

const GRAD_CHECK_BATCH: usize = 4;

fn with_param<R>(m: &mut GanModel<f64>, loss: GanLoss, which: usize, f: impl FnOnce(&mut Param<f64>) -> R) -> R {
    let mut params = match loss {
        GanLoss::Discriminator => m.discriminator.params_mut(),
        GanLoss::Generator => m.generator.params_mut(),
    };
    f(params.swap_remove(which))
}
const GRAD_CHECK_STEP: f64 = 1e-6;
const GRAD_CHECK_JITTER: f64 = 0.05;
const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares backpropagated gradients of both losses with central
/// differences on `probes` randomly chosen elements per loss. Runs in `f64`
/// with dropout masks pinned by reseeding the pass RNG for every evaluation.
pub fn gradient_check(config: &GanConfig, probes: usize, seed: u64) -> Result<Vec<GradientProbe>> {
    let mut model = GanModel::<f64>::build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Zero-initialised biases put every position of a fully dropped input
    // sample exactly on the LeakyReLU kink; check at a generic point instead.
    for p in model.generator.params_mut().into_iter().chain(model.discriminator.params_mut()) {
        for v in &mut p.value {
            *v += GRAD_CHECK_JITTER * rng.gen_range(-1.0..1.0);
        }
    }
    let n2 = config.image_size * config.image_size;
    let b = GRAD_CHECK_BATCH;
    let latent = sample_latent_with(b, config.latent_dim, config.num_classes, &mut rng);
    let real: Vec<f64> = (0..b * n2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let real_labels: Vec<usize> = (0..b).map(|i| i % config.num_classes).collect();
    let fake = model.generator.infer(&latent.noise, &latent.labels);
    let pass_seed = seed.wrapping_add(17);

    let d_loss = |m: &mut GanModel<f64>| {
        let mut ctx = Ctx::new(Mode::Train, ChaCha8Rng::seed_from_u64(pass_seed));
        let real = m.image_tensor(real.clone());
        m.discriminator_step_loss(real, &real_labels, fake.clone(), &latent.labels, &mut ctx)
    };
    let g_loss = |m: &mut GanModel<f64>| {
        let mut ctx = Ctx::new(Mode::Train, ChaCha8Rng::seed_from_u64(pass_seed));
        let images = m.generate_for_training(&latent.noise, &latent.labels, &mut ctx);
        m.generator_step_loss(images, &latent.labels, &mut ctx)
    };

    let mut out = Vec::with_capacity(2 * probes);
    for loss in [GanLoss::Discriminator, GanLoss::Generator] {
        let eval = |m: &mut GanModel<f64>| match loss {
            GanLoss::Discriminator => d_loss(m),
            GanLoss::Generator => g_loss(m),
        };
        let names: Vec<String> = match loss {
            GanLoss::Discriminator => model.discriminator.named_arrays(),
            GanLoss::Generator => model.generator.named_arrays(),
        }
        .into_iter()
        .map(|(name, _, _)| name)
        .collect();
        let sizes: Vec<usize> = (0..names.len()).map(|w| with_param(&mut model, loss, w, |p| p.value.len())).collect();
        // A tensor first, then an element, so small tensors are not drowned out.
        let chosen: Vec<(usize, usize)> = (0..probes)
            .map(|_| {
                let which = rng.gen_range(0..sizes.len());
                (which, rng.gen_range(0..sizes[which]))
            })
            .collect();

        eval(&mut model);
        let analytic: Vec<f64> = chosen.iter().map(|&(w, i)| with_param(&mut model, loss, w, |p| p.grad[i])).collect();
        for (&(which, index), analytic) in chosen.iter().zip(analytic) {
            let original = with_param(&mut model, loss, which, |p| p.value[index]);
            with_param(&mut model, loss, which, |p| p.value[index] = original + GRAD_CHECK_STEP);
            let plus = eval(&mut model);
            with_param(&mut model, loss, which, |p| p.value[index] = original - GRAD_CHECK_STEP);
            let minus = eval(&mut model);
            with_param(&mut model, loss, which, |p| p.value[index] = original);
            out.push(GradientProbe {
                loss,
                parameter: names[which].clone(),
                index,
                analytic,
                numeric: (plus - minus) / (2.0 * GRAD_CHECK_STEP),
            });
        }
    }
    Ok(out)
}
