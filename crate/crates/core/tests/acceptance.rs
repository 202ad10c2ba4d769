//! Acceptance suite. Runs every primary criterion, prints one
//! `PASS`/`FAIL` line per criterion and exits non-zero if any failed.
//!
//! Tolerances are pinned as constants below. The desk-scale experiment trains
//! the full-width AC-GAN for 60 epochs and dominates the runtime.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use malimg_forge::acgan::{self, GanConfig, GanModel, LatentBatch};
use malimg_forge::convert::{self, GrayImage};
use malimg_forge::corpus::{self, DatasetManifest};
use malimg_forge::evaluators::elm::{self, pinv};
use malimg_forge::experiments::{
    self, condense, real_fake_accuracy, AcganSection, CnnSection, ElmSection, ExperimentConfig,
};
use malimg_forge::metrics::ConfusionMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONVERTER_BUDGET: Duration = Duration::from_secs(10);
const SCALED_MEAN_TOL: f64 = 1e-6;
const PINV_TOL: f64 = 1e-6;
const NORMAL_EQUATIONS_TOL: f64 = 1e-6;
const GRADIENT_REL_TOL: f64 = 1e-3;
const GRADIENT_PROBES: usize = 20;
const DISCRIMINATOR_MIN_BALANCED_ACC: f64 = 0.80;
const CONDENSE_MATRICES: usize = 100;
const CONDENSE_MAX_FAMILIES: usize = 25;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Independent row-major layout: pixel (r, c) is byte r·n + c.
fn oracle_pixels(bytes: &[u8], n: usize) -> Vec<u8> {
    let mut out = vec![0u8; n * n];
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = bytes[r * n + c];
        }
    }
    out
}

fn converter_oracle() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let raw = dir.path().join("raw");
    corpus::synth_corpus(&raw, 4, 50, 4096, 11).map_err(err)?;
    let started = Instant::now();
    let mut checked = 0;
    for n in [32, 64] {
        let out = dir.path().join(format!("img{n}"));
        let report = convert::convert_corpus(&raw, n, &out).map_err(err)?;
        ensure(report.manifest.len() == 200, || format!("n={n}: {} images, expected 200", report.manifest.len()))?;
        for family in fs::read_dir(&raw).map_err(err)? {
            let family = family.map_err(err)?.path();
            let family_name = family.file_name().unwrap().to_string_lossy().into_owned();
            for file in fs::read_dir(&family).map_err(err)? {
                let file = file.map_err(err)?.path();
                let bytes = fs::read(&file).map_err(err)?;
                let expected = oracle_pixels(&bytes, n);
                let direct = convert::bytes_to_image(&bytes, n).map_err(err)?;
                ensure(direct.pixels() == expected.as_slice(), || format!("{} differs at n={n}", file.display()))?;
                let png = convert::converted_path(&out, &family_name, &file, n);
                let decoded = image::open(&png).map_err(err)?.to_luma8().into_raw();
                ensure(decoded == expected, || format!("{} differs from the oracle", png.display()))?;
                checked += 1;
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < CONVERTER_BUDGET, || format!("took {elapsed:?}, budget {CONVERTER_BUDGET:?}"))?;
    Ok(format!("{checked} images identical to the byte-loop oracle (n=32,64) in {:.2}s", elapsed.as_secs_f64()))
}

fn filtering_semantics() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let raw = dir.path().join("raw");
    corpus::synth_corpus(&raw, 3, 5, 4096, 3).map_err(err)?;
    let short = raw.join("Zeroaccess");
    fs::create_dir_all(&short).map_err(err)?;
    for i in 0..5 {
        fs::write(short.join(format!("s{i}.bin")), vec![7u8; 4095]).map_err(err)?;
    }
    let report = convert::convert_corpus(&raw, 64, &dir.path().join("img")).map_err(err)?;
    let classes = report.manifest.class_names();
    ensure(!classes.iter().any(|c| c == "Zeroaccess"), || format!("manifest still lists Zeroaccess: {classes:?}"))?;
    ensure(classes.len() == 3 && report.too_short.len() == 5, || {
        format!("{} classes, {} too short", classes.len(), report.too_short.len())
    })?;
    Ok("family with every file below n² bytes is absent; 5 short files reported".into())
}

fn scaling_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_mean = 0.0f64;
    for i in 0..1000 {
        let n = rng.gen_range(2..=48);
        let pixels: Vec<u8> =
            if i % 100 == 0 { vec![rng.gen(); n * n] } else { (0..n * n).map(|_| rng.gen()).collect() };
        let constant = pixels.iter().all(|&p| p == pixels[0]);
        let scaled = convert::scale_pixels(&GrayImage::new(n, pixels).map_err(err)?);
        let v = scaled.values();
        ensure(v.iter().all(|x| (-1.0..=1.0).contains(x)), || format!("image {i}: value outside [-1, 1]"))?;
        if constant {
            ensure(v.iter().all(|&x| x == 0.0), || format!("constant image {i} is not all zeros"))?;
        } else {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            worst_mean = worst_mean.max(mean.abs());
        }
    }
    ensure(worst_mean < SCALED_MEAN_TOL, || format!("max |mean| {worst_mean:e}"))?;
    Ok(format!("1000 images in [-1,1]; constants map to 0; max |mean| {worst_mean:.1e}"))
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn elm_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // H ≥ N with distinct inputs interpolates the training set
    let x = random_matrix(200, 64, &mut rng);
    let labels: Vec<usize> = (0..200).map(|_| rng.gen_range(0..5)).collect();
    let model = elm::elm_train(&x, &labels, 5, 256, 3).map_err(err)?;
    let predicted = model.predict(&x).map_err(err)?;
    let correct = predicted.iter().zip(&labels).filter(|(p, t)| p == t).count();
    ensure(correct == 200, || format!("training accuracy {correct}/200"))?;

    // Moore-Penrose identities on rectangular and rank-deficient inputs
    let mut worst_identity = 0.0f64;
    for (r, c, rank) in [(30, 12, 12), (12, 30, 12), (25, 25, 10)] {
        let a = random_matrix(r, rank, &mut rng) * random_matrix(rank, c, &mut rng);
        let p = pinv(&a);
        let residuals = [
            (&a * &p * &a - &a).amax(),
            (&p * &a * &p - &p).amax(),
            ((&a * &p).transpose() - &a * &p).amax(),
            ((&p * &a).transpose() - &p * &a).amax(),
        ];
        worst_identity = residuals.iter().fold(worst_identity, |m, &v| m.max(v));
    }
    ensure(worst_identity <= PINV_TOL, || format!("pseudoinverse identity residual {worst_identity:e}"))?;

    // output weights equal the normal-equations solution (ΦᵀΦ)β = ΦᵀT
    let x = random_matrix(50, 20, &mut rng);
    let labels: Vec<usize> = (0..50).map(|i| i % 4).collect();
    let model = elm::elm_train(&x, &labels, 4, 40, 9).map_err(err)?;
    let phi = model.hidden(&x);
    let t = DMatrix::from_fn(50, 4, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
    let gram = phi.transpose() * &phi;
    let rhs = phi.transpose() * &t;
    let beta = gram.cholesky().ok_or("Gram matrix not positive definite")?.solve(&rhs);
    let diff = (&beta - &model.output_weights).amax();
    ensure(diff <= NORMAL_EQUATIONS_TOL, || format!("normal-equations difference {diff:e}"))?;
    Ok(format!("N=200,H=256 train acc 100%; pinv residual {worst_identity:.1e}; normal-equations diff {diff:.1e}"))
}

fn gradient_check() -> Outcome {
    let mut config = GanConfig::new(32, 4);
    config.width_divisor = 8;
    let probes = acgan::gradient_check(&config, GRADIENT_PROBES, 2024).map_err(err)?;
    // GRADIENT_PROBES parameters for each of the two losses
    ensure(probes.len() == 2 * GRADIENT_PROBES, || format!("{} probes", probes.len()))?;
    let worst = probes.iter().max_by(|a, b| a.relative_error().total_cmp(&b.relative_error())).ok_or("no probes")?;
    ensure(worst.relative_error() <= GRADIENT_REL_TOL, || {
        format!(
            "{:?} loss, {}[{}]: analytic {:e} numeric {:e} rel {:e}",
            worst.loss,
            worst.parameter,
            worst.index,
            worst.analytic,
            worst.numeric,
            worst.relative_error()
        )
    })?;
    Ok(format!("{GRADIENT_PROBES} probes per loss (n=32, width/8), max relative error {:.1e}", worst.relative_error()))
}

fn condensation_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for m in 0..CONDENSE_MATRICES {
        let k = rng.gen_range(1..=CONDENSE_MAX_FAMILIES);
        let mut labels: Vec<String> = (0..k).map(|f| format!("fam{f}")).collect();
        labels.extend((0..k).map(|f| format!("fam{f}_fake")));
        let counts: Vec<Vec<u64>> = (0..2 * k).map(|_| (0..2 * k).map(|_| rng.gen_range(0..30)).collect()).collect();
        // brute-force oracle: family = index mod K, fake = index ≥ K
        let mut oracle = [[0u64; 4]; 2];
        for (t, row) in counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                let same = t % k == p % k;
                let col = match (same, p >= k) {
                    (true, false) => 0,
                    (true, true) => 1,
                    (false, false) => 2,
                    (false, true) => 3,
                };
                oracle[usize::from(t >= k)][col] += c;
            }
        }
        let cm = ConfusionMatrix::from_counts(labels, counts.clone()).map_err(err)?;
        let c = condense(&cm).map_err(err)?;
        ensure(c.counts == oracle, || format!("matrix {m} (K={k}) differs from the cell-by-cell oracle"))?;
        let real_rows: u64 = counts[..k].iter().flatten().sum();
        let fake_rows: u64 = counts[k..].iter().flatten().sum();
        ensure(c.total() == cm.total(), || format!("matrix {m}: total {} vs {}", c.total(), cm.total()))?;
        ensure(c.counts[0].iter().sum::<u64>() == real_rows && c.counts[1].iter().sum::<u64>() == fake_rows, || {
            format!("matrix {m}: row totals differ")
        })?;
        let dominance = real_fake_accuracy(&cm).map_err(err)? >= cm.accuracy();
        ensure(dominance, || format!("matrix {m}: real-vs-fake accuracy below multiclass accuracy"))?;
    }
    Ok(format!("{CONDENSE_MATRICES} random matrices (K ≤ {CONDENSE_MAX_FAMILIES}) match the oracle; totals and row totals conserved"))
}

fn shape_criteria() -> Outcome {
    let c128 = GanConfig::new(128, 18);
    let model128 = acgan::build_gan(&c128, 1).map_err(err)?;
    let flat = model128.discriminator.flat_features();
    ensure(flat == 8192, || format!("discriminator flat width {flat} at n=128"))?;
    let proj128 = model128.generator.projection_features();
    ensure(proj128 == 131_072, || format!("generator projection {proj128} at n=128"))?;
    let model32 = acgan::build_gan(&GanConfig::new(32, 4), 1).map_err(err)?;
    let proj32 = model32.generator.projection_features();
    ensure(proj32 == 8192, || format!("generator projection {proj32} at n=32"))?;
    // forward passes through both projections give n×n images the discriminator accepts
    for model in [&model32, &model128] {
        let latent = acgan::sample_latent(2, &model.config, 4);
        let images = acgan::generate(model, &latent).map_err(err)?;
        let n = model.config.image_size;
        ensure(images.iter().all(|i| i.size() == n), || format!("generated image size differs from {n}"))?;
        let d = acgan::discriminate(model, &images).map_err(err)?;
        ensure(d.validity.len() == 2 && d.class_scores[0].len() == model.config.num_classes, || "head shapes".into())?;
    }
    Ok("discriminator flat 8192 (n=128); generator projection 8192 (n=32) and 131072 (n=128)".into())
}

struct DeskRun {
    outcome: experiments::ExperimentOutcome,
    model: GanModel,
    test: DatasetManifest,
    elapsed: Duration,
}

fn desk_experiment(root: &Path) -> Result<DeskRun, String> {
    let raw = root.join("raw");
    let images = root.join("images");
    corpus::synth_corpus(&raw, 4, 200, 4096, 42).map_err(err)?;
    convert::convert_corpus(&raw, 32, &images).map_err(err)?;
    let acgan = AcganSection { epochs: 60, ..AcganSection::default() };
    let config = ExperimentConfig {
        dataset: "synth-desk".into(),
        corpus_dir: images,
        image_size: 32,
        num_families: 4,
        gan_per_class: None,
        per_class: 100,
        train_fraction: 0.7,
        seed: 42,
        acgan,
        cnn: CnnSection::default(),
        elm: ElmSection::default(),
    };
    let started = Instant::now();
    let outcome = experiments::run_experiment(&config, &root.join("runs")).map_err(err)?;
    let elapsed = started.elapsed();
    if let Some((stage, msg)) = outcome.summary.failed_stage() {
        return Err(format!("stage {stage} failed: {msg}"));
    }
    let model = GanModel::load(&outcome.run_dir.join("acgan").join("model.ckpt")).map_err(err)?;
    let test =
        DatasetManifest::read_csv(&outcome.run_dir.join("acgan").join("test_manifest.csv"), 32, 0).map_err(err)?;
    Ok(DeskRun { outcome, model, test, elapsed })
}

fn desk_discriminator(run: &DeskRun) -> Outcome {
    let acc = run.outcome.acgan_accuracy.ok_or("no discriminator accuracy")?;
    ensure(acc >= DISCRIMINATOR_MIN_BALANCED_ACC, || format!("balanced accuracy {acc:.3}"))?;
    Ok(format!("balanced accuracy {acc:.3} on {} real test images", run.test.len()))
}

fn desk_generator_loss(run: &DeskRun) -> Outcome {
    let trace = run.outcome.acgan_trace.as_ref().ok_or("no trace")?;
    let epochs = trace.iterations.last().map(|e| e.epoch + 1).ok_or("empty trace")?;
    let decile = (epochs / 10).max(1);
    let first = trace.mean_g_loss(0..decile).ok_or("no first-decile iterations")?;
    let last = trace.mean_g_loss(epochs - decile..epochs).ok_or("no final-decile iterations")?;
    let detail = format!("first-decile mean {first:.3}, final-decile mean {last:.3} over {epochs} epochs");
    ensure(last < first, || detail.clone())?;
    Ok(detail)
}

fn desk_real_fake_cnn(run: &DeskRun) -> Outcome {
    let report = run.outcome.cnn_report.as_ref().ok_or("no CNN report")?;
    let classes = report.confusion.size();
    ensure(classes == 8, || format!("{classes} classes, expected 8"))?;
    let binary = real_fake_accuracy(&report.confusion).map_err(err)?;
    ensure(binary >= report.accuracy, || format!("real-vs-fake {binary:.3} < multiclass {:.3}", report.accuracy))?;
    let elm = run.outcome.elm_report.as_ref().map(|r| r.accuracy).unwrap_or(f64::NAN);
    Ok(format!(
        "8-class CNN multiclass {:.3}, real-vs-fake {binary:.3} (ELM multiclass {elm:.3}); run took {:.0}s",
        report.accuracy,
        run.elapsed.as_secs_f64()
    ))
}

/// Supporting checks from the module contracts, reported alongside the
/// primary criteria.
fn desk_conditioning(run: &DeskRun) -> Outcome {
    let k = run.model.config.num_classes;
    let latent =
        LatentBatch { labels: (0..400).map(|i| i % k).collect(), ..acgan::sample_latent(400, &run.model.config, 77) };
    let fakes = acgan::generate(&run.model, &latent).map_err(err)?;
    let d = acgan::discriminate(&run.model, &fakes).map_err(err)?;
    let agree = d.predicted_classes().iter().zip(&latent.labels).filter(|(p, l)| p == l).count() as f64 / 400.0;
    ensure(agree > 1.0 / k as f64, || format!("auxiliary agreement {agree:.3} not above chance"))?;
    let real = convert::load_scaled_images(&run.test).map_err(err)?;
    let n2 = 32 * 32;
    let real_images: Vec<_> = real.chunks(n2).map(|c| convert::ScaledImage::new(32, c.to_vec()).unwrap()).collect();
    let dr = acgan::discriminate(&run.model, &real_images).map_err(err)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (vr, vf) = (mean(&dr.validity), mean(&d.validity));
    ensure(vr > vf, || format!("mean validity real {vr:.3} <= fake {vf:.3}"))?;
    Ok(format!(
        "auxiliary agrees with requested label {agree:.3} (chance {:.2}); validity real {vr:.3} > fake {vf:.3}",
        1.0 / k as f64
    ))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let run = |name: &'static str, f: &dyn Fn() -> Outcome, results: &mut Vec<(&str, Outcome)>| {
        let outcome = f();
        print_line(name, &outcome);
        results.push((name, outcome));
    };
    run("converter oracle", &converter_oracle, &mut results);
    run("filtering semantics", &filtering_semantics, &mut results);
    run("scaling invariants", &scaling_invariants, &mut results);
    run("ELM exactness", &elm_exactness, &mut results);
    run("AC-GAN gradient check", &gradient_check, &mut results);
    run("condensation conservation", &condensation_conservation, &mut results);
    run("shape criteria", &shape_criteria, &mut results);

    let dir = tempfile::tempdir().expect("temporary directory");
    let desk_names = [
        "desk (a) discriminator balanced accuracy >= 0.80",
        "desk (b) final-decile generator loss below first decile",
        "desk (c) 8-class real+fake CNN and collapse dominance",
        "desk supporting: conditioning and validity ordering",
    ];
    match desk_experiment(dir.path()) {
        Ok(desk) => {
            let checks: [&dyn Fn(&DeskRun) -> Outcome; 4] =
                [&desk_discriminator, &desk_generator_loss, &desk_real_fake_cnn, &desk_conditioning];
            for (name, check) in desk_names.into_iter().zip(checks) {
                run(name, &|| check(&desk), &mut results);
            }
        }
        Err(e) => {
            for name in desk_names {
                run(name, &|| Err(format!("desk experiment failed: {e}")), &mut results);
            }
        }
    }

    let failed: BTreeSet<&str> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn print_line(name: &str, outcome: &Outcome) {
    match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => println!("FAIL  {name}: {detail}"),
    }
}
