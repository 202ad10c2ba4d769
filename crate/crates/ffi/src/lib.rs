//! C ABI over the conversion, ELM, AC-GAN sampling and condensation APIs.
//!
//! Conventions:
//! * every fallible function returns an [`MfStatus`]; `MF_OK` is zero;
//! * on failure, [`mf_last_error`] returns a message for the calling thread;
//! * models are opaque handles created by `*_train`/`*_load`/`*_build` and
//!   released with the matching `*_free` (which accepts null);
//! * matrices are row-major; the caller owns and sizes every buffer.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use malimg_forge::acgan::{self, GanConfig, GanModel, LatentBatch};
use malimg_forge::convert;
use malimg_forge::evaluators::elm::{self, ElmModel};
use malimg_forge::experiments;
use malimg_forge::metrics::ConfusionMatrix;
use malimg_forge::Error;
use nalgebra::DMatrix;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Runtime = 5,
    Panic = 6,
}

/// Trained extreme learning machine.
pub struct MfElm {
    model: ElmModel,
}

/// AC-GAN generator and discriminator.
pub struct MfGan {
    model: GanModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> MfStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Csv(_) => MfStatus::Io,
        e if e.is_config() => MfStatus::Config,
        Error::InsufficientBytes { .. }
        | Error::LabelOutOfRange { .. }
        | Error::Shape { .. }
        | Error::UnknownLabel(_)
        | Error::Empty(_) => MfStatus::InvalidArgument,
        _ => MfStatus::Runtime,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (MfStatus, String)>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MfStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MfStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MfStatus, String) {
    (MfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (MfStatus, String) {
    (MfStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (MfStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (MfStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (MfStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn checked_mul(a: usize, b: usize) -> Result<usize, (MfStatus, String)> {
    a.checked_mul(b).ok_or_else(|| invalid("buffer size overflows"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Lays the first `n*n` bytes of `data` out row by row into `out_pixels`
/// (`n*n` bytes). Fails with `MF_STATUS_INVALID_ARGUMENT` when `len < n*n`.
///
/// # Safety
/// `data` must be valid for `len` reads and `out_pixels` for `n*n` writes.
#[no_mangle]
pub unsafe extern "C" fn mf_bytes_to_image(data: *const u8, len: usize, n: usize, out_pixels: *mut u8) -> MfStatus {
    guard(|| {
        let data = input(data, len, "data")?;
        let out = output(out_pixels, checked_mul(n, n)?, "out_pixels")?;
        let img = convert::bytes_to_image(data, n).map_err(lib_err)?;
        out.copy_from_slice(img.pixels());
        Ok(())
    })
}

/// Zero-mean scaling of an `n*n` image into `[-1, 1]`; constant images map
/// to zeros.
///
/// # Safety
/// `pixels` must be valid for `n*n` reads and `out` for `n*n` writes.
#[no_mangle]
pub unsafe extern "C" fn mf_scale_pixels(pixels: *const u8, n: usize, out: *mut f64) -> MfStatus {
    guard(|| {
        let len = checked_mul(n, n)?;
        let pixels = input(pixels, len, "pixels")?;
        let out = output(out, len, "out")?;
        let img = convert::GrayImage::new(n, pixels.to_vec()).map_err(lib_err)?;
        out.copy_from_slice(convert::scale_pixels(&img).values());
        Ok(())
    })
}

/// Trains an ELM on `samples×dim` features with labels in `[0, num_classes)`.
///
/// # Safety
/// `features` must be valid for `samples*dim` reads, `labels` for `samples`
/// reads and `out` for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn mf_elm_train(
    features: *const f64,
    samples: usize,
    dim: usize,
    labels: *const u32,
    num_classes: usize,
    hidden_units: usize,
    seed: u64,
    out: *mut *mut MfElm,
) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let x = input(features, checked_mul(samples, dim)?, "features")?;
        let labels: Vec<usize> = input(labels, samples, "labels")?.iter().map(|&l| l as usize).collect();
        let x = DMatrix::from_row_slice(samples, dim, x);
        let model = elm::elm_train(&x, &labels, num_classes, hidden_units, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MfElm { model }));
        Ok(())
    })
}

/// Predicted class of each of `samples` rows.
///
/// # Safety
/// `elm` must come from this library; `features` must be valid for
/// `samples*dim` reads and `out_labels` for `samples` writes.
#[no_mangle]
pub unsafe extern "C" fn mf_elm_predict(
    elm: *const MfElm,
    features: *const f64,
    samples: usize,
    dim: usize,
    out_labels: *mut u32,
) -> MfStatus {
    guard(|| {
        let elm = elm.as_ref().ok_or_else(|| null("elm"))?;
        let x = input(features, checked_mul(samples, dim)?, "features")?;
        let out = output(out_labels, samples, "out_labels")?;
        let predicted = elm.model.predict(&DMatrix::from_row_slice(samples, dim, x)).map_err(lib_err)?;
        for (o, p) in out.iter_mut().zip(predicted) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// Input width the model expects (0 for a null handle).
///
/// # Safety
/// `elm` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mf_elm_input_dim(elm: *const MfElm) -> usize {
    elm.as_ref().map_or(0, |e| e.model.input_dim())
}

/// # Safety
/// `elm` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mf_elm_save(elm: *const MfElm, path: *const c_char) -> MfStatus {
    guard(|| {
        let elm = elm.as_ref().ok_or_else(|| null("elm"))?;
        elm.model.save(&path_arg(path)?).map_err(lib_err)
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn mf_elm_load(path: *const c_char, out: *mut *mut MfElm) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = ElmModel::load(&path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MfElm { model }));
        Ok(())
    })
}

/// # Safety
/// `elm` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_elm_free(elm: *mut MfElm) {
    if !elm.is_null() {
        drop(Box::from_raw(elm));
    }
}

/// Freshly initialised AC-GAN; `width_divisor` in {1, 2, 4, 8, 16}.
///
/// # Safety
/// `out` must be valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn mf_gan_build(
    image_size: usize,
    num_classes: usize,
    width_divisor: usize,
    seed: u64,
    out: *mut *mut MfGan,
) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut config = GanConfig::new(image_size, num_classes);
        config.width_divisor = width_divisor;
        let model = acgan::build_gan(&config, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MfGan { model }));
        Ok(())
    })
}

/// Loads a checkpoint written by the training pipeline.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid for one pointer write.
#[no_mangle]
pub unsafe extern "C" fn mf_gan_load(path: *const c_char, out: *mut *mut MfGan) -> MfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = GanModel::<f32>::load(&path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MfGan { model }));
        Ok(())
    })
}

/// Image side length `n` (0 for a null handle).
///
/// # Safety
/// `gan` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mf_gan_image_size(gan: *const MfGan) -> usize {
    gan.as_ref().map_or(0, |g| g.model.config.image_size)
}

/// # Safety
/// `gan` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mf_gan_num_classes(gan: *const MfGan) -> usize {
    gan.as_ref().map_or(0, |g| g.model.config.num_classes)
}

/// # Safety
/// `gan` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mf_gan_latent_dim(gan: *const MfGan) -> usize {
    gan.as_ref().map_or(0, |g| g.model.config.latent_dim)
}

/// Generates `batch` images from `batch×latent_dim` noise and one label per
/// image; writes `batch×n×n` values in `[-1, 1]` to `out_images`.
///
/// # Safety
/// `gan` must come from this library and every buffer must be sized as
/// described.
#[no_mangle]
pub unsafe extern "C" fn mf_gan_generate(
    gan: *const MfGan,
    noise: *const f64,
    labels: *const u32,
    batch: usize,
    out_images: *mut f64,
) -> MfStatus {
    guard(|| {
        let gan = gan.as_ref().ok_or_else(|| null("gan"))?;
        let config = &gan.model.config;
        let noise = input(noise, checked_mul(batch, config.latent_dim)?, "noise")?;
        let labels = input(labels, batch, "labels")?;
        let n2 = config.image_size * config.image_size;
        let out = output(out_images, checked_mul(batch, n2)?, "out_images")?;
        let latent = LatentBatch {
            noise: noise.to_vec(),
            labels: labels.iter().map(|&l| l as usize).collect(),
            latent_dim: config.latent_dim,
        };
        let images = acgan::generate(&gan.model, &latent).map_err(lib_err)?;
        for (chunk, img) in out.chunks_mut(n2).zip(&images) {
            chunk.copy_from_slice(img.values());
        }
        Ok(())
    })
}

/// # Safety
/// `gan` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mf_gan_free(gan: *mut MfGan) {
    if !gan.is_null() {
        drop(Box::from_raw(gan));
    }
}

/// Real-family classes `0..K` followed by their fake counterparts `K..2K`.
fn real_fake_matrix(counts: &[u64], num_families: usize) -> Result<ConfusionMatrix, (MfStatus, String)> {
    let k2 = 2 * num_families;
    let mut labels: Vec<String> = (0..num_families).map(|f| format!("family{f}")).collect();
    labels.extend((0..num_families).map(|f| experiments::fake_class_name(&format!("family{f}"))));
    let rows = counts.chunks(k2.max(1)).map(<[u64]>::to_vec).collect();
    ConfusionMatrix::from_counts(labels, rows).map_err(lib_err)
}

/// Condenses a `2K×2K` confusion matrix whose classes are the `K` real
/// families followed by the matching fake classes in the same order. Writes
/// 8 counts: row real then row fake, columns real-same, fake-same,
/// real-other, fake-other.
///
/// # Safety
/// `counts` must be valid for `(2K)²` reads and `out` for 8 writes.
#[no_mangle]
pub unsafe extern "C" fn mf_condense(counts: *const u64, num_families: usize, out: *mut u64) -> MfStatus {
    guard(|| {
        if num_families == 0 {
            return Err(invalid("num_families must be at least 1"));
        }
        let k2 = checked_mul(2, num_families)?;
        let counts = input(counts, checked_mul(k2, k2)?, "counts")?;
        let out = output(out, 8, "out")?;
        let condensed = experiments::condense(&real_fake_matrix(counts, num_families)?).map_err(lib_err)?;
        for (o, v) in out.iter_mut().zip(condensed.counts.iter().flatten()) {
            *o = *v;
        }
        Ok(())
    })
}

/// Fraction of samples whose realness is predicted correctly, for the same
/// matrix layout as [`mf_condense`].
///
/// # Safety
/// `counts` must be valid for `(2K)²` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn mf_real_fake_accuracy(counts: *const u64, num_families: usize, out: *mut f64) -> MfStatus {
    guard(|| {
        if num_families == 0 {
            return Err(invalid("num_families must be at least 1"));
        }
        let k2 = checked_mul(2, num_families)?;
        let counts = input(counts, checked_mul(k2, k2)?, "counts")?;
        let out = output(out, 1, "out")?;
        out[0] = experiments::real_fake_accuracy(&real_fake_matrix(counts, num_families)?).map_err(lib_err)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_set_and_clear_the_message() {
        let mut px = [0u8; 4];
        let status = unsafe { mf_bytes_to_image([1u8, 2, 3].as_ptr(), 3, 2, px.as_mut_ptr()) };
        assert_eq!(status, MfStatus::InvalidArgument);
        let msg = unsafe { CStr::from_ptr(mf_last_error()) }.to_str().unwrap().to_owned();
        assert!(msg.contains("need 4"), "{msg}");
        let status = unsafe { mf_bytes_to_image([1u8, 2, 3, 4].as_ptr(), 4, 2, px.as_mut_ptr()) };
        assert_eq!(status, MfStatus::Ok);
        assert_eq!(px, [1, 2, 3, 4]);
        assert!(mf_last_error().is_null());
    }

    #[test]
    fn null_pointers_are_reported() {
        assert_eq!(unsafe { mf_bytes_to_image(ptr::null(), 4, 2, ptr::null_mut()) }, MfStatus::NullPointer);
        assert_eq!(unsafe { mf_elm_predict(ptr::null(), ptr::null(), 0, 0, ptr::null_mut()) }, MfStatus::NullPointer);
        assert_eq!(unsafe { mf_gan_load(ptr::null(), ptr::null_mut()) }, MfStatus::NullPointer);
        unsafe {
            mf_elm_free(ptr::null_mut());
            mf_gan_free(ptr::null_mut());
        }
    }

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::Config("x".into())), MfStatus::Config);
        assert_eq!(status_of(&Error::field("a", "b")), MfStatus::Config);
        assert_eq!(status_of(&Error::Empty("x".into())), MfStatus::InvalidArgument);
        assert_eq!(status_of(&Error::Checkpoint("x".into())), MfStatus::Runtime);
    }
}
