use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use malimg_forge_ffi::*;

fn sample_features(samples: usize, dim: usize) -> (Vec<f64>, Vec<u32>) {
    // three well separated clusters
    let mut x = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = (i % 3) as u32;
        for j in 0..dim {
            let jitter = ((i * 31 + j * 17) % 11) as f64 / 50.0;
            x.push(if j % 3 == class as usize { 1.0 } else { -1.0 } + jitter);
        }
        labels.push(class);
    }
    (x, labels)
}

#[test]
fn elm_handle_round_trip() {
    let (x, labels) = sample_features(60, 9);
    let mut elm = ptr::null_mut();
    let status = unsafe { mf_elm_train(x.as_ptr(), 60, 9, labels.as_ptr(), 3, 40, 5, &mut elm) };
    assert_eq!(status, MfStatus::Ok);
    assert_eq!(unsafe { mf_elm_input_dim(elm) }, 9);

    let mut predicted = vec![0u32; 60];
    assert_eq!(unsafe { mf_elm_predict(elm, x.as_ptr(), 60, 9, predicted.as_mut_ptr()) }, MfStatus::Ok);
    assert_eq!(predicted, labels);

    // a width mismatch is rejected with a message
    assert_eq!(unsafe { mf_elm_predict(elm, x.as_ptr(), 6, 90, predicted.as_mut_ptr()) }, MfStatus::InvalidArgument);
    assert!(!mf_last_error().is_null());

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("elm.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mf_elm_save(elm, path.as_ptr()) }, MfStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { mf_elm_load(path.as_ptr(), &mut loaded) }, MfStatus::Ok);
    let mut again = vec![0u32; 60];
    assert_eq!(unsafe { mf_elm_predict(loaded, x.as_ptr(), 60, 9, again.as_mut_ptr()) }, MfStatus::Ok);
    assert_eq!(again, predicted);
    unsafe {
        mf_elm_free(elm);
        mf_elm_free(loaded);
    }
}

#[test]
fn elm_rejects_bad_arguments() {
    let (x, labels) = sample_features(6, 3);
    let mut elm = ptr::null_mut();
    let status = unsafe { mf_elm_train(x.as_ptr(), 6, 3, labels.as_ptr(), 3, 0, 5, &mut elm) };
    assert_eq!(status, MfStatus::Config);
    assert!(elm.is_null());
    let msg = unsafe { CStr::from_ptr(mf_last_error()) }.to_string_lossy().into_owned();
    assert!(msg.contains("hidden_units"), "{msg}");
    let bad_labels = [0u32, 1, 2, 3, 0, 1];
    let status = unsafe { mf_elm_train(x.as_ptr(), 6, 3, bad_labels.as_ptr(), 3, 4, 5, &mut elm) };
    assert_eq!(status, MfStatus::InvalidArgument);
}

#[test]
fn condense_matches_core_definition() {
    // K = 1: rows/cols (A, A_fake)
    let counts = [7u64, 1, 2, 5];
    let mut out = [0u64; 8];
    assert_eq!(unsafe { mf_condense(counts.as_ptr(), 1, out.as_mut_ptr()) }, MfStatus::Ok);
    assert_eq!(out, [7, 1, 0, 0, 2, 5, 0, 0]);
    let mut acc = 0.0;
    assert_eq!(unsafe { mf_real_fake_accuracy(counts.as_ptr(), 1, &mut acc) }, MfStatus::Ok);
    assert!((acc - 12.0 / 15.0).abs() < 1e-12);
    let zeros = [0u64; 4];
    assert_eq!(unsafe { mf_real_fake_accuracy(zeros.as_ptr(), 1, &mut acc) }, MfStatus::InvalidArgument);
    assert_eq!(unsafe { mf_condense(counts.as_ptr(), 0, out.as_mut_ptr()) }, MfStatus::InvalidArgument);
}

fn target_dir() -> PathBuf {
    // tests/…/deps/<test binary>: the library artifacts sit two levels up
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include").join("malimg_forge.h");
    assert!(header.is_file(), "build script did not write {}", header.display());
    let staticlib = target_dir().join("libmalimg_forge_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !staticlib.is_file() {
        eprintln!("skipping C smoke test: no C compiler or static library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(crate_dir.join("tests").join("c").join("smoke.c"))
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C smoke test failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
