use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use abswift::dataset::{generate_dataset, write_sample, DatasetConfig, NormalizationStats, PointCounts};
use abswift::model::{build, ModelConfig};
use abswift_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { abswift_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

/// Writes a small trained-shape model with statistics and one sample.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = DatasetConfig {
        n_buildings: 2,
        counts: PointCounts {
            terrain: 40,
            obstacles: 40,
            volume: 48,
        },
    };
    let data = generate_dataset(&cfg, 4, 2).unwrap().samples;
    let mut model_cfg = ModelConfig::desk();
    model_cfg.d = 12;
    model_cfg.n_gnd = 40;
    model_cfg.n_obs = 40;
    model_cfg.n_gnd_sn = 10;
    model_cfg.n_obs_sn = 10;
    model_cfg.n_vol_anchor = 16;
    let mut w = build(&model_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    w.stats = Some(NormalizationStats::compute(&data).unwrap());
    let wp = dir.join("w.bin");
    let sp = dir.join("s.bin");
    w.save(&wp).unwrap();
    write_sample(&data[0], &sp).unwrap();
    (wp, sp)
}

#[test]
fn build_count_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut m: *mut AbswiftModel = ptr::null_mut();
    assert_eq!(unsafe { abswift_model_build_desk(1, 4, &mut m) }, AbswiftStatus::Ok);
    let mut n = 0u64;
    assert_eq!(unsafe { abswift_model_num_params(m, &mut n) }, AbswiftStatus::Ok);
    let expected = build(&ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap().num_params();
    assert_eq!(n as usize, expected);
    let path = cstr(&dir.path().join("m.bin"));
    assert_eq!(unsafe { abswift_model_save(m, path.as_ptr()) }, AbswiftStatus::Ok);
    let mut back: *mut AbswiftModel = ptr::null_mut();
    assert_eq!(unsafe { abswift_model_load(path.as_ptr(), &mut back) }, AbswiftStatus::Ok);
    let mut n2 = 0u64;
    assert_eq!(unsafe { abswift_model_num_params(back, &mut n2) }, AbswiftStatus::Ok);
    assert_eq!(n, n2);
    unsafe {
        abswift_model_free(m);
        abswift_model_free(back);
        abswift_model_free(ptr::null_mut());
    }
}

#[test]
fn error_codes_and_messages() {
    let mut m: *mut AbswiftModel = ptr::null_mut();
    assert_eq!(unsafe { abswift_model_build_desk(0, 0, &mut m) }, AbswiftStatus::Config);
    assert!(last_error().contains("step0"), "{}", last_error());
    assert_eq!(unsafe { abswift_model_build_desk(0, 9, &mut m) }, AbswiftStatus::Config);
    assert_eq!(unsafe { abswift_model_build_desk(0, 4, ptr::null_mut()) }, AbswiftStatus::InvalidArgument);
    let missing = CString::new("/nonexistent/w.bin").unwrap();
    assert_eq!(unsafe { abswift_model_load(missing.as_ptr(), &mut m) }, AbswiftStatus::Data);
    assert!(m.is_null());
    assert_eq!(unsafe { abswift_model_load(ptr::null(), &mut m) }, AbswiftStatus::InvalidArgument);
    let mut out = [0.0; 4];
    assert_eq!(unsafe { abswift_profile_at(0.5, 0.1, 10.0, out.as_mut_ptr()) }, AbswiftStatus::Data);
    let n = unsafe { abswift_last_error(ptr::null_mut(), 0) };
    assert!(n > 0);
}

#[test]
fn profile_reference_height() {
    let mut out = [0.0; 4];
    assert_eq!(unsafe { abswift_profile_at(-0.05, 0.3, 80.0, out.as_mut_ptr()) }, AbswiftStatus::Ok);
    assert!((out[0] - 6.0).abs() < 1e-9);
    assert!(out[2] > 0.0 && out[3] > 0.0);
}

#[test]
fn predict_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let (wp, sp) = fixture(dir.path());
    let (wc, sc) = (cstr(&wp), cstr(&sp));
    let mut m: *mut AbswiftModel = ptr::null_mut();
    let mut s: *mut AbswiftSample = ptr::null_mut();
    unsafe {
        assert_eq!(abswift_model_load(wc.as_ptr(), &mut m), AbswiftStatus::Ok);
        assert_eq!(abswift_sample_load(sc.as_ptr(), &mut s), AbswiftStatus::Ok);
        let mut np = 0u64;
        assert_eq!(abswift_sample_num_points(s, &mut np), AbswiftStatus::Ok);
        assert_eq!(np, 48);
    }
    let sample = abswift::dataset::read_sample(&sp).unwrap();
    let pts: Vec<f64> = (0..5)
        .flat_map(|i| [395.0 - i as f64, 2.0 + i as f64, 45.0])
        .collect();
    assert!((0..5).all(|i| !sample.geometry.contains(&pts[3 * i..3 * i + 3])));
    let mut fields = vec![0.0; 35];
    let mut again = vec![0.0; 35];
    unsafe {
        assert_eq!(abswift_predict(m, s, pts.as_ptr(), 5, 3, fields.as_mut_ptr()), AbswiftStatus::Ok);
        assert_eq!(abswift_predict(m, s, pts.as_ptr(), 5, 3, again.as_mut_ptr()), AbswiftStatus::Ok);
    }
    assert_eq!(fields, again);
    assert!(fields.iter().all(|v| v.is_finite()));
    assert!((0..5).all(|r| fields[7 * r + 5] > 0.0 && fields[7 * r + 6] > 0.0));

    let b = &sample.geometry.buildings[0];
    let inside = [b.cx, b.cy, b.height / 2.0];
    let status = unsafe { abswift_predict(m, s, inside.as_ptr(), 1, 3, fields.as_mut_ptr()) };
    assert_eq!(status, AbswiftStatus::Data);
    assert!(last_error().contains("inside a building"));
    unsafe {
        abswift_model_free(m);
        abswift_sample_free(s);
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include").join("abswift.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["abswift_model_load", "abswift_predict", "abswift_last_error", "ABSWIFT_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let target = root.join("../../target/debug");
    let lib = target.join("libabswift_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "abswift.h"
int main(void) {
    double out[4];
    if (abswift_profile_at(0.0, 0.1, 80.0, out) != ABSWIFT_STATUS_OK) return 1;
    printf("%s %.9f\n", abswift_version(), out[0]);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "0.1.0 6.000000000");
}

#[test]
fn variant_handles_cover_ladder() {
    let mut last = 0u64;
    for v in 1..=4u32 {
        let mut m: *mut AbswiftModel = ptr::null_mut();
        assert_eq!(unsafe { abswift_model_build_desk(0, v, &mut m) }, AbswiftStatus::Ok);
        let mut n = 0u64;
        unsafe {
            abswift_model_num_params(m, &mut n);
            abswift_model_free(m);
        }
        assert!(n >= last);
        last = n;
    }
}
