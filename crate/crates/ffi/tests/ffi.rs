use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use deep_disaster::config::default_config;
use deep_disaster::data::{make_synthetic_dataset, SyntheticSpec};
use deep_disaster::meta::Meta;
use deep_disaster::training::{pretrain_teacher, save_checkpoint, train_student, TrainOptions};
use deep_disaster::ExperimentConfig;
use deep_disaster_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dd_last_error()).to_string_lossy().into_owned() }
}

/// Tiny trained student and teacher checkpoints in `dir`.
fn checkpoints(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = SyntheticSpec {
        count_normal: 12,
        count_anomalous: 4,
        image_size: 32,
        channels: 1,
        defect_min: 6,
        defect_max: 8,
        ..SyntheticSpec::default()
    };
    let data = make_synthetic_dataset(&spec, &dir.join("data"), &Meta::new("ffi test", "0")).unwrap();
    let cfg = ExperimentConfig {
        image_size: 32,
        channels: 1,
        latent_dim: 8,
        teacher_base_width: 8,
        student_base_width: 4,
        batch_size: 8,
        epochs: 1,
        teacher_epochs: 1,
        ..default_config()
    };
    let t = pretrain_teacher(&cfg, &data, &TrainOptions::default()).unwrap().checkpoint;
    let s = train_student(&cfg, &t, &data, &TrainOptions::default()).unwrap().checkpoint;
    let (sp, tp) = (dir.join("student.ckpt"), dir.join("teacher.ckpt"));
    save_checkpoint(&s, &sp).unwrap();
    save_checkpoint(&t, &tp).unwrap();
    (sp, tp)
}

#[test]
fn config_handles_and_errors() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(dd_config_default(&mut cfg), DdStatus::DdOk);
        let mut needed = 0usize;
        assert_eq!(dd_config_to_toml(cfg, ptr::null_mut(), 0, &mut needed), DdStatus::DdErrBufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(dd_config_to_toml(cfg, buf.as_mut_ptr(), needed, &mut needed), DdStatus::DdOk);
        let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_string();
        assert!(text.contains("lambda_kg = 50"));
        dd_config_free(cfg);

        let doc = CString::new(text).unwrap();
        let mut back = ptr::null_mut();
        assert_eq!(dd_config_parse(doc.as_ptr(), &mut back), DdStatus::DdOk);
        let mut h1 = [0 as std::ffi::c_char; 32];
        assert_eq!(dd_config_hash(back, h1.as_mut_ptr(), 32, ptr::null_mut()), DdStatus::DdOk);
        assert_eq!(CStr::from_ptr(h1.as_ptr()).to_str().unwrap(), default_config().hash());
        dd_config_free(back);

        let bad = CString::new("image_size = 48").unwrap();
        let mut c = ptr::null_mut();
        assert_eq!(dd_config_parse(bad.as_ptr(), &mut c), DdStatus::DdErrConfig);
        assert!(last_error().contains("image_size"));
        assert_eq!(dd_config_parse(ptr::null(), &mut c), DdStatus::DdErrNull);
        dd_config_free(ptr::null_mut());
    }
}

#[test]
fn auc_and_threshold() {
    unsafe {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [0u8, 0, 1, 1];
        let mut out = 0.0;
        assert_eq!(dd_auc_roc(s.as_ptr(), l.as_ptr(), 4, &mut out), DdStatus::DdOk);
        assert_eq!(out, 1.0);
        assert_eq!(dd_estimate_threshold(s.as_ptr(), l.as_ptr(), 4, &mut out), DdStatus::DdOk);
        assert_eq!(out, 0.5);
        assert_eq!(dd_auc_roc(s.as_ptr(), [1u8; 4].as_ptr(), 4, &mut out), DdStatus::DdErrInvalid);
        assert!(!last_error().is_empty());
        assert_eq!(dd_auc_roc(ptr::null(), l.as_ptr(), 4, &mut out), DdStatus::DdErrNull);
    }
}

#[test]
fn model_load_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let (sp, tp) = checkpoints(dir.path());
    let s = CString::new(sp.to_str().unwrap()).unwrap();
    let t = CString::new(tp.to_str().unwrap()).unwrap();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(dd_model_load(missing.as_ptr(), t.as_ptr(), &mut m), DdStatus::DdErrIo);
        assert!(last_error().contains("none.ckpt"));
        assert_eq!(dd_model_load(t.as_ptr(), t.as_ptr(), &mut m), DdStatus::DdErrCheckpoint);
        assert_eq!(dd_model_load(s.as_ptr(), t.as_ptr(), &mut m), DdStatus::DdOk);
        let (mut size, mut ch) = (0usize, 0usize);
        assert_eq!(dd_model_input_shape(m, &mut size, &mut ch), DdStatus::DdOk);
        assert_eq!((size, ch), (32, 1));
        let px: Vec<f64> = (0..2 * 32 * 32).map(|i| ((i as f64) * 0.37).sin() * 0.4).collect();
        let mut raw = [0.0; 2];
        let mut again = [0.0; 2];
        assert_eq!(dd_model_score(m, px.as_ptr(), 2, raw.as_mut_ptr(), ptr::null_mut()), DdStatus::DdOk);
        assert_eq!(dd_model_score(m, px.as_ptr(), 2, again.as_mut_ptr(), ptr::null_mut()), DdStatus::DdOk);
        assert_eq!(raw, again);
        let mut map = vec![0.0; 32 * 32];
        assert_eq!(dd_model_saliency(m, DdSaliencyMethod::DdVanilla, px.as_ptr(), 1, map.as_mut_ptr()), DdStatus::DdOk);
        assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
        dd_model_free(m);
    }
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header_and_static_library() {
    let lib = target_dir().join("libdeep_disaster_ffi.a");
    if !lib.exists() {
        panic!("static library not built at {}", lib.display());
    }
    let dir = tempfile::tempdir().unwrap();
    let (sp, tp) = checkpoints(dir.path());
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).arg(&sp).arg(&tp).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.starts_with("ok "));
}
