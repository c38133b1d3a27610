use std::ffi::{CStr, CString};
use std::ptr;

use leap_ffi::*;

fn last_error() -> String {
    let p = leap_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn topk_mask_matches_small_case() {
    let scores = [0.9, 0.1, 0.5, 0.7];
    let mut mask = [9u8; 4];
    let status = unsafe { leap_topk_mask(scores.as_ptr(), 2, 2, 0.5, mask.as_mut_ptr()) };
    assert_eq!(status, LeapStatus::Ok);
    assert_eq!(mask, [1, 0, 0, 1]);
}

#[test]
fn topk_mask_reports_nan_and_null() {
    let scores = [0.9, f64::NAN];
    let mut mask = [0u8; 2];
    let status = unsafe { leap_topk_mask(scores.as_ptr(), 1, 2, 0.5, mask.as_mut_ptr()) };
    assert_eq!(status, LeapStatus::Input);
    assert!(!last_error().is_empty());

    let status = unsafe { leap_topk_mask(ptr::null(), 1, 2, 0.5, mask.as_mut_ptr()) };
    assert_eq!(status, LeapStatus::NullPointer);
    assert!(last_error().contains("scores"));
}

#[test]
fn cubic_sparsity_endpoints() {
    let mut out = -1.0;
    let status = unsafe { leap_cubic_sparsity(0.0, 0.0, 0.9, 10, 20, 100, &mut out) };
    assert_eq!(status, LeapStatus::Ok);
    assert_eq!(out, 0.0);
    let status = unsafe { leap_cubic_sparsity(90.0, 0.0, 0.9, 10, 20, 100, &mut out) };
    assert_eq!(status, LeapStatus::Ok);
    assert!((out - 0.9).abs() < 1e-12);

    let status = unsafe { leap_cubic_sparsity(5.0, 0.5, 0.1, 10, 20, 100, &mut out) };
    assert_eq!(status, LeapStatus::Config);
}

#[test]
fn threshold_bank_lifecycle() {
    let counts = [100usize, 300];
    let mut bank = ptr::null_mut();
    let status = unsafe { leap_threshold_bank_new(counts.as_ptr(), 2, 32.0, 0.1, 320.0, 10.0, &mut bank) };
    assert_eq!(status, LeapStatus::Ok);
    assert!(!bank.is_null());

    let mut len = 0usize;
    assert_eq!(unsafe { leap_threshold_bank_len(bank, &mut len) }, LeapStatus::Ok);
    assert_eq!(len, 2);

    let mut dens = [0.0; 2];
    assert_eq!(unsafe { leap_threshold_bank_densities(bank, dens.as_mut_ptr(), 2) }, LeapStatus::Ok);
    for d in dens {
        assert!((d - 0.993_307_149_075_715).abs() < 1e-12);
    }

    let mut lambda = 0.0;
    assert_eq!(unsafe { leap_threshold_bank_adaptive_lambda(bank, &mut lambda) }, LeapStatus::Ok);
    assert!((lambda - 320.0).abs() / 320.0 < 0.02);

    // k = 0.05 everywhere puts R below the target, so the penalty vanishes
    let low = 32.0 * (0.05f64 / 0.95).ln();
    let sigma = [low, low];
    assert_eq!(unsafe { leap_threshold_bank_set_sigma(bank, sigma.as_ptr(), 2) }, LeapStatus::Ok);
    let mut ratio = 0.0;
    assert_eq!(unsafe { leap_threshold_bank_remaining_ratio(bank, &mut ratio) }, LeapStatus::Ok);
    assert!((ratio - 0.05).abs() < 1e-12);
    let mut reg = 1.0;
    assert_eq!(unsafe { leap_threshold_bank_reg_loss(bank, &mut reg) }, LeapStatus::Ok);
    assert_eq!(reg, 0.0);
    assert_eq!(unsafe { leap_threshold_bank_adaptive_lambda(bank, &mut lambda) }, LeapStatus::Ok);
    assert_eq!(lambda, 10.0);

    assert_eq!(
        unsafe { leap_threshold_bank_set_sigma(bank, sigma.as_ptr(), 1) },
        LeapStatus::Dimension
    );
    assert_eq!(
        unsafe { leap_threshold_bank_densities(bank, dens.as_mut_ptr(), 3) },
        LeapStatus::Dimension
    );

    unsafe { leap_threshold_bank_free(bank) };
    unsafe { leap_threshold_bank_free(ptr::null_mut()) };
}

#[test]
fn threshold_bank_rejects_bad_settings() {
    let counts = [10usize];
    let mut bank = ptr::null_mut();
    let status = unsafe { leap_threshold_bank_new(counts.as_ptr(), 1, 0.0, 0.1, 320.0, 10.0, &mut bank) };
    assert_eq!(status, LeapStatus::Config);
    assert!(bank.is_null());
}

#[test]
fn checkpoint_open_reports_missing_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.bin").to_str().unwrap()).unwrap();
    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { leap_checkpoint_open(missing.as_ptr(), &mut ck) }, LeapStatus::Io);

    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"NOTACKPT").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { leap_checkpoint_open(bad.as_ptr(), &mut ck) }, LeapStatus::Format);
    assert!(ck.is_null());
}

fn tiny_config(out: &std::path::Path) -> String {
    serde_json::json!({
        "method": "hard-cubic",
        "profile": "s8",
        "target_density": 0.5,
        "alpha": 0.0,
        "init_from_teacher": false,
        "epochs": 1,
        "batch_size": 16,
        "task": {"name": "pattern-parity", "train_size": 32, "eval_size": 16, "max_occurrences": 2},
        "model": {"vocab": 8, "seq_len": 4, "hidden": 16, "heads": 2, "ffn": 16, "layers": 1, "classes": 2},
        "schedule": {"initial_sparsity": 0.0, "warmup_steps": 0, "cooldown_steps": 1},
        "out_dir": out,
    })
    .to_string()
}

#[test]
fn train_then_open_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(tiny_config(dir.path())).unwrap();
    let mut summary = ptr::null_mut();
    let status = unsafe { leap_train_json(cfg.as_ptr(), &mut summary) };
    assert_eq!(status, LeapStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(summary) }.to_str().unwrap().to_owned();
    unsafe { leap_string_free(summary) };
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["method"], "hard-cubic");
    assert_eq!(parsed["steps"], 2);

    let path = CString::new(dir.path().join("checkpoint.bin").to_str().unwrap()).unwrap();
    let mut ck = ptr::null_mut();
    assert_eq!(unsafe { leap_checkpoint_open(path.as_ptr(), &mut ck) }, LeapStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { leap_checkpoint_matrix_count(ck, &mut n) }, LeapStatus::Ok);
    assert_eq!(n, 6);
    let mut dens = vec![0.0; n];
    assert_eq!(unsafe { leap_checkpoint_densities(ck, dens.as_mut_ptr(), n) }, LeapStatus::Ok);
    for d in dens {
        assert!((d - 0.5).abs() < 1e-12, "{d}");
    }
    unsafe { leap_checkpoint_free(ck) };
}

#[test]
fn train_rejects_bad_json_and_config() {
    let mut summary = ptr::null_mut();
    let cfg = CString::new("{ not json").unwrap();
    assert_eq!(unsafe { leap_train_json(cfg.as_ptr(), &mut summary) }, LeapStatus::Config);
    assert!(summary.is_null());

    let cfg = CString::new(r#"{"target_density": 1.5}"#).unwrap();
    assert_eq!(unsafe { leap_train_json(cfg.as_ptr(), &mut summary) }, LeapStatus::Config);
    assert!(last_error().contains("target_density"));

    assert_eq!(unsafe { leap_train_json(ptr::null(), &mut summary) }, LeapStatus::NullPointer);
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/leap.h");
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
