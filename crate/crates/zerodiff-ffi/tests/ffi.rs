//! Exercises the C ABI exactly as a C caller would: raw pointers, status
//! codes and the thread-local error message.

use std::ffi::{CStr, CString};
use std::ptr;

use zerodiff_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(zd_last_error_message()).to_string_lossy().into_owned() }
}

#[test]
fn schedule_lifecycle_and_values() {
    unsafe {
        let mut s: *mut ZdSchedule = ptr::null_mut();
        assert_eq!(zd_schedule_new(4, 0.1, 20.0, &mut s), ZdStatus::ZdOk);
        assert!(!s.is_null());
        let mut v = 0.0f64;
        assert_eq!(zd_schedule_alpha_bar(s, 0, &mut v), ZdStatus::ZdOk);
        assert_eq!(v, 1.0);
        assert_eq!(zd_schedule_alpha_bar(s, 1, &mut v), ZdStatus::ZdOk);
        assert!((v - 0.5237).abs() < 1e-4);
        assert_eq!(zd_schedule_kappa(s, 4, &mut v), ZdStatus::ZdOk);
        assert!(v > 0.99);
        assert_eq!(zd_schedule_beta(s, 1, &mut v), ZdStatus::ZdOk);
        assert!((v - 0.4763).abs() < 1e-4);
        // out-of-range step reports a config error with a message
        assert_eq!(zd_schedule_beta(s, 9, &mut v), ZdStatus::ZdConfigError);
        assert!(last_error().contains("9"));
        zd_schedule_free(s);
    }
}

#[test]
fn null_pointers_are_rejected() {
    unsafe {
        assert_eq!(zd_schedule_new(4, 0.1, 20.0, ptr::null_mut()), ZdStatus::ZdNullPointer);
        let mut v = 0.0f64;
        assert_eq!(zd_schedule_beta(ptr::null(), 1, &mut v), ZdStatus::ZdNullPointer);
        assert_eq!(zd_config_from_json(ptr::null(), ptr::null_mut()), ZdStatus::ZdNullPointer);
        // frees tolerate null
        zd_schedule_free(ptr::null_mut());
        zd_config_free(ptr::null_mut());
        zd_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_schedule_is_config_error() {
    unsafe {
        let mut s: *mut ZdSchedule = ptr::null_mut();
        assert_eq!(zd_schedule_new(0, 0.1, 20.0, &mut s), ZdStatus::ZdConfigError);
        assert!(!last_error().is_empty());
    }
}

#[test]
fn config_json_parsing() {
    unsafe {
        let mut c: *mut ZdConfig = ptr::null_mut();
        let good = CString::new(r#"{"train": {"n_gen_iters": 5}}"#).unwrap();
        assert_eq!(zd_config_from_json(good.as_ptr(), &mut c), ZdStatus::ZdOk);
        zd_config_free(c);
        let bad = CString::new("{not json").unwrap();
        assert_eq!(zd_config_from_json(bad.as_ptr(), &mut c), ZdStatus::ZdConfigError);
        let invalid = CString::new(r#"{"train": {"batch_size": 0}}"#).unwrap();
        assert_eq!(zd_config_from_json(invalid.as_ptr(), &mut c), ZdStatus::ZdConfigError);
    }
}

#[test]
fn harmonic_mean_through_abi() {
    let h = zd_harmonic_mean(85.0, 74.7);
    assert!((h - 79.5).abs() < 0.05);
    assert_eq!(zd_harmonic_mean(0.0, 0.0), 0.0);
}

#[test]
fn tiny_experiment_through_abi() {
    unsafe {
        let mut c: *mut ZdConfig = ptr::null_mut();
        let json = CString::new(
            r#"{
                "synth": {"samples_per_class": 12},
                "train": {"n_gen_iters": 3, "critic_steps": 1, "batch_size": 8,
                          "hidden": 8, "d_v": 6, "d_r": 4, "d_z": 3,
                          "t_embed_dim": 4, "extractor_hidden": 16,
                          "n_ft": 30, "n_syn": 5, "n_te": 20}
            }"#,
        )
        .unwrap();
        assert_eq!(zd_config_from_json(json.as_ptr(), &mut c), ZdStatus::ZdOk);
        let dir = tempfile::tempdir().unwrap();
        let out_dir = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
        let mut metrics: *mut std::os::raw::c_char = ptr::null_mut();
        assert_eq!(zd_run_experiment(c, out_dir.as_ptr(), &mut metrics), ZdStatus::ZdOk);
        let text = CStr::from_ptr(metrics).to_str().unwrap();
        let parsed: serde_json::Value = serde_json::from_str(text).unwrap();
        assert!(parsed.get("h").is_some());
        assert!(parsed.get("config_hash").is_some());
        zd_string_free(metrics);
        zd_config_free(c);
        // io failure surfaces as the io status
        let bad_dir = CString::new("/proc/definitely/not/writable").unwrap();
        let mut c2: *mut ZdConfig = ptr::null_mut();
        assert_eq!(zd_config_from_json(json.as_ptr(), &mut c2), ZdStatus::ZdOk);
        let mut m2: *mut std::os::raw::c_char = ptr::null_mut();
        assert_eq!(zd_run_experiment(c2, bad_dir.as_ptr(), &mut m2), ZdStatus::ZdIoError);
        zd_config_free(c2);
    }
}
