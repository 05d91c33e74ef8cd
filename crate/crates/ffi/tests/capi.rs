use std::ffi::{CStr, CString};
use std::ptr;

use qlspde_ffi::*;

fn last_error() -> Option<String> {
    let p = ql_last_error();
    if p.is_null() {
        None
    } else {
        Some(unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
    }
}

fn config(toml: &str) -> (QlStatus, *mut QlConfig) {
    let text = CString::new(toml).unwrap();
    let mut out = ptr::null_mut();
    let s = unsafe { ql_config_from_toml(text.as_ptr(), false, 0, &mut out) };
    (s, out)
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(ql_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let s = unsafe { ql_config_from_toml(ptr::null(), false, 0, ptr::null_mut()) };
    assert_eq!(s, QlStatus::NullPointer);
    assert!(last_error().unwrap().contains("null"));
    let mut n = 0usize;
    assert_eq!(unsafe { ql_config_n_modes(ptr::null(), &mut n) }, QlStatus::NullPointer);
    unsafe {
        ql_config_free(ptr::null_mut());
        ql_field_free(ptr::null_mut());
    }
}

#[test]
fn rejected_config_names_its_clause() {
    let (s, h) = config("seed = 1\n[model]\nn_modes = 5\n");
    assert_eq!(s, QlStatus::ConfigError);
    assert!(h.is_null());
    let msg = last_error().unwrap();
    assert!(msg.contains("quadrature_budget"), "{msg}");

    let (s, _) = config("not toml ===");
    assert_eq!(s, QlStatus::ConfigError);
}

#[test]
fn success_clears_last_error() {
    let (s, _) = config("bogus_key = 3");
    assert_eq!(s, QlStatus::ConfigError);
    assert!(last_error().is_some());
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ql_config_default(&mut h) }, QlStatus::Ok);
    assert!(last_error().is_none());
    let mut n = 0usize;
    assert_eq!(unsafe { ql_config_n_modes(h, &mut n) }, QlStatus::Ok);
    assert_eq!(n, 2);
    unsafe { ql_config_free(h) };
}

#[test]
fn errors_are_thread_local() {
    let (s, _) = config("bogus_key = 3");
    assert_eq!(s, QlStatus::ConfigError);
    let other = std::thread::spawn(last_error).join().unwrap();
    assert!(other.is_none());
    assert!(last_error().is_some());
}

#[test]
fn solve_evaluate_and_minimize() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ql_config_default(&mut h) }, QlStatus::Ok);
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { ql_solve(h, &mut f) }, QlStatus::Ok, "{:?}", last_error());

    let x = [0.0, 0.0];
    let mut u = f64::NAN;
    assert_eq!(unsafe { ql_field_value(f, 0.5, x.as_ptr(), 2, &mut u) }, QlStatus::Ok);
    assert!(u.is_finite() && u.abs() < 1.0);

    // wrong dimension and out-of-range time
    assert_eq!(unsafe { ql_field_value(f, 0.5, x.as_ptr(), 1, &mut u) }, QlStatus::InvalidArgument);
    assert_eq!(unsafe { ql_field_value(f, -1.0, x.as_ptr(), 2, &mut u) }, QlStatus::InvalidArgument);

    // the uncontrolled skeleton endpoint costs nothing
    let mut a = QlActionResult::default();
    assert_eq!(unsafe { ql_minimize_action(h, x.as_ptr(), x.as_ptr(), 2, 0.5, &mut a) }, QlStatus::Ok);
    assert!(a.value < 1e-8, "{a:?}");

    unsafe {
        ql_field_free(f);
        ql_config_free(h);
    }
}

#[test]
fn feynman_kac_through_the_c_api() {
    let toml = "seed = 11\n[simulation]\nn_paths = 4000\nsteps_per_unit = 40\n";
    let (s, h) = config(toml);
    assert_eq!(s, QlStatus::Ok, "{:?}", last_error());
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { ql_solve(h, &mut f) }, QlStatus::Ok);
    let x = [0.3, -0.2];
    let mut r = QlFkResult::default();
    assert_eq!(unsafe { ql_feynman_kac(h, f, x.as_ptr(), 2, 0.5, &mut r) }, QlStatus::Ok, "{:?}", last_error());
    assert!(r.mc_stderr > 0.0);
    assert!(r.pass, "{r:?}");
    unsafe {
        ql_field_free(f);
        ql_config_free(h);
    }
}

#[test]
fn run_writes_artifacts_and_maps_status() {
    let dir = std::env::temp_dir().join(format!("qlspde-capi-{}", std::process::id()));
    let out = CString::new(dir.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { ql_config_default(&mut h) }, QlStatus::Ok);

    let cmd = CString::new("check-hypotheses").unwrap();
    assert_eq!(unsafe { ql_run(h, cmd.as_ptr(), out.as_ptr()) }, QlStatus::Ok, "{:?}", last_error());
    assert!(dir.join("summary.json").exists());
    assert!(dir.join("hypotheses.csv").exists());

    let bad = CString::new("no-such-command").unwrap();
    assert_eq!(unsafe { ql_run(h, bad.as_ptr(), out.as_ptr()) }, QlStatus::InvalidArgument);

    unsafe { ql_config_free(h) };
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/qlspde.h")).unwrap();
    for name in [
        "ql_last_error",
        "ql_version",
        "ql_config_default",
        "ql_config_from_toml",
        "ql_config_n_modes",
        "ql_config_free",
        "ql_run",
        "ql_solve",
        "ql_field_value",
        "ql_field_free",
        "ql_feynman_kac",
        "ql_minimize_action",
        "QL_STATUS_PANIC",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
