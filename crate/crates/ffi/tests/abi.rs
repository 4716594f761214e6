use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use drdfl_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { drdfl_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let s = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned();
    assert_eq!(n, s.len());
    s
}

fn defaults() -> DrdflProvisioningParams {
    let mut p = std::mem::MaybeUninit::uninit();
    assert_eq!(unsafe { drdfl_params_default(p.as_mut_ptr()) }, DrdflStatus::Ok);
    unsafe { p.assume_init() }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(drdfl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn decision_and_reward_round_trip() {
    let p = defaults();
    assert_eq!(p.n_slots, 28);
    let c_hat = [1e5, 0.0, 1e7];
    let mut a = [0.0; 3];
    assert_eq!(unsafe { drdfl_optimal_decision(&p, c_hat.as_ptr(), 3, a.as_mut_ptr()) }, DrdflStatus::Ok);
    assert_eq!(a, [1e5, 0.0, 4e5]);

    let c = [1000.0];
    let mut r = 0.0;
    assert_eq!(unsafe { drdfl_net_reward(&p, c.as_ptr(), c.as_ptr(), 1, &mut r) }, DrdflStatus::Ok);
    let expected = 0.2 * 21f64.ln() * 1000.0 - 0.34 * 4.4e-3;
    assert!((r - expected).abs() < 1e-9 * expected);
    let mut o = 0.0;
    assert_eq!(unsafe { drdfl_oracle_reward(&p, c.as_ptr(), 1, &mut o) }, DrdflStatus::Ok);
    assert!(o >= r - 1e-12);
}

#[test]
fn errors_set_status_and_message() {
    let p = defaults();
    let mut out = 0.0;
    let st = unsafe { drdfl_net_reward(&p, ptr::null(), [1.0].as_ptr(), 1, &mut out) };
    assert_eq!(st, DrdflStatus::NullPointer);
    assert!(last_error().contains("a is null"));

    let neg = [-1.0];
    let st = unsafe { drdfl_optimal_decision(&p, neg.as_ptr(), 1, &mut out) };
    assert_eq!(st, DrdflStatus::Domain);

    let mut bad = p;
    bad.omega = 0.5;
    let st = unsafe { drdfl_oracle_reward(&bad, [1.0].as_ptr(), 1, &mut out) };
    assert_eq!(st, DrdflStatus::Config);
    assert!(!last_error().is_empty());

    // success clears the message
    let st = unsafe { drdfl_oracle_reward(&p, [1.0].as_ptr(), 1, &mut out) };
    assert_eq!(st, DrdflStatus::Ok);
    assert_eq!(last_error(), "");

    let path = CString::new("/nonexistent/dir/file.csv").unwrap();
    let mut d = ptr::null_mut();
    let st = unsafe { drdfl_dataset_load(path.as_ptr(), &mut d) };
    assert_ne!(st, DrdflStatus::Ok);
    assert!(d.is_null());
}

#[test]
fn truncated_error_message_reports_full_length() {
    let mut out = 0.0;
    unsafe { drdfl_net_reward(ptr::null(), ptr::null(), ptr::null(), 0, &mut out) };
    let mut small = [0 as c_char; 4];
    let n = unsafe { drdfl_last_error_message(small.as_mut_ptr(), small.len()) };
    assert!(n > 3);
    let s = unsafe { CStr::from_ptr(small.as_ptr()) };
    assert_eq!(s.to_bytes().len(), 3);
}

#[test]
fn dataset_handle_lifecycle() {
    let kind = CString::new("ar1").unwrap();
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { drdfl_dataset_synth(kind.as_ptr(), 5, 3, &mut d) }, DrdflStatus::Ok);
    let (mut n, mut l) = (0usize, 0usize);
    assert_eq!(unsafe { drdfl_dataset_shape(d, &mut n, &mut l) }, DrdflStatus::Ok);
    assert_eq!((n, l), (5, 36));
    let mut seq = vec![0.0; l];
    assert_eq!(unsafe { drdfl_dataset_sequence(d, 4, seq.as_mut_ptr(), l) }, DrdflStatus::Ok);
    assert!(seq.iter().all(|v| *v >= 0.0));
    assert_eq!(
        unsafe { drdfl_dataset_sequence(d, 0, seq.as_mut_ptr(), 3) },
        DrdflStatus::BufferTooSmall
    );
    assert_eq!(unsafe { drdfl_dataset_sequence(d, 9, seq.as_mut_ptr(), l) }, DrdflStatus::Config);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("d.csv");
    let cpath = CString::new(file.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { drdfl_dataset_save(d, cpath.as_ptr()) }, DrdflStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { drdfl_dataset_load(cpath.as_ptr(), &mut back) }, DrdflStatus::Ok);
    let mut seq2 = vec![0.0; l];
    assert_eq!(unsafe { drdfl_dataset_sequence(back, 4, seq2.as_mut_ptr(), l) }, DrdflStatus::Ok);
    assert_eq!(seq, seq2);
    unsafe {
        drdfl_dataset_free(d);
        drdfl_dataset_free(back);
        drdfl_dataset_free(ptr::null_mut());
    }

    let bad = CString::new("nope").unwrap();
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { drdfl_dataset_synth(bad.as_ptr(), 5, 3, &mut e) }, DrdflStatus::Config);
}

#[test]
fn invalid_utf8_is_rejected() {
    let bytes = [0xffu8, 0xfe, 0];
    let mut d = ptr::null_mut();
    let st = unsafe { drdfl_dataset_synth(bytes.as_ptr().cast(), 1, 0, &mut d) };
    assert_eq!(st, DrdflStatus::InvalidUtf8);
}

#[test]
fn predictor_checkpoint_through_the_abi() {
    use drdfl::predictor::{PredictorArch, PredictorParams};
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("p.ckpt");
    let params = PredictorParams::init(PredictorArch { hidden1: 8, hidden2: 4 }, 8, 28, 4e5, 0.3, &mut drdfl::rng::stream(1)).unwrap();
    params.save(&ckpt).unwrap();

    let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { drdfl_predictor_load(cpath.as_ptr(), &mut h) }, DrdflStatus::Ok);
    let (mut w, mut n) = (0, 0);
    assert_eq!(unsafe { drdfl_predictor_shape(h, &mut w, &mut n) }, DrdflStatus::Ok);
    assert_eq!((w, n), (8, 28));
    let ctx = vec![1e5; 8];
    let mut out = vec![0.0; 28];
    assert_eq!(
        unsafe { drdfl_predictor_predict(h, ctx.as_ptr(), 8, out.as_mut_ptr(), 28) },
        DrdflStatus::Ok
    );
    assert_eq!(out, params.predict(&ctx).unwrap());
    assert_eq!(
        unsafe { drdfl_predictor_predict(h, ctx.as_ptr(), 7, out.as_mut_ptr(), 28) },
        DrdflStatus::Config
    );

    let kind = CString::new("ar1").unwrap();
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { drdfl_dataset_synth(kind.as_ptr(), 4, 2, &mut d) }, DrdflStatus::Ok);
    let p = defaults();
    let mut regret = f64::NAN;
    assert_eq!(unsafe { drdfl_evaluate_regret(h, d, &p, &mut regret) }, DrdflStatus::Ok);
    assert!((0.0..=1.0).contains(&regret));
    unsafe {
        drdfl_predictor_free(h);
        drdfl_dataset_free(d);
    }
}

#[test]
fn header_compiles_as_c() {
    let header_dir = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(
        &src,
        r#"#include "drdfl.h"
int main(void) {
    DrdflProvisioningParams p;
    DrdflStatus s = drdfl_params_default(&p);
    char buf[64];
    (void)drdfl_last_error_message(buf, sizeof buf);
    return s == DRDFL_STATUS_OK ? 0 : 1;
}
"#,
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", header_dir])
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compiler rejected the header"),
        Err(e) => eprintln!("skipping C header check, no compiler: {e}"),
    }
}
