use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use omedr::synthbench::{sample_instance, BenchmarkSpec};
use omedr::{estimate, ErrorParams, Estimator, EstimatorInputs, LossKind};
use omedr_ffi::*;

fn last_error() -> String {
    let p = omedr_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn small_spec() -> (BenchmarkSpec, CString) {
    let text = "n_users = 30\nn_items = 40\nseed = 9\n";
    (BenchmarkSpec::from_config(text).unwrap(), CString::new(text).unwrap())
}

fn generate(config: &CString) -> *mut OmedrInstance {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { omedr_instance_generate(config.as_ptr(), &mut h) }, OmedrStatus::Ok);
    assert!(!h.is_null());
    h
}

fn copy(h: *const OmedrInstance, which: OmedrMatrix, len: usize) -> Vec<f64> {
    let mut buf = vec![f64::NAN; len];
    assert_eq!(unsafe { omedr_instance_copy_matrix(h, which, buf.as_mut_ptr(), len) }, OmedrStatus::Ok);
    buf
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(omedr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn surrogate_loss_matches_core() {
    let rho = ErrorParams::new(0.2, 0.1).unwrap();
    for &(pred, label) in &[(0.3, 1u8), (0.8, 0), (0.5, 1)] {
        let mut out = 0.0;
        let st = unsafe { omedr_surrogate_loss(OmedrLoss::Squared, 0.0, pred, label, 0.2, 0.1, &mut out) };
        assert_eq!(st, OmedrStatus::Ok);
        assert_eq!(out, omedr::surrogate_loss(LossKind::SquaredError, pred, label == 1, &rho).unwrap());
    }
    let mut out = 0.0;
    assert_eq!(unsafe { omedr_point_loss(OmedrLoss::CrossEntropy, 1e-6, 0.25, 1, &mut out) }, OmedrStatus::Ok);
    assert!((out + 0.25f64.ln()).abs() < 1e-15);
}

#[test]
fn invalid_rates_report_a_domain_error() {
    let mut out = 0.0;
    let st = unsafe { omedr_surrogate_loss(OmedrLoss::Squared, 0.0, 0.5, 1, 0.6, 0.5, &mut out) };
    assert_eq!(st, OmedrStatus::Domain);
    assert!(last_error().contains("rho01"));
}

#[test]
fn null_output_is_rejected_and_success_clears_the_error() {
    let st = unsafe { omedr_point_loss(OmedrLoss::Squared, 0.0, 0.5, 1, ptr::null_mut()) };
    assert_eq!(st, OmedrStatus::NullPointer);
    assert!(last_error().contains("out"));
    let mut out = 0.0;
    assert_eq!(unsafe { omedr_point_loss(OmedrLoss::Squared, 0.0, 0.5, 1, &mut out) }, OmedrStatus::Ok);
    assert!(omedr_last_error_message().is_null());
}

#[test]
fn estimates_match_core_bitwise() {
    let (spec, config) = small_spec();
    let inst = sample_instance(&spec).unwrap();
    let h = generate(&config);
    let (mut n, mut m) = (0usize, 0usize);
    assert_eq!(unsafe { omedr_instance_dims(h, &mut n, &mut m) }, OmedrStatus::Ok);
    assert_eq!((n, m), (30, 40));
    let len = n * m;
    let mask = copy(h, OmedrMatrix::ObservedMask, len);
    let ratings = copy(h, OmedrMatrix::ObservedRatings, len);
    let preds = copy(h, OmedrMatrix::Prediction, len);
    let p_hat = copy(h, OmedrMatrix::PropensityHat, len);
    assert_eq!(mask, inst.dataset.observed_mask.iter().copied().collect::<Vec<_>>());
    let e_bar = vec![0.1; len];
    let e_mat = omedr::ImputationMatrix::constant(n, m, 0.1).unwrap();

    let pairs = [
        (OmedrEstimator::Naive, Estimator::Naive),
        (OmedrEstimator::Eib, Estimator::Eib),
        (OmedrEstimator::Ips, Estimator::Ips),
        (OmedrEstimator::Dr, Estimator::Dr),
        (OmedrEstimator::OmeNaive, Estimator::OmeNaive),
        (OmedrEstimator::OmeEib, Estimator::OmeEib),
        (OmedrEstimator::OmeIps, Estimator::OmeIps),
        (OmedrEstimator::OmeDr, Estimator::OmeDr),
    ];
    for (c_kind, kind) in pairs {
        let mut out = f64::NAN;
        let st = unsafe {
            omedr_estimate(
                c_kind,
                n,
                m,
                mask.as_ptr(),
                ratings.as_ptr(),
                preds.as_ptr(),
                p_hat.as_ptr(),
                e_bar.as_ptr(),
                0.2,
                0.1,
                OmedrLoss::Squared,
                0.0,
                &mut out,
            )
        };
        assert_eq!(st, OmedrStatus::Ok, "{kind}");
        let inputs = EstimatorInputs::new(&inst.dataset, &inst.prediction, LossKind::SquaredError)
            .with_propensities(&inst.p_hat)
            .with_imputation(&e_mat)
            .with_error_params(ErrorParams::new(0.2, 0.1).unwrap());
        assert_eq!(out.to_bits(), estimate(kind, &inputs).unwrap().to_bits(), "{kind}");
    }

    let mut p_star = 0.0;
    assert_eq!(unsafe { omedr_instance_true_inaccuracy(h, OmedrLoss::Squared, 0.0, &mut p_star) }, OmedrStatus::Ok);
    assert_eq!(p_star, inst.true_inaccuracy(LossKind::SquaredError).unwrap());
    let (mut r01, mut r10) = (0.0, 0.0);
    assert_eq!(unsafe { omedr_instance_rho(h, &mut r01, &mut r10) }, OmedrStatus::Ok);
    assert_eq!((r01, r10), (0.2, 0.1));
    unsafe { omedr_instance_free(h) };
}

#[test]
fn missing_propensities_are_reported() {
    let mask = [1.0, 0.0, 1.0, 1.0];
    let ratings = [1.0, 0.0, 0.0, 1.0];
    let preds = [0.7, 0.2, 0.4, 0.9];
    let mut out = 0.0;
    let st = unsafe {
        omedr_estimate(
            OmedrEstimator::Ips,
            2,
            2,
            mask.as_ptr(),
            ratings.as_ptr(),
            preds.as_ptr(),
            ptr::null(),
            ptr::null(),
            0.0,
            0.0,
            OmedrLoss::Squared,
            0.0,
            &mut out,
        )
    };
    assert_eq!(st, OmedrStatus::MissingComponent);
    assert_eq!(last_error(), "propensities required");
}

#[test]
fn identify_reads_the_extremes() {
    let q = [0.1, 0.5, 0.6, 0.8, 0.3, 0.45];
    let (mut r01, mut r10, mut flags) = (0.0, 0.0, 99u32);
    let st = unsafe { omedr_identify(q.as_ptr(), 2, 3, 1, &mut r01, &mut r10, &mut flags) };
    assert_eq!(st, OmedrStatus::Ok);
    assert!((r01 - 0.2).abs() < 1e-15 && (r10 - 0.1).abs() < 1e-15);
    assert_eq!(flags, 0);
    let flat = [0.4; 4];
    let st = unsafe { omedr_identify(flat.as_ptr(), 2, 2, 1, &mut r01, &mut r10, ptr::null_mut()) };
    assert_eq!(st, OmedrStatus::Ok);
    let st = unsafe { omedr_identify(flat.as_ptr(), 2, 2, 1, &mut r01, &mut r10, &mut flags) };
    assert_eq!(st, OmedrStatus::Ok);
    assert_ne!(flags & OMEDR_FLAG_NO_SEPARATION, 0);
}

#[test]
fn metrics_match_core() {
    let scores = [0.9, 0.1, 0.5, 0.2, 0.8, 0.4];
    let labels = [1u8, 0, 0, 0, 1, 1];
    let mut out = 0.0;
    assert_eq!(unsafe { omedr_auc(scores.as_ptr(), labels.as_ptr(), 6, &mut out) }, OmedrStatus::Ok);
    let bools: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    assert_eq!(out, omedr::metrics::auc(&scores, &bools).unwrap());

    let users = [
        omedr::metrics::UserList {
            scores: &scores[..3],
            labels: &bools[..3],
        },
        omedr::metrics::UserList {
            scores: &scores[3..],
            labels: &bools[3..],
        },
    ];
    assert_eq!(unsafe { omedr_ndcg_at_k(scores.as_ptr(), labels.as_ptr(), 2, 3, 2, &mut out) }, OmedrStatus::Ok);
    assert_eq!(out, omedr::metrics::ndcg_at_k(&users, 2).unwrap());
    assert_eq!(unsafe { omedr_recall_at_k(scores.as_ptr(), labels.as_ptr(), 2, 3, 1, &mut out) }, OmedrStatus::Ok);
    assert_eq!(out, omedr::metrics::recall_at_k(&users, 1).unwrap());

    let single = [1u8; 6];
    assert_eq!(unsafe { omedr_auc(scores.as_ptr(), single.as_ptr(), 6, &mut out) }, OmedrStatus::InvalidData);
    assert_eq!(unsafe { omedr_ndcg_at_k(scores.as_ptr(), labels.as_ptr(), 2, 3, 0, &mut out) }, OmedrStatus::InvalidArgument);
}

#[test]
fn instance_errors() {
    let bad = CString::new("gamma_proportions = 0.5,0.5,0.5,0,0\n").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { omedr_instance_generate(bad.as_ptr(), &mut h) }, OmedrStatus::InvalidConfig);
    assert!(last_error().contains("gamma_proportions"));
    assert!(h.is_null());

    let unknown = CString::new("n_user = 3\n").unwrap();
    assert_eq!(unsafe { omedr_instance_generate(unknown.as_ptr(), &mut h) }, OmedrStatus::InvalidConfig);

    let (_, config) = small_spec();
    let h = generate(&config);
    let mut buf = vec![0.0; 10];
    let st = unsafe { omedr_instance_copy_matrix(h, OmedrMatrix::Gamma, buf.as_mut_ptr(), buf.len()) };
    assert_eq!(st, OmedrStatus::BufferTooSmall);
    assert_eq!(unsafe { omedr_instance_dims(ptr::null(), &mut 0, &mut 0) }, OmedrStatus::NullPointer);
    unsafe {
        omedr_instance_free(h);
        omedr_instance_free(ptr::null_mut());
    }
}

#[test]
fn same_config_gives_identical_instances() {
    let (_, config) = small_spec();
    let (a, b) = (generate(&config), generate(&config));
    for which in [OmedrMatrix::Gamma, OmedrMatrix::NoisyRatings, OmedrMatrix::PropensityHat, OmedrMatrix::FiveScale] {
        assert_eq!(copy(a, which, 1200), copy(b, which, 1200));
    }
    unsafe {
        omedr_instance_free(a);
        omedr_instance_free(b);
    }
}

fn header_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("omedr.h")
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(header_path()).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src").join("lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.trim_start().strip_prefix("pub unsafe extern \"C\" fn ").or_else(|| l.trim_start().strip_prefix("pub extern \"C\" fn ")))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14, "{exports:?}");
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from the header");
    }
}

fn have_cc() -> bool {
    Command::new("cc").arg("--version").output().is_ok_and(|o| o.status.success())
}

/// Directory holding the library artifacts next to this test binary.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    if !have_cc() {
        eprintln!("no C compiler found; skipping");
        return;
    }
    let lib = artifact_dir().join("libomedr_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <stdlib.h>
#include "omedr.h"

int main(void) {
    OmedrInstance *h = NULL;
    if (omedr_instance_generate("n_users = 20\nn_items = 25\nseed = 3\n", &h) != OMEDR_STATUS_OK) return 1;
    size_t n = 0, m = 0;
    omedr_instance_dims(h, &n, &m);
    double *o = malloc(n * m * sizeof(double));
    double *r = malloc(n * m * sizeof(double));
    double *f = malloc(n * m * sizeof(double));
    double *p = malloc(n * m * sizeof(double));
    omedr_instance_copy_matrix(h, OMEDR_MATRIX_OBSERVED_MASK, o, n * m);
    omedr_instance_copy_matrix(h, OMEDR_MATRIX_OBSERVED_RATINGS, r, n * m);
    omedr_instance_copy_matrix(h, OMEDR_MATRIX_PREDICTION, f, n * m);
    omedr_instance_copy_matrix(h, OMEDR_MATRIX_PROPENSITY_TRUE, p, n * m);
    double v = 0.0;
    OmedrStatus st = omedr_estimate(OMEDR_ESTIMATOR_OME_IPS, n, m, o, r, f, p, NULL, 0.2, 0.1, OMEDR_LOSS_SQUARED, 0.0, &v);
    if (st != OMEDR_STATUS_OK) { fprintf(stderr, "%s\n", omedr_last_error_message()); return 2; }
    st = omedr_estimate(OMEDR_ESTIMATOR_IPS, n, m, o, r, f, NULL, NULL, 0.0, 0.0, OMEDR_LOSS_SQUARED, 0.0, &v);
    if (st != OMEDR_STATUS_MISSING_COMPONENT) return 3;
    printf("%s\n", omedr_last_error_message());
    omedr_instance_free(h);
    free(o); free(r); free(f); free(p);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let out = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-I")
        .arg(header_path().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "propensities required");
}
