//! Exercises the C ABI end to end: load, consistency adjustment, calibration,
//! matrix access, deltas and marking, plus the error reporting paths.

use std::ffi::CString;
use std::ptr;

use nalgebra::DMatrix;
use randthin::io;
use randthin::portfolio::PortfolioSnapshot;
use randthin::MaturityGrid;
use randthin_ffi::*;
use tempfile::TempDir;

fn c_path(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0i8; 512];
    let n = unsafe { rt_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(buf.len() - 1)]
        .iter()
        .map(|&b| b as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn write_fixture(dir: &std::path::Path) -> std::path::PathBuf {
    let n = 6;
    let names: Vec<String> = (0..n).map(|i| format!("F{i}")).collect();
    let grid = MaturityGrid::from_maturities(&[1.0, 3.0]).unwrap();
    let spreads: Vec<f64> = (0..n).map(|i| 0.004 + 0.003 * i as f64).collect();
    let mut cum = DMatrix::zeros(n, 2);
    for i in 0..n {
        let hazard = spreads[i] / 0.6;
        cum[(i, 0)] = 1.0 - (-hazard * 1.0f64).exp();
        cum[(i, 1)] = 1.0 - (-hazard * 3.0f64).exp();
    }
    let snap = PortfolioSnapshot::new(names, cum, spreads, 0.4, grid).unwrap();
    let path = dir.join("snapshot.txt");
    io::write_snapshot(&path, &snap).unwrap();
    path
}

#[test]
fn full_pipeline_through_the_c_abi() {
    let dir = TempDir::new().unwrap();
    let snapshot_path = write_fixture(dir.path());

    unsafe {
        let mut snapshot: *mut RtSnapshot = ptr::null_mut();
        let status = rt_snapshot_load(c_path(&snapshot_path).as_ptr(), &mut snapshot);
        assert_eq!(status, RtStatus::RtOk, "{}", last_error());
        assert_eq!(rt_snapshot_names(snapshot), 6);
        assert_eq!(rt_snapshot_intervals(snapshot), 2);

        let maturities = [1.0, 3.0];
        let mut tails: *mut RtTailCurve = ptr::null_mut();
        let status = rt_tailcurve_from_birth_model(
            0.08,
            0.01,
            6,
            maturities.as_ptr(),
            maturities.len(),
            &mut tails,
        );
        assert_eq!(status, RtStatus::RtOk, "{}", last_error());

        let status = rt_enforce_consistency(snapshot, tails);
        assert_eq!(status, RtStatus::RtOk, "{}", last_error());

        let mut set: *mut RtTdMatrixSet = ptr::null_mut();
        let status = rt_calibrate_linear(snapshot, tails, 0, 200, 1e-8, &mut set);
        assert_eq!(status, RtStatus::RtOk, "{}", last_error());
        assert_eq!(rt_tdmatrixset_names(set), 6);
        assert_eq!(rt_tdmatrixset_intervals(set), 2);

        // Conditional matrices have unit column sums.
        let mut buf = vec![0.0f64; 36];
        for interval in 1..=2usize {
            let status = rt_tdmatrixset_conditional(set, interval, buf.as_mut_ptr(), buf.len());
            assert_eq!(status, RtStatus::RtOk, "{}", last_error());
            for j in 0..6 {
                let col: f64 = (0..6).map(|i| buf[i * 6 + j]).sum();
                assert!((col - 1.0).abs() < 1e-8, "column {j} sums to {col}");
            }
        }

        // Save and reload through the ABI.
        let td_path = dir.path().join("td.txt");
        assert_eq!(
            rt_tdmatrixset_save(set, c_path(&td_path).as_ptr()),
            RtStatus::RtOk
        );
        let mut reloaded: *mut RtTdMatrixSet = ptr::null_mut();
        assert_eq!(
            rt_tdmatrixset_load(c_path(&td_path).as_ptr(), &mut reloaded),
            RtStatus::RtOk
        );
        rt_tdmatrixset_free(reloaded);

        // Deltas: width-weighted sums reproduce 1/N per name.
        let strikes = [0.0, 0.03, 0.10, 0.30, 1.0];
        let tranche_spreads = [0.05, 0.02, 0.008, 0.002];
        let ntr = strikes.len() - 1;
        let mut deltas = vec![0.0f64; 6 * ntr];
        let status = rt_single_name_deltas(
            set,
            snapshot,
            strikes.as_ptr(),
            strikes.len(),
            tranche_spreads.as_ptr(),
            0.03,
            0,
            deltas.as_mut_ptr(),
            deltas.len(),
        );
        assert_eq!(status, RtStatus::RtOk, "{}", last_error());
        for i in 0..6 {
            let sum: f64 = (0..ntr)
                .map(|k| (strikes[k + 1] - strikes[k]) * deltas[i * ntr + k])
                .sum();
            assert!((sum - 1.0 / 6.0).abs() < 1e-10, "name {i}: {sum}");
        }

        rt_tdmatrixset_free(set);
        rt_tailcurve_free(tails);
        rt_snapshot_free(snapshot);
    }
}

#[test]
fn marking_through_the_c_abi() {
    let n = 5usize;
    let mut cov = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            cov[i * n + j] = if i == j { 1.0 } else { 0.4 };
        }
    }
    let pi = vec![1.0 / n as f64; n];
    let mut marked = vec![0.0f64; n * n];
    let mut orth = f64::NAN;
    let mut min_eig = f64::NAN;
    let mut iters = -1i32;
    let status = unsafe {
        rt_mark_covariance(
            cov.as_ptr(),
            pi.as_ptr(),
            n,
            0.35,
            20,
            1e-8,
            marked.as_mut_ptr(),
            &mut orth,
            &mut min_eig,
            &mut iters,
        )
    };
    assert_eq!(status, RtStatus::RtOk, "{}", last_error());
    assert!(orth < 1e-7, "orth residual {orth}");
    assert!(min_eig > -1e-8, "min eigenvalue {min_eig}");
    assert!((0..=20).contains(&iters));
    // R pi = 0 componentwise.
    for i in 0..n {
        let row_dot: f64 = (0..n).map(|j| marked[i * n + j] * pi[j]).sum();
        assert!(row_dot.abs() < 1e-7);
    }
}

#[test]
fn error_paths_set_messages_and_codes() {
    unsafe {
        // Missing file.
        let mut snapshot: *mut RtSnapshot = ptr::null_mut();
        let bad = CString::new("/nonexistent/snapshot.txt").unwrap();
        let status = rt_snapshot_load(bad.as_ptr(), &mut snapshot);
        assert_eq!(status, RtStatus::RtIoError);
        assert!(!last_error().is_empty());

        // Null pointers.
        assert_eq!(
            rt_snapshot_load(bad.as_ptr(), ptr::null_mut()),
            RtStatus::RtNullPointer
        );
        assert_eq!(rt_snapshot_names(ptr::null()), -1);

        // Version string is a readable C string.
        let v = std::ffi::CStr::from_ptr(rt_version());
        assert!(!v.to_str().unwrap().is_empty());

        // Freeing NULL is a no-op.
        rt_snapshot_free(ptr::null_mut());
        rt_tailcurve_free(ptr::null_mut());
        rt_tdmatrixset_free(ptr::null_mut());
    }
}

/// The generated header must parse as standalone C.
#[test]
fn generated_header_compiles_as_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/randthin.h");
    assert!(header.exists(), "header not generated at {header:?}");
    let dir = TempDir::new().unwrap();
    let c_file = dir.path().join("smoke.c");
    std::fs::write(
        &c_file,
        r#"
#include "randthin.h"

int use_api(const char *path) {
    RtSnapshot *snapshot = 0;
    enum RtStatus status = rt_snapshot_load(path, &snapshot);
    if (status != RT_OK) {
        char buf[256];
        rt_last_error_message(buf, sizeof buf);
        return (int) status;
    }
    int n = rt_snapshot_names(snapshot);
    rt_snapshot_free(snapshot);
    return n;
}
"#,
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}", header.parent().unwrap().display()))
        .arg(&c_file)
        .output()
        .expect("invoke cc");
    assert!(
        out.status.success(),
        "header failed to compile: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}
