use std::ffi::{c_char, CString};
use std::path::Path;
use std::ptr;

use lca_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; lca_last_error_length() + 1];
    let n = unsafe { lca_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"
run_id = "ffi"
seed = 1
arch = [4, 6, 3]
iterations = 30
output_dir = "{}"

[dataset]
kind = "synthetic"
n = 120
d = 4
c = 3
separation = 3.0
seed = 2

[optimizer]
kind = "sgd"
lr = 0.1
momentum = 0.9
batch_size = 16
{extra}
"#,
        dir.display()
    );
    let p = dir.join("ffi.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn pipeline_and_readers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(unsafe { lca_run_pipeline(cstr(&cfg).as_ptr()) }, LcaStatus::Ok);

    let run = dir.path().join("ffi");
    let mut traj = ptr::null_mut();
    let st = unsafe { lca_trajectory_open(cstr(&run.join("ffi.lcat")).as_ptr(), &mut traj) };
    assert_eq!(st, LcaStatus::Ok, "{}", last_error());
    let (mut steps, mut params) = (0usize, 0usize);
    assert_eq!(unsafe { lca_trajectory_shape(traj, &mut steps, &mut params) }, LcaStatus::Ok);
    assert_eq!((steps, params), (30, 4 * 6 + 6 + 6 * 3 + 3));
    let mut theta = vec![0.0; params];
    assert_eq!(
        unsafe { lca_trajectory_snapshot(traj, 30, theta.as_mut_ptr(), theta.len()) },
        LcaStatus::Ok
    );
    assert!(theta.iter().any(|v| *v != 0.0));
    assert_eq!(
        unsafe { lca_trajectory_snapshot(traj, 31, theta.as_mut_ptr(), theta.len()) },
        LcaStatus::Range
    );
    assert_eq!(
        unsafe { lca_trajectory_snapshot(traj, 0, theta.as_mut_ptr(), 3) },
        LcaStatus::BufferTooSmall
    );
    unsafe { lca_trajectory_free(traj) };

    let mut a = ptr::null_mut();
    let st = unsafe { lca_allocation_open(cstr(&run.join("ffi.lcam")).as_ptr(), &mut a) };
    assert_eq!(st, LcaStatus::Ok, "{}", last_error());
    let (mut t, mut k, mut l) = (0, 0, 0);
    assert_eq!(unsafe { lca_allocation_shape(a, &mut t, &mut k, &mut l) }, LcaStatus::Ok);
    assert_eq!((t, k, l), (30, params, 2));
    let mut totals = vec![0.0; l];
    assert_eq!(
        unsafe { lca_allocation_layer_totals(a, totals.as_mut_ptr(), l) },
        LcaStatus::Ok
    );
    let mut grand = 0.0;
    let mut row = vec![0.0; k];
    for s in 0..t {
        assert_eq!(unsafe { lca_allocation_row(a, s, row.as_mut_ptr(), k) }, LcaStatus::Ok);
        grand += row.iter().sum::<f64>();
    }
    assert!((totals.iter().sum::<f64>() - grand).abs() < 1e-9);
    let mut res = vec![0.0; t];
    assert_eq!(unsafe { lca_allocation_residuals(a, res.as_mut_ptr(), t) }, LcaStatus::Ok);
    assert!(res.iter().all(|e| e.abs() < 1e-3));
    let (mut dl, mut pct) = (0.0, 0.0);
    assert_eq!(unsafe { lca_allocation_error(a, &mut dl, &mut pct) }, LcaStatus::Ok);
    assert!(dl < 0.0);
    assert!(pct.abs() < 1.0);
    unsafe { lca_allocation_free(a) };
}

#[test]
fn error_codes_and_messages() {
    let mut traj = ptr::null_mut();
    assert_eq!(unsafe { lca_trajectory_open(ptr::null(), &mut traj) }, LcaStatus::NullArgument);
    assert!(traj.is_null());
    assert!(last_error().contains("null"));

    let missing = CString::new("/nonexistent/run.lcat").unwrap();
    assert_eq!(unsafe { lca_trajectory_open(missing.as_ptr(), &mut traj) }, LcaStatus::Io);
    assert!(!last_error().is_empty());

    let bad = [0xffu8 as c_char, 0];
    assert_eq!(unsafe { lca_allocation_open(bad.as_ptr(), &mut ptr::null_mut()) }, LcaStatus::InvalidUtf8);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.lcam");
    std::fs::write(&junk, b"not an allocation file at all, just bytes").unwrap();
    let st = unsafe { lca_allocation_open(cstr(&junk).as_ptr(), &mut ptr::null_mut()) };
    assert!(matches!(st, LcaStatus::Format | LcaStatus::Integrity), "{st:?}");

    let cfg = write_config(dir.path(), "bogus_key = 1");
    assert_eq!(unsafe { lca_run_pipeline(cstr(&cfg).as_ptr()) }, LcaStatus::Config);
    assert!(last_error().contains("bogus_key"), "{}", last_error());

    // truncated copy is still NUL terminated
    let mut small = [1 as c_char; 4];
    assert_eq!(unsafe { lca_last_error_message(small.as_mut_ptr(), 4) }, 3);
    assert_eq!(small[3], 0);
}

#[test]
fn gate_failure_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[lca]\nmax_depth = 0\ngate_pct = 1e-9\n");
    assert_eq!(unsafe { lca_run_pipeline(cstr(&cfg).as_ptr()) }, LcaStatus::Gate);
    assert!(last_error().contains("gate"));
    assert!(dir.path().join("ffi/ffi.lcam").exists());
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lca.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["lca_trajectory_open", "lca_allocation_row", "lca_run_pipeline", "LCA_STATUS_GATE"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn version_string() {
    let v = unsafe { std::ffi::CStr::from_ptr(lca_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
