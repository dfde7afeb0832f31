use std::ffi::{CStr, CString};
use std::ptr;

use nhlab::arnold_model::{section_map, ModelParams, SectionPoint};
use nhlab_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(nhlab_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn model_handle_matches_library_map() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nhlab_model_new(0.25, 0.01, 128, 4, &mut m) }, NhlabStatus::Ok);
    let x = [0.3, 0.1, 1.2, 0.45];
    let mut y = [0.0; 4];
    assert_eq!(unsafe { nhlab_section_map(m, x.as_ptr(), 1, y.as_mut_ptr()) }, NhlabStatus::Ok);
    let p = ModelParams::new(0.25, 0.01, 128, 4).unwrap();
    let want = section_map(&SectionPoint::from_array(x), &p);
    let w = want.to_array();
    for i in 0..4 {
        let d = y[i] - w[i];
        // section_map reduces angles; compare modulo 2π
        let d = if i % 2 == 0 { d - (d / (2.0 * std::f64::consts::PI)).round() * 2.0 * std::f64::consts::PI } else { d };
        assert!(d.abs() < 1e-13, "{i}: {} vs {}", y[i], w[i]);
    }
    let mut back = [0.0; 4];
    assert_eq!(unsafe { nhlab_section_map(m, y.as_ptr(), -1, back.as_mut_ptr()) }, NhlabStatus::Ok);
    for i in 0..4 {
        assert!((back[i] - x[i]).abs() < 1e-12);
    }
    let mut jac = [0.0; 16];
    let mut y2 = [0.0; 4];
    assert_eq!(unsafe { nhlab_section_jacobian(m, x.as_ptr(), y2.as_mut_ptr(), jac.as_mut_ptr()) }, NhlabStatus::Ok);
    assert_eq!(y, y2);
    // DFᵀ J DF = J for the symplectic form ω = dθ₁∧dr₁ + dθ₂∧dr₂
    let j = |a: usize, b: usize| match (a, b) {
        (0, 1) | (2, 3) => 1.0,
        (1, 0) | (3, 2) => -1.0,
        _ => 0.0,
    };
    for a in 0..4 {
        for b in 0..4 {
            let mut s = 0.0;
            for k in 0..4 {
                for l in 0..4 {
                    s += jac[4 * k + a] * j(k, l) * jac[4 * l + b];
                }
            }
            assert!((s - j(a, b)).abs() < 1e-10);
        }
    }
    let mut h = 0.0;
    let (th, r) = ([0.0, 0.0, 0.0], [0.0, 0.5, 0.0]);
    assert_eq!(unsafe { nhlab_hamiltonian(m, th.as_ptr(), r.as_ptr(), &mut h) }, NhlabStatus::Ok);
    assert!((h - 0.125).abs() < 1e-15);
    unsafe { nhlab_model_free(m) };
}

#[test]
fn invalid_arguments_report_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { nhlab_model_new(0.25, 0.0, 100, 4, &mut m) }, NhlabStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("power of two"));
    assert_eq!(unsafe { nhlab_model_new(0.25, 0.0, 128, 4, ptr::null_mut()) }, NhlabStatus::NullPointer);
    let x = [0.0; 4];
    let mut y = [0.0; 4];
    assert_eq!(unsafe { nhlab_section_map(ptr::null(), x.as_ptr(), 1, y.as_mut_ptr()) }, NhlabStatus::NullPointer);
    unsafe { nhlab_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { nhlab_run_passed(ptr::null()) }, -1);
}

#[test]
fn separatrix_oracle() {
    assert!((nhlab_separatrix_r1(std::f64::consts::PI, 0.25) - 1.0).abs() < 1e-15);
}

#[test]
fn run_handle_exposes_outputs() {
    let cmd = CString::new("pendulum-check").unwrap();
    let cfg = CString::new("[model]\nsteps = 256\n[pendulum]\nmultiplier_tol = 1e-6\ntheta_min = 2.0\n").unwrap();
    let mut run = ptr::null_mut();
    assert_eq!(unsafe { nhlab_run(cmd.as_ptr(), cfg.as_ptr(), &mut run) }, NhlabStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { nhlab_run_passed(run) }, 1);
    let n = unsafe { nhlab_run_check_count(run) };
    assert_eq!(n, 3);
    assert!(unsafe { nhlab_run_check_margin(run, 0) } > 0.0);
    assert!(unsafe { nhlab_run_check_margin(run, n) }.is_nan());
    let name = CString::new("run.toml").unwrap();
    let mut need = 0usize;
    assert_eq!(unsafe { nhlab_run_file(run, name.as_ptr(), ptr::null_mut(), 0, &mut need) }, NhlabStatus::BufferTooSmall);
    let mut buf = vec![0 as std::ffi::c_char; need];
    assert_eq!(unsafe { nhlab_run_file(run, name.as_ptr(), buf.as_mut_ptr(), need, ptr::null_mut()) }, NhlabStatus::Ok);
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_owned();
    assert!(text.starts_with("# manifest sha256:"));
    assert!(text.contains("steps = 256"));
    let missing = CString::new("nope.csv").unwrap();
    assert_eq!(unsafe { nhlab_run_file(run, missing.as_ptr(), buf.as_mut_ptr(), need, ptr::null_mut()) }, NhlabStatus::NotFound);
    let dir = tempfile::tempdir().unwrap();
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { nhlab_run_write(run, d.as_ptr()) }, NhlabStatus::Ok);
    assert_eq!(std::fs::read_to_string(dir.path().join("run.toml")).unwrap(), text);
    unsafe { nhlab_run_free(run) };

    // the emitted manifest reproduces the run byte for byte
    let again = CString::new(text.clone()).unwrap();
    let mut run2 = ptr::null_mut();
    assert_eq!(unsafe { nhlab_run(cmd.as_ptr(), again.as_ptr(), &mut run2) }, NhlabStatus::Ok);
    let csv = CString::new("pendulum-check.csv").unwrap();
    let mut need2 = 0usize;
    unsafe { nhlab_run_file(run2, csv.as_ptr(), ptr::null_mut(), 0, &mut need2) };
    assert_eq!(need2 as u64, std::fs::metadata(dir.path().join("pendulum-check.csv")).unwrap().len() + 1);
    unsafe { nhlab_run_free(run2) };
}

#[test]
fn run_rejects_bad_requests() {
    let mut run = ptr::null_mut();
    let bad = CString::new("no-such").unwrap();
    assert_eq!(unsafe { nhlab_run(bad.as_ptr(), ptr::null(), &mut run) }, NhlabStatus::InvalidArgument);
    let cmd = CString::new("pendulum-check").unwrap();
    let cfg = CString::new("[model]\nmu = 0.01\n").unwrap();
    assert_eq!(unsafe { nhlab_run(cmd.as_ptr(), cfg.as_ptr(), &mut run) }, NhlabStatus::Config);
    assert!(last_error().contains("mu = 0"));
    let cfg = CString::new("[pendulum]\nbogus = 1\n").unwrap();
    assert_eq!(unsafe { nhlab_run(cmd.as_ptr(), cfg.as_ptr(), &mut run) }, NhlabStatus::Config);
    assert!(run.is_null());
}

#[test]
fn header_declares_the_abi_and_compiles() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/include/nhlab.h");
    let h = std::fs::read_to_string(path).unwrap();
    for f in [
        "nhlab_last_error",
        "nhlab_model_new",
        "nhlab_model_free",
        "nhlab_section_map",
        "nhlab_section_jacobian",
        "nhlab_hamiltonian",
        "nhlab_separatrix_r1",
        "nhlab_run(",
        "nhlab_run_passed",
        "nhlab_run_check_count",
        "nhlab_run_check_margin",
        "nhlab_run_file",
        "nhlab_run_write",
        "nhlab_run_free",
        "NHLAB_STATUS_BUFFER_TOO_SMALL = 5",
        "typedef struct NhlabModel NhlabModel",
    ] {
        assert!(h.contains(f), "missing {f}");
    }
    let src = tempfile::Builder::new().suffix(".c").tempfile().unwrap();
    std::fs::write(src.path(), "#include \"nhlab.h\"\nint main(void) { NhlabModel *m = 0; return nhlab_model_new(1.0, 0.0, 64, 4, &m) == NHLAB_STATUS_OK ? 0 : 1; }\n").unwrap();
    let st = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(src.path())
        .status()
        .expect("C compiler");
    assert!(st.success());
}
