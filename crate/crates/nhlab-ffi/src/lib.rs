//! C ABI over the nhlab section map, the pendulum separatrix and the
//! experiment runner. Objects are opaque handles released by their `_free`
//! function; every fallible call returns an [`NhlabStatus`] and leaves a
//! message for [`nhlab_last_error`] on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nhlab::arnold_model::{Model, ModelParams, PhasePoint, SectionPoint};
use nhlab::cli::{execute, resolve_config, CliError, Command, RunOutput};
use nhlab::pendulum_oracle::separatrix_r1;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NhlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Compute = 4,
    BufferTooSmall = 5,
    NotFound = 6,
    Io = 7,
    Panic = 8,
}

/// A section map at fixed parameters.
pub struct NhlabModel {
    model: Model<f64>,
}

/// The in-memory outputs of one experiment run.
pub struct NhlabRun {
    out: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn fail(status: NhlabStatus, msg: impl Into<String>) -> NhlabStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> NhlabStatus) -> NhlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NhlabStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, NhlabStatus> {
    if p.is_null() {
        return Err(fail(NhlabStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(NhlabStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nhlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a model; `steps` must be a power of two and `order` 2 or 4.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn nhlab_model_new(epsilon: f64, mu: f64, steps: usize, order: u8, out: *mut *mut NhlabModel) -> NhlabStatus {
    guard(|| {
        if out.is_null() {
            return fail(NhlabStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        match ModelParams::new(epsilon, mu, steps, order) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(NhlabModel { model: Model::new(&p, &0.0) }));
                NhlabStatus::Ok
            }
            Err(e) => fail(NhlabStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `m` must be null or a handle from [`nhlab_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nhlab_model_free(m: *mut NhlabModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Applies the section map `n` times (inverse map for negative `n`) to the
/// point (θ₁, r₁, θ₂, r₂) in `x`, writing four values to `y`. Angles are not
/// reduced modulo 2π.
///
/// # Safety
/// `m` must be a live handle; `x` and `y` must point to four doubles.
#[no_mangle]
pub unsafe extern "C" fn nhlab_section_map(m: *const NhlabModel, x: *const f64, n: i64, y: *mut f64) -> NhlabStatus {
    guard(|| {
        if m.is_null() || x.is_null() || y.is_null() {
            return fail(NhlabStatus::NullPointer, "null argument");
        }
        let p = SectionPoint::from_array(*(x as *const [f64; 4]));
        let q = (&*m).model.iterate_raw(&p, n).to_array();
        ptr::copy_nonoverlapping(q.as_ptr(), y, 4);
        NhlabStatus::Ok
    })
}

/// One step of the section map with its derivative: the image goes to `y`
/// (four doubles) and the 4×4 Jacobian to `jac`, row-major.
///
/// # Safety
/// `m` must be a live handle; `x` and `y` must point to four doubles and
/// `jac` to sixteen.
#[no_mangle]
pub unsafe extern "C" fn nhlab_section_jacobian(m: *const NhlabModel, x: *const f64, y: *mut f64, jac: *mut f64) -> NhlabStatus {
    guard(|| {
        if m.is_null() || x.is_null() || y.is_null() || jac.is_null() {
            return fail(NhlabStatus::NullPointer, "null argument");
        }
        let p = SectionPoint::from_array(*(x as *const [f64; 4]));
        let (q, t) = (*m).model.section_map_with_tangent_raw(&p);
        ptr::copy_nonoverlapping(q.to_array().as_ptr(), y, 4);
        for (i, row) in t.iter().enumerate() {
            ptr::copy_nonoverlapping(row.as_ptr(), jac.add(4 * i), 4);
        }
        NhlabStatus::Ok
    })
}

/// H at angles `theta` and actions `r` (three doubles each).
///
/// # Safety
/// `m` must be a live handle; `theta` and `r` must point to three doubles and
/// `out` to one.
#[no_mangle]
pub unsafe extern "C" fn nhlab_hamiltonian(m: *const NhlabModel, theta: *const f64, r: *const f64, out: *mut f64) -> NhlabStatus {
    guard(|| {
        if m.is_null() || theta.is_null() || r.is_null() || out.is_null() {
            return fail(NhlabStatus::NullPointer, "null argument");
        }
        let p = PhasePoint { theta: *(theta as *const [f64; 3]), r: *(r as *const [f64; 3]) };
        *out = (*m).model.hamiltonian(&p);
        NhlabStatus::Ok
    })
}

/// Upper branch r₁ = 2√ε sin(θ₁/2) of the pendulum separatrix.
#[no_mangle]
pub extern "C" fn nhlab_separatrix_r1(theta1: f64, epsilon: f64) -> f64 {
    separatrix_r1(theta1, epsilon)
}

fn status_of(e: &CliError) -> NhlabStatus {
    match e {
        CliError::Config(_) | CliError::Model(_) => NhlabStatus::Config,
        CliError::Io(_) => NhlabStatus::Io,
        _ => NhlabStatus::Compute,
    }
}

/// Runs an experiment. `command` is a subcommand name such as
/// "pendulum-check"; `config` is a sectioned key-value text overriding the
/// defaults, or null for the defaults.
///
/// # Safety
/// `command` must be a NUL-terminated string, `config` null or one, and
/// `out` a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn nhlab_run(command: *const c_char, config: *const c_char, out: *mut *mut NhlabRun) -> NhlabStatus {
    guard(|| {
        if out.is_null() {
            return fail(NhlabStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let name = match text(command, "command") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let Some(cmd) = Command::from_name(name) else {
            return fail(NhlabStatus::InvalidArgument, format!("unknown command `{name}`"));
        };
        let cfg_text = if config.is_null() {
            None
        } else {
            match text(config, "config") {
                Ok(s) => Some(s),
                Err(s) => return s,
            }
        };
        let res = resolve_config(cmd, cfg_text, None, None).and_then(|c| execute(&c));
        match res {
            Ok(r) => {
                *out = Box::into_raw(Box::new(NhlabRun { out: r }));
                NhlabStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// 1 when every check of the run passed, 0 otherwise, −1 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhlab_run_passed(run: *const NhlabRun) -> i32 {
    if run.is_null() {
        return -1;
    }
    let r = &*run;
    r.out.passed() as i32
}

/// Number of checks evaluated by the run.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhlab_run_check_count(run: *const NhlabRun) -> usize {
    if run.is_null() {
        return 0;
    }
    let r = &*run;
    r.out.checks.len()
}

/// Margin of check `i` (positive when it holds), NaN when out of range.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn nhlab_run_check_margin(run: *const NhlabRun, i: usize) -> f64 {
    if run.is_null() {
        return f64::NAN;
    }
    let r = &*run;
    r.out.checks.get(i).map(|c| c.margin).unwrap_or(f64::NAN)
}

/// Copies output file `name` (e.g. "run.toml") with a terminating NUL into
/// `buf` of capacity `cap`. The required size including the NUL is stored in
/// `needed` when it is non-null; a short buffer yields BufferTooSmall.
///
/// # Safety
/// `run` must be a live handle, `name` a NUL-terminated string and `buf`
/// null or writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn nhlab_run_file(run: *const NhlabRun, name: *const c_char, buf: *mut c_char, cap: usize, needed: *mut usize) -> NhlabStatus {
    guard(|| {
        if run.is_null() {
            return fail(NhlabStatus::NullPointer, "run is null");
        }
        let name = match text(name, "name") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let r = &*run;
        let Some(body) = r.out.file(name) else {
            return fail(NhlabStatus::NotFound, format!("no output file `{name}`"));
        };
        let n = body.len() + 1;
        if !needed.is_null() {
            *needed = n;
        }
        if buf.is_null() || cap < n {
            return fail(NhlabStatus::BufferTooSmall, format!("`{name}` needs {n} bytes"));
        }
        ptr::copy_nonoverlapping(body.as_ptr() as *const c_char, buf, body.len());
        *buf.add(body.len()) = 0;
        NhlabStatus::Ok
    })
}

/// Writes every output file of the run into directory `dir`.
///
/// # Safety
/// `run` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nhlab_run_write(run: *const NhlabRun, dir: *const c_char) -> NhlabStatus {
    guard(|| {
        if run.is_null() {
            return fail(NhlabStatus::NullPointer, "run is null");
        }
        let dir = match text(dir, "dir") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let r = &*run;
        match r.out.write(Path::new(dir)) {
            Ok(()) => NhlabStatus::Ok,
            Err(e) => fail(NhlabStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `run` must be null or a handle from [`nhlab_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nhlab_run_free(run: *mut NhlabRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
