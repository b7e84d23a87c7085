//! C ABI for loading rectflow stages and sampling from them.
//!
//! Every function returns an `RfStatus`. On failure the message is kept per
//! thread and can be read with `rf_last_error_message`. Buffers are row-major
//! `f64` arrays of `n * dim` values; condition labels are `size_t`, 0 is NULL.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rectflow::metrics::stage_endpoints;
use rectflow::{Error, FlowStage};

/// Status codes. Values 2 to 10 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    NullPointer = 1,
    Input = 2,
    Config = 3,
    MissingInput = 4,
    Lineage = 5,
    Usage = 6,
    Training = 7,
    Simulation = 8,
    Format = 9,
    Io = 10,
    Panic = 11,
}

/// Opaque handle to a loaded stage.
pub struct RfStage {
    inner: FlowStage,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> RfStatus {
    match e.exit_code() {
        2 => RfStatus::Input,
        3 => RfStatus::Config,
        4 => RfStatus::MissingInput,
        5 => RfStatus::Lineage,
        6 => RfStatus::Usage,
        7 => RfStatus::Training,
        8 => RfStatus::Simulation,
        9 => RfStatus::Format,
        _ => RfStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RfStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            RfStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            RfStatus::Panic
        }
    }
}

unsafe fn stage_ref<'a>(stage: *const RfStage) -> Result<&'a FlowStage, Fail> {
    stage.as_ref().map(|s| &s.inner).ok_or(Fail::Null("stage"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Loads a checkpoint. On success `*out` owns a handle to free with `rf_stage_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_stage_load(path: *const c_char, out: *mut *mut RfStage) -> RfStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::input("path is not valid UTF-8"))?;
        let inner = FlowStage::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(RfStage { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `stage` must come from `rf_stage_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rf_stage_free(stage: *mut RfStage) {
    if !stage.is_null() {
        drop(Box::from_raw(stage));
    }
}

/// State dimension, number of condition labels (excluding NULL), stage index
/// and whether the stage is a one-step student.
///
/// # Safety
/// `stage` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn rf_stage_info(
    stage: *const RfStage,
    dim: *mut usize,
    num_labels: *mut usize,
    k: *mut u32,
    one_step: *mut bool,
) -> RfStatus {
    guard(|| {
        let s = stage_ref(stage)?;
        if let Some(d) = dim.as_mut() {
            *d = s.net.state_dim();
        }
        if let Some(l) = num_labels.as_mut() {
            *l = s.net.config.vocab - 1;
        }
        if let Some(kk) = k.as_mut() {
            *kk = s.k;
        }
        if let Some(o) = one_step.as_mut() {
            *o = s.is_one_step();
        }
        Ok(())
    })
}

/// Guidance scale the stage samples at by default.
///
/// # Safety
/// `stage` must be a live handle and `alpha` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rf_stage_alpha(stage: *const RfStage, alpha: *mut f64) -> RfStatus {
    guard(|| {
        let s = stage_ref(stage)?;
        *alpha.as_mut().ok_or(Fail::Null("alpha"))? = s.alpha;
        Ok(())
    })
}

/// Guided velocity `alpha v(x, t | c) + (1 - alpha) v(x, t | NULL)` for `n` rows.
///
/// # Safety
/// `x` and `out` hold `n * dim` values, `t` and `c` hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn rf_stage_velocity(
    stage: *const RfStage,
    x: *const f64,
    t: *const f64,
    c: *const usize,
    n: usize,
    alpha: f64,
    out: *mut f64,
) -> RfStatus {
    guard(|| {
        let s = stage_ref(stage)?;
        let d = s.net.state_dim();
        let x = slice(x, n * d, "x")?;
        let t = slice(t, n, "t")?;
        let c = slice(c, n, "c")?;
        let out = slice_mut(out, n * d, "out")?;
        out.copy_from_slice(&s.guided_velocity(x, t, c, alpha)?);
        Ok(())
    })
}

/// Endpoints from noise `z0`: `steps` Euler steps at guidance `alpha` for flows,
/// a single step for one-step students (`steps` and `alpha` are ignored).
///
/// # Safety
/// `z0` and `out` hold `n * dim` values and `c` holds `n` values.
#[no_mangle]
pub unsafe extern "C" fn rf_stage_sample(
    stage: *const RfStage,
    z0: *const f64,
    c: *const usize,
    n: usize,
    steps: usize,
    alpha: f64,
    out: *mut f64,
) -> RfStatus {
    guard(|| {
        let s = stage_ref(stage)?;
        let d = s.net.state_dim();
        let z0 = slice(z0, n * d, "z0")?;
        let c = slice(c, n, "c")?;
        let out = slice_mut(out, n * d, "out")?;
        out.copy_from_slice(&stage_endpoints(s, z0, c, steps, alpha)?);
        Ok(())
    })
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must hold `len` bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn rf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let m = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, m);
            *buf.add(m) = 0;
        }
        msg.len()
    })
}
