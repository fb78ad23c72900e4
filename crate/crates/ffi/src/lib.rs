//! C interface to megafusion.
//!
//! Objects are opaque handles created by `*_new`/`mf_generate` and released
//! with the matching `*_free`. Every fallible call returns an `MfStatus`;
//! on failure `mf_last_error()` describes the most recent error on the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use megafusion::analysis::{plan_cost_ratio, CostModel};
use megafusion::cli::{CliError, Resolved, RunConfig, EXIT_IO, EXIT_NUMERIC};
use megafusion::pipeline::{preset, run_pipeline};
use megafusion::schedule::{LinearBetas, NoiseSchedule};
use megafusion::tensor::ImageTensor;
use megafusion::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Io = 4,
    Panic = 5,
}

/// Noise schedule handle.
pub struct MfSchedule(NoiseSchedule);

/// Image tensor handle, `channels x height x width`, row-major per channel.
pub struct MfTensor(ImageTensor);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(MfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) => MfStatus::Io,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::InfiniteSnr(_) => {
                MfStatus::Numeric
            }
            _ => MfStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

impl From<CliError> for Fail {
    fn from(e: CliError) -> Self {
        let status = match e.exit {
            EXIT_NUMERIC => MfStatus::Numeric,
            EXIT_IO => MfStatus::Io,
            _ => MfStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MfStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            MfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MfStatus::Panic
        }
    }
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn mf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Linear-beta schedule over `num_steps` steps.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mf_schedule_new_linear(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    eta: f64,
    out: *mut *mut MfSchedule,
) -> MfStatus {
    guard(|| {
        let s = NoiseSchedule::linear(num_steps, beta_start, beta_end, eta)?;
        put(out, Box::into_raw(Box::new(MfSchedule(s))))
    })
}

/// The default beta range rescaled for a `num_steps`-step chain.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mf_schedule_new_scaled(
    num_steps: usize,
    eta: f64,
    out: *mut *mut MfSchedule,
) -> MfStatus {
    guard(|| {
        let s = NoiseSchedule::from_linear(num_steps, LinearBetas::scaled_for(num_steps), eta)?;
        put(out, Box::into_raw(Box::new(MfSchedule(s))))
    })
}

/// Number of steps, or 0 for a NULL handle.
///
/// # Safety
/// `s` must be NULL or a live schedule handle.
#[no_mangle]
pub unsafe extern "C" fn mf_schedule_num_steps(s: *const MfSchedule) -> usize {
    s.as_ref().map_or(0, |s| s.0.num_steps())
}

/// Cumulative product `alpha_bar` at step `t`, `1 <= t <= num_steps`.
///
/// # Safety
/// `s` must be a live schedule handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_schedule_alpha_bar(
    s: *const MfSchedule,
    t: usize,
    out: *mut f64,
) -> MfStatus {
    guard(|| {
        let s = handle(s, "schedule")?;
        s.0.check_t(t)?;
        put(out, s.0.alpha_bar(t))
    })
}

/// Signal-to-noise ratio at step `t`.
///
/// # Safety
/// `s` must be a live schedule handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_schedule_snr(
    s: *const MfSchedule,
    t: usize,
    out: *mut f64,
) -> MfStatus {
    guard(|| {
        let s = handle(s, "schedule")?;
        put(out, s.0.snr(t)?)
    })
}

/// New schedule whose SNR is divided by `gamma` at every step.
///
/// # Safety
/// `s` must be a live schedule handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_schedule_reschedule(
    s: *const MfSchedule,
    gamma: f64,
    out: *mut *mut MfSchedule,
) -> MfStatus {
    guard(|| {
        let r = handle(s, "schedule")?.0.reschedule(gamma)?;
        put(out, Box::into_raw(Box::new(MfSchedule(r))))
    })
}

/// Releases a schedule. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_schedule_free(s: *mut MfSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Area-proportional cost of a named preset relative to running every step
/// at its final resolution.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mf_preset_cost_ratio(name: *const c_char, out: *mut f64) -> MfStatus {
    guard(|| {
        let p = preset(str_arg(name, "preset name")?)?;
        put(out, plan_cost_ratio(&p.plan, &CostModel::default())?.ratio)
    })
}

/// Runs the sampler described by a JSON run config (the `mf` config format)
/// and returns the final image. `config_json` may be NULL for defaults;
/// `preset`, when not NULL, replaces the config's plan. Relative paths in the
/// config resolve against the working directory.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_generate(
    config_json: *const c_char,
    preset: *const c_char,
    seed: u64,
    out: *mut *mut MfTensor,
) -> MfStatus {
    guard(|| {
        let mut cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json(str_arg(config_json, "config")?)?
        };
        if !preset.is_null() {
            cfg.preset = Some(str_arg(preset, "preset")?.to_string());
            cfg.plan = None;
        }
        let mut r = Resolved::new(&cfg)?;
        let img = run_pipeline(
            &r.plan,
            &mut r.denoiser,
            r.codec.as_ref(),
            &r.schedule,
            &r.options,
            seed,
        )?
        .image;
        put(out, Box::into_raw(Box::new(MfTensor(img))))
    })
}

/// Writes the tensor's channel, height and width. Any output may be NULL.
///
/// # Safety
/// `t` must be a live tensor handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mf_tensor_dims(
    t: *const MfTensor,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> MfStatus {
    guard(|| {
        let t = &handle(t, "tensor")?.0;
        for (p, v) in [
            (channels, t.channels()),
            (height, t.height()),
            (width, t.width()),
        ] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the tensor's `channels * height * width` values,
/// valid until the tensor is freed.
///
/// # Safety
/// `t` must be NULL or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn mf_tensor_data(t: *const MfTensor) -> *const f64 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// Copies the values into `buf`, which must hold at least `len` doubles.
///
/// # Safety
/// `t` must be a live tensor handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn mf_tensor_copy(t: *const MfTensor, buf: *mut f64, len: usize) -> MfStatus {
    guard(|| {
        let data = handle(t, "tensor")?.0.data();
        if buf.is_null() {
            return Err(null("buffer"));
        }
        if len < data.len() {
            return Err(Fail(
                MfStatus::InvalidArgument,
                format!("buffer holds {len} values, tensor has {}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Releases a tensor. NULL is ignored.
///
/// # Safety
/// `t` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mf_tensor_free(t: *mut MfTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
