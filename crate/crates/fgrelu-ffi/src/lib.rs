//! C ABI for the feedback-gated ReLU engine.
//!
//! Conventions: every fallible call returns an [`FgStatus`] code and writes
//! results through out-pointers; `FG_STATUS_OK` is 0. Handles are opaque and
//! must be released with their matching `_free` function. String and error
//! messages are borrowed, valid until the next call on the same thread.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use libc::{c_char, c_double};

use fgrelu::activation::{self, FgReluParams};
use fgrelu::experiment::preset;
use fgrelu::network::Network;
use fgrelu::tensor::Tensor;
use fgrelu::train::{rng_stream, RngStream};
use fgrelu::{checkpoint, Error, Real};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Format = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").expect("empty"));
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> FgStatus {
    match err {
        Error::Dimension(_) => FgStatus::Dimension,
        Error::Io(_) => FgStatus::Io,
        Error::Format { .. } => FgStatus::Format,
        Error::Parameter(_) | Error::Usage(_) | Error::Spec(_) | Error::Domain(_) => {
            FgStatus::InvalidArgument
        }
        _ => FgStatus::Internal,
    }
}

fn fail(err: &Error) -> FgStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn guard(f: impl FnOnce() -> FgStatus) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            FgStatus::Internal
        }
    }
}

/// Opaque activation-parameter handle.
pub struct FgParams {
    inner: FgReluParams,
}

/// Opaque network handle.
pub struct FgNetwork {
    inner: Network,
}

/// Library version as a static null-terminated string.
#[no_mangle]
pub extern "C" fn fg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last error on this thread; empty when no error occurred.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Create activation parameters; requires `0 < beta_max < 1` and `eta > 0`.
///
/// # Safety
/// `out` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn fg_params_new(
    beta_max: c_double,
    eta: c_double,
    out: *mut *mut FgParams,
) -> FgStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return FgStatus::NullPointer;
        }
        match FgReluParams::new(beta_max as Real, eta as Real) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(FgParams { inner })) };
                FgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Enable the learned-threshold variant with coefficient `alpha`.
///
/// # Safety
/// `params` must be a live handle from [`fg_params_new`].
#[no_mangle]
pub unsafe extern "C" fn fg_params_set_alpha(params: *mut FgParams, alpha: c_double) -> FgStatus {
    guard(|| {
        let Some(p) = (unsafe { params.as_mut() }) else {
            set_error("params pointer is null");
            return FgStatus::NullPointer;
        };
        p.inner.alpha = Some(alpha as Real);
        FgStatus::Ok
    })
}

/// Release a parameter handle. Null is a no-op.
///
/// # Safety
/// `params` must come from [`fg_params_new`] and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn fg_params_free(params: *mut FgParams) {
    if !params.is_null() {
        drop(unsafe { Box::from_raw(params) });
    }
}

/// Saturating feedback function β(μ_D).
///
/// # Safety
/// `params` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_beta(params: *const FgParams, mu_d: c_double) -> c_double {
    match unsafe { params.as_ref() } {
        Some(p) => activation::beta(mu_d as Real, &p.inner) as c_double,
        None => c_double::NAN,
    }
}

/// Gain 1/(1 − β(μ_D)).
///
/// # Safety
/// `params` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_gain(params: *const FgParams, mu_d: c_double) -> c_double {
    match unsafe { params.as_ref() } {
        Some(p) => activation::gain(mu_d as Real, &p.inner) as c_double,
        None => c_double::NAN,
    }
}

/// The gated activation max(0, μ_S)/(1 − β(μ_D)).
///
/// # Safety
/// `params` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_relu(params: *const FgParams, mu_s: c_double, mu_d: c_double) -> c_double {
    match unsafe { params.as_ref() } {
        Some(p) => activation::fg_relu(mu_s as Real, mu_d as Real, &p.inner) as c_double,
        None => c_double::NAN,
    }
}

/// Threshold variant max(0, μ_S + α·μ_D)/(1 − β(μ_D)); the handle must have
/// alpha set.
///
/// # Safety
/// `params` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_relu_threshold(
    params: *const FgParams,
    mu_s: c_double,
    mu_d: c_double,
    out: *mut c_double,
) -> FgStatus {
    guard(|| {
        let Some(p) = (unsafe { params.as_ref() }) else {
            set_error("params pointer is null");
            return FgStatus::NullPointer;
        };
        if out.is_null() {
            set_error("out pointer is null");
            return FgStatus::NullPointer;
        }
        match activation::fg_relu_threshold(mu_s as Real, mu_d as Real, &p.inner) {
            Ok(v) => {
                unsafe { *out = v as c_double };
                FgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Build one of the named preset networks with seeded initialization.
///
/// # Safety
/// `name` must be a null-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_new_preset(
    name: *const c_char,
    seed: u64,
    out: *mut *mut FgNetwork,
) -> FgStatus {
    guard(|| {
        if name.is_null() || out.is_null() {
            set_error("name/out pointer is null");
            return FgStatus::NullPointer;
        }
        let name = match unsafe { CStr::from_ptr(name) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("preset name is not UTF-8");
                return FgStatus::InvalidArgument;
            }
        };
        let spec = match preset(name) {
            Ok(p) => p.spec,
            Err(e) => return fail(&e),
        };
        match Network::new(spec, &mut rng_stream(seed, RngStream::Init)) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(FgNetwork { inner })) };
                FgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a network handle. Null is a no-op.
///
/// # Safety
/// `net` must come from this library and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn fg_network_free(net: *mut FgNetwork) {
    if !net.is_null() {
        drop(unsafe { Box::from_raw(net) });
    }
}

/// Trainable parameter count.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_param_count(net: *const FgNetwork, out: *mut u64) -> FgStatus {
    guard(|| {
        let (Some(n), false) = (unsafe { net.as_ref() }, out.is_null()) else {
            set_error("net/out pointer is null");
            return FgStatus::NullPointer;
        };
        unsafe { *out = n.inner.param_count() as u64 };
        FgStatus::Ok
    })
}

/// Flat input length of one sample.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_input_len(net: *const FgNetwork, out: *mut u64) -> FgStatus {
    guard(|| {
        let (Some(n), false) = (unsafe { net.as_ref() }, out.is_null()) else {
            set_error("net/out pointer is null");
            return FgStatus::NullPointer;
        };
        unsafe { *out = n.inner.spec.input_shape.iter().product::<usize>() as u64 };
        FgStatus::Ok
    })
}

/// Flat output length of one sample (the final layer's element count).
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_output_len(net: *const FgNetwork, out: *mut u64) -> FgStatus {
    guard(|| {
        let (Some(n), false) = (unsafe { net.as_ref() }, out.is_null()) else {
            set_error("net/out pointer is null");
            return FgStatus::NullPointer;
        };
        let shapes = match n.inner.spec.layer_output_shapes() {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        let last: usize = shapes.last().map(|s| s.iter().product()).unwrap_or(0);
        unsafe { *out = last as u64 };
        FgStatus::Ok
    })
}

/// Run one sample through the unrolled network (evaluation mode, all
/// timesteps) and write the final pass's output.
///
/// # Safety
/// `input` must point to `input_len` readable doubles and `output` to
/// `output_len` writable doubles, with lengths matching
/// [`fg_network_input_len`] / [`fg_network_output_len`].
#[no_mangle]
pub unsafe extern "C" fn fg_network_forward(
    net: *const FgNetwork,
    input: *const c_double,
    input_len: u64,
    output: *mut c_double,
    output_len: u64,
) -> FgStatus {
    guard(|| {
        let Some(n) = (unsafe { net.as_ref() }) else {
            set_error("net pointer is null");
            return FgStatus::NullPointer;
        };
        if input.is_null() || output.is_null() {
            set_error("input/output pointer is null");
            return FgStatus::NullPointer;
        }
        let expected_in: usize = n.inner.spec.input_shape.iter().product();
        if input_len as usize != expected_in {
            set_error(&format!("input length {input_len} != expected {expected_in}"));
            return FgStatus::Dimension;
        }
        let data: Vec<Real> = unsafe { std::slice::from_raw_parts(input, expected_in) }
            .iter()
            .map(|&v| v as Real)
            .collect();
        let mut shape = vec![1usize];
        shape.extend_from_slice(&n.inner.spec.input_shape);
        let tensor = match Tensor::new(shape, data) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        let result = match n.inner.forward_eval(tensor) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        if output_len as usize != result.len() {
            set_error(&format!("output length {output_len} != expected {}", result.len()));
            return FgStatus::Dimension;
        }
        let out = unsafe { std::slice::from_raw_parts_mut(output, result.len()) };
        for (o, &v) in out.iter_mut().zip(result.data()) {
            *o = v as c_double;
        }
        FgStatus::Ok
    })
}

/// Save the network to a checkpoint file.
///
/// # Safety
/// `net` must be a live handle; `path` a null-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fg_network_save(net: *const FgNetwork, path: *const c_char) -> FgStatus {
    guard(|| {
        let Some(n) = (unsafe { net.as_ref() }) else {
            set_error("net pointer is null");
            return FgStatus::NullPointer;
        };
        if path.is_null() {
            set_error("path pointer is null");
            return FgStatus::NullPointer;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => PathBuf::from(s),
            Err(_) => {
                set_error("path is not UTF-8");
                return FgStatus::InvalidArgument;
            }
        };
        match checkpoint::save(&path, &n.inner, None) {
            Ok(()) => FgStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Load a network from a checkpoint file.
///
/// # Safety
/// `path` must be a null-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fg_network_load(path: *const c_char, out: *mut *mut FgNetwork) -> FgStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            set_error("path/out pointer is null");
            return FgStatus::NullPointer;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => PathBuf::from(s),
            Err(_) => {
                set_error("path is not UTF-8");
                return FgStatus::InvalidArgument;
            }
        };
        match checkpoint::load(&path) {
            Ok((net, _)) => {
                unsafe { *out = Box::into_raw(Box::new(FgNetwork { inner: net })) };
                FgStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
