//! C ABI over the `mipkd` library.
//!
//! Models are opaque handles created by `mipkd_model_load` or
//! `mipkd_model_build` and released with `mipkd_model_free`. Every fallible
//! call returns a [`MipkdStatus`]; on failure the message is available from
//! `mipkd_last_error` on the same thread until the next failing call.
//! Images are `f32` RGB in `[0, 1]`, laid out `N x 3 x H x W`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mipkd::backbone::{NetworkSpec, Role, SrModel};
use mipkd::checkpoint;
use mipkd::metrics::{self, Upscaler};
use mipkd::tensor::{Shape, Tensor};
use mipkd::Error;

#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MipkdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MipkdArch {
    Edsr = 0,
    Rcan = 1,
}

/// Opaque model handle.
pub struct MipkdModel {
    upscaler: Box<dyn Upscaler>,
    scale: usize,
    params: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> MipkdStatus {
    match err {
        Error::Config(_) | Error::Data(_) | Error::NonFinite { .. } => MipkdStatus::InvalidArgument,
        Error::Dimension(_) => MipkdStatus::Dimension,
        Error::Format(_) | Error::Image { .. } => MipkdStatus::Format,
        Error::Io { .. } => MipkdStatus::Io,
    }
}

/// Runs `f`, converting errors and panics to a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), (MipkdStatus, String)>) -> MipkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MipkdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MipkdStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (MipkdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MipkdStatus, String) {
    (MipkdStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (MipkdStatus, String) {
    (MipkdStatus::InvalidArgument, msg.into())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn mipkd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

fn into_handle(model: MipkdModel, out: *mut *mut MipkdModel) {
    // SAFETY: callers check `out` for null before invoking.
    unsafe { *out = Box::into_raw(Box::new(model)) };
}

/// Loads a checkpoint (network or bicubic pseudo-checkpoint).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mipkd_model_load(path: *const c_char, out: *mut *mut MipkdModel) -> MipkdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let (manifest, params) = checkpoint::load(Path::new(path)).map_err(lib_err)?;
        let upscaler = checkpoint::load_upscaler(Path::new(path)).map_err(lib_err)?;
        into_handle(
            MipkdModel {
                upscaler,
                scale: manifest.scale,
                params: params.numel(),
            },
            out,
        );
        Ok(())
    })
}

/// Builds a freshly initialised network; `arch` is a [`MipkdArch`] value and
/// `groups` is ignored for EDSR.
///
/// # Safety
/// `out` must be a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mipkd_model_build(
    arch: u32,
    channels: u32,
    blocks: u32,
    groups: u32,
    scale: u32,
    seed: u64,
    out: *mut *mut MipkdModel,
) -> MipkdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (c, b, g, s) = (channels as usize, blocks as usize, groups as usize, scale as usize);
        let spec = match arch {
            a if a == MipkdArch::Edsr as u32 => NetworkSpec::edsr(c, b, s),
            a if a == MipkdArch::Rcan as u32 => NetworkSpec::rcan(c, b, g, s),
            a => return Err(invalid(format!("unknown architecture {a}"))),
        };
        let model = SrModel::<f32>::build(spec, Role::Student, seed).map_err(lib_err)?;
        let params = model.count_params();
        into_handle(
            MipkdModel {
                upscaler: Box::new(model),
                scale: s,
                params,
            },
            out,
        );
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mipkd_model_free(model: *mut MipkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Upscaling factor, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mipkd_model_scale(model: *const MipkdModel) -> u32 {
    model.as_ref().map_or(0, |m| m.scale as u32)
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mipkd_model_param_count(model: *const MipkdModel) -> u64 {
    model.as_ref().map_or(0, |m| m.params as u64)
}

/// Upscales `n` RGB images of `h x w`. `output` must hold
/// `n * 3 * (h * scale) * (w * scale)` floats.
///
/// # Safety
/// `input` must point to `n * 3 * h * w` floats and `output` to `output_len`
/// writable floats.
#[no_mangle]
pub unsafe extern "C" fn mipkd_model_upscale(
    model: *const MipkdModel,
    input: *const f32,
    n: usize,
    h: usize,
    w: usize,
    output: *mut f32,
    output_len: usize,
) -> MipkdStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let shape = Shape::new(n, 3, h, w);
        if shape.numel() == 0 {
            return Err(invalid("empty input"));
        }
        let want = n * 3 * h * model.scale * w * model.scale;
        if output_len != want {
            return Err((
                MipkdStatus::Dimension,
                format!("output holds {output_len} floats, {want} required"),
            ));
        }
        let data = std::slice::from_raw_parts(input, shape.numel()).to_vec();
        let lr = Tensor::from_vec(shape, data).map_err(lib_err)?;
        let sr = model.upscaler.upscale(&lr).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(output, want).copy_from_slice(sr.data());
        Ok(())
    })
}

unsafe fn image_pair(a: *const f32, b: *const f32, h: usize, w: usize) -> Result<(Tensor<f32>, Tensor<f32>), (MipkdStatus, String)> {
    if a.is_null() || b.is_null() {
        return Err(null("image"));
    }
    let shape = Shape::new(1, 3, h, w);
    let read = |p: *const f32| Tensor::from_vec(shape, std::slice::from_raw_parts(p, shape.numel()).to_vec());
    Ok((read(a).map_err(lib_err)?, read(b).map_err(lib_err)?))
}

/// Luma PSNR (dB, capped at 100) of two `3 x h x w` images after shaving
/// `border` pixels per side.
///
/// # Safety
/// `a` and `b` must point to `3 * h * w` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mipkd_psnr(
    a: *const f32,
    b: *const f32,
    h: usize,
    w: usize,
    border: usize,
    out: *mut f64,
) -> MipkdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = image_pair(a, b, h, w)?;
        *out = metrics::score_pair("ffi", &a, &b, border).map_err(lib_err)?.psnr;
        Ok(())
    })
}

/// Luma SSIM of two `3 x h x w` images after shaving `border` pixels per side.
///
/// # Safety
/// As [`mipkd_psnr`].
#[no_mangle]
pub unsafe extern "C" fn mipkd_ssim(
    a: *const f32,
    b: *const f32,
    h: usize,
    w: usize,
    border: usize,
    out: *mut f64,
) -> MipkdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = image_pair(a, b, h, w)?;
        *out = metrics::score_pair("ffi", &a, &b, border).map_err(lib_err)?.ssim;
        Ok(())
    })
}
