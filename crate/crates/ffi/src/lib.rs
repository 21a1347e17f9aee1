//! C ABI over the pointnr toolkit: flat buffers in, flat grids out.
//!
//! Every fallible call returns a [`PrStatus`]; details of the most recent
//! failure on the calling thread are available from [`pr_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pointnr::evaluator;
use pointnr::model::Model;
use pointnr::rasterizer::{rasterize_scale, Reference};
use pointnr::scene::{CameraModel, Pose, RgbImage};
use pointnr::{Error, ErrorClass};

/// Bumped whenever a signature or struct layout changes.
pub const PR_ABI_VERSION: u32 = 1;

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Panic = 5,
    BufferSize = 6,
}

/// Pinhole camera: intrinsics in pixels plus the world-to-camera transform
/// `p_cam = R·p_world + t`, `R` row-major.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct PrCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Opaque handle to a loaded checkpoint.
pub struct PrModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

struct Failure(PrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.class() {
            ErrorClass::Config => PrStatus::Config,
            ErrorClass::Data => PrStatus::Data,
            ErrorClass::Numeric => PrStatus::Numeric,
        };
        Failure(status, e.to_string())
    }
}

fn null(name: &str) -> Failure {
    Failure(PrStatus::NullArgument, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            PrStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn camera(c: &PrCamera) -> Result<(CameraModel, Pose), Failure> {
    let cam = CameraModel::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?;
    let r = c.rotation;
    let pose = Pose::new([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]], c.translation)?;
    Ok((cam, pose))
}

fn check_len(name: &str, got: usize, want: usize) -> Result<(), Failure> {
    if got != want {
        return Err(Failure(
            PrStatus::BufferSize,
            format!("{name} holds {got} elements, expected {want}"),
        ));
    }
    Ok(())
}

#[no_mangle]
pub extern "C" fn pr_abi_version() -> u32 {
    PR_ABI_VERSION
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Z-buffers `n_points` xyz triples at pyramid level `scale`. Both outputs
/// must hold `ceil(W/2^scale)·ceil(H/2^scale)` elements, row-major;
/// uncovered pixels get index -1 and depth +inf.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pr_rasterize(
    points: *const f32,
    n_points: usize,
    camera_in: *const PrCamera,
    scale: u32,
    index_out: *mut i32,
    depth_out: *mut f32,
    out_len: usize,
) -> PrStatus {
    guard(|| {
        let c = camera_in.as_ref().ok_or_else(|| null("camera"))?;
        let flat = slice(points, n_points.checked_mul(3).ok_or_else(|| null("points"))?, "points")?;
        let (cam, pose) = camera(c)?;
        if scale > 16 {
            return Err(Failure(PrStatus::Config, format!("scale {scale} out of range")));
        }
        let (w, h) = cam.scaled_size(scale);
        check_len("output", out_len, w as usize * h as usize)?;
        let index = slice_mut(index_out, out_len, "index_out")?;
        let depth = slice_mut(depth_out, out_len, "depth_out")?;
        let pts: Vec<[f32; 3]> = flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        let frag = rasterize_scale(&pts, &cam, &pose, scale);
        index.copy_from_slice(&frag.index);
        depth.copy_from_slice(&frag.depth);
        Ok(())
    })
}

/// Loads a checkpoint directory. On success `*out` owns a handle to release
/// with [`pr_model_free`].
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pr_model_open(dir: *const c_char, out: *mut *mut PrModel) -> PrStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| Failure(PrStatus::Config, "path is not UTF-8".into()))?;
        let (model, _) = Model::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(PrModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`pr_model_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pr_model_free(model: *mut PrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pr_model_num_points(model: *const PrModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cloud.len())
}

/// Renders into `rgb_out` (`W·H·3` floats, row-major, interleaved, in [0,1]).
///
/// # Safety
/// Pointers must be valid; `rgb_out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn pr_model_render(
    model: *const PrModel,
    camera_in: *const PrCamera,
    rgb_out: *mut f32,
    out_len: usize,
) -> PrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = camera_in.as_ref().ok_or_else(|| null("camera"))?;
        let (cam, pose) = camera(c)?;
        check_len("rgb_out", out_len, cam.width as usize * cam.height as usize * 3)?;
        let out = slice_mut(rgb_out, out_len, "rgb_out")?;
        let img = m.model.render_view(&Reference, &cam, &pose)?;
        out.copy_from_slice(&img.data);
        Ok(())
    })
}

/// Removes the points inside the axis-aligned box `[lo, hi]`.
///
/// # Safety
/// `lo` and `hi` must point to three floats; `removed` may be null.
#[no_mangle]
pub unsafe extern "C" fn pr_model_remove_box(
    model: *mut PrModel,
    lo: *const f32,
    hi: *const f32,
    removed: *mut usize,
) -> PrStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let lo = slice(lo, 3, "lo")?;
        let hi = slice(hi, 3, "hi")?;
        let n = m.model.remove_box([lo[0], lo[1], lo[2]], [hi[0], hi[1], hi[2]])?;
        if let Some(r) = removed.as_mut() {
            *r = n;
        }
        Ok(())
    })
}

unsafe fn image_pair(a: *const f32, b: *const f32, width: u32, height: u32) -> Result<(RgbImage, RgbImage), Failure> {
    let n = width as usize * height as usize * 3;
    let mk = |d: &[f32]| RgbImage {
        width,
        height,
        data: d.to_vec(),
    };
    Ok((mk(slice(a, n, "a")?), mk(slice(b, n, "b")?)))
}

/// PSNR in dB of two `W·H·3` interleaved images.
///
/// # Safety
/// `a` and `b` must hold `W·H·3` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pr_psnr(a: *const f32, b: *const f32, width: u32, height: u32, out: *mut f64) -> PrStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (x, y) = image_pair(a, b, width, height)?;
        *out = evaluator::psnr(&x, &y)?;
        Ok(())
    })
}

/// Channel-averaged SSIM of two `W·H·3` interleaved images.
///
/// # Safety
/// As [`pr_psnr`].
#[no_mangle]
pub unsafe extern "C" fn pr_ssim(a: *const f32, b: *const f32, width: u32, height: u32, out: *mut f64) -> PrStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (x, y) = image_pair(a, b, width, height)?;
        *out = evaluator::ssim(&x, &y)?;
        Ok(())
    })
}
