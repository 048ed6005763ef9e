//! C interface to the `abswift` flow surrogate.
//!
//! Every function returns an [`AbswiftStatus`]; on failure the message is
//! available from [`abswift_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use abswift::dataset::{normalize_coords, normalize_sample, read_sample, FlowSample};
use abswift::model::{build, load_weights, to_physical, ModelConfig, ModelWeights, DEFAULT_CHUNK};
use abswift::profiles::{StabilityParams, SurfaceLayer};
use abswift::tensor::Matrix;
use abswift::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbswiftStatus {
    Ok = 0,
    /// Invalid configuration or unsupported request.
    Config = 1,
    /// Malformed, missing or out-of-range data.
    Data = 2,
    /// Non-finite values during computation.
    Numeric = 3,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 4,
    /// Unexpected internal failure.
    Internal = 5,
}

/// Trained or freshly built model.
pub struct AbswiftModel {
    inner: ModelWeights,
}

/// One dataset sample.
pub struct AbswiftSample {
    inner: FlowSample,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AbswiftStatus {
    match e.exit_code() {
        1 => AbswiftStatus::Config,
        3 => AbswiftStatus::Numeric,
        _ => AbswiftStatus::Data,
    }
}

enum Failure {
    Lib(Error),
    Arg(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AbswiftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AbswiftStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            AbswiftStatus::InvalidArgument
        }
        Err(_) => {
            set_error("internal panic".into());
            AbswiftStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::Arg(format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::Arg(format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Arg(format!("{what} is null")));
    }
    out.write(v);
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn abswift_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn abswift_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a desk-size model with fresh weights. `variant` is 1 to 4.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn abswift_model_build_desk(seed: u64, variant: u32, out: *mut *mut AbswiftModel) -> AbswiftStatus {
    guard(|| {
        let v = variant.to_string().parse()?;
        let w = build(&ModelConfig::desk().with_variant(v), &mut ChaCha8Rng::seed_from_u64(seed))?;
        write_out(out, Box::into_raw(Box::new(AbswiftModel { inner: w })), "out")
    })
}

/// Loads a weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn abswift_model_load(path: *const c_char, out: *mut *mut AbswiftModel) -> AbswiftStatus {
    guard(|| {
        let w = load_weights(&path_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(AbswiftModel { inner: w })), "out")
    })
}

/// Writes a weight file.
///
/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn abswift_model_save(model: *const AbswiftModel, path: *const c_char) -> AbswiftStatus {
    guard(|| {
        let m = deref(model, "model")?;
        m.inner.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn abswift_model_num_params(model: *const AbswiftModel, out: *mut u64) -> AbswiftStatus {
    guard(|| {
        let m = deref(model, "model")?;
        write_out(out, m.inner.num_params() as u64, "out")
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn abswift_model_free(model: *mut AbswiftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a sample file.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn abswift_sample_load(path: *const c_char, out: *mut *mut AbswiftSample) -> AbswiftStatus {
    guard(|| {
        let s = read_sample(&path_arg(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(AbswiftSample { inner: s })), "out")
    })
}

/// Number of stored volume points.
///
/// # Safety
/// `sample` must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn abswift_sample_num_points(sample: *const AbswiftSample, out: *mut u64) -> AbswiftStatus {
    guard(|| {
        let s = deref(sample, "sample")?;
        write_out(out, s.inner.volume.rows() as u64, "out")
    })
}

/// # Safety
/// `sample` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn abswift_sample_free(sample: *mut AbswiftSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

/// Predicts `(vx, vy, vz, p, theta, k, eps)` at `n` points given in meters as
/// row-major `xyz` triples. Writes `7 * n` values to `fields`. The model must
/// carry normalization statistics, as trained weights do.
///
/// # Safety
/// `coords` must hold `3 * n` readable values and `fields` `7 * n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn abswift_predict(
    model: *const AbswiftModel,
    sample: *const AbswiftSample,
    coords: *const f64,
    n: usize,
    seed: u64,
    fields: *mut f64,
) -> AbswiftStatus {
    guard(|| {
        let m = &deref(model, "model")?.inner;
        let s = &deref(sample, "sample")?.inner;
        if n > 0 && (coords.is_null() || fields.is_null()) {
            return Err(Failure::Arg("coords or fields is null".into()));
        }
        let pts = if n == 0 { &[][..] } else { std::slice::from_raw_parts(coords, 3 * n) };
        let meters = Matrix::from_vec(n, 3, pts.to_vec())?;
        if let Some(r) = (0..n).find(|&r| s.geometry.contains(meters.row(r))) {
            return Err(Error::InvalidInput(format!("point {r} lies inside a building")).into());
        }
        let stats = m.stats()?;
        let ns = normalize_sample(s, stats)?;
        let queries = normalize_coords(&meters);
        abswift::encoders::check_normalized(&queries)?;
        let draw = m.draw(&ns.inputs.geometry, ns.inputs.volume.rows(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let out = m.predict_chunked(&ns.inputs, &draw, &queries, DEFAULT_CHUNK)?;
        let bundle = to_physical(&queries, &out, stats);
        if n > 0 {
            std::slice::from_raw_parts_mut(fields, 7 * n).copy_from_slice(bundle.fields.as_slice());
        }
        Ok(())
    })
}

/// Inflow profile `(speed, theta, k, eps)` at height `z` meters.
///
/// # Safety
/// `out` must point to 4 writable values.
#[no_mangle]
pub unsafe extern "C" fn abswift_profile_at(inv_lmo: f64, z0: f64, z: f64, out: *mut f64) -> AbswiftStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Arg("out is null".into()));
        }
        let s = SurfaceLayer::new(StabilityParams::new(inv_lmo, z0)?)?.at(z);
        std::slice::from_raw_parts_mut(out, 4).copy_from_slice(&[s.v, s.theta, s.k, s.eps]);
        Ok(())
    })
}
