//! C ABI over the viewdiff core.
//!
//! Every fallible function returns a [`VdStatus`]; results come back through
//! out-pointers. Objects cross the boundary as opaque handles created by a
//! `*_new`/`*_load` function and released with the matching `*_free`.
//! After a failure, [`vd_last_error`] describes it for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viewdiff::denoiser::UNetDenoiser;
use viewdiff::experiment::sample_pairs;
use viewdiff::inference::SamplerConfig;
use viewdiff::refnet::RefEncoder;
use viewdiff::schedule::NoiseSchedule;
use viewdiff::synthdata::{Dataset, ViewPair, ViewRig};
use viewdiff::trainer::Checkpoint;
use viewdiff::tsampler::TimestepDistribution;
use viewdiff::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    HashMismatch = 5,
    NonFinite = 6,
    Config = 7,
    Io = 8,
    TimestepRange = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for VdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => VdStatus::Shape,
            Error::InvalidArgument(_) => VdStatus::InvalidArgument,
            Error::TimestepOutOfRange { .. } => VdStatus::TimestepRange,
            Error::Format { .. } => VdStatus::Format,
            Error::HashMismatch { .. } => VdStatus::HashMismatch,
            Error::NonFinite(_) => VdStatus::NonFinite,
            Error::Config { .. } => VdStatus::Config,
            Error::Io { .. } => VdStatus::Io,
            Error::Stage { source, .. } => VdStatus::from(source.as_ref()),
        }
    }
}

/// Linear-beta noise schedule.
pub struct VdSchedule(NoiseSchedule);
/// Training timestep distribution over 1..=1000.
pub struct VdTimestepSampler(TimestepDistribution);
/// Multi-view dataset held in memory.
pub struct VdDataset(Dataset);
/// Frozen reference encoder.
pub struct VdEncoder(RefEncoder);
/// Denoiser restored from a checkpoint.
pub struct VdModel(UNetDenoiser<f32>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

struct Failure(VdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(VdStatus::from(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(body: impl FnOnce() -> Outcome) -> VdStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => VdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            VdStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(VdStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> Failure {
    Failure(VdStatus::InvalidArgument, msg)
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Outcome {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn fits(needed: usize, len: usize) -> Outcome {
    if len < needed {
        return Err(Failure(VdStatus::BufferTooSmall, format!("buffer holds {len} values, {needed} needed")));
    }
    Ok(())
}

/// Message of the calling thread's most recent failure; empty when none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn vd_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Linear schedule with `steps` steps and betas from `beta_start` to `beta_end`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vd_schedule_new(steps: usize, beta_start: f64, beta_end: f64, out: *mut *mut VdSchedule) -> VdStatus {
    guard(|| put(out, VdSchedule(NoiseSchedule::linear(steps, beta_start, beta_end)?)))
}

/// # Safety
/// `h` must be null or a handle from [`vd_schedule_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vd_schedule_free(h: *mut VdSchedule) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Signal and noise coefficients `s_t = sqrt(alpha_bar_t)`, `sigma_t = sqrt(1 - alpha_bar_t)`.
///
/// # Safety
/// `h` must be a live schedule handle; `s` and `sigma` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vd_schedule_coefficients(h: *const VdSchedule, t: usize, s: *mut f64, sigma: *mut f64) -> VdStatus {
    guard(|| {
        let sched = &handle(h, "schedule")?.0;
        if s.is_null() || sigma.is_null() {
            return Err(null("output"));
        }
        *s = sched.signal(t)?;
        *sigma = sched.noise(t)?;
        Ok(())
    })
}

/// `out = s_t * x0 + sigma_t * eps` over `len` values.
///
/// # Safety
/// `x0`, `eps` and `out` must each point to `len` valid doubles.
#[no_mangle]
pub unsafe extern "C" fn vd_schedule_forward_diffuse(
    h: *const VdSchedule,
    x0: *const f64,
    eps: *const f64,
    len: usize,
    t: usize,
    out: *mut f64,
) -> VdStatus {
    guard(|| {
        let sched = &handle(h, "schedule")?.0;
        let x = sched.forward_diffuse(slice(x0, len, "x0")?, t, slice(eps, len, "eps")?)?;
        slice_mut(out, len, "out")?.copy_from_slice(&x);
        Ok(())
    })
}

/// Uniform timestep distribution.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vd_tsampler_new_uniform(out: *mut *mut VdTimestepSampler) -> VdStatus {
    guard(|| put(out, VdTimestepSampler(TimestepDistribution::uniform())))
}

/// Discretized Gaussian over 1..=1000, renormalized.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vd_tsampler_new_gaussian(mean: f64, std: f64, out: *mut *mut VdTimestepSampler) -> VdStatus {
    guard(|| put(out, VdTimestepSampler(TimestepDistribution::gaussian(mean, std)?)))
}

/// # Safety
/// `h` must be null or a live sampler handle.
#[no_mangle]
pub unsafe extern "C" fn vd_tsampler_free(h: *mut VdTimestepSampler) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Probability of timestep `t`; 0 outside 1..=1000.
///
/// # Safety
/// `h` must be a live sampler handle and `p` writable.
#[no_mangle]
pub unsafe extern "C" fn vd_tsampler_pmf(h: *const VdTimestepSampler, t: usize, p: *mut f64) -> VdStatus {
    guard(|| {
        let d = &handle(h, "sampler")?.0;
        if p.is_null() {
            return Err(null("p"));
        }
        *p = d.pmf(t);
        Ok(())
    })
}

/// Draws `n` timesteps from a ChaCha8 stream seeded with `seed`.
///
/// # Safety
/// `out` must point to `n` writable `size_t` values.
#[no_mangle]
pub unsafe extern "C" fn vd_tsampler_sample(h: *const VdTimestepSampler, seed: u64, n: usize, out: *mut usize) -> VdStatus {
    guard(|| {
        let d = &handle(h, "sampler")?.0;
        let dst = slice_mut(out, n, "out")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dst.copy_from_slice(&d.sample(&mut rng, n));
        Ok(())
    })
}

/// Renders `n_objects` objects with the default 12-view rig.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vd_dataset_generate(n_objects: usize, seed: u64, out: *mut *mut VdDataset) -> VdStatus {
    guard(|| put(out, VdDataset(Dataset::generate(n_objects, seed, &ViewRig::default())?)))
}

/// Loads an NVDS container.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vd_dataset_load(path: *const c_char, out: *mut *mut VdDataset) -> VdStatus {
    guard(|| put(out, VdDataset(Dataset::load(&path_arg(path)?)?)))
}

/// Writes the dataset as an NVDS container.
///
/// # Safety
/// `h` must be live and `path` a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn vd_dataset_save(h: *const VdDataset, path: *const c_char) -> VdStatus {
    guard(|| Ok(handle(h, "dataset")?.0.save(&path_arg(path)?)?))
}

/// # Safety
/// `h` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn vd_dataset_free(h: *mut VdDataset) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Object count, views per object and image size.
///
/// # Safety
/// `h` must be live; every output pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn vd_dataset_info(
    h: *const VdDataset,
    n_objects: *mut usize,
    views: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> VdStatus {
    guard(|| {
        let d = &handle(h, "dataset")?.0;
        if n_objects.is_null() || views.is_null() || height.is_null() || width.is_null() {
            return Err(null("output"));
        }
        *n_objects = d.n_objects();
        *views = d.views_per_object;
        *height = d.height;
        *width = d.width;
        Ok(())
    })
}

fn check_view(d: &Dataset, object: usize, view: usize) -> Outcome {
    if object >= d.n_objects() || view >= d.views_per_object {
        return Err(invalid(format!(
            "object {object}, view {view} out of range ({} objects, {} views)",
            d.n_objects(),
            d.views_per_object
        )));
    }
    Ok(())
}

/// Copies the RGBA bytes of one view (`height * width * 4`) into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vd_dataset_view_rgba(h: *const VdDataset, object: usize, view: usize, buf: *mut u8, len: usize) -> VdStatus {
    guard(|| {
        let d = &handle(h, "dataset")?.0;
        check_view(d, object, view)?;
        let rgba = &d.view(object, view).rgba;
        fits(rgba.len(), len)?;
        slice_mut(buf, len, "buf")?[..rgba.len()].copy_from_slice(rgba);
        Ok(())
    })
}

/// Loads an encoder file; the returned encoder is frozen.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vd_encoder_load(path: *const c_char, out: *mut *mut VdEncoder) -> VdStatus {
    guard(|| {
        let e = RefEncoder::load(&path_arg(path)?)?;
        put(out, VdEncoder(if e.frozen { e } else { e.freeze() }))
    })
}

/// # Safety
/// `h` must be null or a live encoder handle.
#[no_mangle]
pub unsafe extern "C" fn vd_encoder_free(h: *mut VdEncoder) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Restores the EMA denoiser stored in a checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vd_model_load(path: *const c_char, out: *mut *mut VdModel) -> VdStatus {
    guard(|| put(out, VdModel(Checkpoint::load(&path_arg(path)?)?.model::<f32>()?)))
}

/// # Safety
/// `h` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn vd_model_free(h: *mut VdModel) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of scalar parameters.
///
/// # Safety
/// `h` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vd_model_num_params(h: *const VdModel, out: *mut usize) -> VdStatus {
    guard(|| {
        let m = &handle(h, "model")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.params.num_scalars();
        Ok(())
    })
}

/// Samples view `target` of `object` conditioned on view `reference`.
///
/// Writes `3 * height * width` planar values in `[-1, 1]` to `out`.
///
/// # Safety
/// All handles must be live; `out` must point to `len` writable doubles.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn vd_sample(
    model: *const VdModel,
    encoder: *const VdEncoder,
    dataset: *const VdDataset,
    object: usize,
    reference: usize,
    target: usize,
    steps: usize,
    eta: f64,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> VdStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let e = &handle(encoder, "encoder")?.0;
        let d = &handle(dataset, "dataset")?.0;
        check_view(d, object, reference)?;
        check_view(d, object, target)?;
        let n = 3 * d.height * d.width;
        fits(n, len)?;
        let dst = slice_mut(out, len, "out")?;
        let pair = ViewPair::new(d, object, target, reference);
        let result = sample_pairs(m, e, d, &[pair], &SamplerConfig { steps, eta, seed })?;
        dst[..n].copy_from_slice(&result.image);
        Ok(())
    })
}
