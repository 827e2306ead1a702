//! C ABI over the `cmtssl` library.
//!
//! Every fallible call returns a [`CmtsslStatus`]; on failure the message is
//! available from [`cmtssl_last_error`] on the same thread. Objects are
//! opaque handles released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cmtssl::curriculum::CurriculumSchedule;
use cmtssl::data::{self, BandStats, DataCube};
use cmtssl::difficulty::{self, Aggregation};
use cmtssl::evaluation::{self, ConfusionMatrix};
use cmtssl::model::{Checkpoint, Encoder, MultiTaskModel};
use cmtssl::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmtsslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Data = 5,
    Degenerate = 6,
    Format = 7,
    Io = 8,
    Diverged = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmtsslAggregation {
    Average = 0,
    Maximum = 1,
    Std = 2,
}

impl From<CmtsslAggregation> for Aggregation {
    fn from(a: CmtsslAggregation) -> Self {
        match a {
            CmtsslAggregation::Average => Aggregation::Average,
            CmtsslAggregation::Maximum => Aggregation::Maximum,
            CmtsslAggregation::Std => Aggregation::Std,
        }
    }
}

/// Fractions in `[0, 1]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CmtsslMetrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

/// Curriculum stage table.
pub struct CmtsslSchedule(CurriculumSchedule);

/// A restored checkpoint with its normalization statistics.
pub struct CmtsslModel {
    model: MultiTaskModel,
    stats: Option<BandStats>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CmtsslStatus {
    match e {
        Error::Format(_) | Error::Json(_) => CmtsslStatus::Format,
        Error::Data(_) | Error::NonFinite { .. } => CmtsslStatus::Data,
        Error::Shape(_) => CmtsslStatus::Shape,
        Error::Config(_) => CmtsslStatus::Config,
        Error::Degenerate(_) => CmtsslStatus::Degenerate,
        Error::Diverged { .. } => CmtsslStatus::Diverged,
        Error::Io(_) => CmtsslStatus::Io,
    }
}

struct Fail(CmtsslStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CmtsslStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(CmtsslStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording its error (or panic) as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CmtsslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CmtsslStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CmtsslStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(what))
}

fn checked_len(dims: &[usize]) -> Result<usize, Fail> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| invalid("dimensions overflow"))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmtssl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cmtssl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// OA, AA and kappa of a row-major `num_classes × num_classes` confusion
/// matrix (rows are ground truth).
///
/// # Safety
/// `counts` must point to `num_classes²` readable values and `out` to a
/// writable [`CmtsslMetrics`].
#[no_mangle]
pub unsafe extern "C" fn cmtssl_metrics_from_counts(
    counts: *const u64,
    num_classes: usize,
    out: *mut CmtsslMetrics,
) -> CmtsslStatus {
    guard(|| {
        if num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        let counts = slice(counts, checked_len(&[num_classes, num_classes])?, "counts")?;
        let out = out_ref(out, "out")?;
        let rows: Vec<Vec<u64>> = counts.chunks(num_classes).map(<[u64]>::to_vec).collect();
        let m = evaluation::metrics(&ConfusionMatrix::from_rows(&rows)?)?;
        *out = CmtsslMetrics {
            oa: m.oa,
            aa: m.aa,
            kappa: m.kappa,
        };
        Ok(())
    })
}

/// Gradient-magnitude difficulty of one `height × width × bands` cube laid
/// out with the band index fastest.
///
/// # Safety
/// `values` must point to `height·width·bands` readable values and `out` to a
/// writable double.
#[no_mangle]
pub unsafe extern "C" fn cmtssl_difficulty(
    values: *const f64,
    height: usize,
    width: usize,
    bands: usize,
    aggregation: CmtsslAggregation,
    out: *mut f64,
) -> CmtsslStatus {
    guard(|| {
        if height == 0 || width == 0 || bands == 0 {
            return Err(invalid("cube dimensions must be positive"));
        }
        let values = slice(values, checked_len(&[height, width, bands])?, "values")?;
        let out = out_ref(out, "out")?;
        let cube = DataCube::new(height, width, bands, values.to_vec())?;
        *out = difficulty::difficulty(&cube, aggregation.into())?;
        Ok(())
    })
}

/// Builds a curriculum of `stages` cumulative stages over `dataset_size`
/// cubes, the first trained for `initial_epochs` epochs and each later one
/// `growth` times longer.
///
/// # Safety
/// `out` must be a writable handle slot. The handle is released with
/// [`cmtssl_schedule_free`].
#[no_mangle]
pub unsafe extern "C" fn cmtssl_schedule_new(
    dataset_size: usize,
    stages: usize,
    initial_epochs: usize,
    growth: f64,
    out: *mut *mut CmtsslSchedule,
) -> CmtsslStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let s = CurriculumSchedule::new(dataset_size, stages, initial_epochs, growth)?;
        *out = Box::into_raw(Box::new(CmtsslSchedule(s)));
        Ok(())
    })
}

/// # Safety
/// `schedule` must be NULL or a handle from [`cmtssl_schedule_new`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn cmtssl_schedule_free(schedule: *mut CmtsslSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Size and epoch count of 1-based stage `index`.
///
/// # Safety
/// `schedule` must be a live handle; `size` and `epochs` writable.
#[no_mangle]
pub unsafe extern "C" fn cmtssl_schedule_stage(
    schedule: *const CmtsslSchedule,
    index: usize,
    size: *mut usize,
    epochs: *mut usize,
) -> CmtsslStatus {
    guard(|| {
        let s = &schedule.as_ref().ok_or_else(|| null("schedule"))?.0;
        if index == 0 || index > s.stages {
            return Err(invalid(format!("stage {index} outside 1..={}", s.stages)));
        }
        let (size, epochs) = (out_ref(size, "size")?, out_ref(epochs, "epochs")?);
        *size = s.stage_size(index);
        *epochs = s.stage_epochs(index);
        Ok(())
    })
}

/// Number of stages, or 0 for a NULL handle.
///
/// # Safety
/// `schedule` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmtssl_schedule_stage_count(schedule: *const CmtsslSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.0.stages)
}

/// Optimizer steps of the whole curriculum at mini-batch size `batch_size`.
///
/// # Safety
/// `schedule` must be a live handle and `steps` writable.
#[no_mangle]
pub unsafe extern "C" fn cmtssl_schedule_match_budget(
    schedule: *const CmtsslSchedule,
    batch_size: usize,
    steps: *mut usize,
) -> CmtsslStatus {
    guard(|| {
        let s = &schedule.as_ref().ok_or_else(|| null("schedule"))?.0;
        if batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        *out_ref(steps, "steps")? = s.match_budget(batch_size);
        Ok(())
    })
}

/// Loads a checkpoint file or directory.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a writable handle
/// slot. The handle is released with [`cmtssl_model_free`].
#[no_mangle]
pub unsafe extern "C" fn cmtssl_model_load(path: *const c_char, out: *mut *mut CmtsslModel) -> CmtsslStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let out = out_ref(out, "out")?;
        let ck = Checkpoint::load(Path::new(path))?;
        let model = ck.restore()?;
        *out = Box::into_raw(Box::new(CmtsslModel {
            model,
            stats: ck.normalization,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`cmtssl_model_load`] that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn cmtssl_model_free(model: *mut CmtsslModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total trainable parameters, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmtssl_model_param_count(model: *const CmtsslModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.param_count())
}

/// Expected cube shape.
///
/// # Safety
/// `model` must be a live handle; the three outputs writable.
#[no_mangle]
pub unsafe extern "C" fn cmtssl_model_input_shape(
    model: *const CmtsslModel,
    height: *mut usize,
    width: *mut usize,
    bands: *mut usize,
) -> CmtsslStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let (h, w, b) = m.model.encoder.input_shape();
        *out_ref(height, "height")? = h;
        *out_ref(width, "width")? = w;
        *out_ref(bands, "bands")? = b;
        Ok(())
    })
}

/// Per-pixel class prediction for one raw cube (band index fastest). The
/// checkpoint's normalization is applied first when it has one.
///
/// # Safety
/// `values` must point to `height·width·bands` readable values and `labels`
/// to `height·width` writable slots.
#[no_mangle]
pub unsafe extern "C" fn cmtssl_model_predict(
    model: *const CmtsslModel,
    values: *const f64,
    height: usize,
    width: usize,
    bands: usize,
    labels: *mut u32,
) -> CmtsslStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let values = slice(values, checked_len(&[height, width, bands])?, "values")?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let mut cube = DataCube::new(height, width, bands, values.to_vec())?;
        if let Some(stats) = &m.stats {
            cube = data::normalize(&cube, stats)?;
        }
        let pred = m.model.predict(&cube)?;
        let out = std::slice::from_raw_parts_mut(labels, height * width);
        for (o, p) in out.iter_mut().zip(pred) {
            *o = p as u32;
        }
        Ok(())
    })
}
