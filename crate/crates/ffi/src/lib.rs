//! C interface to `pden`.
//!
//! Datasets and task models are opaque handles created by `pden_*` functions
//! and released with the matching `*_free`. Every fallible call returns a
//! [`PdenStatus`]; on failure [`pden_last_error`] describes what went wrong on
//! the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use pden::data::{apply_shift, load_idx, make_toy_dataset, DomainDataset, ShiftKind, ShiftSpec, ToySpec};
use pden::eval::evaluate;
use pden::nn::{Checkpoint, TaskModel};
use pden::{PdenError, Rng, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    Config = 6,
    Numeric = 7,
    Internal = 8,
}

/// A labeled image set.
pub struct PdenDataset(DomainDataset);

/// A task model loaded from a checkpoint.
pub struct PdenModel(TaskModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &PdenError) -> PdenStatus {
    match err {
        PdenError::Shape(_) => PdenStatus::Shape,
        PdenError::InvalidArgument(_) => PdenStatus::InvalidArgument,
        PdenError::Format(_) | PdenError::Json(_) | PdenError::Csv(_) => PdenStatus::Format,
        PdenError::Io(_) => PdenStatus::Io,
        PdenError::Config(_) => PdenStatus::Config,
        PdenError::Domain(_) | PdenError::Diverged(_) => PdenStatus::Numeric,
    }
}

enum Failure {
    Null(&'static str),
    Core(PdenError),
}

impl From<PdenError> for Failure {
    fn from(e: PdenError) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PdenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PdenStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            PdenStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal error: panic inside pden");
            PdenStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| PdenError::InvalidArgument(format!("{what} is not valid UTF-8")).into())
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next `pden_*` call on the same thread.
#[no_mangle]
pub extern "C" fn pden_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pden_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Synthetic glyph dataset of `count` balanced images.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pden_dataset_toy(
    classes: usize,
    count: usize,
    image_size: usize,
    seed: u64,
    out: *mut *mut PdenDataset,
) -> PdenStatus {
    guard(|| {
        let ds = make_toy_dataset(
            &ToySpec {
                classes,
                count,
                image_size,
            },
            &mut Rng::new(seed),
        )?;
        store(out, PdenDataset(ds))
    })
}

/// Loads an IDX image/label pair; `limit` of 0 loads everything.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pden_dataset_load_idx(
    images_path: *const c_char,
    labels_path: *const c_char,
    limit: usize,
    out: *mut *mut PdenDataset,
) -> PdenStatus {
    guard(|| {
        let images = str_arg(images_path, "images_path")?;
        let labels = str_arg(labels_path, "labels_path")?;
        let ds = load_idx(Path::new(images), Path::new(labels), (limit > 0).then_some(limit))?;
        store(out, PdenDataset(ds))
    })
}

/// Zero-pads to `size×size` and replicates a single channel to `channels`.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pden_dataset_to_layout(
    ds: *const PdenDataset,
    channels: usize,
    size: usize,
    out: *mut *mut PdenDataset,
) -> PdenStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        store(out, PdenDataset(ds.0.to_layout(channels, size)?))
    })
}

/// Shifted copy of a dataset. `kind` is one of `invert`, `gaussian_noise`,
/// `contrast`, `brightness`, `blur`, `pixelate`, `speckle`; `severity` is 1..=5.
///
/// # Safety
/// `ds` must be a live dataset handle, `kind` a NUL-terminated string and
/// `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pden_dataset_shift(
    ds: *const PdenDataset,
    kind: *const c_char,
    severity: u8,
    seed: u64,
    out: *mut *mut PdenDataset,
) -> PdenStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let kind: ShiftKind = str_arg(kind, "kind")?.parse()?;
        let spec = ShiftSpec::new(kind, severity, seed)?;
        store(out, PdenDataset(apply_shift(&ds.0, &spec)?))
    })
}

/// Item count and image dimensions. Any output pointer may be null.
///
/// # Safety
/// `ds` must be a live dataset handle; non-null outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pden_dataset_shape(
    ds: *const PdenDataset,
    len: *mut usize,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> PdenStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        let (c, h, w) = ds.0.image_dims();
        for (p, v) in [(len, ds.0.len()), (channels, c), (height, h), (width, w)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies pixels (`len·C·H·W` doubles in `[0, 1]`, row-major) and labels
/// into caller buffers. Either buffer may be null.
///
/// # Safety
/// Non-null buffers must hold at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn pden_dataset_copy(
    ds: *const PdenDataset,
    images: *mut f64,
    images_len: usize,
    labels: *mut u32,
    labels_len: usize,
) -> PdenStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        if !images.is_null() {
            let src = ds.0.images.data();
            if images_len < src.len() {
                return Err(
                    PdenError::InvalidArgument(format!("image buffer holds {images_len}, need {}", src.len())).into(),
                );
            }
            ptr::copy_nonoverlapping(src.as_ptr(), images, src.len());
        }
        if !labels.is_null() {
            if labels_len < ds.0.len() {
                return Err(PdenError::InvalidArgument(format!(
                    "label buffer holds {labels_len}, need {}",
                    ds.0.len()
                ))
                .into());
            }
            for (i, &l) in ds.0.labels.iter().enumerate() {
                *labels.add(i) = l as u32;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pden_dataset_free(ds: *mut PdenDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a task-model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pden_model_load(path: *const c_char, out: *mut *mut PdenModel) -> PdenStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let model = Checkpoint::load(Path::new(path))?.to_task()?;
        store(out, PdenModel(model))
    })
}

/// Expected input layout and class count. Any output pointer may be null.
///
/// # Safety
/// `model` must be a live model handle; non-null outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pden_model_shape(
    model: *const PdenModel,
    channels: *mut usize,
    image_size: *mut usize,
    classes: *mut usize,
) -> PdenStatus {
    guard(|| {
        let a = &deref(model, "model")?.0.arch;
        for (p, v) in [
            (channels, a.in_channels),
            (image_size, a.image_size),
            (classes, a.classes),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Argmax accuracy on a dataset.
///
/// # Safety
/// Handles must be live; `accuracy` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pden_model_evaluate(
    model: *const PdenModel,
    ds: *const PdenDataset,
    accuracy: *mut f64,
) -> PdenStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let ds = deref(ds, "dataset")?;
        if accuracy.is_null() {
            return Err(Failure::Null("accuracy"));
        }
        *accuracy = evaluate(&model.0, &ds.0)?.accuracy;
        Ok(())
    })
}

/// Class probabilities for `count` images laid out as in
/// [`pden_dataset_copy`]. Writes `count` argmax labels and, when `probs` is
/// non-null, `count·classes` probabilities.
///
/// # Safety
/// `images` must hold `count·C·H·W` doubles matching [`pden_model_shape`];
/// `labels` must hold `count` entries and non-null `probs` `count·classes`.
#[no_mangle]
pub unsafe extern "C" fn pden_model_predict(
    model: *const PdenModel,
    images: *const f64,
    count: usize,
    labels: *mut u32,
    probs: *mut f64,
) -> PdenStatus {
    guard(|| {
        let model = deref(model, "model")?;
        if images.is_null() {
            return Err(Failure::Null("images"));
        }
        if labels.is_null() {
            return Err(Failure::Null("labels"));
        }
        if count == 0 {
            return Err(PdenError::InvalidArgument("count must be positive".into()).into());
        }
        let a = &model.0.arch;
        let shape = vec![count, a.in_channels, a.image_size, a.image_size];
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, std::slice::from_raw_parts(images, n).to_vec())?;
        let p = model.0.predict_probs(&x)?;
        for (i, l) in p.argmax_rows().into_iter().enumerate() {
            *labels.add(i) = l as u32;
        }
        if !probs.is_null() {
            ptr::copy_nonoverlapping(p.data().as_ptr(), probs, p.len());
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pden_model_free(model: *mut PdenModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
