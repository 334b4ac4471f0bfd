//! C ABI over the cycinv toolkit.
//!
//! Every function returns a [`CycinvStatus`]; on failure the message is
//! available from `cycinv_last_error_message` on the same thread. Handles are
//! opaque and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cycinv::data::{generate_dataset, load_dataset, Dataset};
use cycinv::eval::sample_prior;
use cycinv::model::ModelSet;
use cycinv::selfcheck::{self, SelfcheckOptions};
use cycinv::train::load_checkpoint;
use cycinv::{Error, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycinvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Domain = 4,
    Index = 5,
    Format = 6,
    Config = 7,
    Io = 8,
    Panic = 9,
}

/// A loaded or generated dataset.
pub struct CycinvDataset {
    inner: Dataset,
}

/// Trained encoder, decoder and discriminator.
pub struct CycinvModel {
    inner: ModelSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CycinvStatus {
    match e {
        Error::Shape(_) => CycinvStatus::Shape,
        Error::Domain(_) => CycinvStatus::Domain,
        Error::Index(_) => CycinvStatus::Index,
        Error::Invalid(_) => CycinvStatus::InvalidArgument,
        Error::Format(_) => CycinvStatus::Format,
        Error::Config { .. } => CycinvStatus::Config,
        Error::Io(_) => CycinvStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CycinvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CycinvStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            CycinvStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CycinvStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::Invalid("path is not UTF-8".into())))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got < want {
        return Err(Fail::Lib(Error::Shape(format!(
            "{what} holds {got} values, {want} needed"
        ))));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cycinv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, excluding NUL.
#[no_mangle]
pub extern "C" fn cycinv_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// `len - 1` bytes). Returns the number of bytes written excluding NUL.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cycinv_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        let n = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Generates `n` records of `classes` balanced shape classes.
///
/// # Safety
/// `out` must be a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn cycinv_dataset_generate(
    n: usize,
    classes: usize,
    side: usize,
    seed: u64,
    out: *mut *mut CycinvDataset,
) -> CycinvStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let inner = generate_dataset(n, classes, side, seed)?;
        *out = Box::into_raw(Box::new(CycinvDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cycinv_dataset_load(
    path: *const c_char,
    out: *mut *mut CycinvDataset,
) -> CycinvStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let inner = load_dataset(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CycinvDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cycinv_dataset_save(
    ds: *const CycinvDataset,
    path: *const c_char,
) -> CycinvStatus {
    guard(|| {
        let ds = deref(ds, "dataset")?;
        ds.inner.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Record count, side length and class count.
///
/// # Safety
/// `ds` must be a live handle; null output pointers are skipped.
#[no_mangle]
pub unsafe extern "C" fn cycinv_dataset_info(
    ds: *const CycinvDataset,
    len: *mut usize,
    side: *mut usize,
    classes: *mut usize,
) -> CycinvStatus {
    guard(|| {
        let ds = &deref(ds, "dataset")?.inner;
        for (p, v) in [(len, ds.len()), (side, ds.side), (classes, ds.n_s)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies record `index`: `side * side` pixels and its shape class.
///
/// # Safety
/// `pixels` must hold `pixels_len` floats; `label` may be null.
#[no_mangle]
pub unsafe extern "C" fn cycinv_dataset_record(
    ds: *const CycinvDataset,
    index: usize,
    pixels: *mut f32,
    pixels_len: usize,
    label: *mut u32,
) -> CycinvStatus {
    guard(|| {
        let ds = &deref(ds, "dataset")?.inner;
        let rec = ds.samples.get(index).ok_or_else(|| {
            Fail::Lib(Error::Index(format!("record {index} of {}", ds.len())))
        })?;
        check_len(pixels_len, rec.image.len(), "pixel buffer")?;
        out_slice(pixels, pixels_len, "pixels")?[..rec.image.len()].copy_from_slice(&rec.image);
        if let Some(l) = label.as_mut() {
            *l = rec.shape_class as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cycinv_dataset_free(ds: *mut CycinvDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads the networks from a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cycinv_model_load_checkpoint(
    path: *const c_char,
    out: *mut *mut CycinvModel,
) -> CycinvStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let inner = load_checkpoint(&path_arg(path)?)?.models;
        *out = Box::into_raw(Box::new(CycinvModel { inner }));
        Ok(())
    })
}

/// Loads the networks from a weights file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cycinv_model_load_weights(
    path: *const c_char,
    out: *mut *mut CycinvModel,
) -> CycinvStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let bytes = std::fs::read(path_arg(path)?).map_err(Error::from)?;
        let inner = ModelSet::from_weights_bytes(&bytes)?;
        *out = Box::into_raw(Box::new(CycinvModel { inner }));
        Ok(())
    })
}

/// Image side, latent width and class count.
///
/// # Safety
/// `m` must be a live handle; null output pointers are skipped.
#[no_mangle]
pub unsafe extern "C" fn cycinv_model_info(
    m: *const CycinvModel,
    side: *mut usize,
    latent_dim: *mut usize,
    classes: *mut usize,
) -> CycinvStatus {
    guard(|| {
        let d = &deref(m, "model")?.inner.dims;
        for (p, v) in [(side, d.side), (latent_dim, d.d_z), (classes, d.n_s)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

unsafe fn images_arg(m: &ModelSet, images: *const f32, n: usize) -> Result<Tensor, Fail> {
    let px = m.dims.pixels();
    let data = in_slice(images, n * px, "images")?.to_vec();
    Ok(Tensor::build(&[n, px], data)?)
}

/// Deterministic latent means of `n` images into `out` (`n * latent_dim`).
///
/// # Safety
/// `images` must hold `n * side * side` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn cycinv_model_encode(
    m: *const CycinvModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> CycinvStatus {
    guard(|| {
        let m = &deref(m, "model")?.inner;
        let z = m.encode_mean(&images_arg(m, images, n)?)?;
        check_len(out_len, z.len(), "output buffer")?;
        out_slice(out, out_len, "out")?[..z.len()].copy_from_slice(z.data());
        Ok(())
    })
}

/// Re-synthesizes `n` images with the given class codes (`n * side * side`
/// outputs).
///
/// # Safety
/// `images` must hold `n * side * side` floats, `labels` `n` values and
/// `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn cycinv_model_generate(
    m: *const CycinvModel,
    images: *const f32,
    labels: *const u32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> CycinvStatus {
    guard(|| {
        let m = &deref(m, "model")?.inner;
        let x = images_arg(m, images, n)?;
        let ys: Vec<usize> = in_slice(labels, n, "labels")?
            .iter()
            .map(|&y| y as usize)
            .collect();
        let g = m.generate_images(&x, &ys)?;
        check_len(out_len, g.len(), "output buffer")?;
        out_slice(out, out_len, "out")?[..g.len()].copy_from_slice(g.data());
        Ok(())
    })
}

/// Decodes `n` standard-normal latents with class `label`.
///
/// # Safety
/// `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn cycinv_model_sample_prior(
    m: *const CycinvModel,
    label: u32,
    n: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> CycinvStatus {
    guard(|| {
        let m = &deref(m, "model")?.inner;
        let imgs = sample_prior(m, label as usize, n, seed)?;
        check_len(out_len, imgs.len(), "output buffer")?;
        out_slice(out, out_len, "out")?[..imgs.len()].copy_from_slice(imgs.data());
        Ok(())
    })
}

/// # Safety
/// `m` must be a handle from this library or null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cycinv_model_free(m: *mut CycinvModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Runs the gradient-check and loss-oracle suite with `points` random points
/// per check. Writes the number of failed checks to `failed`.
///
/// # Safety
/// `failed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cycinv_selfcheck(points: usize, failed: *mut usize) -> CycinvStatus {
    guard(|| {
        let failed = failed.as_mut().ok_or(Fail::Null("failed"))?;
        let opts = SelfcheckOptions {
            points: points.max(1),
            ..SelfcheckOptions::default()
        };
        *failed = selfcheck::run(&opts).iter().filter(|r| !r.passed).count();
        Ok(())
    })
}
