//! C ABI over `dipvae`.
//!
//! Every fallible call returns a [`DvStatus`]; on failure a message for the
//! calling thread is available from [`dv_last_error`]. Datasets and models are
//! opaque handles released with their `_free` function. Panics never cross
//! the boundary and surface as `DV_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dipvae::data::{generate_dataset, load_cache, save_cache, Dataset, FactorGrid, FactorKind};
use dipvae::metrics::{evaluate, sap_score, zdiff_from_codes, LatentCodes, ZDiffConfig};
use dipvae::models::{GaussianPosterior, ModelParams};
use dipvae::objectives::posterior_kl_rows;
use dipvae::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Shapes dataset handle.
pub struct DvDataset(Dataset);

/// Trained model handle.
pub struct DvModel(ModelParams);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DvEvalReport {
    pub sap: f64,
    pub zdiff: f64,
    pub recon_error: f64,
    pub offdiag_norm: f64,
    pub active_dims: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(DvStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } | Error::AxisOutOfRange { .. } | Error::NotScalar(_) => DvStatus::Shape,
            Error::DivideByZero | Error::Domain { .. } | Error::NonFinite(_) => DvStatus::NonFinite,
            Error::InvalidArgument(_) | Error::Config(_) => DvStatus::InvalidArgument,
            Error::Format(_) | Error::Truncated { .. } => DvStatus::Format,
            Error::File { .. } | Error::Io(_) | Error::Csv(_) => DvStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DvStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            DvStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DvStatus::NullPointer, format!("{what} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DvStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor, Failure> {
    if rows == 0 || cols == 0 {
        return Err(invalid(format!("{what} must have positive dimensions")));
    }
    let data = slice_arg(p, rows * cols, what)?.to_vec();
    Ok(Tensor::new(vec![rows, cols], data)?)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message describing the most recent failure on this thread; empty if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn dv_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Renders the shapes grid and splits it 90/10 with `split_seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn dv_dataset_generate(
    n_x: usize,
    n_y: usize,
    n_scale: usize,
    n_rotation: usize,
    canvas: usize,
    split_seed: u64,
    out: *mut *mut DvDataset,
) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let grid = FactorGrid {
            n_x,
            n_y,
            n_scale,
            n_rotation,
            canvas,
            ..FactorGrid::default()
        };
        let ds = generate_dataset(&grid, split_seed)?;
        *out = Box::into_raw(Box::new(DvDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dv_dataset_load(path: *const c_char, out: *mut *mut DvDataset) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = load_cache(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DvDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dv_dataset_save(dataset: *const DvDataset, path: *const c_char) -> DvStatus {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        save_cache(&ds.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// Number of images, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dv_dataset_len(dataset: *const DvDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Number of test-split images, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dv_dataset_test_len(dataset: *const DvDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.test.len())
}

/// Pixels per image, or 0 for NULL.
///
/// # Safety
/// `dataset` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dv_dataset_pixels(dataset: *const DvDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.grid.pixels())
}

/// # Safety
/// `dataset` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dv_dataset_free(dataset: *mut DvDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Loads a model or trainer checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn dv_model_load(path: *const c_char, out: *mut *mut DvModel) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = ModelParams::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DvModel(model)));
        Ok(())
    })
}

/// Latent dimensionality, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dv_model_latent_dim(model: *const DvModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.spec.latent_dim)
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dv_model_free(model: *mut DvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_and_data<'a>(
    model: *const DvModel,
    dataset: *const DvDataset,
) -> Result<(&'a ModelParams, &'a Dataset), Failure> {
    let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
    let ds = &dataset.as_ref().ok_or_else(|| null("dataset"))?.0;
    if m.spec.input_dim() != ds.grid.pixels() {
        return Err(invalid(format!(
            "model expects {} pixels, dataset has {}",
            m.spec.input_dim(),
            ds.grid.pixels()
        )));
    }
    Ok((m, ds))
}

/// Writes the posterior means of the test split, row-major
/// `test_len × latent_dim`, into `mu_out`. `written` always receives the
/// required length; a smaller `capacity` returns `DV_STATUS_BUFFER_TOO_SMALL`
/// without writing.
///
/// # Safety
/// `mu_out` must have room for `capacity` doubles (or be NULL when 0);
/// `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_model_encode_test(
    model: *const DvModel,
    dataset: *const DvDataset,
    mu_out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> DvStatus {
    guard(|| {
        let written = out_arg(written, "written")?;
        let (m, ds) = model_and_data(model, dataset)?;
        let need = ds.test.len() * m.spec.latent_dim;
        *written = need;
        if capacity < need {
            return Err(Failure(
                DvStatus::BufferTooSmall,
                format!("need {need} doubles, capacity is {capacity}"),
            ));
        }
        if mu_out.is_null() {
            return Err(null("mu_out"));
        }
        let codes = LatentCodes::from_model(m, ds)?;
        std::slice::from_raw_parts_mut(mu_out, need).copy_from_slice(codes.codes.data());
        Ok(())
    })
}

/// SAP, Z-diff (default settings, `seed`), reconstruction error and latent
/// covariance statistics on the test split.
///
/// # Safety
/// Handles must be live; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_model_evaluate(
    model: *const DvModel,
    dataset: *const DvDataset,
    seed: u64,
    out: *mut DvEvalReport,
) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (m, ds) = model_and_data(model, dataset)?;
        let r = evaluate(m, ds, &ZDiffConfig::default(), seed)?;
        *out = DvEvalReport {
            sap: r.sap,
            zdiff: r.zdiff,
            recon_error: r.recon_error,
            offdiag_norm: r.offdiag_norm,
            active_dims: r.active_dims,
        };
        Ok(())
    })
}

unsafe fn codes_arg(codes: *const f64, n: usize, d: usize, factors: *const f64, k: usize) -> Result<LatentCodes, Failure> {
    Ok(LatentCodes::new(
        matrix_arg(codes, n, d, "codes")?,
        matrix_arg(factors, n, k, "factors")?,
    )?)
}

/// SAP score of external codes. `codes` is `n × d`, `factors` is `n × k`,
/// both row-major; `is_classification[j] != 0` marks categorical factors
/// (NULL treats every factor as continuous).
///
/// # Safety
/// Buffers must hold the stated number of elements; `score_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_sap_score(
    codes: *const f64,
    n: usize,
    d: usize,
    factors: *const f64,
    k: usize,
    is_classification: *const u8,
    score_out: *mut f64,
) -> DvStatus {
    guard(|| {
        let out = out_arg(score_out, "score_out")?;
        let lc = codes_arg(codes, n, d, factors, k)?;
        let kinds: Vec<FactorKind> = if is_classification.is_null() {
            vec![FactorKind::Regression; k]
        } else {
            std::slice::from_raw_parts(is_classification, k)
                .iter()
                .map(|&c| {
                    if c != 0 {
                        FactorKind::Classification
                    } else {
                        FactorKind::Regression
                    }
                })
                .collect()
        };
        *out = sap_score(&lc, &kinds)?.score;
        Ok(())
    })
}

/// Z-diff score in `[0, 100]` of external codes with default settings.
///
/// # Safety
/// Buffers must hold the stated number of elements; `score_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_zdiff_score(
    codes: *const f64,
    n: usize,
    d: usize,
    factors: *const f64,
    k: usize,
    seed: u64,
    score_out: *mut f64,
) -> DvStatus {
    guard(|| {
        let out = out_arg(score_out, "score_out")?;
        let lc = codes_arg(codes, n, d, factors, k)?;
        *out = zdiff_from_codes(&lc, &ZDiffConfig::default(), seed)?;
        Ok(())
    })
}

/// Mean over rows of `KL(N(μ, diag σ²) ‖ N(0, I))` for `n × d` row-major
/// means and variances.
///
/// # Safety
/// `mu` and `var` must hold `n·d` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_kl_to_standard_normal(
    mu: *const f64,
    var: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let post = GaussianPosterior {
            mu: matrix_arg(mu, n, d, "mu")?,
            var: matrix_arg(var, n, d, "var")?,
        };
        if post.var.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Failure(DvStatus::NonFinite, "variances must be positive".into()));
        }
        *out = posterior_kl_rows(&post).iter().sum::<f64>() / n as f64;
        Ok(())
    })
}
