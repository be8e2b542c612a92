//! C ABI over the omedr library.
//!
//! Fallible functions return an [`OmedrStatus`]. On failure a message is
//! kept per thread and read with [`omedr_last_error_message`]. Matrices are
//! dense row-major `double` buffers holding `n_users * n_items` values;
//! binary inputs use `0.0` and `1.0`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ndarray::Array2;
use omedr::metrics::{auc, ndcg_at_k, recall_at_k, UserList};
use omedr::synthbench::{sample_instance, BenchmarkInstance, BenchmarkSpec};
use omedr::{
    estimate, identify_error_params, point_loss, surrogate_loss, Error, ErrorParams, Estimator, EstimatorInputs, ImputationMatrix,
    LossKind, NoisyRateModel, PredictionMatrix, PropensityMatrix, RatingDataset,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmedrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Domain = 4,
    MissingComponent = 5,
    InvalidConfig = 6,
    Parse = 7,
    InvalidData = 8,
    Divergence = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmedrLoss {
    Squared = 0,
    /// Uses the `eps` argument as the log floor.
    CrossEntropy = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmedrEstimator {
    Naive = 0,
    Eib = 1,
    Ips = 2,
    Dr = 3,
    OmeNaive = 4,
    OmeEib = 5,
    OmeIps = 6,
    OmeDr = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmedrMatrix {
    Gamma = 0,
    FiveScale = 1,
    Prediction = 2,
    PropensityTrue = 3,
    PropensityHat = 4,
    ObservedMask = 5,
    TrueRatings = 6,
    ObservedRatings = 7,
    NoisyRatings = 8,
}

/// Bit set in the `flags` output of [`omedr_identify`] when the rates were
/// clamped into the valid region.
pub const OMEDR_FLAG_CLAMPED: u32 = 1;
/// Bit set when the extreme groups have equal means.
pub const OMEDR_FLAG_NO_SEPARATION: u32 = 2;

/// A generated benchmark instance.
pub struct OmedrInstance(BenchmarkInstance);

struct Failure {
    status: OmedrStatus,
    msg: String,
}

impl Failure {
    fn new(status: OmedrStatus, msg: impl Into<String>) -> Self {
        Failure { status, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidErrorParams { .. } | Error::Domain { .. } | Error::NonPositiveTarget(_) => OmedrStatus::Domain,
            Error::ShapeMismatch { .. } => OmedrStatus::ShapeMismatch,
            Error::MissingComponent(_) => OmedrStatus::MissingComponent,
            Error::InvalidConfig { .. } => OmedrStatus::InvalidConfig,
            Error::Parse { .. } | Error::Json(_) => OmedrStatus::Parse,
            Error::EmptyObservedSet | Error::InvalidDataset(_) | Error::SingleClass | Error::NoEligibleUsers => OmedrStatus::InvalidData,
            Error::Divergence { .. } => OmedrStatus::Divergence,
            Error::Io(_) => OmedrStatus::Io,
            Error::InvalidArgument(_) => OmedrStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> OmedrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OmedrStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.msg);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            OmedrStatus::Panic
        }
    }
}

fn non_null<T>(ptr: *const T, what: &str) -> FfiResult<()> {
    if ptr.is_null() {
        Err(Failure::new(OmedrStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> FfiResult<()> {
    non_null(out.cast_const(), what)?;
    // SAFETY: checked non-null; the caller guarantees it is writable.
    unsafe { out.write(value) };
    Ok(())
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    non_null(ptr, what)?;
    // SAFETY: the caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

fn cells(n_users: usize, n_items: usize) -> FfiResult<usize> {
    if n_users == 0 || n_items == 0 {
        return Err(Failure::new(OmedrStatus::InvalidArgument, "dimensions must be positive"));
    }
    n_users
        .checked_mul(n_items)
        .ok_or_else(|| Failure::new(OmedrStatus::InvalidArgument, "dimensions overflow"))
}

unsafe fn matrix(ptr: *const f64, n_users: usize, n_items: usize, what: &str) -> FfiResult<Array2<f64>> {
    let len = cells(n_users, n_items)?;
    let data = unsafe { slice(ptr, len, what)? }.to_vec();
    Ok(Array2::from_shape_vec((n_users, n_items), data).expect("length matches shape"))
}

unsafe fn optional_matrix(ptr: *const f64, n_users: usize, n_items: usize, what: &str) -> FfiResult<Option<Array2<f64>>> {
    if ptr.is_null() {
        Ok(None)
    } else {
        unsafe { matrix(ptr, n_users, n_items, what) }.map(Some)
    }
}

fn loss_kind(loss: OmedrLoss, eps: f64) -> FfiResult<LossKind> {
    match loss {
        OmedrLoss::Squared => Ok(LossKind::SquaredError),
        OmedrLoss::CrossEntropy => Ok(LossKind::cross_entropy(eps)?),
    }
}

fn estimator_kind(e: OmedrEstimator) -> Estimator {
    match e {
        OmedrEstimator::Naive => Estimator::Naive,
        OmedrEstimator::Eib => Estimator::Eib,
        OmedrEstimator::Ips => Estimator::Ips,
        OmedrEstimator::Dr => Estimator::Dr,
        OmedrEstimator::OmeNaive => Estimator::OmeNaive,
        OmedrEstimator::OmeEib => Estimator::OmeEib,
        OmedrEstimator::OmeIps => Estimator::OmeIps,
        OmedrEstimator::OmeDr => Estimator::OmeDr,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn omedr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn omedr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loss of a single prediction against a binary label.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omedr_point_loss(loss: OmedrLoss, eps: f64, pred: f64, label: u8, out: *mut f64) -> OmedrStatus {
    guard(|| {
        let v = point_loss(loss_kind(loss, eps)?, pred, label != 0)?;
        unsafe { write_out(out, v, "out") }
    })
}

/// Noise-corrected loss of a prediction against an observed noisy label.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omedr_surrogate_loss(
    loss: OmedrLoss,
    eps: f64,
    pred: f64,
    observed_label: u8,
    rho01: f64,
    rho10: f64,
    out: *mut f64,
) -> OmedrStatus {
    guard(|| {
        let rho = ErrorParams::new(rho01, rho10)?;
        let v = surrogate_loss(loss_kind(loss, eps)?, pred, observed_label != 0, &rho)?;
        unsafe { write_out(out, v, "out") }
    })
}

/// Evaluates one inaccuracy estimator.
///
/// `p_hat` and `e_bar` may be NULL when the estimator does not use them.
/// Propensities are clipped below at 0.05. The flip rates are read only by
/// the noise-corrected estimators.
///
/// # Safety
/// Every non-NULL matrix pointer must reference `n_users * n_items`
/// readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omedr_estimate(
    estimator: OmedrEstimator,
    n_users: usize,
    n_items: usize,
    observed_mask: *const f64,
    observed_ratings: *const f64,
    predictions: *const f64,
    p_hat: *const f64,
    e_bar: *const f64,
    rho01: f64,
    rho10: f64,
    loss: OmedrLoss,
    eps: f64,
    out: *mut f64,
) -> OmedrStatus {
    guard(|| {
        let kind = estimator_kind(estimator);
        let mask = unsafe { matrix(observed_mask, n_users, n_items, "observed_mask")? };
        let ratings = unsafe { matrix(observed_ratings, n_users, n_items, "observed_ratings")? };
        let dataset = RatingDataset::new(mask, ratings, None)?;
        let preds = PredictionMatrix::new(unsafe { matrix(predictions, n_users, n_items, "predictions")? })?;
        let p = unsafe { optional_matrix(p_hat, n_users, n_items, "p_hat")? }
            .map(PropensityMatrix::with_default_floor)
            .transpose()?;
        let e = unsafe { optional_matrix(e_bar, n_users, n_items, "e_bar")? }
            .map(ImputationMatrix::new)
            .transpose()?;
        let mut inputs = EstimatorInputs::new(&dataset, &preds, loss_kind(loss, eps)?);
        if let Some(p) = &p {
            inputs = inputs.with_propensities(p);
        }
        if let Some(e) = &e {
            inputs = inputs.with_imputation(e);
        }
        if kind.corrects_noise() {
            inputs = inputs.with_error_params(ErrorParams::new(rho01, rho10)?);
        }
        let v = estimate(kind, &inputs)?;
        unsafe { write_out(out, v, "out") }
    })
}

/// Identifies the flip rates from a noisy positive-rate matrix using the
/// mean of its `k` lowest and `k` highest entries.
///
/// # Safety
/// `q` must reference `n_users * n_items` readable doubles; the rate
/// outputs must be writable; `flags` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn omedr_identify(
    q: *const f64,
    n_users: usize,
    n_items: usize,
    k: usize,
    out_rho01: *mut f64,
    out_rho10: *mut f64,
    flags: *mut u32,
) -> OmedrStatus {
    guard(|| {
        let q = NoisyRateModel::new(unsafe { matrix(q, n_users, n_items, "q")? })?;
        let id = identify_error_params(&q, k)?;
        unsafe {
            write_out(out_rho01, id.params.rho01(), "out_rho01")?;
            write_out(out_rho10, id.params.rho10(), "out_rho10")?;
        }
        if !flags.is_null() {
            let mut f = 0;
            if id.clamped {
                f |= OMEDR_FLAG_CLAMPED;
            }
            if id.no_separation {
                f |= OMEDR_FLAG_NO_SEPARATION;
            }
            unsafe { flags.write(f) };
        }
        Ok(())
    })
}

/// Pooled AUC of `len` scores against 0/1 labels.
///
/// # Safety
/// `scores` and `labels` must reference `len` readable values; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn omedr_auc(scores: *const f64, labels: *const u8, len: usize, out: *mut f64) -> OmedrStatus {
    guard(|| {
        let s = unsafe { slice(scores, len, "scores")? };
        let l: Vec<bool> = unsafe { slice(labels, len, "labels")? }.iter().map(|&x| x != 0).collect();
        let v = auc(s, &l)?;
        unsafe { write_out(out, v, "out") }
    })
}

unsafe fn per_user_metric(
    scores: *const f64,
    labels: *const u8,
    n_users: usize,
    n_items: usize,
    k: usize,
    out: *mut f64,
    metric: fn(&[UserList<'_>], usize) -> omedr::Result<f64>,
) -> FfiResult<()> {
    let len = cells(n_users, n_items)?;
    let s = unsafe { slice(scores, len, "scores")? };
    let l: Vec<bool> = unsafe { slice(labels, len, "labels")? }.iter().map(|&x| x != 0).collect();
    let users: Vec<UserList<'_>> = (0..n_users)
        .map(|u| UserList {
            scores: &s[u * n_items..(u + 1) * n_items],
            labels: &l[u * n_items..(u + 1) * n_items],
        })
        .collect();
    let v = metric(&users, k)?;
    unsafe { write_out(out, v, "out") }
}

/// NDCG@k averaged over users (rows) with at least one positive.
///
/// # Safety
/// `scores` and `labels` must reference `n_users * n_items` readable
/// values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omedr_ndcg_at_k(
    scores: *const f64,
    labels: *const u8,
    n_users: usize,
    n_items: usize,
    k: usize,
    out: *mut f64,
) -> OmedrStatus {
    guard(|| unsafe { per_user_metric(scores, labels, n_users, n_items, k, out, ndcg_at_k) })
}

/// Recall@k averaged over users (rows) with at least one positive.
///
/// # Safety
/// Same as [`omedr_ndcg_at_k`].
#[no_mangle]
pub unsafe extern "C" fn omedr_recall_at_k(
    scores: *const f64,
    labels: *const u8,
    n_users: usize,
    n_items: usize,
    k: usize,
    out: *mut f64,
) -> OmedrStatus {
    guard(|| unsafe { per_user_metric(scores, labels, n_users, n_items, k, out, recall_at_k) })
}

/// Generates a benchmark instance from a `key = value` spec. An empty
/// string uses the defaults. Release it with [`omedr_instance_free`].
///
/// # Safety
/// `config` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omedr_instance_generate(config: *const c_char, out: *mut *mut OmedrInstance) -> OmedrStatus {
    guard(|| {
        non_null(config, "config")?;
        non_null(out.cast_const(), "out")?;
        let text = unsafe { CStr::from_ptr(config) }
            .to_str()
            .map_err(|_| Failure::new(OmedrStatus::InvalidArgument, "config is not UTF-8"))?;
        let spec = BenchmarkSpec::from_config(text)?;
        let inst = sample_instance(&spec)?;
        unsafe { out.write(Box::into_raw(Box::new(OmedrInstance(inst)))) };
        Ok(())
    })
}

unsafe fn instance<'a>(h: *const OmedrInstance) -> FfiResult<&'a BenchmarkInstance> {
    non_null(h, "instance")?;
    // SAFETY: non-null handles come from `omedr_instance_generate`.
    Ok(unsafe { &(*h).0 })
}

/// # Safety
/// `h` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn omedr_instance_dims(h: *const OmedrInstance, n_users: *mut usize, n_items: *mut usize) -> OmedrStatus {
    guard(|| {
        let inst = unsafe { instance(h)? };
        unsafe {
            write_out(n_users, inst.spec.n_users, "n_users")?;
            write_out(n_items, inst.spec.n_items, "n_items")
        }
    })
}

/// Copies one instance matrix row-major into `buf`, which must hold at
/// least `n_users * n_items` doubles.
///
/// # Safety
/// `h` must be a live handle; `buf` must reference `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn omedr_instance_copy_matrix(h: *const OmedrInstance, which: OmedrMatrix, buf: *mut f64, len: usize) -> OmedrStatus {
    guard(|| {
        let inst = unsafe { instance(h)? };
        non_null(buf.cast_const(), "buf")?;
        let five;
        let m: &Array2<f64> = match which {
            OmedrMatrix::Gamma => &inst.gamma,
            OmedrMatrix::FiveScale => {
                five = inst.five_scale.mapv(f64::from);
                &five
            }
            OmedrMatrix::Prediction => inst.prediction.values(),
            OmedrMatrix::PropensityTrue => inst.p_true.values(),
            OmedrMatrix::PropensityHat => inst.p_hat.values(),
            OmedrMatrix::ObservedMask => &inst.dataset.observed_mask,
            OmedrMatrix::TrueRatings => inst.dataset.require_truth()?,
            OmedrMatrix::ObservedRatings => &inst.dataset.observed_ratings,
            OmedrMatrix::NoisyRatings => &inst.noisy_ratings,
        };
        if len < m.len() {
            return Err(Failure::new(
                OmedrStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", m.len()),
            ));
        }
        // SAFETY: `buf` has at least `m.len()` writable slots.
        let dst = unsafe { std::slice::from_raw_parts_mut(buf, m.len()) };
        for (d, s) in dst.iter_mut().zip(m.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Mean clean loss of the instance's prediction matrix.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn omedr_instance_true_inaccuracy(h: *const OmedrInstance, loss: OmedrLoss, eps: f64, out: *mut f64) -> OmedrStatus {
    guard(|| {
        let inst = unsafe { instance(h)? };
        let v = inst.true_inaccuracy(loss_kind(loss, eps)?)?;
        unsafe { write_out(out, v, "out") }
    })
}

/// Flip rates the instance was generated with.
///
/// # Safety
/// `h` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn omedr_instance_rho(h: *const OmedrInstance, rho01: *mut f64, rho10: *mut f64) -> OmedrStatus {
    guard(|| {
        let inst = unsafe { instance(h)? };
        unsafe {
            write_out(rho01, inst.spec.rho.rho01(), "rho01")?;
            write_out(rho10, inst.spec.rho.rho10(), "rho10")
        }
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `h` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn omedr_instance_free(h: *mut OmedrInstance) {
    if !h.is_null() {
        // SAFETY: the handle was created by `Box::into_raw`.
        drop(unsafe { Box::from_raw(h) });
    }
}
