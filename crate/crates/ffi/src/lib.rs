//! C ABI over the palora core.
//!
//! Objects cross the boundary as opaque handles. A producing call such as
//! `palora_config_from_toml`, `palora_pretrain` or `palora_mask_sample`
//! hands one out and the matching `palora_*_free` releases it. Every fallible call returns a [`PaloraStatus`]; on
//! failure the message is available from [`palora_last_error`] on the same
//! thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use palora::adapters::{effective_element_rate, sample_mask_pair, MaskPair};
use palora::analysis::mask_overlap;
use palora::checkpoint::{load_checkpoint, save_checkpoint};
use palora::model::BaseModel;
use palora::pipeline::{derive, downstream_splits, pretrain_model, ExperimentConfig};
use palora::sparsity::SparsityProfile;
use palora::{slt, Error, Matrix};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaloraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Contract = 4,
    Convergence = 5,
    Divergence = 6,
    Config = 7,
    Format = 8,
    Io = 9,
    Utf8 = 10,
    Panic = 11,
}

impl From<&Error> for PaloraStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => PaloraStatus::Dimension,
            Error::Contract(_) => PaloraStatus::Contract,
            Error::InvalidArgument(_) | Error::UnknownAdapter(_) => PaloraStatus::InvalidArgument,
            Error::Convergence { .. } => PaloraStatus::Convergence,
            Error::Divergence(_) => PaloraStatus::Divergence,
            Error::Config(_) => PaloraStatus::Config,
            Error::Format(_) => PaloraStatus::Format,
            Error::Io { .. } => PaloraStatus::Io,
        }
    }
}

/// A frozen base model.
pub struct PaloraModel(BaseModel);

/// A parsed experiment configuration.
pub struct PaloraConfig(ExperimentConfig);

/// A per-layer sparsity profile.
pub struct PaloraProfile(SparsityProfile);

/// A row/column mask pair for one adapter.
pub struct PaloraMask(MaskPair);

/// One layer of a sparsity profile.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PaloraLayerRatio {
    pub rows: usize,
    pub cols: usize,
    pub retained_rows: usize,
    pub retained_cols: usize,
    pub p_row: f64,
    pub p_col: f64,
    pub element_rate: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

fn fail(status: PaloraStatus, msg: impl Into<String>) -> PaloraStatus {
    set_error(msg.into());
    status
}

/// Run `body`, turning errors and panics into status codes.
fn guard(body: impl FnOnce() -> Result<(), PaloraStatus>) -> PaloraStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => PaloraStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(PaloraStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn check<T>(r: palora::Result<T>) -> Result<T, PaloraStatus> {
    r.map_err(|e| fail(PaloraStatus::from(&e), e.to_string()))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, PaloraStatus> {
    p.as_ref()
        .ok_or_else(|| fail(PaloraStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, PaloraStatus> {
    p.as_mut()
        .ok_or_else(|| fail(PaloraStatus::NullPointer, format!("{what} is null")))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, PaloraStatus> {
    if p.is_null() {
        return Err(fail(PaloraStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(PaloraStatus::Utf8, format!("{what}: {e}")))
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn palora_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn palora_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parse a TOML experiment configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out_config` writable.
#[no_mangle]
pub unsafe extern "C" fn palora_config_from_toml(
    toml: *const c_char,
    out_config: *mut *mut PaloraConfig,
) -> PaloraStatus {
    guard(|| {
        let slot = out(out_config, "out_config")?;
        let cfg = check(ExperimentConfig::from_toml(text(toml, "toml")?))?;
        *slot = Box::into_raw(Box::new(PaloraConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `config` must come from [`palora_config_from_toml`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn palora_config_free(config: *mut PaloraConfig) {
    release(config)
}

/// Pretrain the base model described by `config`.
///
/// # Safety
/// `config` must be a live handle and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn palora_pretrain(
    config: *const PaloraConfig,
    out_model: *mut *mut PaloraModel,
) -> PaloraStatus {
    guard(|| {
        let cfg = deref(config, "config")?;
        let slot = out(out_model, "out_model")?;
        let outcome = check(pretrain_model(&cfg.0))?;
        *slot = Box::into_raw(Box::new(PaloraModel(outcome.model)));
        Ok(())
    })
}

/// Load a base model from a checkpoint file. Any adapters stored alongside
/// it are ignored.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn palora_model_load(path: *const c_char, out_model: *mut *mut PaloraModel) -> PaloraStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let (model, _) = check(load_checkpoint(Path::new(text(path, "path")?)))?;
        *slot = Box::into_raw(Box::new(PaloraModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn palora_model_save(model: *const PaloraModel, path: *const c_char) -> PaloraStatus {
    guard(|| {
        let model = deref(model, "model")?;
        check(save_checkpoint(Path::new(text(path, "path")?), &model.0, None))
    })
}

/// # Safety
/// `model` must be a handle produced by this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn palora_model_free(model: *mut PaloraModel) {
    release(model)
}

/// Number of weight layers, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn palora_model_depth(model: *const PaloraModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.depth())
}

/// Output and input width of weight layer `layer`.
///
/// # Safety
/// `model` must be a live handle; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn palora_model_layer_dims(
    model: *const PaloraModel,
    layer: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> PaloraStatus {
    guard(|| {
        let dims = deref(model, "model")?.0.layer_dims();
        let Some(&(m, n)) = dims.get(layer) else {
            return Err(fail(
                PaloraStatus::InvalidArgument,
                format!("layer {layer} out of range for depth {}", dims.len()),
            ));
        };
        *out(rows, "rows")? = m;
        *out(cols, "cols")? = n;
        Ok(())
    })
}

/// SHA-256 of the frozen weights, written to a 32-byte buffer.
///
/// # Safety
/// `out_digest` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn palora_model_hash(model: *const PaloraModel, out_digest: *mut u8) -> PaloraStatus {
    guard(|| {
        let hash = deref(model, "model")?.0.weights_hash();
        out(out_digest, "out_digest")?;
        ptr::copy_nonoverlapping(hash.as_ptr(), out_digest, hash.len());
        Ok(())
    })
}

/// Frozen forward pass. `inputs` holds `input_dim x samples` values in
/// row-major order (one column per sample); `logits` receives
/// `classes x samples` values in the same layout.
///
/// # Safety
/// `inputs` must hold `inputs_len` readable values and `logits` `logits_len`
/// writable values.
#[no_mangle]
pub unsafe extern "C" fn palora_model_forward(
    model: *const PaloraModel,
    inputs: *const f64,
    inputs_len: usize,
    samples: usize,
    logits: *mut f64,
    logits_len: usize,
) -> PaloraStatus {
    guard(|| {
        let model = &deref(model, "model")?.0;
        deref(inputs, "inputs")?;
        out(logits, "logits")?;
        let x = check(Matrix::new(
            model.input_dim(),
            samples,
            std::slice::from_raw_parts(inputs, inputs_len).to_vec(),
        ))?;
        let y = check(model.forward(&x, None))?;
        if y.len() != logits_len {
            return Err(fail(
                PaloraStatus::Dimension,
                format!("logits buffer holds {logits_len} values, need {}", y.len()),
            ));
        }
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Derive a per-layer sparsity profile for `model` on the downstream task
/// of `config`.
///
/// # Safety
/// Both handles must be live and `out_profile` writable.
#[no_mangle]
pub unsafe extern "C" fn palora_derive(
    model: *const PaloraModel,
    config: *const PaloraConfig,
    out_profile: *mut *mut PaloraProfile,
) -> PaloraStatus {
    guard(|| {
        let model = &deref(model, "model")?.0;
        let cfg = &deref(config, "config")?.0;
        let slot = out(out_profile, "out_profile")?;
        let splits = check(downstream_splits(cfg))?;
        let (profile, _) = check(derive(model, cfg, &splits))?;
        *slot = Box::into_raw(Box::new(PaloraProfile(profile)));
        Ok(())
    })
}

/// Number of layers in a profile, or 0 for a NULL handle.
///
/// # Safety
/// `profile` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn palora_profile_len(profile: *const PaloraProfile) -> usize {
    profile.as_ref().map_or(0, |p| p.0.layers.len())
}

/// # Safety
/// `profile` must be a live handle and `out_ratio` writable.
#[no_mangle]
pub unsafe extern "C" fn palora_profile_layer(
    profile: *const PaloraProfile,
    layer: usize,
    out_ratio: *mut PaloraLayerRatio,
) -> PaloraStatus {
    guard(|| {
        let layers = &deref(profile, "profile")?.0.layers;
        let slot = out(out_ratio, "out_ratio")?;
        let Some(r) = layers.get(layer) else {
            return Err(fail(
                PaloraStatus::InvalidArgument,
                format!("layer {layer} out of range for {} layers", layers.len()),
            ));
        };
        *slot = PaloraLayerRatio {
            rows: r.m,
            cols: r.n,
            retained_rows: r.retained_rows,
            retained_cols: r.retained_cols,
            p_row: r.p_row,
            p_col: r.p_col,
            element_rate: r.element_rate,
        };
        Ok(())
    })
}

/// # Safety
/// `profile` must be a handle produced by this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn palora_profile_free(profile: *mut PaloraProfile) {
    release(profile)
}

/// Sample a row/column mask pair for an `rows x cols` weight.
///
/// # Safety
/// `out_mask` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palora_mask_sample(
    rows: usize,
    cols: usize,
    p_row: f64,
    p_col: f64,
    seed: u64,
    out_mask: *mut *mut PaloraMask,
) -> PaloraStatus {
    guard(|| {
        let slot = out(out_mask, "out_mask")?;
        let mask = check(sample_mask_pair(rows, cols, p_row, p_col, seed))?;
        *slot = Box::into_raw(Box::new(PaloraMask(mask)));
        Ok(())
    })
}

/// Fraction of weight entries the mask leaves trainable, or NaN for NULL.
///
/// # Safety
/// `mask` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn palora_mask_element_rate(mask: *const PaloraMask) -> f64 {
    mask.as_ref().map_or(f64::NAN, |m| effective_element_rate(&m.0))
}

/// Jaccard overlap of the trainable entries of two masks of equal shape.
///
/// # Safety
/// Both handles must be live and `out_overlap` writable.
#[no_mangle]
pub unsafe extern "C" fn palora_mask_overlap(
    a: *const PaloraMask,
    b: *const PaloraMask,
    out_overlap: *mut f64,
) -> PaloraStatus {
    guard(|| {
        let (a, b) = (deref(a, "a")?, deref(b, "b")?);
        *out(out_overlap, "out_overlap")? = check(mask_overlap(&a.0, &b.0))?;
        Ok(())
    })
}

/// # Safety
/// `mask` must be a handle produced by this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn palora_mask_free(mask: *mut PaloraMask) {
    release(mask)
}

/// Per-layer concentration constant of the width bound.
///
/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palora_slt_rho(
    c: f64,
    n_t: f64,
    min_p: f64,
    gamma: f64,
    min_eps_l: f64,
    delta: f64,
    out_value: *mut f64,
) -> PaloraStatus {
    guard(|| {
        *out(out_value, "out_value")? = check(slt::rho(c, n_t, min_p, gamma, min_eps_l, delta))?;
        Ok(())
    })
}

/// Per-layer error budget. `later_norms` holds `later_len` operator norms
/// of the layers after this one and may be NULL when `later_len` is 0.
///
/// # Safety
/// `later_norms` must hold `later_len` readable values; `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn palora_slt_epsilon_l(
    eps: f64,
    n_lora_last: f64,
    depth: usize,
    b_prev: f64,
    later_norms: *const f64,
    later_len: usize,
    out_value: *mut f64,
) -> PaloraStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        let norms = if later_len == 0 {
            &[][..]
        } else {
            deref(later_norms, "later_norms")?;
            std::slice::from_raw_parts(later_norms, later_len)
        };
        *slot = check(slt::epsilon_l(eps, n_lora_last, depth, b_prev, norms))?;
        Ok(())
    })
}

/// Minimum wide-layer width guaranteeing the approximation.
///
/// # Safety
/// `out_width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn palora_slt_width_bound(
    n_t: usize,
    p_next: f64,
    eps_l: f64,
    delta: f64,
    rho: f64,
    c: f64,
    out_width: *mut u64,
) -> PaloraStatus {
    guard(|| {
        *out(out_width, "out_width")? = check(slt::width_bound(n_t, p_next, eps_l, delta, rho, c))?;
        Ok(())
    })
}
