//! C ABI over the `slanc` library.
//!
//! Fallible functions return a [`SlancStatus`] and write results through out
//! pointers. On failure a message is kept per thread and can be read with
//! [`slanc_last_error`]. Objects are opaque handles released by their
//! matching `_free` function; strings returned to the caller are released
//! with [`slanc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use slanc::engine::{forward, gaussian_inputs, EngineError, PrecisionPolicy};
use slanc::fp16::{self, Fp16Bits};
use slanc::model::{generate_synthetic, load_safetensors, InitSpec, ModelConfig, ModelGraph, NameMap};
use slanc::scales::{compute_scale_table, ScaleError, ScaleFormula, ScaleTable};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlancStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Model = 4,
    /// A scale came out below the smallest binary16 subnormal.
    Degenerate = 5,
    Numerical = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlancFormula {
    Unit = 0,
    StandardMlp = 1,
    LlamaMlp = 2,
    Attention = 3,
    Dynamic = 4,
}

/// Result of a binary16 sum of squares.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SlancAccumulation {
    /// Final binary16 sum as raw bits.
    pub sum_bits: u16,
    pub overflowed: bool,
    pub underflowed_to_zero: bool,
    /// Exact sum of the squares in double precision.
    pub exact_sum: f64,
}

/// One scale-table entry. `norm_id` is owned by the table and stays valid
/// until the table is freed.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SlancScaleEntry {
    pub norm_id: *const c_char,
    pub layer_index: i64,
    pub formula: SlancFormula,
    pub s: f64,
    pub reciprocal: f64,
    pub epsilon_adjusted: f64,
}

/// Opaque model handle.
pub struct SlancModel {
    graph: ModelGraph,
}

/// Opaque scale-table handle.
pub struct SlancScaleTable {
    table: ScaleTable,
    ids: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(SlancStatus, String);

impl From<ScaleError> for Failure {
    fn from(e: ScaleError) -> Self {
        let status = match e {
            ScaleError::Degenerate { .. } => SlancStatus::Degenerate,
            ScaleError::InvalidModel(_) => SlancStatus::Model,
            _ => SlancStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let status = match e {
            EngineError::Shape(_) | EngineError::FingerprintMismatch { .. } | EngineError::MissingScale(_) => {
                SlancStatus::InvalidArgument
            }
            EngineError::Scale(ScaleError::Degenerate { .. }) => SlancStatus::Degenerate,
            _ => SlancStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records any failure or panic, and returns the status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SlancStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SlancStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SlancStatus::Panic
        }
    }
}

fn null() -> Failure {
    Failure(SlancStatus::NullPointer, "null pointer argument".into())
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn opt_str<'a>(p: *const c_char) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| Failure(SlancStatus::InvalidArgument, "string is not UTF-8".into()))
}

/// # Safety
/// `p` is a valid NUL-terminated string.
unsafe fn req_str<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    opt_str(p)?.ok_or_else(null)
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

fn parse_config(text: &str) -> Result<ModelConfig, Failure> {
    serde_json::from_str(text).map_err(|e| Failure(SlancStatus::InvalidArgument, format!("config: {e}")))
}

fn model_err(e: slanc::model::ModelError) -> Failure {
    let status = match e {
        slanc::model::ModelError::Io { .. } => SlancStatus::Io,
        _ => SlancStatus::Model,
    };
    Failure(status, e.to_string())
}

/// Message describing the last failure on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn slanc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Round-to-nearest-even conversion of a double to binary16 bits.
#[no_mangle]
pub extern "C" fn slanc_fp16_encode(x: f64) -> u16 {
    fp16::encode(x).0
}

#[no_mangle]
pub extern "C" fn slanc_fp16_decode(bits: u16) -> f64 {
    fp16::decode(Fp16Bits(bits))
}

#[no_mangle]
pub extern "C" fn slanc_fp16_add(a: u16, b: u16) -> u16 {
    fp16::add(Fp16Bits(a), Fp16Bits(b)).0
}

#[no_mangle]
pub extern "C" fn slanc_fp16_sub(a: u16, b: u16) -> u16 {
    fp16::sub(Fp16Bits(a), Fp16Bits(b)).0
}

#[no_mangle]
pub extern "C" fn slanc_fp16_mul(a: u16, b: u16) -> u16 {
    fp16::mul(Fp16Bits(a), Fp16Bits(b)).0
}

#[no_mangle]
pub extern "C" fn slanc_fp16_div(a: u16, b: u16) -> u16 {
    fp16::div(Fp16Bits(a), Fp16Bits(b)).0
}

#[no_mangle]
pub extern "C" fn slanc_fp16_sqrt(a: u16) -> u16 {
    fp16::sqrt(Fp16Bits(a)).0
}

/// Left-to-right binary16 sum of squares of `len` values.
///
/// # Safety
/// `values` points to `len` readable values and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn slanc_fp16_sum_of_squares(
    values: *const u16,
    len: usize,
    out: *mut SlancAccumulation,
) -> SlancStatus {
    guard(|| {
        if values.is_null() || out.is_null() {
            return Err(null());
        }
        let bits: Vec<Fp16Bits> = std::slice::from_raw_parts(values, len)
            .iter()
            .map(|&b| Fp16Bits(b))
            .collect();
        let t = fp16::accumulate_squares(&bits).map_err(|e| Failure(SlancStatus::InvalidArgument, e.to_string()))?;
        *out = SlancAccumulation {
            sum_bits: t.final_sum.0,
            overflowed: t.overflowed,
            underflowed_to_zero: t.underflowed_to_zero,
            exact_sum: t.exact_sum,
        };
        Ok(())
    })
}

/// Load a model from a safetensors file. `name_map_json` and `config_json`
/// may be null to use the Llama naming and the file's own config.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn slanc_model_load(
    path: *const c_char,
    name_map_json: *const c_char,
    config_json: *const c_char,
    out: *mut *mut SlancModel,
) -> SlancStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let path = req_str(path)?;
        let map = match opt_str(name_map_json)? {
            Some(text) => NameMap::from_json(text).map_err(model_err)?,
            None => NameMap::default(),
        };
        let config = opt_str(config_json)?.map(parse_config).transpose()?;
        let graph = load_safetensors(Path::new(path), &map, config.as_ref()).map_err(model_err)?;
        *out = Box::into_raw(Box::new(SlancModel { graph }));
        Ok(())
    })
}

/// Generate a seeded synthetic model with every weight drawn at `std`.
///
/// # Safety
/// `config_json` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn slanc_model_generate(
    config_json: *const c_char,
    std: f64,
    seed: u64,
    out: *mut *mut SlancModel,
) -> SlancStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let config = parse_config(req_str(config_json)?)?;
        let graph = generate_synthetic(&config, &InitSpec::uniform_std(std), seed).map_err(model_err)?;
        *out = Box::into_raw(Box::new(SlancModel { graph }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or came from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn slanc_model_free(model: *mut SlancModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of norms in the model, 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slanc_model_norm_count(model: *const SlancModel) -> usize {
    model.as_ref().map_or(0, |m| m.graph.norm_sites().len())
}

/// Hex SHA-256 weight fingerprint, or null for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slanc_model_fingerprint(model: *const SlancModel) -> *mut c_char {
    model
        .as_ref()
        .map_or(ptr::null_mut(), |m| into_c_string(m.graph.fingerprint()))
}

/// # Safety
/// `model` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn slanc_scales_compute(model: *const SlancModel, out: *mut *mut SlancScaleTable) -> SlancStatus {
    guard(|| {
        let (Some(model), false) = (model.as_ref(), out.is_null()) else {
            return Err(null());
        };
        let table = compute_scale_table(&model.graph)?;
        let ids = table
            .entries
            .iter()
            .map(|e| CString::new(e.norm_id.as_str()).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(SlancScaleTable { table, ids }));
        Ok(())
    })
}

/// Number of entries, 0 for a null handle.
///
/// # Safety
/// `table` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slanc_scales_len(table: *const SlancScaleTable) -> usize {
    table.as_ref().map_or(0, |t| t.table.len())
}

/// # Safety
/// `table` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn slanc_scales_get(
    table: *const SlancScaleTable,
    index: usize,
    out: *mut SlancScaleEntry,
) -> SlancStatus {
    guard(|| {
        let (Some(t), false) = (table.as_ref(), out.is_null()) else {
            return Err(null());
        };
        let e = t.table.entries.get(index).ok_or_else(|| {
            Failure(
                SlancStatus::InvalidArgument,
                format!("index {index} out of range for {} entries", t.table.len()),
            )
        })?;
        *out = SlancScaleEntry {
            norm_id: t.ids[index].as_ptr(),
            layer_index: e.layer_index,
            formula: match e.formula {
                ScaleFormula::Unit => SlancFormula::Unit,
                ScaleFormula::StandardMlp => SlancFormula::StandardMlp,
                ScaleFormula::LlamaMlp => SlancFormula::LlamaMlp,
                ScaleFormula::Attention => SlancFormula::Attention,
                ScaleFormula::Dynamic => SlancFormula::Dynamic,
            },
            s: e.s,
            reciprocal: e.reciprocal,
            epsilon_adjusted: e.epsilon_adjusted,
        };
        Ok(())
    })
}

/// The table as JSON, or null for a null handle.
///
/// # Safety
/// `table` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn slanc_scales_to_json(table: *const SlancScaleTable) -> *mut c_char {
    table
        .as_ref()
        .map_or(ptr::null_mut(), |t| into_c_string(t.table.to_json()))
}

/// # Safety
/// `table` is null or came from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn slanc_scales_free(table: *mut SlancScaleTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// # Safety
/// `s` is null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn slanc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Binary16 forward pass over `n_tokens` seeded Gaussian tokens; counts
/// (norm, token) pairs whose sum of squares overflowed or underflowed.
/// `table` may be null for an unscaled run.
///
/// # Safety
/// `model` is a live handle, `table` is null or a live handle, and the out
/// pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn slanc_audit_overflow_count(
    model: *const SlancModel,
    table: *const SlancScaleTable,
    n_tokens: usize,
    seed: u64,
    out_overflow: *mut usize,
    out_underflow: *mut usize,
) -> SlancStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return Err(null());
        };
        if out_overflow.is_null() || out_underflow.is_null() {
            return Err(null());
        }
        if n_tokens == 0 {
            return Err(Failure(
                SlancStatus::InvalidArgument,
                "n_tokens must be positive".into(),
            ));
        }
        let x = gaussian_inputs(n_tokens, model.graph.config.d_model, seed);
        let scales = table.as_ref().map(|t| &t.table);
        let result = forward(&model.graph, &x, PrecisionPolicy::FP16, scales)?;
        *out_overflow = result.overflow_count();
        *out_underflow = result.underflow_count();
        Ok(())
    })
}
