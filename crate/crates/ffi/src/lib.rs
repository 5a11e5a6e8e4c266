//! C ABI over `gift-core`.
//!
//! Handles are opaque pointers created by `*_new` functions and released by
//! the matching `*_free`. Every fallible call returns a [`GiftStatus`]; on
//! failure [`gift_last_error`] gives a message for the calling thread.
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`gift_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gift::decoder::{gift_decode as core_gift_decode, DecodeOptions, Prompt, Transcript};
use gift::model::{AttentionTensor, Model, ModelConfig, Scene, SegmentLayout};
use gift::saliency::{shift_saliency, static_saliency, SaliencyMap, SaliencyOptions};
use gift::steering::SteeringConfig;
use gift::tokenizer::InfoRichMask;
use gift::{atn1, tensors, GiftError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GiftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    DataError = 4,
    Internal = 5,
    BufferTooSmall = 6,
}

/// A built model.
pub struct GiftModel {
    model: Model,
}

/// An attention capture with its segment layout and query flags.
pub struct GiftCapture {
    attention: AttentionTensor,
    info_rich: InfoRichMask,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: GiftStatus, msg: impl Into<String>) -> GiftStatus {
    set_error(msg);
    status
}

fn from_core(err: GiftError) -> GiftStatus {
    let status = match &err {
        GiftError::Config(_) | GiftError::LayerOutOfRange { .. } => GiftStatus::InvalidArgument,
        e if !e.is_data_error() => GiftStatus::Internal,
        _ => GiftStatus::DataError,
    };
    fail(status, err.to_string())
}

/// Run `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), GiftStatus>) -> GiftStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GiftStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(GiftStatus::Internal, "panic inside gift"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, GiftStatus> {
    if p.is_null() {
        return Err(fail(GiftStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GiftStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], GiftStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(GiftStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn check_out<T>(p: *mut T, name: &str) -> Result<(), GiftStatus> {
    if p.is_null() {
        Err(fail(GiftStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn bad_json(what: &str) -> impl Fn(serde_json::Error) -> GiftStatus + '_ {
    move |e| fail(GiftStatus::InvalidArgument, format!("{what}: {e}"))
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call into the library on this
/// thread.
#[no_mangle]
pub extern "C" fn gift_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build a model from a JSON model config (null selects the defaults).
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gift_model_new(
    config_json: *const c_char,
    out: *mut *mut GiftModel,
) -> GiftStatus {
    guard(|| {
        check_out(out, "out")?;
        let cfg: ModelConfig = if config_json.is_null() {
            ModelConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(bad_json("model config"))?
        };
        let model = Model::build(cfg).map_err(from_core)?;
        *out = Box::into_raw(Box::new(GiftModel { model }));
        Ok(())
    })
}

/// Build the default model with the given weight seed.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gift_model_new_default(seed: u64, out: *mut *mut GiftModel) -> GiftStatus {
    guard(|| {
        check_out(out, "out")?;
        let model = Model::build(ModelConfig {
            seed,
            ..ModelConfig::default()
        })
        .map_err(from_core)?;
        *out = Box::into_raw(Box::new(GiftModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a pointer from `gift_model_new*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gift_model_free(model: *mut GiftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Decode a scene and query. `steering_json` is a steering config (null
/// selects the defaults). On success `*out_json` holds the transcript JSON.
///
/// # Safety
/// `model` must be a live handle, the strings NUL-terminated (or null where
/// allowed) and `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gift_decode(
    model: *const GiftModel,
    scene_json: *const c_char,
    query: *const c_char,
    steering_json: *const c_char,
    max_new_tokens: usize,
    out_json: *mut *mut c_char,
) -> GiftStatus {
    guard(|| {
        check_out(out_json, "out_json")?;
        let m = model
            .as_ref()
            .ok_or_else(|| fail(GiftStatus::NullPointer, "model is null"))?;
        let scene = Scene::from_json(str_arg(scene_json, "scene_json")?).map_err(from_core)?;
        let query = str_arg(query, "query")?;
        let cfg: SteeringConfig = if steering_json.is_null() {
            SteeringConfig::default()
        } else {
            serde_json::from_str(str_arg(steering_json, "steering_json")?)
                .map_err(bad_json("steering config"))?
        };
        let prompt = Prompt::builtin(&scene, query).map_err(from_core)?;
        let outcome = core_gift_decode(
            &m.model,
            &prompt,
            &cfg,
            None,
            &DecodeOptions::new(max_new_tokens),
        )
        .map_err(from_core)?;
        let config =
            serde_json::to_value(&cfg).map_err(|e| fail(GiftStatus::Internal, e.to_string()))?;
        let text = serde_json::to_string(&Transcript::new(&outcome, config))
            .map_err(|e| fail(GiftStatus::Internal, e.to_string()))?;
        *out_json = CString::new(text)
            .map_err(|e| fail(GiftStatus::Internal, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gift_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load an ATN1 attention capture `[layers, heads, n, n]` from memory.
/// `layout` holds four segment lengths: system, visual, query, generated.
/// `info_rich` has one byte per query token, nonzero for info-rich tokens.
///
/// # Safety
/// Pointers must be valid for the given lengths; `layout` for 4 values.
#[no_mangle]
pub unsafe extern "C" fn gift_capture_from_atn1(
    bytes: *const u8,
    len: usize,
    layout: *const usize,
    info_rich: *const u8,
    info_rich_len: usize,
    out: *mut *mut GiftCapture,
) -> GiftStatus {
    guard(|| {
        check_out(out, "out")?;
        let bytes = slice_arg(bytes, len, "bytes")?;
        let lens = slice_arg(layout, 4, "layout")?;
        let flags = slice_arg(info_rich, info_rich_len, "info_rich")?;
        let layout = SegmentLayout::from_lengths(lens[0], lens[1], lens[2], lens[3]);
        if flags.len() != layout.query.len {
            return Err(fail(
                GiftStatus::InvalidArgument,
                format!(
                    "{} info-rich flags for {} query tokens",
                    flags.len(),
                    layout.query.len
                ),
            ));
        }
        let dense = atn1::decode(bytes).map_err(from_core)?;
        let attention = AttentionTensor::from_dense(dense, layout).map_err(from_core)?;
        let info_rich = InfoRichMask::new(flags.iter().map(|&b| b != 0).collect());
        *out = Box::into_raw(Box::new(GiftCapture {
            attention,
            info_rich,
        }));
        Ok(())
    })
}

/// # Safety
/// `capture` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gift_capture_free(capture: *mut GiftCapture) {
    if !capture.is_null() {
        drop(Box::from_raw(capture));
    }
}

/// Layer, head and token counts of a capture. Any out pointer may be null.
///
/// # Safety
/// `capture` must be a live handle; non-null outs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gift_capture_dims(
    capture: *const GiftCapture,
    layers: *mut usize,
    heads: *mut usize,
    seq_len: *mut usize,
    visual: *mut usize,
) -> GiftStatus {
    guard(|| {
        let c = capture
            .as_ref()
            .ok_or_else(|| fail(GiftStatus::NullPointer, "capture is null"))?;
        let a = &c.attention;
        for (p, v) in [
            (layers, a.layers()),
            (heads, a.heads()),
            (seq_len, a.seq_len()),
            (visual, a.layout().visual.len),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

unsafe fn write_map(
    map: Result<SaliencyMap, GiftError>,
    out: *mut f32,
    out_len: usize,
    written: *mut usize,
) -> Result<(), GiftStatus> {
    let map = map.map_err(from_core)?;
    let n = map.scores.len();
    if !written.is_null() {
        *written = n;
    }
    if out_len < n {
        return Err(fail(
            GiftStatus::BufferTooSmall,
            format!("need {n} floats, buffer holds {out_len}"),
        ));
    }
    check_out(out, "out")?;
    ptr::copy_nonoverlapping(map.scores.as_ptr(), out, n);
    Ok(())
}

/// Min-max normalized shift saliency at `layer`, one float per visual
/// token. `*written` receives the required length even when the buffer is
/// too small.
///
/// # Safety
/// `capture` must be a live handle, `out` valid for `out_len` floats and
/// `written` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn gift_shift_saliency(
    capture: *const GiftCapture,
    layer: usize,
    head_fraction: f64,
    clip_k: f64,
    out: *mut f32,
    out_len: usize,
    written: *mut usize,
) -> GiftStatus {
    guard(|| {
        let c = capture
            .as_ref()
            .ok_or_else(|| fail(GiftStatus::NullPointer, "capture is null"))?;
        let opts = SaliencyOptions {
            head_fraction,
            clip_k,
            ..SaliencyOptions::default()
        };
        write_map(
            shift_saliency(&c.attention, layer, &c.info_rich, &opts),
            out,
            out_len,
            written,
        )
    })
}

/// Min-max normalized static saliency at `layer`.
///
/// # Safety
/// As for [`gift_shift_saliency`].
#[no_mangle]
pub unsafe extern "C" fn gift_static_saliency(
    capture: *const GiftCapture,
    layer: usize,
    head_fraction: f64,
    out: *mut f32,
    out_len: usize,
    written: *mut usize,
) -> GiftStatus {
    guard(|| {
        let c = capture
            .as_ref()
            .ok_or_else(|| fail(GiftStatus::NullPointer, "capture is null"))?;
        let opts = SaliencyOptions {
            head_fraction,
            ..SaliencyOptions::default()
        };
        write_map(
            static_saliency(&c.attention, layer, &opts),
            out,
            out_len,
            written,
        )
    })
}

/// Softmax of `logits + bias` over `n` entries. Entries whose mask byte is
/// nonzero are masked out and get probability 0.
///
/// # Safety
/// All pointers must be valid for `n` elements.
#[no_mangle]
pub unsafe extern "C" fn gift_softmax_with_bias(
    logits: *const f32,
    bias: *const f32,
    mask: *const u8,
    n: usize,
    out: *mut f32,
) -> GiftStatus {
    guard(|| {
        let logits = slice_arg(logits, n, "logits")?;
        let bias = slice_arg(bias, n, "bias")?;
        let mask: Vec<bool> = slice_arg(mask, n, "mask")?
            .iter()
            .map(|&b| b != 0)
            .collect();
        let probs = tensors::softmax_with_bias(logits, bias, &mask).map_err(from_core)?;
        if n > 0 {
            check_out(out, "out")?;
            ptr::copy_nonoverlapping(probs.as_ptr(), out, n);
        }
        Ok(())
    })
}
