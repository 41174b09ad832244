//! C ABI for the selfsynth tokenizer, sequence scorer, logit filter and
//! caption sampler.
//!
//! Objects are opaque handles created by `*_load`/`*_train` functions and
//! released with the matching `*_free`. Every fallible function returns an
//! [`SsStatus`]; on failure the message is available from
//! [`ss_last_error`] on the same thread until the next failing call.
//!
//! Functions that fill a caller buffer take its capacity and always write the
//! required length to `out_len`. When the buffer is too small they return
//! [`SsStatus::BufferTooSmall`] and write nothing else.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selfsynth::data::load_ppm;
use selfsynth::eval::sequence_log_prob;
use selfsynth::model::{encode_grouped, ModelParams};
use selfsynth::synthesis::{filter_logits, generate_caption, SamplerConfig};
use selfsynth::tokenizer::BpeVocab;
use selfsynth::training::load_checkpoint;
use selfsynth::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Config = 4,
    Shape = 5,
    Length = 6,
    UnknownToken = 7,
    Contract = 8,
    Corrupt = 9,
    Parse = 10,
    Io = 11,
    Missing = 12,
    Other = 13,
    Panic = 14,
}

impl From<&Error> for SsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => SsStatus::Config,
            Error::Shape { .. } | Error::Image { .. } => SsStatus::Shape,
            Error::Length { .. } => SsStatus::Length,
            Error::UnknownToken(_) => SsStatus::UnknownToken,
            Error::Contract(_) | Error::EmptyLoss => SsStatus::Contract,
            Error::Corrupt { .. } => SsStatus::Corrupt,
            Error::Parse { .. } | Error::Json(_) => SsStatus::Parse,
            Error::Io(_) => SsStatus::Io,
            Error::MissingArtifact(_) => SsStatus::Missing,
            _ => SsStatus::Other,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SsStatus, msg: impl Into<String>) -> SsStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting library errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), SsStatus>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SsStatus::Panic, msg)
        }
    }
}

fn lib(e: Error) -> SsStatus {
    fail(SsStatus::from(&e), e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, SsStatus> {
    if p.is_null() {
        return Err(fail(SsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], SsStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(SsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, SsStatus> {
    p.as_ref().ok_or_else(|| fail(SsStatus::NullPointer, format!("{what} is null")))
}

unsafe fn write_out<T: Copy>(src: &[T], dst: *mut T, cap: usize, out_len: *mut usize) -> Result<(), SsStatus> {
    if out_len.is_null() {
        return Err(fail(SsStatus::NullPointer, "out_len is null"));
    }
    *out_len = src.len();
    if src.len() > cap {
        return Err(fail(
            SsStatus::BufferTooSmall,
            format!("need {} elements, buffer holds {cap}", src.len()),
        ));
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(fail(SsStatus::NullPointer, "output buffer is null"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

/// Writes `s` plus a NUL terminator; `out_len` excludes the terminator.
unsafe fn write_str(s: &str, dst: *mut c_char, cap: usize, out_len: *mut usize) -> Result<(), SsStatus> {
    if out_len.is_null() {
        return Err(fail(SsStatus::NullPointer, "out_len is null"));
    }
    *out_len = s.len();
    if s.len() + 1 > cap {
        return Err(fail(
            SsStatus::BufferTooSmall,
            format!("need {} bytes plus NUL, buffer holds {cap}", s.len()),
        ));
    }
    if dst.is_null() {
        return Err(fail(SsStatus::NullPointer, "output buffer is null"));
    }
    ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, dst, s.len());
    *dst.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opaque trained tokenizer.
pub struct SsTokenizer(BpeVocab);

/// Opaque model parameters.
pub struct SsModel(ModelParams<f32>);

/// Loads a `bpe-v1` vocabulary file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_tokenizer_load(path: *const c_char, out: *mut *mut SsTokenizer) -> SsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(fail(SsStatus::NullPointer, "out is null"));
        }
        let v = BpeVocab::load(&PathBuf::from(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(SsTokenizer(v)));
        Ok(())
    })
}

/// Trains a tokenizer on `n_texts` NUL-terminated strings.
///
/// # Safety
/// `texts` must point to `n_texts` valid string pointers; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ss_tokenizer_train(
    texts: *const *const c_char,
    n_texts: usize,
    vocab_size: usize,
    out: *mut *mut SsTokenizer,
) -> SsStatus {
    guard(|| {
        let ptrs = slice_arg(texts, n_texts, "texts")?;
        let corpus = ptrs
            .iter()
            .map(|&p| str_arg(p, "text"))
            .collect::<Result<Vec<_>, _>>()?;
        if out.is_null() {
            return Err(fail(SsStatus::NullPointer, "out is null"));
        }
        let v = BpeVocab::train(&corpus, vocab_size).map_err(lib)?;
        *out = Box::into_raw(Box::new(SsTokenizer(v)));
        Ok(())
    })
}

/// # Safety
/// `tok` must be a tokenizer handle or NULL; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ss_tokenizer_save(tok: *const SsTokenizer, path: *const c_char) -> SsStatus {
    guard(|| {
        let tok = handle(tok, "tokenizer")?;
        let path = str_arg(path, "path")?;
        tok.0.save(&PathBuf::from(path)).map_err(lib)
    })
}

/// Vocabulary size, or 0 for a NULL handle.
///
/// # Safety
/// `tok` must be a tokenizer handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ss_tokenizer_vocab_size(tok: *const SsTokenizer) -> usize {
    tok.as_ref().map_or(0, |t| t.0.vocab_size())
}

/// Encodes UTF-8 `text` into `ids` (capacity `cap`).
///
/// # Safety
/// `ids` must hold `cap` writable elements; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ss_tokenizer_encode(
    tok: *const SsTokenizer,
    text: *const c_char,
    ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> SsStatus {
    guard(|| {
        let tok = handle(tok, "tokenizer")?;
        let text = str_arg(text, "text")?;
        write_out(&tok.0.encode(text), ids, cap, out_len)
    })
}

/// Decodes `ids` into a NUL-terminated string in `buf`. Special tokens are
/// dropped; bytes that are not valid UTF-8 are replaced.
///
/// # Safety
/// `ids` must hold `n` elements and `buf` `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ss_tokenizer_decode(
    tok: *const SsTokenizer,
    ids: *const u32,
    n: usize,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> SsStatus {
    guard(|| {
        let tok = handle(tok, "tokenizer")?;
        let ids = slice_arg(ids, n, "ids")?;
        let text = tok.0.decode(ids).map_err(lib)?;
        write_str(&text, buf, cap, out_len)
    })
}

/// # Safety
/// `tok` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_tokenizer_free(tok: *mut SsTokenizer) {
    if !tok.is_null() {
        drop(Box::from_raw(tok));
    }
}

/// Loads parameters from an `ssckpt-v1` checkpoint, verifying its digest.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(fail(SsStatus::NullPointer, "out is null"));
        }
        let (params, _, _) = load_checkpoint(&PathBuf::from(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(SsModel(params)));
        Ok(())
    })
}

/// Hex SHA-256 digest of all parameters (64 characters plus NUL).
///
/// # Safety
/// `buf` must hold `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ss_model_digest(
    model: *const SsModel,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> SsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        write_str(&m.0.digest(), buf, cap, out_len)
    })
}

/// Vocabulary size of the model, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be a model handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ss_model_vocab_size(model: *const SsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().vocab_size)
}

/// Summed log-probability of `ids` after BOS, optionally conditioned on the
/// PPM image at `image_path` (NULL for text only).
///
/// # Safety
/// `ids` must hold `n` elements; `image_path` is NULL or NUL-terminated;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_model_log_prob(
    model: *const SsModel,
    ids: *const u32,
    n: usize,
    image_path: *const c_char,
    out: *mut f64,
) -> SsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ids = slice_arg(ids, n, "ids")?;
        if out.is_null() {
            return Err(fail(SsStatus::NullPointer, "out is null"));
        }
        let image = if image_path.is_null() {
            None
        } else {
            let p = PathBuf::from(str_arg(image_path, "image_path")?);
            let img = load_ppm(&p, m.0.config().image_side).map_err(lib)?;
            Some(encode_grouped(&m.0, &img).map_err(lib)?)
        };
        *out = sequence_log_prob(&m.0, ids, image.as_ref()).map_err(lib)?;
        Ok(())
    })
}

/// Temperature, top-k and nucleus filtering of `n` logits into `probs`.
///
/// # Safety
/// `logits` and `probs` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn ss_filter_logits(
    logits: *const f64,
    n: usize,
    temperature: f64,
    top_k: usize,
    top_p: f64,
    probs: *mut f64,
) -> SsStatus {
    guard(|| {
        let z = slice_arg(logits, n, "logits")?;
        if z.is_empty() {
            return Err(fail(SsStatus::Config, "no logits"));
        }
        if probs.is_null() {
            return Err(fail(SsStatus::NullPointer, "probs is null"));
        }
        let cfg = SamplerConfig {
            temperature,
            top_k,
            top_p,
            ..Default::default()
        };
        if !(temperature > 0.0) || top_k == 0 || top_k > n || !(top_p > 0.0 && top_p <= 1.0) {
            return Err(fail(SsStatus::Config, "need temperature > 0, 1 <= top_k <= n, 0 < top_p <= 1"));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(fail(SsStatus::Contract, "logits must be finite"));
        }
        let d = filter_logits(z, &cfg);
        ptr::copy_nonoverlapping(d.as_ptr(), probs, n);
        Ok(())
    })
}

/// Samples a caption for the PPM image at `image_path` with the default
/// sampler settings and writes it NUL-terminated into `buf`.
///
/// # Safety
/// Handles must be valid; `buf` must hold `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ss_model_caption(
    model: *const SsModel,
    tok: *const SsTokenizer,
    image_path: *const c_char,
    seed: u64,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> SsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let t = handle(tok, "tokenizer")?;
        let p = PathBuf::from(str_arg(image_path, "image_path")?);
        let img = load_ppm(&p, m.0.config().image_side).map_err(lib)?;
        let grouped = encode_grouped(&m.0, &img).map_err(lib)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap_cfg = SamplerConfig {
            top_k: SamplerConfig::default().top_k.min(m.0.config().vocab_size),
            ..Default::default()
        };
        let c = generate_caption(&m.0, &grouped, &t.0, &cap_cfg, &mut rng).map_err(lib)?;
        write_str(&c.text, buf, cap, out_len)
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
