//! C interface for embedding the model in other runtimes: build or load
//! a model, attach adapter files, generate text. Handles are opaque,
//! failures come back as status codes, and `alab_last_error` carries the
//! message for the most recent failure on the calling thread. No call
//! unwinds across the boundary.

use adapterlab::adapters::load_adapter_set;
use adapterlab::model::{Decoder, ModelConfig, TinyLm};
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

/// Outcome of a call. Anything but `Ok` leaves a message in
/// [`alab_last_error`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlabStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The model configuration was rejected.
    BadConfig = 3,
    /// A file could not be read, written, or decoded.
    Io = 4,
    /// The operation itself failed (bad attach point, generation error).
    Runtime = 5,
    /// A bug: the library panicked. The handle is still safe to free.
    Panic = 6,
}

/// An owned model plus whatever adapters are attached. Create with
/// [`alab_model_new`] or [`alab_model_load`], release with
/// [`alab_model_free`].
pub struct AlabModel {
    inner: TinyLm,
}

thread_local! {
    static LAST_ERROR: std::cell::RefCell<CString> =
        std::cell::RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let clean: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(clean).expect("nul bytes stripped");
    });
}

fn fail(status: AlabStatus, message: &str) -> AlabStatus {
    set_error(message);
    status
}

/// Runs a body that may panic; panics become `AlabStatus::Panic`.
fn guarded(body: impl FnOnce() -> AlabStatus) -> AlabStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let what = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            fail(AlabStatus::Panic, &what)
        }
    }
}

/// `path` and other string arguments must be NUL-terminated UTF-8.
unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, (AlabStatus, String)> {
    if ptr.is_null() {
        return Err((AlabStatus::NullArgument, format!("{name} is null")));
    }
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| (AlabStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

/// Message for the most recent failure on this thread. Never null;
/// empty before the first failure. The pointer stays valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn alab_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn alab_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Builds a fresh model. `out` receives the handle on `Ok` and is left
/// untouched otherwise.
#[no_mangle]
pub extern "C" fn alab_model_new(
    dim: usize,
    n_layers: usize,
    n_heads: usize,
    context_len: usize,
    seed: u64,
    out: *mut *mut AlabModel,
) -> AlabStatus {
    guarded(|| {
        if out.is_null() {
            return fail(AlabStatus::NullArgument, "out is null");
        }
        let config = ModelConfig { dim, n_layers, n_heads, context_len, seed, ..ModelConfig::default() };
        match TinyLm::new(config) {
            Ok(inner) => {
                let handle = Box::into_raw(Box::new(AlabModel { inner }));
                unsafe { out.write(handle) };
                AlabStatus::Ok
            }
            Err(e) => fail(AlabStatus::BadConfig, &e.to_string()),
        }
    })
}

/// Loads a model saved by [`alab_model_save`].
#[no_mangle]
pub extern "C" fn alab_model_load(path: *const c_char, out: *mut *mut AlabModel) -> AlabStatus {
    guarded(|| {
        if out.is_null() {
            return fail(AlabStatus::NullArgument, "out is null");
        }
        let path = match unsafe { utf8_arg(path, "path") } {
            Ok(p) => p,
            Err((status, what)) => return fail(status, &what),
        };
        match TinyLm::load(Path::new(path)) {
            Ok(inner) => {
                let handle = Box::into_raw(Box::new(AlabModel { inner }));
                unsafe { out.write(handle) };
                AlabStatus::Ok
            }
            Err(e) => fail(AlabStatus::Io, &e.to_string()),
        }
    })
}

/// Writes the base weights (adapters excluded) to `path`.
#[no_mangle]
pub extern "C" fn alab_model_save(model: *const AlabModel, path: *const c_char) -> AlabStatus {
    guarded(|| {
        let Some(model) = (unsafe { model.as_ref() }) else {
            return fail(AlabStatus::NullArgument, "model is null");
        };
        let path = match unsafe { utf8_arg(path, "path") } {
            Ok(p) => p,
            Err((status, what)) => return fail(status, &what),
        };
        match model.inner.save(Path::new(path)) {
            Ok(()) => AlabStatus::Ok,
            Err(e) => fail(AlabStatus::Io, &e.to_string()),
        }
    })
}

/// Releases a handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn alab_model_free(model: *mut AlabModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Attaches every adapter in the file to its named point. Points that
/// already hold an adapter reject the attach.
#[no_mangle]
pub extern "C" fn alab_model_attach_file(model: *mut AlabModel, path: *const c_char) -> AlabStatus {
    guarded(|| {
        let Some(model) = (unsafe { model.as_mut() }) else {
            return fail(AlabStatus::NullArgument, "model is null");
        };
        let path = match unsafe { utf8_arg(path, "path") } {
            Ok(p) => p,
            Err((status, what)) => return fail(status, &what),
        };
        let set = match load_adapter_set(Path::new(path)) {
            Ok(set) => set,
            Err(e) => return fail(AlabStatus::Io, &e.to_string()),
        };
        for (name, spec) in set {
            if let Err(e) = model.inner.attach(&name, spec) {
                return fail(AlabStatus::Runtime, &e.to_string());
            }
        }
        AlabStatus::Ok
    })
}

/// Detaches every adapter, restoring the base model.
#[no_mangle]
pub extern "C" fn alab_model_detach_all(model: *mut AlabModel) -> AlabStatus {
    guarded(|| {
        let Some(model) = (unsafe { model.as_mut() }) else {
            return fail(AlabStatus::NullArgument, "model is null");
        };
        model.inner.detach_all();
        AlabStatus::Ok
    })
}

/// Greedy completion of a UTF-8 prompt. On `Ok`, `out` receives a
/// NUL-terminated string owned by the caller; release it with
/// [`alab_string_free`].
#[no_mangle]
pub extern "C" fn alab_model_complete(
    model: *const AlabModel,
    prompt: *const c_char,
    max_new_tokens: usize,
    out: *mut *mut c_char,
) -> AlabStatus {
    guarded(|| {
        let Some(model) = (unsafe { model.as_ref() }) else {
            return fail(AlabStatus::NullArgument, "model is null");
        };
        if out.is_null() {
            return fail(AlabStatus::NullArgument, "out is null");
        }
        let prompt = match unsafe { utf8_arg(prompt, "prompt") } {
            Ok(p) => p,
            Err((status, what)) => return fail(status, &what),
        };
        match model.inner.complete_text(prompt, max_new_tokens, Decoder::Greedy) {
            Ok(text) => {
                // The byte tokenizer can emit any byte; NUL would truncate
                // the C string, so it is dropped rather than round-tripped.
                let clean: String = text.chars().filter(|&c| c != '\0').collect();
                let owned = CString::new(clean).expect("nul bytes stripped");
                unsafe { out.write(owned.into_raw()) };
                AlabStatus::Ok
            }
            Err(e) => fail(AlabStatus::Runtime, &e.to_string()),
        }
    })
}

/// Frees a string returned by [`alab_model_complete`]. Null is a no-op.
#[no_mangle]
pub extern "C" fn alab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn new_model() -> *mut AlabModel {
        let mut handle: *mut AlabModel = ptr::null_mut();
        let status = alab_model_new(16, 1, 2, 64, 7, &mut handle);
        assert_eq!(status, AlabStatus::Ok);
        assert!(!handle.is_null());
        handle
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(alab_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn lifecycle_and_completion() {
        let model = new_model();
        let prompt = CString::new("hello").unwrap();
        let mut out: *mut c_char = ptr::null_mut();
        let status = alab_model_complete(model, prompt.as_ptr(), 8, &mut out);
        assert_eq!(status, AlabStatus::Ok);
        assert!(!out.is_null());
        let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
        // Up to 8 tokens; a lone high byte decodes to one replacement char.
        assert!(text.chars().count() <= 8);
        alab_string_free(out);

        // Deterministic: the same prompt completes identically.
        let mut again: *mut c_char = ptr::null_mut();
        assert_eq!(alab_model_complete(model, prompt.as_ptr(), 8, &mut again), AlabStatus::Ok);
        assert_eq!(text, unsafe { CStr::from_ptr(again) }.to_str().unwrap());
        alab_string_free(again);
        alab_model_free(model);
    }

    #[test]
    fn null_arguments_are_reported_not_fatal() {
        let mut out: *mut AlabModel = ptr::null_mut();
        assert_eq!(
            alab_model_load(ptr::null(), &mut out),
            AlabStatus::NullArgument
        );
        assert_eq!(last_error(), "path is null");
        assert!(out.is_null());

        let model = new_model();
        let mut text: *mut c_char = ptr::null_mut();
        assert_eq!(
            alab_model_complete(ptr::null(), ptr::null(), 4, &mut text),
            AlabStatus::NullArgument
        );
        assert_eq!(
            alab_model_complete(model, ptr::null(), 4, &mut text),
            AlabStatus::NullArgument
        );
        assert!(text.is_null());
        alab_model_free(model);
        alab_model_free(ptr::null_mut());
        alab_string_free(ptr::null_mut());
    }

    #[test]
    fn bad_utf8_is_rejected() {
        let model = new_model();
        let bad = [0xffu8, 0xfe, 0x00];
        let mut out: *mut c_char = ptr::null_mut();
        let status =
            alab_model_complete(model, bad.as_ptr() as *const c_char, 4, &mut out);
        assert_eq!(status, AlabStatus::InvalidUtf8);
        assert_eq!(last_error(), "prompt is not valid UTF-8");
        alab_model_free(model);
    }

    #[test]
    fn bad_config_is_rejected_with_message() {
        let mut out: *mut AlabModel = ptr::null_mut();
        // dim not divisible by heads
        let status = alab_model_new(10, 1, 3, 64, 0, &mut out);
        assert_eq!(status, AlabStatus::BadConfig);
        assert!(out.is_null());
        assert!(!last_error().is_empty());
    }

    #[test]
    fn save_load_and_adapter_files_round_trip() {
        let dir = std::env::temp_dir().join(format!("alab-ffi-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let model_path = dir.join("base.model");
        let adapter_path = dir.join("warm.adapter");

        let model = new_model();
        let c_model_path = CString::new(model_path.to_str().unwrap()).unwrap();
        assert_eq!(alab_model_save(model, c_model_path.as_ptr()), AlabStatus::Ok);

        // A warm adapter written by the library shifts the completion;
        // detaching restores it.
        {
            use adapterlab::adapters::{save_adapter_set, AdapterSpec, LoraBlock};
            use adapterlab::tensor::{Prng, Tensor};
            let mut prng = Prng::new(3);
            let a = Tensor::gaussian(2, 16, 0.4, &mut prng);
            let b = Tensor::gaussian(16, 2, 0.4, &mut prng);
            let block = LoraBlock::from_parts(a, b, 8.0, false).unwrap();
            let mut set = adapterlab::adapters::AdapterSet::new();
            set.insert("layer0.attn.q".into(), AdapterSpec::Lora(block));
            save_adapter_set(&adapter_path, &set).unwrap();
        }

        let mut loaded: *mut AlabModel = ptr::null_mut();
        assert_eq!(alab_model_load(c_model_path.as_ptr(), &mut loaded), AlabStatus::Ok);

        let prompt = CString::new("abc").unwrap();
        let read = |m: *mut AlabModel| {
            let mut out: *mut c_char = ptr::null_mut();
            assert_eq!(alab_model_complete(m, prompt.as_ptr(), 12, &mut out), AlabStatus::Ok);
            let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
            alab_string_free(out);
            text
        };
        let base_text = read(model);
        assert_eq!(base_text, read(loaded), "loaded model must match the saved one");

        let c_adapter = CString::new(adapter_path.to_str().unwrap()).unwrap();
        assert_eq!(alab_model_attach_file(loaded, c_adapter.as_ptr()), AlabStatus::Ok);
        // Attaching the same point twice is an error, reported cleanly.
        assert_eq!(alab_model_attach_file(loaded, c_adapter.as_ptr()), AlabStatus::Runtime);
        assert_eq!(alab_model_detach_all(loaded), AlabStatus::Ok);
        assert_eq!(base_text, read(loaded), "detach must restore the base model");

        let missing = CString::new(dir.join("absent.adapter").to_str().unwrap()).unwrap();
        assert_eq!(alab_model_attach_file(loaded, missing.as_ptr()), AlabStatus::Io);

        alab_model_free(model);
        alab_model_free(loaded);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn version_is_a_static_string() {
        let v = unsafe { CStr::from_ptr(alab_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
