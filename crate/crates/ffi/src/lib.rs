//! C ABI over the adapter toolkit.
//!
//! Every fallible function returns a [`BloraStatus`]; on failure a message is
//! available from [`blora_last_error`] on the same thread. Adapters are opaque
//! [`BloraAdapter`] handles owned by the caller and released with
//! [`blora_adapter_free`]. Functions producing a new adapter write the handle
//! through an out-pointer and leave it untouched on failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use blora::adapter::{self, LoraAdapter, Role};
use blora::checkpoint::TensorFile;
use blora::topology::{self, BlockId};
use blora::{Error, ErrorKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BloraStatus {
    Ok = 0,
    /// Bad argument: unknown block, role, alpha out of range.
    Usage = 1,
    /// Unreadable or malformed file, unrecognized key.
    Format = 2,
    /// Adapter invariant broken: overlap, shape or rank mismatch.
    Invariant = 3,
    NullPointer = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BloraRole {
    Content = 0,
    Style = 1,
}

/// Opaque adapter handle.
pub struct BloraAdapter {
    inner: LoraAdapter,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', "\\0")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(BloraStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.kind() {
            ErrorKind::Usage => BloraStatus::Usage,
            ErrorKind::Format => BloraStatus::Format,
            ErrorKind::Invariant => BloraStatus::Invariant,
        };
        Failure(status, format!("{}: {e}", e.code()))
    }
}

fn null(what: &str) -> Failure {
    Failure(BloraStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BloraStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BloraStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            BloraStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(BloraStatus::Usage, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a>(h: *const BloraAdapter, what: &str) -> Result<&'a LoraAdapter, Failure> {
    h.as_ref().map(|a| &a.inner).ok_or_else(|| null(what))
}

unsafe fn emit(out: *mut *mut BloraAdapter, adapter: LoraAdapter) {
    *out = Box::into_raw(Box::new(BloraAdapter { inner: adapter }));
}

fn block_arg(index: u32) -> Result<BlockId, Failure> {
    Ok(BlockId::new(index as usize)?)
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn blora_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn blora_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads an adapter file in either naming scheme.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn blora_adapter_load(path: *const c_char, out: *mut *mut BloraAdapter) -> BloraStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let adapter = adapter::load_adapter(&TensorFile::read(path)?)?;
        emit(out, adapter);
        Ok(())
    })
}

/// Writes the adapter in canonical form.
///
/// # Safety
/// `adapter` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn blora_adapter_save(adapter: *const BloraAdapter, path: *const c_char) -> BloraStatus {
    guard(|| {
        let a = handle(adapter, "adapter")?;
        let path = path_arg(path, "path")?;
        adapter::save_adapter(a)?.write(path)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `adapter` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn blora_adapter_free(adapter: *mut BloraAdapter) {
    if !adapter.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(adapter))));
    }
}

/// Number of LoRA pairs; 0 for a null handle.
///
/// # Safety
/// `adapter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blora_adapter_stem_count(adapter: *const BloraAdapter) -> usize {
    adapter.as_ref().map_or(0, |a| a.inner.len())
}

/// Number of LoRA pairs in one block; 0 for a null handle or a block outside 0..=7.
///
/// # Safety
/// `adapter` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blora_adapter_block_stem_count(adapter: *const BloraAdapter, block: u32) -> usize {
    match (adapter.as_ref(), BlockId::new(block as usize)) {
        (Some(a), Ok(b)) => a.inner.stems_in_block(b).len(),
        _ => 0,
    }
}

/// Keeps only the stems of `block`, tagged with `role`.
///
/// # Safety
/// `adapter` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn blora_adapter_extract(
    adapter: *const BloraAdapter,
    block: u32,
    role: BloraRole,
    out: *mut *mut BloraAdapter,
) -> BloraStatus {
    guard(|| {
        let a = handle(adapter, "adapter")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let role = match role {
            BloraRole::Content => Role::Content,
            BloraRole::Style => Role::Style,
        };
        let b = adapter::extract_blora(a, block_arg(block)?, role)?;
        emit(out, b.into_adapter());
        Ok(())
    })
}

/// Union of a content and a style adapter with disjoint stems.
///
/// # Safety
/// Both handles must be live and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn blora_adapter_combine(
    content: *const BloraAdapter,
    style: *const BloraAdapter,
    out: *mut *mut BloraAdapter,
) -> BloraStatus {
    guard(|| {
        let c = handle(content, "content")?;
        let s = handle(style, "style")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (combined, _warnings) = adapter::combine(c, s)?;
        emit(out, combined);
        Ok(())
    })
}

/// Multiplies every pair's strength by `alpha`.
///
/// # Safety
/// `adapter` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn blora_adapter_scale(
    adapter: *const BloraAdapter,
    alpha: f32,
    out: *mut *mut BloraAdapter,
) -> BloraStatus {
    guard(|| {
        let a = handle(adapter, "adapter")?;
        if out.is_null() {
            return Err(null("out"));
        }
        emit(out, adapter::scale_adapter(a, alpha)?);
        Ok(())
    })
}

/// Writes `base + alpha·ΔW` for every adapted weight of the base file to `out_path`.
///
/// # Safety
/// `adapter` must be a live handle; both paths NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn blora_merge_file(
    base_path: *const c_char,
    adapter: *const BloraAdapter,
    alpha: f32,
    out_path: *const c_char,
) -> BloraStatus {
    guard(|| {
        let base = path_arg(base_path, "base_path")?;
        let a = handle(adapter, "adapter")?;
        let out = path_arg(out_path, "out_path")?;
        adapter::merge_into_base(&TensorFile::read(base)?, a, alpha)?.write(out)?;
        Ok(())
    })
}

/// Attention layers in `block`; 0 outside 0..=7.
#[no_mangle]
pub extern "C" fn blora_layer_count(block: u32) -> usize {
    BlockId::new(block as usize).map_or(0, topology::layer_count)
}

/// Block index of an adapter tensor key or stem, in either naming scheme.
///
/// # Safety
/// `key` must be a NUL-terminated string and `out_block` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn blora_block_of_key(key: *const c_char, out_block: *mut u32) -> BloraStatus {
    guard(|| {
        let key = path_arg(key, "key")?;
        if out_block.is_null() {
            return Err(null("out_block"));
        }
        let key = key.to_str().expect("came from str");
        *out_block = topology::block_of_key(key)?.index() as u32;
        Ok(())
    })
}
