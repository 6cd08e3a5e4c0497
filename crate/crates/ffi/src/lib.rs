//! C ABI over `card-core`.
//!
//! Objects are opaque handles created by `card_*_new`/`_load`/`_parse`
//! functions and released with the matching `_free`. Every fallible call
//! returns a [`CardStatus`]; on failure the message is available from
//! [`card_last_error`] until the next failing call on the same thread.
//! Strings returned through out-pointers are owned by the caller and must be
//! released with [`card_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use card_core::analysis::pearson;
use card_core::generator::{generate, GeneratorParams};
use card_core::graph::{parse_matrix, AnchorKind, AnchorTopology, CommTopology, EdgeProbabilityMatrix};
use card_core::manifest::Manifest;
use card_core::{CardError, Query};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CardStatus {
    Ok = 0,
    Io = 1,
    Parse = 2,
    Validation = 3,
    Numeric = 4,
    NullPointer = 5,
    Utf8 = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CardAnchor {
    Chain = 0,
    Star = 1,
    FullyConnected = 2,
}

impl From<CardAnchor> for AnchorKind {
    fn from(a: CardAnchor) -> Self {
        match a {
            CardAnchor::Chain => AnchorKind::Chain,
            CardAnchor::Star => AnchorKind::Star,
            CardAnchor::FullyConnected => AnchorKind::FullyConnected,
        }
    }
}

pub struct CardManifest(Manifest);

pub struct CardParams(GeneratorParams);

pub struct CardTopology(CommTopology);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(CardStatus, String);

impl From<CardError> for Failure {
    fn from(e: CardError) -> Self {
        let status = match &e {
            CardError::Io { .. } => CardStatus::Io,
            CardError::Parse { .. } => CardStatus::Parse,
            CardError::NonFiniteGradient(_) => CardStatus::Numeric,
            _ => CardStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CardStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CardStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CardStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CardStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(CardStatus::Utf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failure on this thread, or null. Owned by the
/// library; valid until the next failing call.
#[no_mangle]
pub extern "C" fn card_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn card_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn card_manifest_parse(text: *const c_char, out: *mut *mut CardManifest) -> CardStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let m = Manifest::parse(str_arg(text, "text")?, "<memory>")?;
        *out = boxed(CardManifest(m));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn card_manifest_load(path: *const c_char, out: *mut *mut CardManifest) -> CardStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(CardManifest(Manifest::load(Path::new(str_arg(path, "path")?))?));
        Ok(())
    })
}

/// Number of agents, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live manifest handle.
#[no_mangle]
pub unsafe extern "C" fn card_manifest_agent_count(m: *const CardManifest) -> usize {
    m.as_ref().map_or(0, |m| m.0.roster.len())
}

/// # Safety
/// `m` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn card_manifest_free(m: *mut CardManifest) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Fresh parameters with the default dimensions.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn card_params_init(seed: u64, out: *mut *mut CardParams) -> CardStatus {
    guard(|| {
        *out_arg(out, "out")? = boxed(CardParams(GeneratorParams::with_default_dims(seed)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn card_params_load(path: *const c_char, out: *mut *mut CardParams) -> CardStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        *out = boxed(CardParams(GeneratorParams::load(Path::new(str_arg(path, "path")?))?));
        Ok(())
    })
}

/// # Safety
/// `p` must be a live params handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn card_params_save(p: *const CardParams, path: *const c_char) -> CardStatus {
    guard(|| {
        ref_arg(p, "params")?.0.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Hex SHA-256 of the checkpoint text; free with `card_string_free`.
///
/// # Safety
/// `p` must be a live params handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn card_params_digest(p: *const CardParams, out: *mut *mut c_char) -> CardStatus {
    guard(|| {
        let digest = ref_arg(p, "params")?.0.digest();
        *out_arg(out, "out")? = CString::new(digest).expect("hex has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn card_params_free(p: *mut CardParams) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Runs the generator. Writes the row-major n×n edge-probability matrix
/// into `matrix` (capacity `matrix_len`, at least n²) and the thresholded
/// topology into `out_topology`.
///
/// # Safety
/// Handles must be live; `query` NUL-terminated; `matrix` valid for
/// `matrix_len` writes; `out_topology` writable.
#[no_mangle]
pub unsafe extern "C" fn card_generate(
    params: *const CardParams,
    manifest: *const CardManifest,
    query: *const c_char,
    anchor: CardAnchor,
    tau: f64,
    matrix: *mut f64,
    matrix_len: usize,
    out_topology: *mut *mut CardTopology,
) -> CardStatus {
    guard(|| {
        let params = ref_arg(params, "params")?;
        let manifest = ref_arg(manifest, "manifest")?;
        let out = out_arg(out_topology, "out_topology")?;
        *out = ptr::null_mut();
        if matrix.is_null() {
            return Err(null("matrix"));
        }
        let n = manifest.0.roster.len();
        if matrix_len < n * n {
            return Err(Failure(
                CardStatus::BufferTooSmall,
                format!("matrix needs {} entries, got {matrix_len}", n * n),
            ));
        }
        let q = Query::new("query", str_arg(query, "query")?)?;
        let anchor = AnchorTopology::new(anchor.into(), n)?;
        let (s, topo) = generate(&manifest.0.roster, &manifest.0.conditions, &q, &anchor, &params.0, tau)?;
        std::slice::from_raw_parts_mut(matrix, n * n).copy_from_slice(s.as_slice());
        *out = boxed(CardTopology(topo));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a live topology handle.
#[no_mangle]
pub unsafe extern "C" fn card_topology_agent_count(t: *const CardTopology) -> usize {
    t.as_ref().map_or(0, |t| t.0.n())
}

/// # Safety
/// `t` must be null or a live topology handle.
#[no_mangle]
pub unsafe extern "C" fn card_topology_edge_count(t: *const CardTopology) -> usize {
    t.as_ref().map_or(0, |t| t.0.edges().len())
}

/// Edges are sorted by (from, to).
///
/// # Safety
/// `t` must be a live topology handle; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn card_topology_edge(
    t: *const CardTopology,
    index: usize,
    from: *mut usize,
    to: *mut usize,
    p: *mut f64,
) -> CardStatus {
    guard(|| {
        let t = ref_arg(t, "topology")?;
        let e = t.0.edges().get(index).ok_or_else(|| {
            Failure(CardStatus::Validation, format!("edge {index} out of range for {} edges", t.0.edges().len()))
        })?;
        *out_arg(from, "from")? = e.from;
        *out_arg(to, "to")? = e.to;
        *out_arg(p, "p")? = e.p;
        Ok(())
    })
}

/// Copies the execution order (n agent indices) into `order`.
///
/// # Safety
/// `t` must be a live topology handle; `order` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn card_topology_schedule(t: *const CardTopology, order: *mut usize, len: usize) -> CardStatus {
    guard(|| {
        let s = ref_arg(t, "topology")?.0.schedule();
        if order.is_null() {
            return Err(null("order"));
        }
        if len < s.len() {
            return Err(Failure(CardStatus::BufferTooSmall, format!("schedule needs {} entries, got {len}", s.len())));
        }
        std::slice::from_raw_parts_mut(order, s.len()).copy_from_slice(s);
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn card_topology_free(t: *mut CardTopology) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Parses a matrix in table or plain layout into `out` (row-major, capacity
/// `len`) and stores its size in `n`. The diagonal is written as 0.
///
/// # Safety
/// `text` NUL-terminated; `out` valid for `len` writes; `n` writable.
#[no_mangle]
pub unsafe extern "C" fn card_matrix_parse(
    text: *const c_char,
    out: *mut f64,
    len: usize,
    n: *mut usize,
) -> CardStatus {
    guard(|| {
        let m = parse_matrix(str_arg(text, "text")?, "<memory>")?.matrix;
        *out_arg(n, "n")? = m.n();
        if out.is_null() {
            return Err(null("out"));
        }
        if len < m.as_slice().len() {
            return Err(Failure(
                CardStatus::BufferTooSmall,
                format!("matrix needs {} entries, got {len}", m.as_slice().len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, m.as_slice().len()).copy_from_slice(m.as_slice());
        Ok(())
    })
}

/// Pearson r and two-sided p over the off-diagonal entries of two row-major
/// n×n matrices.
///
/// # Safety
/// `a` and `b` valid for n² reads; `r` and `p` writable.
#[no_mangle]
pub unsafe extern "C" fn card_pearson(a: *const f64, b: *const f64, n: usize, r: *mut f64, p: *mut f64) -> CardStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null("matrix"));
        }
        let len = n.checked_mul(n).ok_or_else(|| Failure(CardStatus::Validation, "n is too large".into()))?;
        let ma = EdgeProbabilityMatrix::from_values(n, std::slice::from_raw_parts(a, len).to_vec())?;
        let mb = EdgeProbabilityMatrix::from_values(n, std::slice::from_raw_parts(b, len).to_vec())?;
        let c = pearson(&ma, &mb)?;
        *out_arg(r, "r")? = c.r;
        *out_arg(p, "p")? = c.p;
        Ok(())
    })
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn card_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
