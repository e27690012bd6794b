//! C ABI over the archsketch pipeline.
//!
//! Objects are opaque handles created by `*_new`/`*_load` and released by the
//! matching `*_free`. Every fallible call returns an [`ArchStatus`]; on
//! failure the reason is kept per thread and read with
//! [`arch_last_error_message`]. Output buffers follow one rule: pass a null
//! buffer (or one too small) to learn the required size through `out_len`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use archsketch::diffusion::Checkpoint;
use archsketch::imaging::{binarize, load_image, BinarySketch, ColorImage};
use archsketch::metrics;
use archsketch::pipeline::{ComposeMode, ComposeRequest, GenerateRequest, PipelineError, RetrieveRequest, Workspace};
use archsketch::retrieval::ComponentIndex;
use archsketch::segmenter::SegPrompt;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    NotFound = 4,
    Pipeline = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A loaded component index.
pub struct ArchIndex(ComponentIndex);

/// A loaded diffusion checkpoint.
pub struct ArchModel(Checkpoint);

/// One refinement session.
pub struct ArchWorkspace(Workspace);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: ArchStatus, msg: impl Into<String>) -> ArchStatus {
    set_error(msg);
    status
}

fn pipeline_status(e: PipelineError) -> ArchStatus {
    let status = match e {
        PipelineError::UnknownRegion(_) | PipelineError::UnknownComponent(_) => ArchStatus::NotFound,
        _ => ArchStatus::Pipeline,
    };
    fail(status, format!("{}: {e}", e.stage()))
}

/// Runs `f`, turning panics into [`ArchStatus::Panic`].
fn guard(f: impl FnOnce() -> ArchStatus) -> ArchStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == ArchStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(ArchStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, ArchStatus> {
    if p.is_null() {
        return Err(fail(ArchStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(ArchStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

/// Copies `bytes` out under the buffer rule.
///
/// # Safety
/// `buf` is null or valid for `cap` bytes; `out_len` is null or writable.
unsafe fn copy_out(bytes: &[u8], buf: *mut u8, cap: usize, out_len: *mut usize) -> ArchStatus {
    if !out_len.is_null() {
        *out_len = bytes.len();
    }
    if buf.is_null() || cap < bytes.len() {
        return fail(ArchStatus::BufferTooSmall, format!("need {} bytes", bytes.len()));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    ArchStatus::Ok
}

macro_rules! try_arg {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! handle {
    ($p:expr, $name:literal) => {{
        if $p.is_null() {
            return fail(ArchStatus::NullArgument, concat!($name, " is null"));
        }
        &mut *$p
    }};
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn arch_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (NUL-terminated) into
/// `buf` and returns the length without the NUL. With a null or short
/// buffer nothing is written and the required length is still returned.
///
/// # Safety
/// `buf` is null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn arch_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > e.len() {
            std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), e.len());
            *buf.add(e.len()) = 0;
        }
        e.len()
    })
}

// ---------------------------------------------------------------------------
// Index and model

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn arch_index_load(path: *const c_char, out: *mut *mut ArchIndex) -> ArchStatus {
    guard(|| {
        let path = try_arg!(str_arg(path, "path"));
        if out.is_null() {
            return fail(ArchStatus::NullArgument, "out is null");
        }
        if !Path::new(path).exists() {
            return fail(ArchStatus::NotFound, format!("index not found: {path}"));
        }
        match ComponentIndex::load(path) {
            Ok(i) => {
                *out = Box::into_raw(Box::new(ArchIndex(i)));
                ArchStatus::Ok
            }
            Err(e) => fail(ArchStatus::Io, format!("index {path}: {e}")),
        }
    })
}

/// Number of components in the index (0 for null).
///
/// # Safety
/// `index` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn arch_index_len(index: *const ArchIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.len())
}

/// # Safety
/// `index` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn arch_index_free(index: *mut ArchIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn arch_model_load(path: *const c_char, out: *mut *mut ArchModel) -> ArchStatus {
    guard(|| {
        let path = try_arg!(str_arg(path, "path"));
        if out.is_null() {
            return fail(ArchStatus::NullArgument, "out is null");
        }
        if !Path::new(path).exists() {
            return fail(ArchStatus::NotFound, format!("checkpoint not found: {path}"));
        }
        match Checkpoint::load(path) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(ArchModel(c)));
                ArchStatus::Ok
            }
            Err(e) => fail(ArchStatus::Io, format!("checkpoint {path}: {e}")),
        }
    })
}

/// Square resolution the model generates at (0 for null).
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn arch_model_resolution(model: *const ArchModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.params.config.resolution)
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn arch_model_free(model: *mut ArchModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---------------------------------------------------------------------------
// Workspace

/// Starts a session from a row-major ink mask (`nonzero` = ink).
///
/// # Safety
/// `ink` is valid for `width * height` bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn arch_workspace_new(
    width: usize,
    height: usize,
    ink: *const u8,
    out: *mut *mut ArchWorkspace,
) -> ArchStatus {
    guard(|| {
        if ink.is_null() || out.is_null() {
            return fail(ArchStatus::NullArgument, "ink or out is null");
        }
        let n = match width.checked_mul(height) {
            Some(n) if n > 0 => n,
            _ => return fail(ArchStatus::InvalidArgument, "zero-dimension image"),
        };
        let bits = std::slice::from_raw_parts(ink, n).iter().map(|&b| b != 0).collect();
        match BinarySketch::from_ink(width, height, bits) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(ArchWorkspace(Workspace::new(s))));
                ArchStatus::Ok
            }
            Err(e) => fail(ArchStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Starts a session from a PNG or PGM file, binarized.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn arch_workspace_load(path: *const c_char, out: *mut *mut ArchWorkspace) -> ArchStatus {
    guard(|| {
        let path = try_arg!(str_arg(path, "path"));
        if out.is_null() {
            return fail(ArchStatus::NullArgument, "out is null");
        }
        match load_image(path) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(ArchWorkspace(Workspace::new(binarize(&g)))));
                ArchStatus::Ok
            }
            Err(e) => fail(ArchStatus::Io, format!("{path}: {e}")),
        }
    })
}

/// # Safety
/// `ws` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn arch_workspace_free(ws: *mut ArchWorkspace) {
    if !ws.is_null() {
        drop(Box::from_raw(ws));
    }
}

/// Segments with a JSON prompt such as
/// `{"points":[{"x":3,"y":4,"label":"foreground"}],"boxes":[]}`.
///
/// # Safety
/// `ws` is a live handle, `prompt_json` a NUL-terminated string and
/// `out_region` writable.
#[no_mangle]
pub unsafe extern "C" fn arch_workspace_segment(
    ws: *mut ArchWorkspace,
    prompt_json: *const c_char,
    out_region: *mut usize,
) -> ArchStatus {
    guard(|| {
        let ws = handle!(ws, "workspace");
        let text = try_arg!(str_arg(prompt_json, "prompt_json"));
        if out_region.is_null() {
            return fail(ArchStatus::NullArgument, "out_region is null");
        }
        let prompt: SegPrompt = match serde_json::from_str(text) {
            Ok(p) => p,
            Err(e) => return fail(ArchStatus::InvalidArgument, format!("prompt: {e}")),
        };
        match ws.0.segment(&prompt) {
            Ok(r) => {
                *out_region = r;
                ArchStatus::Ok
            }
            Err(e) => pipeline_status(e),
        }
    })
}

/// Ranks components for a region. Up to `capacity` ids and similarities are
/// written; `out_count` receives how many.
///
/// # Safety
/// Handles are live; `query` is NUL-terminated; `out_ids` and `out_sims` are
/// valid for `capacity` elements; `out_count` is writable.
#[no_mangle]
pub unsafe extern "C" fn arch_workspace_retrieve(
    ws: *mut ArchWorkspace,
    index: *const ArchIndex,
    region: usize,
    query: *const c_char,
    top_k: usize,
    out_ids: *mut u64,
    out_sims: *mut f64,
    capacity: usize,
    out_count: *mut usize,
) -> ArchStatus {
    guard(|| {
        let ws = handle!(ws, "workspace");
        let Some(index) = index.as_ref() else {
            return fail(ArchStatus::NullArgument, "index is null");
        };
        let query = try_arg!(str_arg(query, "query"));
        if out_count.is_null() || (capacity > 0 && (out_ids.is_null() || out_sims.is_null())) {
            return fail(ArchStatus::NullArgument, "output pointer is null");
        }
        let req = RetrieveRequest { region_id: region, query: query.to_string(), top_k };
        match ws.0.retrieve(&index.0, &req) {
            Ok(c) => {
                let n = c.len().min(capacity);
                for (i, cand) in c.iter().take(n).enumerate() {
                    *out_ids.add(i) = cand.component_id;
                    *out_sims.add(i) = cand.similarity;
                }
                *out_count = n;
                ArchStatus::Ok
            }
            Err(e) => pipeline_status(e),
        }
    })
}

/// Composites a component offered by the last retrieval for `region`.
///
/// # Safety
/// Handles are live.
#[no_mangle]
pub unsafe extern "C" fn arch_workspace_compose(
    ws: *mut ArchWorkspace,
    index: *const ArchIndex,
    region: usize,
    component_id: u64,
) -> ArchStatus {
    guard(|| {
        let ws = handle!(ws, "workspace");
        let Some(index) = index.as_ref() else {
            return fail(ArchStatus::NullArgument, "index is null");
        };
        let req = ComposeRequest {
            region_id: region,
            component_id,
            mode: ComposeMode::Composite,
            prompt: String::new(),
            steps: 1,
            seed: 0,
        };
        match ws.0.compose(&index.0, None, &req) {
            Ok(_) => ArchStatus::Ok,
            Err(e) => pipeline_status(e),
        }
    })
}

/// Restores the sketch from before the last compose.
///
/// # Safety
/// `ws` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn arch_workspace_undo(ws: *mut ArchWorkspace) -> ArchStatus {
    guard(|| {
        let ws = handle!(ws, "workspace");
        match ws.0.undo() {
            Ok(_) => ArchStatus::Ok,
            Err(e) => pipeline_status(e),
        }
    })
}

/// Renders the detailed sketch with the model.
///
/// # Safety
/// Handles are live; `prompt` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn arch_workspace_generate(
    ws: *mut ArchWorkspace,
    model: *const ArchModel,
    prompt: *const c_char,
    steps: usize,
    seed: u64,
) -> ArchStatus {
    guard(|| {
        let ws = handle!(ws, "workspace");
        let Some(model) = model.as_ref() else {
            return fail(ArchStatus::NullArgument, "model is null");
        };
        let prompt = try_arg!(str_arg(prompt, "prompt"));
        let req = GenerateRequest { prompt: prompt.to_string(), steps, seed };
        match ws.0.generate(&model.0, &req) {
            Ok(_) => ArchStatus::Ok,
            Err(e) => pipeline_status(e),
        }
    })
}

/// PNG bytes of a session image: `rough.png`, `detailed.png`, `render.png`
/// or `region-<id>.png`.
///
/// # Safety
/// `ws` is live; `name` is NUL-terminated; `buf` is null or valid for `cap`
/// bytes; `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn arch_workspace_image_png(
    ws: *const ArchWorkspace,
    name: *const c_char,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> ArchStatus {
    guard(|| {
        let Some(ws) = ws.as_ref() else {
            return fail(ArchStatus::NullArgument, "workspace is null");
        };
        let name = try_arg!(str_arg(name, "name"));
        if out_len.is_null() {
            return fail(ArchStatus::NullArgument, "out_len is null");
        }
        match ws.0.image_png(name) {
            Some(bytes) => copy_out(&bytes, buf, cap, out_len),
            None => fail(ArchStatus::NotFound, format!("no image {name:?}")),
        }
    })
}

// ---------------------------------------------------------------------------
// Metrics on raw buffers

/// Builds a channel-planar image from `width * height * channels` samples.
unsafe fn image_arg(p: *const f64, width: usize, height: usize, channels: usize) -> Result<ColorImage, ArchStatus> {
    if p.is_null() {
        return Err(fail(ArchStatus::NullArgument, "image is null"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .filter(|&n| n > 0)
        .ok_or_else(|| fail(ArchStatus::InvalidArgument, "zero-dimension image"))?;
    let data = std::slice::from_raw_parts(p, n).to_vec();
    ColorImage::new(width, height, channels, data).map_err(|e| fail(ArchStatus::InvalidArgument, e.to_string()))
}

/// PSNR in dB between two planar images (identical images give 100).
///
/// # Safety
/// `a` and `b` are valid for `width * height * channels` doubles; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn arch_psnr(
    a: *const f64,
    b: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    max_value: f64,
    out: *mut f64,
) -> ArchStatus {
    guard(|| {
        let a = try_arg!(image_arg(a, width, height, channels));
        let b = try_arg!(image_arg(b, width, height, channels));
        if out.is_null() {
            return fail(ArchStatus::NullArgument, "out is null");
        }
        match metrics::psnr(&a, &b, max_value) {
            Ok(v) => {
                *out = v;
                ArchStatus::Ok
            }
            Err(e) => fail(ArchStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Mean SSIM between two planar images with samples in `[0, 1]`.
///
/// # Safety
/// As for [`arch_psnr`].
#[no_mangle]
pub unsafe extern "C" fn arch_ssim(
    a: *const f64,
    b: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    out: *mut f64,
) -> ArchStatus {
    guard(|| {
        let a = try_arg!(image_arg(a, width, height, channels));
        let b = try_arg!(image_arg(b, width, height, channels));
        if out.is_null() {
            return fail(ArchStatus::NullArgument, "out is null");
        }
        match metrics::ssim(&a, &b) {
            Ok(v) => {
                *out = v;
                ArchStatus::Ok
            }
            Err(e) => fail(ArchStatus::InvalidArgument, e.to_string()),
        }
    })
}
