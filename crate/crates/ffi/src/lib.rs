//! C interface to `strider-core`.
//!
//! Every fallible call returns a [`StriderStatus`]. On failure the message is
//! kept per thread and can be fetched with [`strider_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use strider_core::lowering::{strided_q, StridedPattern};
use strider_core::network::{load_checkpoint, predict, save_checkpoint, Arch, LayerKind, Network};
use strider_core::pruning::PruneMaskSet;
use strider_core::quantization::{optimal_step, quantize_value};
use strider_core::tensor::{Rng, Tensor4};
use strider_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StriderStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque network handle. Create with [`strider_network_load`] or
/// [`strider_network_new`], release with [`strider_network_free`].
pub struct StriderNetwork {
    net: Network,
    mask: Option<PruneMaskSet>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> StriderStatus {
    match err {
        Error::Io { .. } => StriderStatus::Io,
        Error::BadMagic { .. } | Error::Version(_) | Error::Truncated { .. } | Error::Format { .. } => {
            StriderStatus::Format
        }
        Error::Shape(_) => StriderStatus::Shape,
        _ => StriderStatus::InvalidArgument,
    }
}

fn fail(status: StriderStatus, msg: impl Into<String>) -> StriderStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), StriderStatus>) -> StriderStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StriderStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(StriderStatus::Panic, "panic inside strider"),
    }
}

fn check(err: Error) -> StriderStatus {
    let s = status_of(&err);
    fail(s, err.to_string())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, StriderStatus> {
    if p.is_null() {
        return Err(fail(StriderStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(StriderStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn net_ref<'a>(h: *const StriderNetwork) -> Result<&'a StriderNetwork, StriderStatus> {
    h.as_ref().ok_or_else(|| fail(StriderStatus::NullPointer, "network handle is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], StriderStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(StriderStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], StriderStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(StriderStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, StriderStatus> {
    p.as_mut().ok_or_else(|| fail(StriderStatus::NullPointer, format!("{what} is null")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn strider_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf`.
///
/// Returns the length needed including the terminating NUL, or 0 when no
/// error is recorded. The copy is truncated when `buf_len` is too small.
///
/// # Safety
/// `buf` must be null or point to `buf_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn strider_last_error(buf: *mut c_char, buf_len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && buf_len > 0 {
            let n = bytes.len().min(buf_len);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint file, including its pruning mask if present.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_handle` writable.
#[no_mangle]
pub unsafe extern "C" fn strider_network_load(
    path: *const c_char,
    out_handle: *mut *mut StriderNetwork,
) -> StriderStatus {
    guard(|| {
        let path = PathBuf::from(c_str(path, "path")?);
        let slot = out(out_handle, "out_handle")?;
        let (net, mask) = load_checkpoint(&path).map_err(check)?;
        *slot = Box::into_raw(Box::new(StriderNetwork { net, mask }));
        Ok(())
    })
}

/// Builds a freshly initialized network, e.g. `"1-20-20-50-50-500-10"` with
/// kinds `"i-c5-p-c5-p-f-f"` and input size 28.
///
/// # Safety
/// `arch` and `kinds` must be NUL-terminated strings and `out_handle` writable.
#[no_mangle]
pub unsafe extern "C" fn strider_network_new(
    arch: *const c_char,
    kinds: *const c_char,
    input_size: u32,
    seed: u64,
    out_handle: *mut *mut StriderNetwork,
) -> StriderStatus {
    guard(|| {
        let arch = c_str(arch, "arch")?;
        let kinds = LayerKind::parse_list(c_str(kinds, "kinds")?).map_err(check)?;
        let slot = out(out_handle, "out_handle")?;
        let arch = Arch::parse(arch, &kinds, input_size as usize).map_err(check)?;
        let net = Network::init(&arch, &mut Rng::new(seed));
        *slot = Box::into_raw(Box::new(StriderNetwork { net, mask: None }));
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn strider_network_free(handle: *mut StriderNetwork) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Writes the network and its mask to a checkpoint file.
///
/// # Safety
/// `handle` must be valid and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn strider_network_save(handle: *const StriderNetwork, path: *const c_char) -> StriderStatus {
    guard(|| {
        let h = net_ref(handle)?;
        let path = PathBuf::from(c_str(path, "path")?);
        save_checkpoint(&path, &h.net, h.mask.as_ref()).map_err(check)
    })
}

/// # Safety
/// `handle` must be valid and `out_count` writable.
#[no_mangle]
pub unsafe extern "C" fn strider_network_param_count(
    handle: *const StriderNetwork,
    out_count: *mut u64,
) -> StriderStatus {
    guard(|| {
        let h = net_ref(handle)?;
        *out(out_count, "out_count")? = h.net.param_count() as u64;
        Ok(())
    })
}

/// Input channels, input side length and number of classes.
///
/// # Safety
/// `handle` must be valid and all out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn strider_network_dims(
    handle: *const StriderNetwork,
    out_channels: *mut u32,
    out_size: *mut u32,
    out_classes: *mut u32,
) -> StriderStatus {
    guard(|| {
        let arch = net_ref(handle)?.net.arch();
        *out(out_channels, "out_channels")? = arch.input_channels() as u32;
        *out(out_size, "out_size")? = arch.input_size() as u32;
        *out(out_classes, "out_classes")? = arch.classes() as u32;
        Ok(())
    })
}

fn input_tensor(net: &Network, input: &[f32], n: usize) -> Result<Tensor4, StriderStatus> {
    let arch = net.arch();
    let (c, s) = (arch.input_channels(), arch.input_size());
    if input.len() != n * c * s * s {
        return Err(fail(
            StriderStatus::Shape,
            format!("input holds {} values, expected {n}x{c}x{s}x{s}", input.len()),
        ));
    }
    Tensor4::from_vec([n, c, s, s], input.to_vec()).map_err(check)
}

/// Runs `n` samples (NCHW, row-major) and writes `n × classes` logits.
///
/// # Safety
/// `input` must hold `input_len` floats and `logits` `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn strider_network_forward(
    handle: *const StriderNetwork,
    input: *const f32,
    input_len: usize,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> StriderStatus {
    guard(|| {
        let h = net_ref(handle)?;
        let x = input_tensor(&h.net, slice(input, input_len, "input")?, n)?;
        let need = n * h.net.arch().classes();
        if logits_len < need {
            return Err(fail(StriderStatus::BufferTooSmall, format!("logits needs {need} floats")));
        }
        let dst = slice_mut(logits, logits_len, "logits")?;
        let y = h.net.forward(&x, h.mask.as_ref()).map_err(check)?;
        dst[..need].copy_from_slice(y.as_slice());
        Ok(())
    })
}

/// Predicted class of each of `n` samples.
///
/// # Safety
/// `input` must hold `input_len` floats and `labels` `n` entries.
#[no_mangle]
pub unsafe extern "C" fn strider_network_predict(
    handle: *const StriderNetwork,
    input: *const f32,
    input_len: usize,
    n: usize,
    labels: *mut u32,
) -> StriderStatus {
    guard(|| {
        let h = net_ref(handle)?;
        let x = input_tensor(&h.net, slice(input, input_len, "input")?, n)?;
        let dst = slice_mut(labels, n, "labels")?;
        let pred = predict(&h.net, &x, h.mask.as_ref()).map_err(check)?;
        for (d, p) in dst.iter_mut().zip(pred) {
            *d = p as u32;
        }
        Ok(())
    })
}

/// Step size minimizing the squared error of a `levels`-level quantizer.
///
/// # Safety
/// `weights` must hold `len` floats and `out_step` be writable.
#[no_mangle]
pub unsafe extern "C" fn strider_optimal_step(
    weights: *const f32,
    len: usize,
    levels: u32,
    out_step: *mut f32,
) -> StriderStatus {
    guard(|| {
        let w = slice(weights, len, "weights")?;
        let slot = out(out_step, "out_step")?;
        *slot = optimal_step(w, levels).map_err(check)?;
        Ok(())
    })
}

/// Quantizes `len` values into `dst`. A step of 0 copies the input.
///
/// # Safety
/// `src` and `dst` must each hold `len` floats; they may be the same buffer.
#[no_mangle]
pub unsafe extern "C" fn strider_quantize(
    src: *const f32,
    dst: *mut f32,
    len: usize,
    step: f32,
    levels: u32,
) -> StriderStatus {
    guard(|| {
        if levels % 2 == 0 || levels < 3 {
            return Err(fail(StriderStatus::InvalidArgument, format!("levels must be odd and >= 3, got {levels}")));
        }
        if !(step >= 0.0 && step.is_finite()) {
            return Err(fail(StriderStatus::InvalidArgument, format!("bad step {step}")));
        }
        if len > 0 && (src.is_null() || dst.is_null()) {
            return Err(fail(StriderStatus::NullPointer, "buffer is null"));
        }
        for i in 0..len {
            *dst.add(i) = quantize_value(*src.add(i), step, levels);
        }
        Ok(())
    })
}

/// Lowered matrix width for a `k × k` kernel with one (stride, offset)
/// pattern per input channel.
///
/// # Safety
/// `strides` and `offsets` must each hold `channels` bytes.
#[no_mangle]
pub unsafe extern "C" fn strider_strided_width(
    kernel: u32,
    strides: *const u8,
    offsets: *const u8,
    channels: usize,
    out_width: *mut u64,
) -> StriderStatus {
    guard(|| {
        let s = slice(strides, channels, "strides")?;
        let o = slice(offsets, channels, "offsets")?;
        let slot = out(out_width, "out_width")?;
        let k = kernel as usize;
        let mut patterns = Vec::with_capacity(channels);
        for (&stride, &offset) in s.iter().zip(o) {
            let p = StridedPattern::new(stride, offset).map_err(check)?;
            if k == 0 || offset as usize >= k * k {
                return Err(fail(StriderStatus::InvalidArgument, format!("offset {offset} outside {k}x{k} kernel")));
            }
            patterns.push(p);
        }
        *slot = strided_q(k, &patterns) as u64;
        Ok(())
    })
}
