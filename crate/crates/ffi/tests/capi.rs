use std::ffi::{c_char, CStr, CString};
use std::ptr;

use strider_ffi::*;

const ARCH: &str = "1-2-2-3-8-3";
const KINDS: &str = "i-c3-p-c2-f-f";

fn new_net(seed: u64) -> *mut StriderNetwork {
    let arch = CString::new(ARCH).unwrap();
    let kinds = CString::new(KINDS).unwrap();
    let mut h = ptr::null_mut();
    let s = unsafe { strider_network_new(arch.as_ptr(), kinds.as_ptr(), 8, seed, &mut h) };
    assert_eq!(s, StriderStatus::Ok);
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { strider_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn sample_input(n: usize) -> Vec<f32> {
    (0..n * 64).map(|i| ((i * 37 % 101) as f32) / 101.0).collect()
}

#[test]
fn dims_and_param_count() {
    let h = new_net(3);
    let (mut c, mut s, mut k, mut p) = (0u32, 0u32, 0u32, 0u64);
    unsafe {
        assert_eq!(strider_network_dims(h, &mut c, &mut s, &mut k), StriderStatus::Ok);
        assert_eq!(strider_network_param_count(h, &mut p), StriderStatus::Ok);
        strider_network_free(h);
    }
    assert_eq!((c, s, k), (1, 8, 3));
    // 2*9+2, 3*2*4+3, 8*12+8, 3*8+3
    assert_eq!(p, 20 + 27 + 104 + 27);
}

#[test]
fn forward_predict_and_save_load_agree() {
    let h = new_net(11);
    let x = sample_input(4);
    let mut logits = vec![0f32; 12];
    let mut labels = [0u32; 4];
    unsafe {
        assert_eq!(
            strider_network_forward(h, x.as_ptr(), x.len(), 4, logits.as_mut_ptr(), logits.len()),
            StriderStatus::Ok
        );
        assert_eq!(strider_network_predict(h, x.as_ptr(), x.len(), 4, labels.as_mut_ptr()), StriderStatus::Ok);
    }
    for (row, &l) in logits.chunks(3).zip(&labels) {
        let best = (0..3).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        assert_eq!(best as u32, l);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("n.spcn").to_str().unwrap()).unwrap();
    let mut h2 = ptr::null_mut();
    let mut again = vec![0f32; 12];
    unsafe {
        assert_eq!(strider_network_save(h, path.as_ptr()), StriderStatus::Ok);
        assert_eq!(strider_network_load(path.as_ptr(), &mut h2), StriderStatus::Ok);
        assert_eq!(
            strider_network_forward(h2, x.as_ptr(), x.len(), 4, again.as_mut_ptr(), again.len()),
            StriderStatus::Ok
        );
        strider_network_free(h);
        strider_network_free(h2);
    }
    assert_eq!(logits, again);
}

#[test]
fn errors_set_status_and_message() {
    let h = new_net(1);
    let x = sample_input(1);
    let mut logits = [0f32; 2];
    unsafe {
        let s = strider_network_forward(h, x.as_ptr(), x.len(), 1, logits.as_mut_ptr(), logits.len());
        assert_eq!(s, StriderStatus::BufferTooSmall);
        assert!(last_error().contains("3 floats"));

        let mut big = [0f32; 3];
        let s = strider_network_forward(h, x.as_ptr(), x.len() - 1, 1, big.as_mut_ptr(), 3);
        assert_eq!(s, StriderStatus::Shape);

        let mut p = 0u64;
        assert_eq!(strider_network_param_count(ptr::null(), &mut p), StriderStatus::NullPointer);
        assert!(last_error().contains("null"));
        strider_network_free(h);
        strider_network_free(ptr::null_mut());
    }

    let missing = CString::new("/nonexistent/x.spcn").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { strider_network_load(missing.as_ptr(), &mut out) }, StriderStatus::Io);
    assert!(out.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.spcn");
    std::fs::write(&junk, b"NOPE0000").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { strider_network_load(junk.as_ptr(), &mut out) }, StriderStatus::Format);

    let arch = CString::new("1-2").unwrap();
    let kinds = CString::new("i-c3-p").unwrap();
    let s = unsafe { strider_network_new(arch.as_ptr(), kinds.as_ptr(), 8, 0, &mut out) };
    assert_eq!(s, StriderStatus::InvalidArgument);
}

#[test]
fn last_error_truncates_into_small_buffer() {
    let mut p = 0u64;
    unsafe { strider_network_param_count(ptr::null(), &mut p) };
    let mut buf = [0x7f as c_char; 5];
    let need = unsafe { strider_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(need > 5);
    assert_eq!(buf[4], 0);
}

#[test]
fn quantizer_entry_points() {
    let w = [0.9f32, -0.31, 0.05, -1.7, 0.6];
    let mut step = 0f32;
    let mut q = [0f32; 5];
    unsafe {
        assert_eq!(strider_optimal_step(w.as_ptr(), w.len(), 3, &mut step), StriderStatus::Ok);
        assert_eq!(strider_quantize(w.as_ptr(), q.as_mut_ptr(), w.len(), step, 3), StriderStatus::Ok);
        assert_eq!(strider_quantize(w.as_ptr(), q.as_mut_ptr(), w.len(), step, 4), StriderStatus::InvalidArgument);
    }
    assert!(step > 0.0);
    for v in q {
        let k = v / step;
        assert!((k - k.round()).abs() < 1e-6 && k.abs() <= 1.0);
    }
    let mut copy = [0f32; 5];
    unsafe { strider_quantize(w.as_ptr(), copy.as_mut_ptr(), w.len(), 0.0, 7) };
    assert_eq!(copy, w);
}

#[test]
fn strided_width() {
    let strides = [1u8, 2, 2, 3];
    let offsets = [0u8, 0, 1, 2];
    let mut q = 0u64;
    let s = unsafe { strider_strided_width(3, strides.as_ptr(), offsets.as_ptr(), 4, &mut q) };
    assert_eq!(s, StriderStatus::Ok);
    assert_eq!(q, 9 + 5 + 4 + 3);
    let bad = [0u8];
    let s = unsafe { strider_strided_width(3, bad.as_ptr(), bad.as_ptr(), 1, &mut q) };
    assert_eq!(s, StriderStatus::InvalidArgument);
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(strider_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
