use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use pcnn::export::{model_bytes, InferenceModel};
use pcnn::network::{build_model, ModelSpec};
use pcnn::tensor::{Shape4, Tensor4};
use pcnn_ffi::*;

fn small_model_bytes() -> Vec<u8> {
    let net = build_model(&ModelSpec::small_cnn(2), 5).unwrap();
    model_bytes(&net).unwrap()
}

fn last_error() -> String {
    let p = pcnn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn forward_matches_rust_inference() {
    let bytes = small_model_bytes();
    let mut model = ptr::null_mut();
    let st = unsafe { pcnn_model_load_bytes(bytes.as_ptr(), bytes.len(), &mut model) };
    assert_eq!(st, PcnnStatus::PcnnOk);
    assert!(pcnn_last_error().is_null());

    let (mut c, mut h, mut w) = (0, 0, 0);
    assert_eq!(unsafe { pcnn_model_input_shape(model, &mut c, &mut h, &mut w) }, PcnnStatus::PcnnOk);
    assert_eq!((c, h, w), (1, 28, 28));
    let classes = unsafe { pcnn_model_num_classes(model) };
    assert_eq!(classes, 10);

    let batch = 3;
    let shape = Shape4::new(batch, c, h, w);
    let x = Tensor4::from_fn(shape, |n, _, y, xx| ((n * 31 + y * 7 + xx * 3) % 17) as f32 / 8.0 - 1.0);
    let mut logits = vec![0f32; batch * classes];
    let st = unsafe { pcnn_model_forward(model, x.data().as_ptr(), batch, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, PcnnStatus::PcnnOk);

    let reference = InferenceModel::from_bytes(&bytes).unwrap().forward(&x).unwrap();
    assert_eq!(logits.as_slice(), reference.data());
    unsafe { pcnn_model_free(model) };
}

#[test]
fn load_from_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pcnn");
    std::fs::write(&path, small_model_bytes()).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { pcnn_model_load(cpath.as_ptr(), &mut model) }, PcnnStatus::PcnnOk);
    assert!(!model.is_null());
    unsafe { pcnn_model_free(model) };

    let missing = CString::new(dir.path().join("nope.pcnn").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { pcnn_model_load(missing.as_ptr(), &mut model) }, PcnnStatus::PcnnErrIo);
    assert!(model.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn error_codes() {
    let mut bytes = small_model_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let mut model = ptr::null_mut();
    let st = unsafe { pcnn_model_load_bytes(bytes.as_ptr(), bytes.len(), &mut model) };
    assert_eq!(st, PcnnStatus::PcnnErrIntegrity);
    assert!(last_error().starts_with("integrity"));

    let junk = b"not a model at all";
    let st = unsafe { pcnn_model_load_bytes(junk.as_ptr(), junk.len(), &mut model) };
    assert_eq!(st, PcnnStatus::PcnnErrFormat);

    assert_eq!(unsafe { pcnn_model_load(ptr::null(), &mut model) }, PcnnStatus::PcnnErrNull);
    assert_eq!(unsafe { pcnn_model_num_classes(ptr::null()) }, 0);
    unsafe { pcnn_model_free(ptr::null_mut()) };

    let good = small_model_bytes();
    assert_eq!(unsafe { pcnn_model_load_bytes(good.as_ptr(), good.len(), &mut model) }, PcnnStatus::PcnnOk);
    let input = vec![0f32; 28 * 28];
    let mut logits = vec![0f32; 9];
    let st = unsafe { pcnn_model_forward(model, input.as_ptr(), 1, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, PcnnStatus::PcnnErrShape);
    unsafe { pcnn_model_free(model) };
}

#[test]
fn memory_report_resnet18() {
    let arch = CString::new("resnet18-like").unwrap();
    let mut r = PcnnMemoryReport::default();
    assert_eq!(unsafe { pcnn_memory_report(arch.as_ptr(), 1, &mut r) }, PcnnStatus::PcnnOk);
    assert_eq!(r.full_bits, 11_689_512 * 32);
    assert!((r.ratio - r.full_bits as f64 / r.compressed_bits as f64).abs() < 1e-12);

    let bad = CString::new("vgg").unwrap();
    assert_eq!(unsafe { pcnn_memory_report(bad.as_ptr(), 1, &mut r) }, PcnnStatus::PcnnErrUnknownArch);
    assert_eq!(unsafe { pcnn_memory_report(arch.as_ptr(), 0, &mut r) }, PcnnStatus::PcnnErrInvalidArgument);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(pcnn_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pcnn.h");
    assert!(header.exists());
    let Ok(out) = Command::new("cc")
        .args(["-x", "c", "-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler available, header syntax not checked");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
