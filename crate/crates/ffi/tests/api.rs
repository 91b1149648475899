use std::ffi::{CStr, CString};
use std::ptr;

use pden::data::{make_toy_dataset, ToySpec};
use pden::eval::accuracy;
use pden::nn::{Checkpoint, TaskArch, TaskModel};
use pden::Rng;
use pden_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pden_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn arch() -> TaskArch {
    TaskArch {
        in_channels: 1,
        image_size: 16,
        conv_channels: vec![4, 4],
        hidden: 8,
        classes: 10,
        proj_dim: 4,
    }
}

fn toy(count: usize, seed: u64) -> *mut PdenDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { pden_dataset_toy(10, count, 16, seed, &mut ds) },
        PdenStatus::Ok
    );
    assert!(!ds.is_null());
    ds
}

#[test]
fn dataset_handles_report_shape_and_contents() {
    let ds = toy(30, 4);
    let (mut n, mut c, mut h, mut w) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { pden_dataset_shape(ds, &mut n, &mut c, &mut h, &mut w) },
        PdenStatus::Ok
    );
    assert_eq!((n, c, h, w), (30, 1, 16, 16));

    let mut pixels = vec![0.0; n * c * h * w];
    let mut labels = vec![0u32; n];
    let st = unsafe { pden_dataset_copy(ds, pixels.as_mut_ptr(), pixels.len(), labels.as_mut_ptr(), labels.len()) };
    assert_eq!(st, PdenStatus::Ok);
    let native = make_toy_dataset(
        &ToySpec {
            classes: 10,
            count: 30,
            image_size: 16,
        },
        &mut Rng::new(4),
    )
    .unwrap();
    assert_eq!(pixels, native.images.data());
    assert_eq!(labels, native.labels.iter().map(|&l| l as u32).collect::<Vec<_>>());

    let short = unsafe { pden_dataset_copy(ds, pixels.as_mut_ptr(), 3, ptr::null_mut(), 0) };
    assert_eq!(short, PdenStatus::InvalidArgument);
    assert!(last_error().contains("image buffer"));
    unsafe { pden_dataset_free(ds) };
}

#[test]
fn shifts_and_layouts_make_new_handles() {
    let ds = toy(20, 1);
    let kind = CString::new("invert").unwrap();
    let mut shifted = ptr::null_mut();
    assert_eq!(
        unsafe { pden_dataset_shift(ds, kind.as_ptr(), 5, 0, &mut shifted) },
        PdenStatus::Ok
    );
    let mut a = vec![0.0; 20 * 256];
    let mut b = vec![0.0; 20 * 256];
    unsafe {
        pden_dataset_copy(ds, a.as_mut_ptr(), a.len(), ptr::null_mut(), 0);
        pden_dataset_copy(shifted, b.as_mut_ptr(), b.len(), ptr::null_mut(), 0);
    }
    assert!(a.iter().zip(&b).all(|(x, y)| (x + y - 1.0).abs() < 1e-12));

    let bogus = CString::new("sepia").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { pden_dataset_shift(ds, bogus.as_ptr(), 1, 0, &mut out) },
        PdenStatus::InvalidArgument
    );
    assert!(out.is_null());
    assert!(last_error().contains("sepia"));
    assert_eq!(
        unsafe { pden_dataset_shift(ds, kind.as_ptr(), 9, 0, &mut out) },
        PdenStatus::InvalidArgument
    );

    let mut padded = ptr::null_mut();
    assert_eq!(
        unsafe { pden_dataset_to_layout(ds, 3, 32, &mut padded) },
        PdenStatus::Ok
    );
    let (mut c, mut h) = (0, 0);
    unsafe { pden_dataset_shape(padded, ptr::null_mut(), &mut c, &mut h, ptr::null_mut()) };
    assert_eq!((c, h), (3, 32));
    assert_eq!(unsafe { pden_dataset_to_layout(ds, 1, 8, &mut out) }, PdenStatus::Shape);
    unsafe {
        pden_dataset_free(padded);
        pden_dataset_free(shifted);
        pden_dataset_free(ds);
    }
}

#[test]
fn models_evaluate_and_predict_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let model = TaskModel::init(arch(), &mut Rng::new(3)).unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_task(&model, 3, 0).save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { pden_model_load(cpath.as_ptr(), &mut handle) }, PdenStatus::Ok);
    let (mut c, mut s, mut k) = (0, 0, 0);
    unsafe { pden_model_shape(handle, &mut c, &mut s, &mut k) };
    assert_eq!((c, s, k), (1, 16, 10));

    let ds = toy(25, 8);
    let mut acc = -1.0;
    assert_eq!(unsafe { pden_model_evaluate(handle, ds, &mut acc) }, PdenStatus::Ok);
    let native = make_toy_dataset(
        &ToySpec {
            classes: 10,
            count: 25,
            image_size: 16,
        },
        &mut Rng::new(8),
    )
    .unwrap();
    assert_eq!(acc, accuracy(&model, &native).unwrap());

    let mut labels = vec![0u32; 25];
    let mut probs = vec![0.0; 250];
    let st = unsafe {
        pden_model_predict(
            handle,
            native.images.data().as_ptr(),
            25,
            labels.as_mut_ptr(),
            probs.as_mut_ptr(),
        )
    };
    assert_eq!(st, PdenStatus::Ok);
    let expected = model.predict_probs(&native.images).unwrap();
    assert_eq!(probs, expected.data());
    assert_eq!(
        labels,
        expected.argmax_rows().iter().map(|&l| l as u32).collect::<Vec<_>>()
    );

    unsafe {
        pden_model_free(handle);
        pden_dataset_free(ds);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { pden_model_load(ptr::null(), &mut out) },
        PdenStatus::NullPointer
    );
    assert!(last_error().contains("path"));

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { pden_model_load(missing.as_ptr(), &mut out) }, PdenStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"garbage").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { pden_model_load(bad.as_ptr(), &mut out) }, PdenStatus::Format);
    assert!(out.is_null());

    let mut ds = ptr::null_mut();
    assert_eq!(
        unsafe { pden_dataset_toy(1, 10, 16, 0, &mut ds) },
        PdenStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { pden_dataset_toy(10, 10, 16, 0, ptr::null_mut()) },
        PdenStatus::NullPointer
    );
    let mut acc = 0.0;
    assert_eq!(
        unsafe { pden_model_evaluate(ptr::null(), ptr::null(), &mut acc) },
        PdenStatus::NullPointer
    );

    let ok = toy(10, 0);
    assert_eq!(last_error(), "");
    unsafe {
        pden_dataset_free(ok);
        pden_dataset_free(ptr::null_mut());
        pden_model_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(pden_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
