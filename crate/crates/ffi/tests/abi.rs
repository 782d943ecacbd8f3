use mice_ffi::*;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn generated(seed: u64) -> *mut MiceDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { mice_dataset_generate(3, 6, 20, 40.0, seed, &mut ds) }, MiceStatus::Ok);
    ds
}

#[test]
fn train_save_load_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "n_clusters = 3\nhidden = 8\nembed_dim = 4\nqueue_size = 16\nbatch_size = 16\nepochs = 2\n")
        .unwrap();
    let ds = generated(1);
    assert_eq!(unsafe { mice_dataset_len(ds) }, 60);
    assert_eq!(unsafe { mice_dataset_dim(ds) }, 6);

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mice_train(c_path(&cfg).as_ptr(), ds, &mut model) }, MiceStatus::Ok);
    assert_eq!(unsafe { mice_model_clusters(model) }, 3);

    let ckpt = dir.path().join("model.ckpt");
    assert_eq!(unsafe { mice_model_save(model, c_path(&ckpt).as_ptr()) }, MiceStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { mice_model_load(c_path(&ckpt).as_ptr(), &mut loaded) }, MiceStatus::Ok);

    let mut a = vec![0usize; 60];
    let mut b = vec![0usize; 60];
    let mut post = vec![0.0; 180];
    unsafe {
        assert_eq!(mice_evaluate(model, ds, a.as_mut_ptr(), a.len(), post.as_mut_ptr(), post.len()), MiceStatus::Ok);
        assert_eq!(mice_evaluate(loaded, ds, b.as_mut_ptr(), b.len(), ptr::null_mut(), 0), MiceStatus::Ok);
    }
    assert_eq!(a, b);
    for row in post.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut acc = 0.0;
    assert_eq!(unsafe { mice_acc(a.as_ptr(), b.as_ptr(), 60, &mut acc) }, MiceStatus::Ok);
    assert_eq!(acc, 1.0);

    let mut short = vec![0usize; 10];
    let st = unsafe { mice_evaluate(model, ds, short.as_mut_ptr(), short.len(), ptr::null_mut(), 0) };
    assert_eq!(st, MiceStatus::BufferTooSmall);
    unsafe {
        mice_model_free(model);
        mice_model_free(loaded);
        mice_dataset_free(ds);
    }
}

#[test]
fn metrics_match_known_values() {
    let t = [0usize, 0, 1, 1];
    let p = [1usize, 1, 0, 0];
    let (mut acc, mut nmi, mut ari) = (0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(mice_acc(t.as_ptr(), p.as_ptr(), 4, &mut acc), MiceStatus::Ok);
        assert_eq!(mice_nmi(t.as_ptr(), p.as_ptr(), 4, &mut nmi), MiceStatus::Ok);
        assert_eq!(mice_ari(t.as_ptr(), p.as_ptr(), 4, &mut ari), MiceStatus::Ok);
    }
    assert_eq!((acc, ari), (1.0, 1.0));
    assert!((nmi - 1.0).abs() < 1e-12);
}

#[test]
fn failures_set_status_and_message() {
    let missing = CString::new("/nonexistent/data.csv").unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { mice_dataset_load(missing.as_ptr(), &mut ds) }, MiceStatus::Data);
    assert!(ds.is_null());
    let msg = unsafe { CStr::from_ptr(mice_last_error_message()) }.to_str().unwrap();
    assert!(!msg.is_empty());

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { mice_model_load(missing.as_ptr(), &mut model) }, MiceStatus::Checkpoint);
    assert_eq!(unsafe { mice_train(ptr::null(), ptr::null(), &mut model) }, MiceStatus::NullPointer);
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mice.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["mice_train", "mice_evaluate", "mice_last_error_message", "MICE_STATUS_BUFFER_TOO_SMALL"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
