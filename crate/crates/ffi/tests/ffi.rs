use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use uniadet::fewshot::{build_bank, predict_few_shot, FewShotOptions};
use uniadet::io::formats::{encode_features, write_feature_file, write_weight_file};
use uniadet::model::{predict_zero_shot, FeatureStack, LayerFeatures};
use uniadet::training::{init_weights, TrainConfig};
use uniadet_ffi::*;

fn stack(seed: f32, id: &str) -> FeatureStack {
    let layer = |block: u16, d: usize| {
        let g: Vec<f32> = (0..d).map(|k| ((k as f32 + 1.0) * seed).sin() + 0.1).collect();
        let p: Vec<f32> = (0..4 * d)
            .map(|k| ((k as f32 * 0.7 + seed) * 1.3).cos() + 0.05)
            .collect();
        LayerFeatures::new(block, 2, 2, g, p).unwrap()
    };
    FeatureStack::new(vec![layer(3, 4), layer(5, 4)], 6, 5, id).unwrap()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = uad_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn predict_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let weights = init_weights(&[(3, 4), (5, 4)], &TrainConfig::default()).unwrap();
    let query = stack(0.3, "q");
    let reference = stack(0.9, "r");
    write_weight_file(&weights, &dir.path().join("w.uadw")).unwrap();
    write_feature_file(&query, &dir.path().join("q.ufst")).unwrap();

    unsafe {
        let mut w = ptr::null_mut();
        assert_eq!(
            uad_weights_load(cpath(&dir.path().join("w.uadw")).as_ptr(), &mut w),
            UadStatus::Ok
        );
        assert_eq!(uad_weights_layers(w), 2);
        let mut f = ptr::null_mut();
        assert_eq!(
            uad_features_load(cpath(&dir.path().join("q.ufst")).as_ptr(), &mut f),
            UadStatus::Ok
        );
        let (mut h, mut wd) = (0usize, 0usize);
        assert_eq!(uad_features_image_size(f, &mut h, &mut wd), UadStatus::Ok);
        assert_eq!((h, wd), (6, 5));

        let mut map = vec![0.0f64; h * wd];
        let mut score = 0.0;
        assert_eq!(
            uad_predict(w, f, ptr::null(), 0.0, map.as_mut_ptr(), map.len(), &mut score),
            UadStatus::Ok
        );
        let expect = predict_zero_shot(&query, &weights).unwrap();
        assert_eq!(map, expect.map.data);
        assert_eq!(score, expect.score);

        let bytes = encode_features(&reference).unwrap();
        let mut r = ptr::null_mut();
        assert_eq!(
            uad_features_decode(bytes.as_ptr(), bytes.len(), &mut r),
            UadStatus::Ok
        );
        let refs = [r as *const UadFeatures];
        let mut bank = ptr::null_mut();
        assert_eq!(uad_bank_build(refs.as_ptr(), 1, &mut bank), UadStatus::Ok);
        let bank_path = cpath(&dir.path().join("b.ufsb"));
        assert_eq!(uad_bank_save(bank, bank_path.as_ptr()), UadStatus::Ok);
        uad_bank_free(bank);
        let mut bank = ptr::null_mut();
        assert_eq!(uad_bank_load(bank_path.as_ptr(), &mut bank), UadStatus::Ok);
        assert_eq!(
            uad_predict(w, f, bank, 0.0, map.as_mut_ptr(), map.len(), &mut score),
            UadStatus::Ok
        );
        let lib_bank = build_bank(&[reference]).unwrap();
        let expect = predict_few_shot(&query, &weights, &lib_bank, FewShotOptions::default()).unwrap();
        assert_eq!(map, expect.map.data);
        assert_eq!(score, expect.score);

        uad_bank_free(bank);
        uad_features_free(r);
        uad_features_free(f);
        uad_weights_free(w);
    }
}

#[test]
fn errors_are_typed_with_messages() {
    unsafe {
        let mut w = ptr::null_mut();
        let missing = CString::new("/nonexistent/w.uadw").unwrap();
        assert_eq!(uad_weights_load(missing.as_ptr(), &mut w), UadStatus::Io);
        assert!(last_error().contains("/nonexistent/w.uadw"));
        assert!(w.is_null());

        assert_eq!(uad_weights_load(ptr::null(), &mut w), UadStatus::InvalidArgument);

        let junk = b"UFSTjunk";
        let mut f = ptr::null_mut();
        assert_eq!(
            uad_features_decode(junk.as_ptr(), junk.len(), &mut f),
            UadStatus::Validation
        );
        assert!(!last_error().is_empty());

        let mut out = 0.0;
        assert_eq!(
            uad_auroc(ptr::null(), ptr::null(), 0, &mut out),
            UadStatus::InvalidArgument
        );
        let s = [0.1, 0.2];
        let l = [1u8, 1];
        assert_eq!(
            uad_auroc(s.as_ptr(), l.as_ptr(), 2, &mut out),
            UadStatus::Undefined
        );

        uad_weights_free(ptr::null_mut());
        uad_features_free(ptr::null_mut());
        uad_bank_free(ptr::null_mut());
    }
}

#[test]
fn wrong_map_buffer_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let weights = init_weights(&[(3, 4), (5, 4)], &TrainConfig::default()).unwrap();
    write_weight_file(&weights, &dir.path().join("w.uadw")).unwrap();
    let bytes = encode_features(&stack(0.5, "q")).unwrap();
    unsafe {
        let mut w = ptr::null_mut();
        uad_weights_load(cpath(&dir.path().join("w.uadw")).as_ptr(), &mut w);
        let mut f = ptr::null_mut();
        uad_features_decode(bytes.as_ptr(), bytes.len(), &mut f);
        let mut map = vec![0.0; 7];
        let mut score = 0.0;
        assert_eq!(
            uad_predict(w, f, ptr::null(), 0.0, map.as_mut_ptr(), 7, &mut score),
            UadStatus::InvalidArgument
        );
        assert!(last_error().contains("30"));
        assert_eq!(
            uad_weights_set_fusion(w, -1.0, 0.5, 0.5),
            UadStatus::InvalidArgument
        );
        assert_eq!(uad_weights_set_fusion(w, 0.07, 0.0, 0.0), UadStatus::Ok);
        uad_features_free(f);
        uad_weights_free(w);
    }
}

#[test]
fn metrics_through_the_abi() {
    let s = [0.9, 0.1, 0.8, 0.3];
    let l = [1u8, 0, 0, 1];
    let mut out = 0.0;
    unsafe {
        assert_eq!(uad_auroc(s.as_ptr(), l.as_ptr(), 4, &mut out), UadStatus::Ok);
        assert!((out - 0.75).abs() < 1e-12);
        assert_eq!(uad_aupr(s.as_ptr(), l.as_ptr(), 4, &mut out), UadStatus::Ok);
        assert!((out - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(uad_f1max(s.as_ptr(), l.as_ptr(), 4, &mut out), UadStatus::Ok);
        assert!((out - 0.8).abs() < 1e-12);
    }
    let v = unsafe { CStr::from_ptr(uad_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/uniadet.h");
    assert!(header.exists());
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; skipping header check");
        return;
    };
    assert!(status.success());
}
