use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use qralign::catalog::{generate_catalog, CatalogConfig};
use qralign::policy::{catalog_vocab, checkpoint, Policy};
use qralign::sft::SftTask;
use qralign_ffi::*;

fn last_error() -> String {
    let p = qr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn engine() -> *mut QrEngine {
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { qr_engine_new(3, 3, 2, 7, 10, &mut e) }, QrStatus::Ok);
    assert!(!e.is_null());
    e
}

#[test]
fn engine_retrieves_and_scores() {
    let e = engine();
    assert_eq!(unsafe { qr_engine_len(e) }, 18);
    let cat = generate_catalog(&CatalogConfig {
        brands: 3,
        categories: 3,
        modifiers: 2,
        seed: 7,
        ..CatalogConfig::default()
    })
    .unwrap();
    let title = CString::new(cat.products[0].title.clone()).unwrap();

    let mut ids = [0u32; 32];
    let mut len = 0usize;
    let status = unsafe { qr_engine_retrieve(e, title.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len) };
    assert_eq!(status, QrStatus::Ok);
    assert!(len > 0 && len <= 10);
    assert_eq!(ids[0], cat.products[0].id);

    let mut small = [0u32; 1];
    let status = unsafe { qr_engine_retrieve(e, title.as_ptr(), small.as_mut_ptr(), 1, &mut len) };
    assert_eq!(status, QrStatus::BufferTooSmall);
    assert_eq!(small[0], ids[0]);

    let mut rel = -1.0;
    let status = unsafe { qr_engine_relevance(e, title.as_ptr(), title.as_ptr(), 5, &mut rel) };
    assert_eq!(status, QrStatus::Ok);
    assert!((0.0..=1.0).contains(&rel));
    unsafe { qr_engine_free(e) };
}

#[test]
fn bad_arguments_set_status_and_message() {
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { qr_engine_new(0, 3, 2, 7, 10, &mut e) }, QrStatus::InvalidArgument);
    assert!(e.is_null());
    assert!(last_error().contains("grammar"));

    assert_eq!(unsafe { qr_engine_new(1, 1, 1, 7, 10, ptr::null_mut()) }, QrStatus::NullArgument);
    let e = engine();
    let mut len = 0;
    let status = unsafe { qr_engine_retrieve(e, ptr::null(), ptr::null_mut(), 0, &mut len) };
    assert_eq!(status, QrStatus::NullArgument);
    assert!(last_error().contains("query"));
    let bad = [0xffu8, 0];
    let status = unsafe { qr_engine_retrieve(e, bad.as_ptr().cast(), ptr::null_mut(), 0, &mut len) };
    assert_eq!(status, QrStatus::InvalidUtf8);
    unsafe {
        qr_engine_free(e);
        qr_engine_free(ptr::null_mut());
        qr_string_free(ptr::null_mut());
    }
}

#[test]
fn server_caches_and_reports_artifact_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut server = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { qr_server_open(missing.as_ptr(), 60, &mut server) }, QrStatus::MissingArtifact);

    let corrupt = dir.path().join("bad.ckpt");
    std::fs::write(&corrupt, "not a checkpoint").unwrap();
    let corrupt = CString::new(corrupt.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { qr_server_open(corrupt.as_ptr(), 60, &mut server) }, QrStatus::CorruptArtifact);

    let cat = generate_catalog(&CatalogConfig::default()).unwrap();
    let policy = Policy::new(catalog_vocab(&cat), 8, SftTask::MultiTask.grammar(), 1, 1.0);
    let path = dir.path().join("p.ckpt");
    checkpoint::save(&policy, &path).unwrap();
    let path = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { qr_server_open(path.as_ptr(), 0, &mut server) }, QrStatus::InvalidArgument);
    assert_eq!(unsafe { qr_server_open(path.as_ptr(), 60, &mut server) }, QrStatus::Ok);

    let query = CString::new(cat.products[0].title.clone()).unwrap();
    let mut served = Vec::new();
    for expect_hit in [false, true] {
        let mut out = ptr::null_mut();
        let mut hit = !expect_hit;
        assert_eq!(unsafe { qr_server_serve(server, query.as_ptr(), &mut out, &mut hit) }, QrStatus::Ok);
        assert_eq!(hit, expect_hit);
        served.push(unsafe { CStr::from_ptr(out) }.to_bytes().to_vec());
        unsafe { qr_string_free(out) };
    }
    assert_eq!(served[0], served[1]);
    assert!(served[0].split(|b| *b == b'\n').count() <= 3);
    assert_eq!(unsafe { qr_server_decodes(server) }, 1);
    unsafe { qr_server_free(server) };
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/qralign.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ QrEngine *e = 0; return qr_engine_new(1, 1, 1, 0, 5, &e) == QR_STATUS_OK ? 0 : 1; }}\n"
        ),
    )
    .unwrap();
    let Ok(status) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(status.success());
}
