use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use kgcrs_core::harness::{Corpus, Workspace};
use kgcrs_core::synthetic::{planted_fixture, FixtureOptions};
use kgcrs_core::Config;
use kgcrs_ffi::*;

const TINY: &str = r#"
ent_dim = 8
ctx_dim = 16
enc_layers = 1
enc_heads = 2
max_ctx_len = 48
dec_layers = 1
dec_heads = 2
vocab_size = 120
max_len = 8
"#;

/// An untrained checkpoint over the planted fixture; returns (checkpoint dir, kg path).
fn checkpoint(root: &Path) -> (PathBuf, PathBuf) {
    let files = planted_fixture(&FixtureOptions::default()).unwrap().write(&root.join("data")).unwrap();
    let corpus = Corpus::load(&files.kg, &files.dialogues).unwrap();
    let ws = Workspace::fresh(&Config::from_toml_str(TINY).unwrap(), &corpus).unwrap();
    let dir = root.join("ckpt");
    ws.save(&dir).unwrap();
    (dir, files.kg)
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = kgcrs_last_error_message();
    assert!(!p.is_null(), "an error message is recorded");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take_json(p: *mut c_char) -> serde_json::Value {
    assert!(!p.is_null());
    let v = serde_json::from_str(CStr::from_ptr(p).to_str().unwrap()).unwrap();
    kgcrs_string_free(p);
    v
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/kgcrs.h")).unwrap();
    for name in [
        "kgcrs_engine_open",
        "kgcrs_engine_set_recommendations",
        "kgcrs_engine_free",
        "kgcrs_session_new",
        "kgcrs_session_send",
        "kgcrs_session_json",
        "kgcrs_session_free",
        "kgcrs_string_free",
        "kgcrs_last_error_message",
        "kgcrs_version",
        "typedef struct KgcrsEngine KgcrsEngine",
        "typedef struct KgcrsSession KgcrsSession",
        "KGCRS_STATUS_OK = 0",
        "KGCRS_STATUS_PANIC = 8",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
    assert!(header.starts_with("#ifndef KGCRS_H"));
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(kgcrs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut engine: *mut KgcrsEngine = ptr::null_mut();
    let kg = CString::new("kg.tsv").unwrap();
    let status = unsafe { kgcrs_engine_open(ptr::null(), kg.as_ptr(), &mut engine) };
    assert_eq!(status, KgcrsStatus::NullArgument);
    assert!(engine.is_null());
    assert!(last_error().contains("checkpoint_dir"));

    let status = unsafe { kgcrs_engine_open(kg.as_ptr(), kg.as_ptr(), ptr::null_mut()) };
    assert_eq!(status, KgcrsStatus::NullArgument);

    let mut session: *mut KgcrsSession = ptr::null_mut();
    assert_eq!(unsafe { kgcrs_session_new(ptr::null(), &mut session) }, KgcrsStatus::NullArgument);
    let mut out: *mut c_char = ptr::null_mut();
    let msg = CString::new("hi").unwrap();
    assert_eq!(unsafe { kgcrs_session_send(ptr::null_mut(), msg.as_ptr(), &mut out) }, KgcrsStatus::NullArgument);
    assert_eq!(unsafe { kgcrs_session_json(ptr::null(), &mut out) }, KgcrsStatus::NullArgument);
    assert_eq!(unsafe { kgcrs_engine_set_recommendations(ptr::null_mut(), 3) }, KgcrsStatus::NullArgument);

    // Freeing NULL is a no-op.
    unsafe {
        kgcrs_engine_free(ptr::null_mut());
        kgcrs_session_free(ptr::null_mut());
        kgcrs_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_is_reported() {
    let bad = [0xffu8, 0xfe, 0];
    let kg = CString::new("kg.tsv").unwrap();
    let mut engine: *mut KgcrsEngine = ptr::null_mut();
    let status = unsafe { kgcrs_engine_open(bad.as_ptr().cast(), kg.as_ptr(), &mut engine) };
    assert_eq!(status, KgcrsStatus::InvalidUtf8);
}

#[test]
fn missing_files_map_to_error_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, kg) = checkpoint(tmp.path());
    let nowhere = cstr(&tmp.path().join("absent"));
    let mut engine: *mut KgcrsEngine = ptr::null_mut();

    let status = unsafe { kgcrs_engine_open(nowhere.as_ptr(), cstr(&kg).as_ptr(), &mut engine) };
    assert!(matches!(status, KgcrsStatus::Io | KgcrsStatus::Checkpoint), "{status:?}");
    assert!(engine.is_null());
    assert!(!last_error().is_empty());

    let status = unsafe { kgcrs_engine_open(cstr(tmp.path()).as_ptr(), nowhere.as_ptr(), &mut engine) };
    assert_eq!(status, KgcrsStatus::Io);
}

#[test]
fn successful_call_clears_last_error() {
    let mut engine: *mut KgcrsEngine = ptr::null_mut();
    let kg = CString::new("kg.tsv").unwrap();
    unsafe { kgcrs_engine_open(ptr::null(), kg.as_ptr(), &mut engine) };
    assert!(!kgcrs_last_error_message().is_null());

    let tmp = tempfile::tempdir().unwrap();
    let (dir, kg) = checkpoint(tmp.path());
    assert_eq!(
        unsafe { kgcrs_engine_open(cstr(&dir).as_ptr(), cstr(&kg).as_ptr(), &mut engine) },
        KgcrsStatus::Ok
    );
    assert!(kgcrs_last_error_message().is_null());
    unsafe { kgcrs_engine_free(engine) };
}

#[test]
fn chat_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, kg) = checkpoint(tmp.path());
    unsafe {
        let mut engine: *mut KgcrsEngine = ptr::null_mut();
        assert_eq!(kgcrs_engine_open(cstr(&dir).as_ptr(), cstr(&kg).as_ptr(), &mut engine), KgcrsStatus::Ok);
        assert_eq!(kgcrs_engine_set_recommendations(engine, 3), KgcrsStatus::Ok);

        let mut session: *mut KgcrsSession = ptr::null_mut();
        assert_eq!(kgcrs_session_new(engine, &mut session), KgcrsStatus::Ok);
        // The session shares the model now, so reconfiguring must fail.
        assert_eq!(kgcrs_engine_set_recommendations(engine, 5), KgcrsStatus::Internal);
        // Sessions outlive the engine handle.
        kgcrs_engine_free(engine);

        let mut out: *mut c_char = ptr::null_mut();
        let msg = CString::new("I loved Wonder Woman").unwrap();
        assert_eq!(kgcrs_session_send(session, msg.as_ptr(), &mut out), KgcrsStatus::Ok);
        let reply = take_json(out);
        assert!(reply["response_text"].is_string());
        let recs = reply["recommendations"].as_array().unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r["name"] != "Wonder Woman"), "mentioned items are not recommended");
        let subgraph = reply["subgraph"].as_array().unwrap();
        assert!(!subgraph.is_empty());
        for e in subgraph {
            let p = e["p_connect"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&p));
            assert_eq!(e["connected"].as_bool().unwrap(), p >= 0.5);
        }

        let blank = CString::new("   ").unwrap();
        assert_eq!(kgcrs_session_send(session, blank.as_ptr(), &mut out), KgcrsStatus::InvalidMessage);
        assert!(last_error().contains("invalid message"));

        let mut json: *mut c_char = ptr::null_mut();
        assert_eq!(kgcrs_session_json(session, &mut json), KgcrsStatus::Ok);
        let state = take_json(json);
        let history = state["history"].as_array().unwrap();
        assert_eq!(history.len(), 2, "the rejected message leaves no trace");
        assert_eq!(history[0]["text"], "I loved Wonder Woman");
        assert_eq!(state["last_recommendations"], reply["recommendations"]);
        kgcrs_session_free(session);
    }
}
