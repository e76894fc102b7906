use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use vivi_ffi::*;

fn last_error() -> String {
    let p = vivi_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_overrides() -> Vec<CString> {
    [
        "data.videos=24",
        "data.classes=4",
        "train.iterations=3",
        "train.warmup_iterations=1",
        "train.lr_schedule=\"x0.1@2\"",
        "train.videos=4",
        "train.shots=2",
        "train.model.predictor.shots=2",
        "train.nk_product=8",
        "train.model.channels=[4, 8]",
        "train.model.embed_dim=16",
        "train.model.exemplar_outputs=8",
        "train.model.video_projection_dim=8",
        "train.model.predictor.recurrent_hidden=8",
        "train.model.predictor.recurrent_layers=1",
    ]
    .iter()
    .map(|s| CString::new(*s).unwrap())
    .collect()
}

fn load_config(ov: &[CString]) -> (ViviStatus, *mut ViviConfig) {
    let ptrs: Vec<*const std::ffi::c_char> = ov.iter().map(|s| s.as_ptr()).collect();
    let mut cfg = ptr::null_mut();
    let st = unsafe { vivi_config_load(ptr::null(), ptrs.as_ptr(), ptrs.len(), &mut cfg) };
    (st, cfg)
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(vivi_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_round_trip_and_errors() {
    let (st, cfg) = load_config(&[CString::new("seed=7").unwrap()]);
    assert_eq!(st, ViviStatus::Ok);
    assert!(vivi_last_error().is_null());
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { vivi_config_to_toml(cfg, &mut s) }, ViviStatus::Ok);
    let text = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    assert!(text.contains("seed = 7"));
    unsafe {
        vivi_string_free(s);
        vivi_config_free(cfg);
    }

    let (st, cfg) = load_config(&[CString::new("train.no_such_key=1").unwrap()]);
    assert_eq!(st, ViviStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("no_such_key"));

    assert_eq!(unsafe { vivi_config_load(ptr::null(), ptr::null(), 0, ptr::null_mut()) }, ViviStatus::NullPointer);
    assert_eq!(unsafe { vivi_config_to_toml(ptr::null(), &mut s) }, ViviStatus::NullPointer);

    let missing = CString::new("/nonexistent/vivi.toml").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { vivi_config_load(missing.as_ptr(), ptr::null(), 0, &mut cfg) }, ViviStatus::Io);
}

#[test]
fn null_handles_are_harmless() {
    unsafe {
        vivi_config_free(ptr::null_mut());
        vivi_model_free(ptr::null_mut());
        vivi_string_free(ptr::null_mut());
        assert_eq!(vivi_model_embed_dim(ptr::null()), 0);
        assert_eq!(vivi_model_input_size(ptr::null()), 0);
    }
}

#[test]
fn detect_shots_matches_core_and_reports_capacity() {
    let (size, ch) = (8usize, 3usize);
    let frame_len = size * size * ch;
    let mut frames = Vec::new();
    for (value, n) in [(20u8, 5), (200, 4), (90, 6)] {
        for _ in 0..n {
            frames.extend(std::iter::repeat(value).take(frame_len));
        }
    }
    let n_frames = frames.len() / frame_len;
    let mut written = 0;
    let st = unsafe {
        vivi_detect_shots(frames.as_ptr(), n_frames, frame_len, ch, 0.3, ptr::null_mut(), 0, &mut written)
    };
    assert_eq!(st, ViviStatus::BufferTooSmall);
    assert_eq!(written, 2);

    let mut out = vec![0usize; written];
    let st = unsafe {
        vivi_detect_shots(frames.as_ptr(), n_frames, frame_len, ch, 0.3, out.as_mut_ptr(), out.len(), &mut written)
    };
    assert_eq!(st, ViviStatus::Ok);
    assert_eq!(out, vec![5, 9]);
    assert_eq!(out, vivi_core::pipeline::detect_shot_boundaries(&frames, frame_len, ch, 0.3));

    let st = unsafe { vivi_detect_shots(frames.as_ptr(), n_frames, 10, 3, 0.3, out.as_mut_ptr(), 2, &mut written) };
    assert_eq!(st, ViviStatus::InvalidArgument);
    let st = unsafe { vivi_detect_shots(ptr::null(), 3, frame_len, ch, 0.3, out.as_mut_ptr(), 2, &mut written) };
    assert_eq!(st, ViviStatus::NullPointer);
}

#[test]
fn train_save_load_encode() {
    let (st, cfg) = load_config(&tiny_overrides());
    assert_eq!(st, ViviStatus::Ok, "{}", last_error());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { vivi_train(cfg, &mut model) }, ViviStatus::Ok, "{}", last_error());

    let (d, size, ch) = unsafe { (vivi_model_embed_dim(model), vivi_model_input_size(model), vivi_model_input_channels(model)) };
    assert_eq!((d, size, ch), (16, 32, 3));
    let count = 3;
    let frames: Vec<f32> = (0..count * size * size * ch).map(|i| (i % 17) as f32 / 16.0).collect();
    let mut emb = vec![0f32; count * d];
    let st = unsafe { vivi_model_encode(model, frames.as_ptr(), count, emb.as_mut_ptr(), emb.len()) };
    assert_eq!(st, ViviStatus::Ok);
    assert!(emb.iter().all(|v| v.is_finite()));

    let st = unsafe { vivi_model_encode(model, frames.as_ptr(), count, emb.as_mut_ptr(), emb.len() - 1) };
    assert_eq!(st, ViviStatus::BufferTooSmall);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { vivi_model_save(model, path.as_ptr()) }, ViviStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { vivi_model_load(path.as_ptr(), &mut loaded) }, ViviStatus::Ok, "{}", last_error());
    let mut emb2 = vec![0f32; count * d];
    let st = unsafe { vivi_model_encode(loaded, frames.as_ptr(), count, emb2.as_mut_ptr(), emb2.len()) };
    assert_eq!(st, ViviStatus::Ok);
    assert_eq!(emb, emb2);

    let bad = CString::new(dir.path().join("missing.ckpt").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_ne!(unsafe { vivi_model_load(bad.as_ptr(), &mut none) }, ViviStatus::Ok);
    assert!(none.is_null());

    unsafe {
        vivi_model_free(model);
        vivi_model_free(loaded);
        vivi_config_free(cfg);
    }
}

#[test]
fn header_is_generated_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/vivi.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["vivi_config_load", "vivi_model_encode", "vivi_detect_shots", "VIVI_STATUS_BUFFER_TOO_SMALL", "typedef struct ViviModel ViviModel"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-"])
        .arg("-I")
        .arg(header.parent().unwrap())
        .stdin(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut child| {
            use std::io::Write;
            child.stdin.take().unwrap().write_all(b"#include \"vivi.h\"\nint main(void) { return vivi_version() == 0; }\n")?;
            child.wait_with_output()
        })
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success());
}
