use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use innerloop::checkpoint::save_checkpoint;
use innerloop::model::{init_random, ModelSpec};
use innerloop_ffi::*;

fn toy() -> *mut IlModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { il_model_init_random(4, 16, 258, 3, &mut m) }, IlStatus::Ok);
    m
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(il_last_error_message()) }.to_string_lossy().into_owned()
}

fn cfg(start: usize, end: usize, repeats: usize, strategy: IlStrategy) -> IlLoopConfig {
    IlLoopConfig {
        start,
        end,
        repeats,
        strategy,
        eta: 0.5,
        align_temperature: 0.0,
        noise_seed: 0,
    }
}

#[test]
fn handle_lifecycle_and_getters() {
    let m = toy();
    unsafe {
        assert_eq!(il_model_n_layers(m), 4);
        assert_eq!(il_model_d_model(m), 16);
        assert_eq!(il_model_vocab_size(m), 258);
        il_model_free(m);
        il_model_free(ptr::null_mut());
        assert_eq!(il_model_n_layers(ptr::null()), 0);
    }
}

#[test]
fn single_pass_logits_equal_plain_forward() {
    let m = toy();
    let toks = [256u32, 104, 105];
    let mut plain = vec![0.0f32; 258];
    let mut looped = vec![0.0f32; 258];
    unsafe {
        assert_eq!(il_forward_last_logits(m, toks.as_ptr(), 3, ptr::null(), plain.as_mut_ptr(), 258), IlStatus::Ok);
        let c = cfg(1, 3, 1, IlStrategy::Uniform);
        assert_eq!(il_forward_last_logits(m, toks.as_ptr(), 3, &c, looped.as_mut_ptr(), 258), IlStatus::Ok);
        il_model_free(m);
    }
    assert_eq!(plain, looped);
}

#[test]
fn errors_carry_codes_and_messages() {
    let m = toy();
    let toks = [1u32, 2];
    let mut buf = vec![0.0f32; 258];
    unsafe {
        let bad = cfg(3, 1, 2, IlStrategy::Naive);
        assert_eq!(il_forward_last_logits(m, toks.as_ptr(), 2, &bad, buf.as_mut_ptr(), 258), IlStatus::Config);
        assert!(!last_error().is_empty());
        assert_eq!(il_forward_last_logits(m, toks.as_ptr(), 2, ptr::null(), buf.as_mut_ptr(), 10), IlStatus::BufferTooSmall);
        assert_eq!(il_forward_last_logits(ptr::null(), toks.as_ptr(), 2, ptr::null(), buf.as_mut_ptr(), 258), IlStatus::NullArgument);
        let missing = CString::new("/nonexistent/model.lprn").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(il_model_load(missing.as_ptr(), ptr::null(), &mut out), IlStatus::Io);
        assert!(last_error().contains("nonexistent"));
        il_model_free(m);
    }
}

#[test]
fn encode_score_and_generate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lprn");
    let spec = ModelSpec::toy(3, 16, 258);
    save_checkpoint(&path, &spec, &init_random(&spec, 6).unwrap()).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(il_model_load(cpath.as_ptr(), ptr::null(), &mut m), IlStatus::Ok);

        let text = CString::new("hey").unwrap();
        let mut ids = [0u32; 2];
        let mut n = 0usize;
        assert_eq!(il_encode(m, text.as_ptr(), ids.as_mut_ptr(), 2, &mut n), IlStatus::BufferTooSmall);
        assert_eq!(n, 3);
        let mut ids = [0u32; 3];
        assert_eq!(il_encode(m, text.as_ptr(), ids.as_mut_ptr(), 3, &mut n), IlStatus::Ok);
        assert_eq!(ids, [104, 101, 121]);

        let flat = [7u32, 7, 7];
        let lens = [1usize, 2];
        let mut scores = [0.0f64; 2];
        let mut best = 9usize;
        let c = cfg(0, 2, 3, IlStrategy::AutoAlign);
        assert_eq!(
            il_score_choices(m, ids.as_ptr(), 3, flat.as_ptr(), lens.as_ptr(), 2, &c, scores.as_mut_ptr(), &mut best),
            IlStatus::Ok
        );
        assert!(best < 2 && scores.iter().all(|s| s.is_finite() && *s < 0.0));

        let mut out = [0u32; 8];
        let mut len = 0usize;
        assert_eq!(il_generate(m, ids.as_ptr(), 3, &c, 8, out.as_mut_ptr(), 8, &mut len), IlStatus::Ok);
        assert!(len <= 8);
        il_model_free(m);
    }
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(header_dir.join("innerloop.h")).unwrap();
    for sym in ["il_model_load", "il_model_free", "il_forward_last_logits", "il_score_choices", "il_generate", "il_last_error_message", "IL_STATUS_BUFFER_TOO_SMALL"] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    let lib_dir = target_dir();
    let has_cc = Command::new("cc").arg("--version").output().is_ok();
    if !has_cc || !lib_dir.join("libinnerloop_ffi.so").exists() {
        eprintln!("skipping C link check: no cc or no shared library in {}", lib_dir.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "innerloop.h"
int main(void) {
    IlModel *m = NULL;
    if (il_model_init_random(4, 16, 258, 1, &m) != IL_STATUS_OK) return 1;
    uint32_t toks[3] = {256, 97, 98};
    float logits[258];
    IlLoopConfig cfg = {1, 3, 3, IL_STRATEGY_UNIFORM, 0.5f, 0.0f, 0};
    if (il_forward_last_logits(m, toks, 3, &cfg, logits, 258) != IL_STATUS_OK) return 2;
    IlLoopConfig bad = {3, 1, 2, IL_STRATEGY_NAIVE, 0.5f, 0.0f, 0};
    if (il_forward_last_logits(m, toks, 3, &bad, logits, 258) != IL_STATUS_CONFIG) return 3;
    printf("%s\n", il_last_error_message());
    il_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg("-L")
        .arg(&lib_dir)
        .arg("-linnerloop_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke test failed to compile");
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib_dir).output().unwrap();
    assert!(out.status.success(), "C smoke test exited with {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).contains("s < e"));
}
