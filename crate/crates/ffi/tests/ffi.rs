use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use keap_core::data::{generate_synthetic_kg, SynthMode};
use keap_core::eval::{self, ContactMap, RangeBucket};
use keap_core::model::ModelConfig;
use keap_core::train::{save_checkpoint, Corpus, TrainConfig, Trainer};
use keap_ffi::*;

fn trained_checkpoint(dir: &Path) -> (PathBuf, ModelConfig, keap_core::model::Parameters<f32>) {
    let kg = generate_synthetic_kg(24, 8, SynthMode::KnowledgeDependent, 5).unwrap();
    let mut cfg = ModelConfig::tiny();
    let corpus = Corpus::build(&kg, &cfg, 1).unwrap();
    cfg.text_vocab = corpus.text_vocab.size();
    let tc = TrainConfig {
        steps: 5,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg.clone(), tc, corpus).unwrap();
    t.run().unwrap();
    let path = dir.join("model.ckpt");
    save_checkpoint(&t.checkpoint(), &path).unwrap();
    (path, cfg, t.state.params)
}

fn last_error() -> String {
    let p = keap_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn model_handle_embeds_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, cfg, params) = trained_checkpoint(dir.path());
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { keap_model_load(c_path.as_ptr(), &mut model) }, KeapStatus::Ok);
    assert!(keap_last_error().is_null());
    let d = unsafe { keap_model_hidden_dim(model) };
    assert_eq!(d, cfg.hidden);
    assert_eq!(unsafe { keap_model_max_protein_len(model) }, cfg.limits.protein - 2);

    let seq = CString::new("mkvla").unwrap();
    let mut pooled = vec![0f32; d];
    assert_eq!(unsafe { keap_model_embed(model, seq.as_ptr(), pooled.as_mut_ptr(), d) }, KeapStatus::Ok);
    let want = eval::mean_embedding(&cfg, &params, "MKVLA").unwrap();
    for (a, b) in pooled.iter().zip(&want) {
        assert_eq!(*a, *b as f32);
    }

    let mut rows = 0usize;
    let status = unsafe { keap_model_embed_residues(model, seq.as_ptr(), ptr::null_mut(), 0, &mut rows) };
    assert_eq!((status, rows), (KeapStatus::Ok, 5));
    let mut states = vec![0f32; rows * d];
    let status = unsafe { keap_model_embed_residues(model, seq.as_ptr(), states.as_mut_ptr(), states.len(), &mut rows) };
    assert_eq!(status, KeapStatus::Ok);
    let direct = keap_core::model::embed_residues(&cfg, &params, "MKVLA").unwrap();
    assert_eq!(states.as_slice(), direct.data());

    let mut small = vec![0f32; d - 1];
    let status = unsafe { keap_model_embed(model, seq.as_ptr(), small.as_mut_ptr(), small.len()) };
    assert_eq!(status, KeapStatus::BufferTooSmall);
    assert!(last_error().contains(&d.to_string()));
    unsafe { keap_model_free(model) };
    unsafe { keap_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { keap_model_hidden_dim(ptr::null()) }, 0);
}

#[test]
fn load_failures_report_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();
    let missing = CString::new(dir.path().join("absent.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { keap_model_load(missing.as_ptr(), &mut model) }, KeapStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("absent.ckpt"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { keap_model_load(junk.as_ptr(), &mut model) }, KeapStatus::CorruptCheckpoint);
    assert_eq!(unsafe { keap_model_load(ptr::null(), &mut model) }, KeapStatus::NullPointer);
    assert_eq!(unsafe { keap_model_load(junk.as_ptr(), ptr::null_mut()) }, KeapStatus::NullPointer);
}

#[test]
fn metrics_match_library_values() {
    let len = 30;
    let mut truth = vec![0u8; len * len];
    let mut probs = vec![0f64; len * len];
    for i in 0..len {
        for j in 0..len {
            truth[i * len + j] = ((i + j) % 3 == 0) as u8;
            probs[i * len + j] = ((i * 7 + j * 3) % 11) as f64 / 11.0;
        }
    }
    let map = ContactMap::new(len, truth.iter().map(|&t| t != 0).collect(), probs.clone()).unwrap();
    for (range, bucket) in [
        (KeapRange::Short, RangeBucket::Short),
        (KeapRange::Medium, RangeBucket::Medium),
        (KeapRange::Long, RangeBucket::Long),
    ] {
        let mut got = f64::NAN;
        let status = unsafe { keap_precision_at_k(len, truth.as_ptr(), probs.as_ptr(), range, 5, &mut got) };
        assert_eq!(status, KeapStatus::Ok);
        assert_eq!(got, eval::precision_at_k(&map, bucket, 5).unwrap());
    }

    let x = [1.0, 2.0, 2.0, 5.0];
    let y = [0.3, 0.1, 0.2, 0.9];
    let mut v = 0.0;
    assert_eq!(unsafe { keap_spearman(x.as_ptr(), y.as_ptr(), 4, &mut v) }, KeapStatus::Ok);
    assert_eq!(v, eval::spearman(&x, &y).unwrap());
    assert_eq!(unsafe { keap_mse(x.as_ptr(), y.as_ptr(), 4, &mut v) }, KeapStatus::Ok);
    assert_eq!(v, eval::mse(&x, &y).unwrap());
    assert_eq!(unsafe { keap_manhattan_similarity(x.as_ptr(), y.as_ptr(), 4, 20.0, &mut v) }, KeapStatus::Ok);
    assert!((v - (1.0 - 8.5 / 20.0)).abs() < 1e-12);

    let pred = [1u8, 0, 1, 1, 0, 0];
    let gold = [1u8, 1, 0, 1, 0, 1];
    assert_eq!(unsafe { keap_multilabel_f1(pred.as_ptr(), gold.as_ptr(), 2, 3, false, &mut v) }, KeapStatus::Ok);
    assert_eq!(v, 2.0 * 2.0 / (2.0 * 2.0 + 1.0 + 2.0));
    let rows = |s: &[u8]| s.chunks(3).map(|r| r.iter().map(|&b| b != 0).collect()).collect::<Vec<Vec<bool>>>();
    assert_eq!(unsafe { keap_multilabel_f1(pred.as_ptr(), gold.as_ptr(), 2, 3, true, &mut v) }, KeapStatus::Ok);
    assert_eq!(v, eval::multilabel_f1(&rows(&pred), &rows(&gold), eval::F1Average::Macro).unwrap());
}

#[test]
fn metric_errors_map_to_status_codes() {
    let flat = [1.0, 1.0, 1.0];
    let y = [1.0, 2.0, 3.0];
    let mut v = 0.0;
    assert_eq!(unsafe { keap_spearman(flat.as_ptr(), y.as_ptr(), 3, &mut v) }, KeapStatus::Undefined);
    assert_eq!(unsafe { keap_mse(ptr::null(), y.as_ptr(), 3, &mut v) }, KeapStatus::NullPointer);
    assert_eq!(unsafe { keap_mse(flat.as_ptr(), y.as_ptr(), 3, ptr::null_mut()) }, KeapStatus::NullPointer);
    let status = unsafe { keap_manhattan_similarity(flat.as_ptr(), y.as_ptr(), 3, 0.0, &mut v) };
    assert_ne!(status, KeapStatus::Ok);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { keap_mse(flat.as_ptr(), y.as_ptr(), 3, &mut v) }, KeapStatus::Ok);
    assert!(keap_last_error().is_null());
}

#[test]
fn version_string_matches_package() {
    let v = unsafe { CStr::from_ptr(keap_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(header_dir.join("keap.h")).unwrap();
    for sym in ["keap_model_load", "keap_model_free", "keap_model_embed", "keap_precision_at_k", "KEAP_STATUS_OK"] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler available; header content checked only");
        return;
    };
    assert!(cc.status.success());
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let staticlib = lib_dir.join("libkeap_ffi.a");
    assert!(staticlib.exists(), "{} not built", staticlib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "keap.h"
int main(void) {
    double x[4] = {1, 2, 3, 4}, y[4] = {2, 4, 6, 9}, r = 0;
    if (keap_spearman(x, y, 4, &r) != KEAP_STATUS_OK || r != 1.0) return 1;
    KeapModel *m = NULL;
    if (keap_model_load("/nonexistent.ckpt", &m) != KEAP_STATUS_IO || m != NULL) return 2;
    if (keap_last_error() == NULL) return 3;
    keap_model_free(m);
    printf("%s\n", keap_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&header_dir)
        .arg(&src)
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
