//! Drives the exported functions exactly as a C caller would, then compiles
//! and runs a small C program against the generated header.

use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use toolbridge_ffi::*;

const CORPUS: &str = r#"{"doc_id":"d1","tool_name":"Rates","api_name":"latest","description":"currency exchange rate"}
{"doc_id":"d2","tool_name":"Skies","api_name":"forecast","description":"weather forecast api"}
{"doc_id":"d3","tool_name":"Money","api_name":"convert","description":"currency converter tool"}
"#;

fn write_corpus(dir: &Path) -> CString {
    let path = dir.join("tools.jsonl");
    std::fs::write(&path, CORPUS).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = tb_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_build_retrieve_and_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_corpus(dir.path());
    unsafe {
        let mut corpus = ptr::null_mut();
        assert_eq!(tb_corpus_load(path.as_ptr(), &mut corpus), TbStatus::Ok);
        assert_eq!(tb_corpus_len(corpus), 3);

        let mut retriever = ptr::null_mut();
        assert_eq!(tb_retriever_build(corpus, c"bm25".as_ptr(), &mut retriever), TbStatus::Ok);
        // the retriever outlives the corpus handle
        tb_corpus_free(corpus);

        let mut json: *mut c_char = ptr::null_mut();
        let status = tb_retrieve(retriever, c"q1".as_ptr(), c"currency exchange".as_ptr(), 2, &mut json);
        assert_eq!(status, TbStatus::Ok);
        let ranked: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        tb_string_free(json);
        tb_retriever_free(retriever);

        assert_eq!(ranked["query_id"], "q1");
        let ids: Vec<&str> = ranked["entries"].as_array().unwrap().iter().map(|e| e["doc_id"].as_str().unwrap()).collect();
        assert_eq!(ids, ["d1", "d3"]);
    }
}

#[test]
fn failures_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut corpus = ptr::null_mut();
        let missing = CString::new(dir.path().join("absent.jsonl").to_str().unwrap()).unwrap();
        assert_eq!(tb_corpus_load(missing.as_ptr(), &mut corpus), TbStatus::Io);
        assert!(corpus.is_null());
        assert!(last_error().contains("absent.jsonl"));

        std::fs::write(dir.path().join("bad.jsonl"), "{oops\n").unwrap();
        let bad = CString::new(dir.path().join("bad.jsonl").to_str().unwrap()).unwrap();
        assert_eq!(tb_corpus_load(bad.as_ptr(), &mut corpus), TbStatus::Parse);

        let path = write_corpus(dir.path());
        assert_eq!(tb_corpus_load(path.as_ptr(), &mut corpus), TbStatus::Ok);
        let mut retriever = ptr::null_mut();
        assert_eq!(tb_retriever_build(corpus, c"sparse".as_ptr(), &mut retriever), TbStatus::InvalidArgument);
        assert!(last_error().contains("sparse"));
        assert_eq!(tb_retriever_build(ptr::null(), c"bm25".as_ptr(), &mut retriever), TbStatus::NullPointer);
        let invalid = [0xffu8, 0];
        assert_eq!(tb_retriever_build(corpus, invalid.as_ptr().cast(), &mut retriever), TbStatus::InvalidUtf8);
        tb_corpus_free(corpus);
    }
}

#[test]
fn ndcg_through_the_abi_matches_a_hand_computation() {
    let ranked = [c"d2".as_ptr(), c"d1".as_ptr(), c"d3".as_ptr()];
    let relevant = [c"d1".as_ptr(), c"d3".as_ptr()];
    let mut v = f64::NAN;
    let status = unsafe { tb_ndcg_at_k(ranked.as_ptr(), 3, relevant.as_ptr(), 2, 3, &mut v) };
    assert_eq!(status, TbStatus::Ok);
    let dcg = 1.0 / 3f64.log2() + 1.0 / 4f64.log2();
    let idcg = 1.0 + 1.0 / 3f64.log2();
    assert!((v - dcg / idcg).abs() < 1e-12, "{v}");

    let status = unsafe { tb_ndcg_at_k(ranked.as_ptr(), 3, relevant.as_ptr(), 2, 0, &mut v) };
    assert_eq!(status, TbStatus::InvalidArgument);
}

#[test]
fn dpo_loss_through_the_abi() {
    let reference = CString::new(r#"{"prompts":{"p":{"completions":["a","b"],"logits":[0.0,0.0]}}}"#).unwrap();
    let policy = CString::new(r#"{"prompts":{"p":{"completions":["a","b"],"logits":[1.0,-1.0]}}}"#).unwrap();
    let ids = [c"p".as_ptr()];
    let mut loss = f64::NAN;
    unsafe {
        let status = tb_dpo_loss(reference.as_ptr(), reference.as_ptr(), ids.as_ptr(), &0, &1, 1, 0.1, &mut loss);
        assert_eq!(status, TbStatus::Ok);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        // log-prob gap between a and b widens by 2, so the margin is 0.1 * 2
        let status = tb_dpo_loss(policy.as_ptr(), reference.as_ptr(), ids.as_ptr(), &0, &1, 1, 0.1, &mut loss);
        assert_eq!(status, TbStatus::Ok);
        let expected = (1.0 + (-0.2f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");

        assert_eq!(
            tb_dpo_loss(policy.as_ptr(), reference.as_ptr(), ids.as_ptr(), &0, &1, 1, 0.0, &mut loss),
            TbStatus::InvalidArgument
        );
        assert_eq!(
            tb_dpo_loss(c"{".as_ptr(), reference.as_ptr(), ids.as_ptr(), &0, &1, 1, 0.1, &mut loss),
            TbStatus::Json
        );
        assert_eq!(
            tb_dpo_loss(policy.as_ptr(), reference.as_ptr(), ids.as_ptr(), &0, &5, 1, 0.1, &mut loss),
            TbStatus::InvalidArgument,
            "{}",
            last_error()
        );
    }
}

/// Builds the static library into the same target directory as this test
/// binary. `cargo test` only produces the rlib, so the archive is built
/// explicitly rather than trusting whatever an earlier build left behind.
fn static_lib() -> PathBuf {
    // the test binary lives in <target>/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let target_dir = profile_dir.parent().unwrap();
    let mut build = Command::new(env!("CARGO"));
    build.args(["build", "--quiet", "--lib", "-p", "toolbridge-ffi", "--target-dir"]).arg(target_dir);
    if profile_dir.ends_with("release") {
        build.arg("--release");
    }
    assert!(build.status().unwrap().success(), "building the static library failed");
    profile_dir.join("libtoolbridge_ffi.a")
}

#[test]
fn c_program_links_against_the_generated_header() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let lib = static_lib();
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let source = dir.path().join("smoke.c");
    std::fs::write(
        &source,
        r#"#include <stdio.h>
#include "toolbridge.h"

int main(int argc, char **argv) {
    TbCorpus *corpus = NULL;
    if (tb_corpus_load(argv[1], &corpus) != TB_STATUS_OK) return 10;
    TbRetriever *retriever = NULL;
    if (tb_retriever_build(corpus, "tfidf", &retriever) != TB_STATUS_OK) return 11;
    char *json = NULL;
    if (tb_retrieve(retriever, "q", "weather", 1, &json) != TB_STATUS_OK) return 12;
    puts(json);
    tb_string_free(json);
    tb_retriever_free(retriever);
    tb_corpus_free(corpus);
    if (tb_corpus_load(NULL, &corpus) != TB_STATUS_NULL_POINTER) return 13;
    puts(tb_last_error_message());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let built = Command::new("cc")
        .arg(&source)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(built.status.success(), "{}", String::from_utf8_lossy(&built.stderr));
    let run = Command::new(&exe).arg(corpus.to_str().unwrap()).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let out = String::from_utf8(run.stdout).unwrap();
    let mut lines = out.lines();
    let ranked: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(ranked["entries"][0]["doc_id"], "d2");
    assert_eq!(lines.next(), Some("path is null"));
}
