//! C ABI over the toolbridge engine.
//!
//! Corpora and retrievers cross the boundary as opaque handles that the
//! caller owns and releases with the matching `*_free` function. Every
//! fallible call returns a [`TbStatus`]; on failure the message is kept in a
//! thread-local slot readable through [`tb_last_error_message`]. Strings
//! returned by the library are owned by the caller and released with
//! [`tb_string_free`]. Panics never unwind into C: they surface as
//! [`TbStatus::Panic`].

use std::cell::RefCell;
use std::collections::HashSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use toolbridge::corpus::{load_corpus, Corpus};
use toolbridge::dpo::{dpo_loss, DpoBatch, DpoRow, TabularPolicy};
use toolbridge::metrics::ndcg_at_k;
use toolbridge::retrieval::{build_retriever, RankedList, Retriever, RetrieverConfig, RetrieverKind, ScoredDoc};
use toolbridge::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    Json = 6,
    Other = 7,
    Panic = 8,
}

/// A validated tool corpus.
pub struct TbCorpus {
    corpus: Corpus,
}

/// A retriever built over a corpus. It keeps its own copy of the index, so
/// the corpus handle may be freed first.
pub struct TbRetriever {
    retriever: Arc<dyn Retriever>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: TbStatus,
    message: String,
}

impl Failure {
    fn new(status: TbStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => TbStatus::Io,
            Error::Parse { .. } | Error::DuplicateKey { .. } | Error::EmptyCorpus(_) => TbStatus::Parse,
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::UnknownDoc(_) | Error::NoPairs => {
                TbStatus::InvalidArgument
            }
            Error::Json(_) => TbStatus::Json,
            _ => TbStatus::Other,
        };
        Failure::new(status, format!("{} ({})", e, e.kind()))
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            TbStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("panic inside toolbridge");
            TbStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(TbStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(TbStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

/// # Safety
/// `p` is null (only when `len` is 0) or points to `len` readable elements.
unsafe fn read_slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// Same contract as [`read_slice`], with each element a valid C string.
unsafe fn read_str_array(p: *const *const c_char, len: usize, name: &str) -> Result<Vec<String>, Failure> {
    read_slice(p, len, name)?
        .iter()
        .map(|&s| read_str(s, name).map(str::to_owned))
        .collect()
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(TbStatus::Other, "output contains an interior NUL"))
}

/// Message of the last failed call on this thread, or null after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn tb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` is null or was returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a JSONL tool corpus from `path` into `*out`.
///
/// # Safety
/// `path` is a NUL-terminated string and `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn tb_corpus_load(path: *const c_char, out: *mut *mut TbCorpus) -> TbStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let corpus = load_corpus(Path::new(path))?;
        *out = Box::into_raw(Box::new(TbCorpus { corpus }));
        Ok(())
    })
}

/// Number of documents in the corpus, or 0 for a null handle.
///
/// # Safety
/// `corpus` is null or a live handle from [`tb_corpus_load`].
#[no_mangle]
pub unsafe extern "C" fn tb_corpus_len(corpus: *const TbCorpus) -> usize {
    corpus.as_ref().map_or(0, |c| c.corpus.len())
}

/// Releases a corpus handle. Null is a no-op.
///
/// # Safety
/// `corpus` is null or a live handle that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tb_corpus_free(corpus: *mut TbCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Builds a retriever of `kind` (`bm25`, `tfidf`, `dense` or `hybrid`)
/// with default parameters over `corpus` into `*out`.
///
/// # Safety
/// `corpus` is a live handle, `kind` a NUL-terminated string and `out`
/// points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn tb_retriever_build(
    corpus: *const TbCorpus,
    kind: *const c_char,
    out: *mut *mut TbRetriever,
) -> TbStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(corpus, "corpus")?;
        let kind: RetrieverKind = read_str(kind, "kind")?.parse()?;
        let retriever = build_retriever(&RetrieverConfig::with_kind(kind), &(*corpus).corpus)?;
        *out = Box::into_raw(Box::new(TbRetriever { retriever }));
        Ok(())
    })
}

/// Releases a retriever handle. Null is a no-op.
///
/// # Safety
/// `retriever` is null or a live handle that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tb_retriever_free(retriever: *mut TbRetriever) {
    if !retriever.is_null() {
        drop(Box::from_raw(retriever));
    }
}

/// Retrieves the top `k` documents for `query` and writes the ranked list
/// as JSON (`{"query_id", "entries": [{"doc_id", "score"}]}`) to `*out_json`.
/// The caller frees the string with [`tb_string_free`].
///
/// # Safety
/// `retriever` is a live handle, `query_id` and `query` are NUL-terminated
/// strings and `out_json` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn tb_retrieve(
    retriever: *const TbRetriever,
    query_id: *const c_char,
    query: *const c_char,
    k: usize,
    out_json: *mut *mut c_char,
) -> TbStatus {
    guard(|| {
        non_null(out_json, "out_json")?;
        *out_json = ptr::null_mut();
        non_null(retriever, "retriever")?;
        let query_id = read_str(query_id, "query_id")?;
        let query = read_str(query, "query")?;
        let ranked = (*retriever).retriever.retrieve(query_id, query, k)?;
        let json = serde_json::to_string(&ranked).map_err(Error::from)?;
        *out_json = to_c_string(json)?;
        Ok(())
    })
}

/// NDCG@k of a ranking (`ranked_len` doc ids, best first) against a set of
/// `relevant_len` relevant doc ids, written to `*out`.
///
/// # Safety
/// Both arrays hold the stated number of NUL-terminated strings and `out`
/// points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn tb_ndcg_at_k(
    ranked_ids: *const *const c_char,
    ranked_len: usize,
    relevant_ids: *const *const c_char,
    relevant_len: usize,
    k: usize,
    out: *mut f64,
) -> TbStatus {
    guard(|| {
        non_null(out, "out")?;
        let ranked = read_str_array(ranked_ids, ranked_len, "ranked_ids")?;
        let relevant: HashSet<String> = read_str_array(relevant_ids, relevant_len, "relevant_ids")?.into_iter().collect();
        let list = RankedList {
            query_id: String::new(),
            entries: ranked
                .into_iter()
                .enumerate()
                .map(|(i, doc_id)| ScoredDoc {
                    doc_id,
                    score: -(i as f64),
                })
                .collect(),
        };
        *out = ndcg_at_k(&list, &relevant, k)?;
        Ok(())
    })
}

/// DPO loss of a tabular policy against a reference, both given as JSON,
/// over `len` rows of (`prompt_ids[i]`, `chosen[i]`, `rejected[i]`)
/// completion indices. Writes the mean loss to `*out_loss`.
///
/// # Safety
/// `policy_json` and `reference_json` are NUL-terminated strings, the three
/// arrays hold `len` elements and `out_loss` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn tb_dpo_loss(
    policy_json: *const c_char,
    reference_json: *const c_char,
    prompt_ids: *const *const c_char,
    chosen: *const usize,
    rejected: *const usize,
    len: usize,
    beta: f64,
    out_loss: *mut f64,
) -> TbStatus {
    guard(|| {
        non_null(out_loss, "out_loss")?;
        let policy: TabularPolicy = serde_json::from_str(read_str(policy_json, "policy_json")?).map_err(Error::from)?;
        let reference: TabularPolicy =
            serde_json::from_str(read_str(reference_json, "reference_json")?).map_err(Error::from)?;
        policy.validate()?;
        reference.validate()?;
        let ids = read_str_array(prompt_ids, len, "prompt_ids")?;
        let chosen = read_slice(chosen, len, "chosen")?;
        let rejected = read_slice(rejected, len, "rejected")?;
        let rows = ids
            .into_iter()
            .zip(chosen.iter().zip(rejected))
            .map(|(prompt_id, (&chosen, &rejected))| DpoRow {
                prompt_id,
                chosen,
                rejected,
            })
            .collect();
        let (loss, _) = dpo_loss(&policy, &reference, &DpoBatch::new(rows, beta)?)?;
        *out_loss = loss;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_set_and_clear_the_message() {
        let mut out = ptr::null_mut();
        let status = unsafe { tb_corpus_load(ptr::null(), &mut out) };
        assert_eq!(status, TbStatus::NullPointer);
        assert!(out.is_null());
        let msg = unsafe { CStr::from_ptr(tb_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "path is null");

        let mut v = 0.0;
        let ids = [c"d1".as_ptr()];
        let status = unsafe { tb_ndcg_at_k(ids.as_ptr(), 1, ids.as_ptr(), 1, 5, &mut v) };
        assert_eq!(status, TbStatus::Ok);
        assert_eq!(v, 1.0);
        assert!(tb_last_error_message().is_null());
    }

    #[test]
    fn null_handles_are_tolerated_by_free_and_len() {
        unsafe {
            tb_corpus_free(ptr::null_mut());
            tb_retriever_free(ptr::null_mut());
            tb_string_free(ptr::null_mut());
            assert_eq!(tb_corpus_len(ptr::null()), 0);
        }
    }

    #[test]
    fn version_matches_the_crate() {
        let v = unsafe { CStr::from_ptr(tb_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
