#ifndef TOOLBRIDGE_H
#define TOOLBRIDGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TbStatus {
  TB_STATUS_OK = 0,
  TB_STATUS_NULL_POINTER = 1,
  TB_STATUS_INVALID_UTF8 = 2,
  TB_STATUS_INVALID_ARGUMENT = 3,
  TB_STATUS_IO = 4,
  TB_STATUS_PARSE = 5,
  TB_STATUS_JSON = 6,
  TB_STATUS_OTHER = 7,
  TB_STATUS_PANIC = 8,
} TbStatus;

/**
 * A validated tool corpus.
 */
typedef struct TbCorpus TbCorpus;

/**
 * A retriever built over a corpus. It keeps its own copy of the index, so
 * the corpus handle may be freed first.
 */
typedef struct TbRetriever TbRetriever;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *tb_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *tb_version(void);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` is null or was returned by this library and not yet freed.
 */
void tb_string_free(char *s);

/**
 * Loads a JSONL tool corpus from `path` into `*out`.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out` points to writable storage.
 */
enum TbStatus tb_corpus_load(const char *path, struct TbCorpus **out);

/**
 * Number of documents in the corpus, or 0 for a null handle.
 *
 * # Safety
 * `corpus` is null or a live handle from [`tb_corpus_load`].
 */
size_t tb_corpus_len(const struct TbCorpus *corpus);

/**
 * Releases a corpus handle. Null is a no-op.
 *
 * # Safety
 * `corpus` is null or a live handle that is not used afterwards.
 */
void tb_corpus_free(struct TbCorpus *corpus);

/**
 * Builds a retriever of `kind` (`bm25`, `tfidf`, `dense` or `hybrid`)
 * with default parameters over `corpus` into `*out`.
 *
 * # Safety
 * `corpus` is a live handle, `kind` a NUL-terminated string and `out`
 * points to writable storage.
 */
enum TbStatus tb_retriever_build(const struct TbCorpus *corpus,
                                 const char *kind,
                                 struct TbRetriever **out);

/**
 * Releases a retriever handle. Null is a no-op.
 *
 * # Safety
 * `retriever` is null or a live handle that is not used afterwards.
 */
void tb_retriever_free(struct TbRetriever *retriever);

/**
 * Retrieves the top `k` documents for `query` and writes the ranked list
 * as JSON (`{"query_id", "entries": [{"doc_id", "score"}]}`) to `*out_json`.
 * The caller frees the string with [`tb_string_free`].
 *
 * # Safety
 * `retriever` is a live handle, `query_id` and `query` are NUL-terminated
 * strings and `out_json` points to writable storage.
 */
enum TbStatus tb_retrieve(const struct TbRetriever *retriever,
                          const char *query_id,
                          const char *query,
                          size_t k,
                          char **out_json);

/**
 * NDCG@k of a ranking (`ranked_len` doc ids, best first) against a set of
 * `relevant_len` relevant doc ids, written to `*out`.
 *
 * # Safety
 * Both arrays hold the stated number of NUL-terminated strings and `out`
 * points to writable storage.
 */
enum TbStatus tb_ndcg_at_k(const char *const *ranked_ids,
                           size_t ranked_len,
                           const char *const *relevant_ids,
                           size_t relevant_len,
                           size_t k,
                           double *out);

/**
 * DPO loss of a tabular policy against a reference, both given as JSON,
 * over `len` rows of (`prompt_ids[i]`, `chosen[i]`, `rejected[i]`)
 * completion indices. Writes the mean loss to `*out_loss`.
 *
 * # Safety
 * `policy_json` and `reference_json` are NUL-terminated strings, the three
 * arrays hold `len` elements and `out_loss` points to writable storage.
 */
enum TbStatus tb_dpo_loss(const char *policy_json,
                          const char *reference_json,
                          const char *const *prompt_ids,
                          const size_t *chosen,
                          const size_t *rejected,
                          size_t len,
                          double beta,
                          double *out_loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOOLBRIDGE_H */
