#ifndef VULNMOE_H
#define VULNMOE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VmDecision {
  VM_DECISION_ACCEPT = 0,
  VM_DECISION_DISCARD = 1,
  VM_DECISION_REPAIR = 2,
} VmDecision;

// Formal verifier verdicts.
typedef enum VmFormal {
  VM_FORMAL_VIOLATION_DETECTED = 0,
  VM_FORMAL_VERIFICATION_SUCCESS = 1,
  VM_FORMAL_TIMEOUT = 2,
  VM_FORMAL_COMPILE_ERROR = 3,
} VmFormal;

typedef enum VmIntent {
  VM_INTENT_VULNERABLE = 0,
  VM_INTENT_SAFE = 1,
} VmIntent;

// Language-model verifier verdicts. `Absent` means no verdict was returned.
typedef enum VmLlm {
  VM_LLM_VULNERABLE_VIOLATION_DETECTED = 0,
  VM_LLM_SAFE_VERIFICATION_SUCCESS = 1,
  VM_LLM_SAFE_ISSUES_FOUND = 2,
  VM_LLM_VULNERABLE_NO_VIOLATION = 3,
  VM_LLM_ABSENT = 4,
} VmLlm;

// Status codes shared by all entry points.
typedef enum VmStatus {
  VM_STATUS_OK = 0,
  VM_STATUS_NULL_POINTER = 1,
  VM_STATUS_INVALID_UTF8 = 2,
  VM_STATUS_INVALID_ARGUMENT = 3,
  VM_STATUS_PARSE = 4,
  VM_STATUS_IO = 5,
  VM_STATUS_MODEL = 6,
  VM_STATUS_PANIC = 7,
} VmStatus;

// Loaded checkpoint plus the tokenizer it was trained with.
typedef struct VmModel VmModel;

typedef struct VmBinaryMetrics {
  double accuracy;
  double precision;
  double recall;
  double f1;
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
} VmBinaryMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length
// in bytes, excluding the terminator.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t vm_last_error(char *buf, size_t len);

// Analytic total and active parameter counts for a named preset.
//
// # Safety
// `preset` must be a valid C string; `total` and `active` valid pointers.
enum VmStatus vm_paramcount(const char *preset, uint64_t *total, uint64_t *active);

// Class weight `1 + gamma * f(rank)`; `rank == 0` means unranked.
//
// # Safety
// `weight` must be a valid pointer.
enum VmStatus vm_rank_weight(uint32_t rank, double gamma, double *weight);

// CASTLE score of a findings JSONL document against a benchmark JSONL
// manifest, with the built-in bonus table and hierarchy.
//
// # Safety
// Both strings must be valid C strings; `total` a valid pointer.
enum VmStatus vm_castle_score(const char *benchmark_jsonl,
                              const char *findings_jsonl,
                              double *total);

// Binary metrics for `n` labels (non-zero = vulnerable) and probabilities.
//
// # Safety
// `labels` and `probs` must point to `n` elements; `metrics` must be valid.
enum VmStatus vm_binary_metrics(const uint8_t *labels,
                                const double *probs,
                                size_t n,
                                double threshold,
                                struct VmBinaryMetrics *metrics);

// Agreement-protocol decision for one verifier pair.
//
// # Safety
// `decision` must be a valid pointer.
enum VmStatus vm_agreement_decide(enum VmFormal formal,
                                  enum VmLlm llm,
                                  enum VmIntent intent,
                                  enum VmDecision *decision);

// MinHash estimate and exact Jaccard similarity of two code snippets,
// using default shingling and 128 hashes.
//
// # Safety
// `a` and `b` must be valid C strings; out-pointers must be valid.
enum VmStatus vm_minhash_similarity(const char *a,
                                    const char *b,
                                    uint64_t seed,
                                    double *estimate,
                                    double *exact);

// Loads a checkpoint directory. Free the handle with [`vm_model_free`].
//
// # Safety
// `dir` must be a valid C string; `model` a valid pointer.
enum VmStatus vm_model_load(const char *dir, struct VmModel **model);

// Vulnerability probability and top CWE id (the number after `CWE-`) for
// one C snippet, truncated to the model's maximum length.
//
// # Safety
// `model` must come from [`vm_model_load`]; `code` must be a valid C
// string; out-pointers must be valid.
enum VmStatus vm_model_predict(const struct VmModel *model,
                               const char *code,
                               double *p_vul,
                               uint32_t *cwe_id);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from [`vm_model_load`] not yet freed.
void vm_model_free(struct VmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VULNMOE_H */
