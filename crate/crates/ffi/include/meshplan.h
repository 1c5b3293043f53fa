#ifndef MESHPLAN_H
#define MESHPLAN_H

/* Generated by cbindgen from crates/ffi/src. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2-5 match the command-line exit codes.
 */
typedef enum MpStatus {
  MP_STATUS_OK = 0,
  MP_STATUS_CONFIG = 2,
  MP_STATUS_PLAN_INVALID = 3,
  MP_STATUS_PACK = 4,
  MP_STATUS_RESHARD = 5,
  /**
   * Null pointer, bad UTF-8 or an out-of-range argument.
   */
  MP_STATUS_INVALID_ARGUMENT = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  MP_STATUS_PANIC = 7,
} MpStatus;

typedef enum MpFormat {
  MP_FORMAT_JSON = 0,
  MP_FORMAT_CSV = 1,
  MP_FORMAT_MARKDOWN = 2,
} MpFormat;

typedef enum MpPackPolicy {
  MP_PACK_POLICY_FIRST_FIT_DECREASING = 0,
  MP_PACK_POLICY_FIRST_FIT_ARRIVAL = 1,
} MpPackPolicy;

/**
 * Cluster, model and workload descriptions.
 */
typedef struct MpConfig MpConfig;

typedef struct MpPackResult MpPackResult;

typedef struct MpPlan MpPlan;

typedef struct MpReshardPlan MpReshardPlan;

/**
 * Per-rank memory in bytes.
 */
typedef struct MpMemory {
  uint64_t params;
  uint64_t grads;
  uint64_t optimizer;
  uint64_t activations_saved;
  uint64_t activations_working;
  uint64_t comm_buffers;
  uint64_t logits;
  uint64_t runtime_overhead;
  uint64_t total;
  /**
   * 1 when `total` fits in device memory.
   */
  uint8_t fits;
} MpMemory;

typedef struct MpStepSummary {
  double step_time;
  /**
   * Tokens per second per device.
   */
  double throughput;
  double mfu;
  double exposed_comm;
} MpStepSummary;

typedef struct MpCopyOp {
  uint32_t src_rank;
  uint64_t src_offset;
  uint32_t dst_rank;
  uint64_t dst_offset;
  uint64_t len;
} MpCopyOp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mp_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *mp_last_error_message(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 */
void mp_string_free(char *s);

/**
 * Parses and validates the three JSON documents.
 */
enum MpStatus mp_config_from_json(const char *cluster_json,
                                  const char *model_json,
                                  const char *workload_json,
                                  struct MpConfig **out);

void mp_config_free(struct MpConfig *cfg);

enum MpStatus mp_config_world_size(const struct MpConfig *cfg, uint32_t *out);

/**
 * Replaces the workload's sequence length.
 */
enum MpStatus mp_config_set_seq_len(struct MpConfig *cfg, uint64_t seq_len);

/**
 * A plan with default toggles (full recompute, prefetch depth 1).
 */
enum MpStatus mp_plan_new(uint32_t dp_replicate,
                          uint32_t dp_shard,
                          uint32_t sp,
                          uint32_t ep,
                          uint32_t micro_batch,
                          struct MpPlan **out);

/**
 * Plan from a JSON object; missing fields take their defaults.
 */
enum MpStatus mp_plan_from_json(const char *json, struct MpPlan **out);

void mp_plan_free(struct MpPlan *plan);

enum MpStatus mp_plan_set_overlap(struct MpPlan *plan,
                                  bool async_ulysses,
                                  bool moe_overlap,
                                  uint32_t prefetch_depth);

/**
 * Method label such as `FSDP+SP4+EP8`.
 */
enum MpStatus mp_plan_label(const struct MpPlan *plan, char **out);

/**
 * Returns `MP_STATUS_PLAN_INVALID` when the plan breaks a composition rule;
 * the violation codes are in the error message. `violation_count` may be
 * NULL.
 */
enum MpStatus mp_plan_validate(const struct MpConfig *cfg,
                               const struct MpPlan *plan,
                               size_t *violation_count);

enum MpStatus mp_estimate_memory(const struct MpConfig *cfg,
                                 const struct MpPlan *plan,
                                 struct MpMemory *out);

/**
 * Simulates one step regardless of memory fit.
 */
enum MpStatus mp_simulate(const struct MpConfig *cfg,
                          const struct MpPlan *plan,
                          struct MpStepSummary *out);

/**
 * Sweeps every combination of the candidate lists (an empty list means
 * `{1}`; micro batch comes from the workload) and renders the report.
 */
enum MpStatus mp_plan_report(const struct MpConfig *cfg,
                             const uint32_t *sp,
                             size_t sp_len,
                             const uint32_t *ep,
                             size_t ep_len,
                             enum MpFormat format,
                             char **out);

enum MpStatus mp_pack(const uint64_t *lengths,
                      size_t count,
                      uint64_t target,
                      enum MpPackPolicy policy,
                      struct MpPackResult **out);

void mp_pack_result_free(struct MpPackResult *r);

enum MpStatus mp_pack_result_batch_count(const struct MpPackResult *r, size_t *out);

enum MpStatus mp_pack_result_padding_ratio(const struct MpPackResult *r, double *out);

/**
 * Full result (batches, entries, boundaries) as JSON.
 */
enum MpStatus mp_pack_result_to_json(const struct MpPackResult *r, char **out);

/**
 * Copy plan moving parameter `param` of `numel` elements from an even
 * shard over `src_group` ranks to one over `dst_group` ranks.
 */
enum MpStatus mp_reshard_plan_new(const char *param,
                                  uint64_t numel,
                                  uint32_t src_group,
                                  uint32_t dst_group,
                                  struct MpReshardPlan **out);

void mp_reshard_plan_free(struct MpReshardPlan *p);

enum MpStatus mp_reshard_plan_op_count(const struct MpReshardPlan *p, size_t *out);

enum MpStatus mp_reshard_plan_get_op(const struct MpReshardPlan *p,
                                     size_t index,
                                     struct MpCopyOp *out);

/**
 * Checks coverage, overlap and placement of the plan's ops.
 */
enum MpStatus mp_reshard_plan_verify(const struct MpReshardPlan *p);

enum MpStatus mp_reshard_plan_to_json(const struct MpReshardPlan *p, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MESHPLAN_H */
