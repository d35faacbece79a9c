#ifndef BLORA_H
#define BLORA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BloraStatus {
  BLORA_STATUS_OK = 0,
  /**
   * Bad argument: unknown block, role, alpha out of range.
   */
  BLORA_STATUS_USAGE = 1,
  /**
   * Unreadable or malformed file, unrecognized key.
   */
  BLORA_STATUS_FORMAT = 2,
  /**
   * Adapter invariant broken: overlap, shape or rank mismatch.
   */
  BLORA_STATUS_INVARIANT = 3,
  BLORA_STATUS_NULL_POINTER = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  BLORA_STATUS_PANIC = 5,
} BloraStatus;

typedef enum BloraRole {
  BLORA_ROLE_CONTENT = 0,
  BLORA_ROLE_STYLE = 1,
} BloraRole;

/**
 * Opaque adapter handle.
 */
typedef struct BloraAdapter BloraAdapter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *blora_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *blora_version(void);

/**
 * Reads an adapter file in either naming scheme.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum BloraStatus blora_adapter_load(const char *path, struct BloraAdapter **out);

/**
 * Writes the adapter in canonical form.
 *
 * # Safety
 * `adapter` must be a live handle and `path` a NUL-terminated string.
 */
enum BloraStatus blora_adapter_save(const struct BloraAdapter *adapter, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `adapter` must be null or a handle not yet freed.
 */
void blora_adapter_free(struct BloraAdapter *adapter);

/**
 * Number of LoRA pairs; 0 for a null handle.
 *
 * # Safety
 * `adapter` must be null or a live handle.
 */
size_t blora_adapter_stem_count(const struct BloraAdapter *adapter);

/**
 * Number of LoRA pairs in one block; 0 for a null handle or a block outside 0..=7.
 *
 * # Safety
 * `adapter` must be null or a live handle.
 */
size_t blora_adapter_block_stem_count(const struct BloraAdapter *adapter, uint32_t block);

/**
 * Keeps only the stems of `block`, tagged with `role`.
 *
 * # Safety
 * `adapter` must be a live handle and `out` a writable pointer.
 */
enum BloraStatus blora_adapter_extract(const struct BloraAdapter *adapter,
                                       uint32_t block,
                                       enum BloraRole role,
                                       struct BloraAdapter **out);

/**
 * Union of a content and a style adapter with disjoint stems.
 *
 * # Safety
 * Both handles must be live and `out` a writable pointer.
 */
enum BloraStatus blora_adapter_combine(const struct BloraAdapter *content,
                                       const struct BloraAdapter *style,
                                       struct BloraAdapter **out);

/**
 * Multiplies every pair's strength by `alpha`.
 *
 * # Safety
 * `adapter` must be a live handle and `out` a writable pointer.
 */
enum BloraStatus blora_adapter_scale(const struct BloraAdapter *adapter,
                                     float alpha,
                                     struct BloraAdapter **out);

/**
 * Writes `base + alpha·ΔW` for every adapted weight of the base file to `out_path`.
 *
 * # Safety
 * `adapter` must be a live handle; both paths NUL-terminated strings.
 */
enum BloraStatus blora_merge_file(const char *base_path,
                                  const struct BloraAdapter *adapter,
                                  float alpha,
                                  const char *out_path);

/**
 * Attention layers in `block`; 0 outside 0..=7.
 */
size_t blora_layer_count(uint32_t block);

/**
 * Block index of an adapter tensor key or stem, in either naming scheme.
 *
 * # Safety
 * `key` must be a NUL-terminated string and `out_block` a writable pointer.
 */
enum BloraStatus blora_block_of_key(const char *key, uint32_t *out_block);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLORA_H */
