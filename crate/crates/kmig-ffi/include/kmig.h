#ifndef KMIG_H
#define KMIG_H

/* Generated by cbindgen from the kmig-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum KmigStatus {
  /**
   * The call succeeded.
   */
  KMIG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  KMIG_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  KMIG_STATUS_INVALID_UTF8 = 2,
  /**
   * The specification or arguments were rejected.
   */
  KMIG_STATUS_CONFIG = 3,
  /**
   * The simulation itself failed; see `kmig_last_error`.
   */
  KMIG_STATUS_RUNTIME = 4,
  /**
   * The output buffer is too small; the needed size was written.
   */
  KMIG_STATUS_BUFFER_TOO_SMALL = 5,
} KmigStatus;

/**
 * One simulated guest plus the hypervisor-side machinery working on it.
 */
typedef struct KmigSim KmigSim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *kmig_version(void);

/**
 * Copies the last error message on this thread into `buf` (truncating if
 * needed, always NUL-terminated when `cap > 0`). Returns the full length
 * including the NUL, or 0 when no error has been recorded.
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes, or be null.
 */
size_t kmig_last_error(char *buf, size_t cap);

/**
 * Builds a simulator session from a scenario-spec JSON document and
 * stores the handle in `*out`.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string, `out` a valid pointer.
 */
enum KmigStatus kmig_sim_new(const char *spec_json, struct KmigSim **out);

/**
 * Releases a session. Null is a no-op.
 *
 * # Safety
 * `sim` must be null or a handle from `kmig_sim_new`, freed only once.
 */
void kmig_sim_free(struct KmigSim *sim);

/**
 * Opens `path` in process `pid` and writes the descriptor to `*out_fd`.
 *
 * # Safety
 * Pointer arguments as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_open(struct KmigSim *sim,
                              uint32_t pid,
                              const char *path,
                              uint32_t *out_fd);

/**
 * Reads `len` bytes from `fd`; `*out_bytes` receives the count actually
 * transferred.
 *
 * # Safety
 * Pointer arguments as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_read(struct KmigSim *sim,
                              uint32_t pid,
                              uint32_t fd,
                              uint64_t len,
                              uint64_t *out_bytes);

/**
 * Writes `len` bytes to `fd`; `*out_bytes` receives the count actually
 * transferred.
 *
 * # Safety
 * Pointer arguments as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_write(struct KmigSim *sim,
                               uint32_t pid,
                               uint32_t fd,
                               uint64_t len,
                               uint64_t *out_bytes);

/**
 * Closes `fd` in process `pid`.
 *
 * # Safety
 * `sim` as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_close(struct KmigSim *sim, uint32_t pid, uint32_t fd);

/**
 * Allocates the protected area by injecting an mmap into a syscall of
 * `carrier_pid`. The base address (from the spec) lands in `*out_base`.
 *
 * # Safety
 * Pointer arguments as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_allocate_area(struct KmigSim *sim,
                                       uint32_t carrier_pid,
                                       uint64_t *out_base);

/**
 * Migrates the dentries of the first `k` monitored files into the
 * protected area; `*out_moved` receives the number moved. One-shot.
 *
 * # Safety
 * Pointer arguments as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_migrate(struct KmigSim *sim, uint32_t k, uint32_t *out_moved);

/**
 * Traps the protected-area pages for the chosen access kinds and marks
 * the migrated objects as the monitored targets.
 *
 * # Safety
 * `sim` as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_watch(struct KmigSim *sim, bool read, bool write);

/**
 * Total trap events so far.
 *
 * # Safety
 * Pointer arguments as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_event_total(struct KmigSim *sim, uint64_t *out);

/**
 * Events attributed to anything other than the monitored targets.
 *
 * # Safety
 * Pointer arguments as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_false_triggers(struct KmigSim *sim, uint64_t *out);

/**
 * Current address of the cached dentry for `path`, if any.
 *
 * # Safety
 * Pointer arguments as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_dentry_addr(struct KmigSim *sim, const char *path, uint64_t *out_addr);

/**
 * Runs the structural audit of the guest, plus the stale-pointer check
 * when objects have been migrated.
 *
 * # Safety
 * `sim` as in `kmig_sim_new`.
 */
enum KmigStatus kmig_sim_verify(struct KmigSim *sim);

/**
 * The injection audit trail as JSON lines, via the two-call buffer
 * protocol.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes (or be null to query the
 * size); `needed` may be null.
 */
enum KmigStatus kmig_sim_audit_jsonl(struct KmigSim *sim, char *buf, size_t cap, size_t *needed);

/**
 * Runs the monitoring-overhead sweep for a spec and fills `buf` with the
 * CSV report (two-call buffer protocol). `ks`/`ks_len` may be null/0 for
 * the default ladder.
 *
 * # Safety
 * `spec_json` as in `kmig_sim_new`; `ks` must point to `ks_len` values;
 * `buf`/`needed` as in `kmig_sim_audit_jsonl`.
 */
enum KmigStatus kmig_sweep_csv(const char *spec_json,
                               const uint32_t *ks,
                               size_t ks_len,
                               uint32_t repeats,
                               char *buf,
                               size_t cap,
                               size_t *needed);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* KMIG_H */
