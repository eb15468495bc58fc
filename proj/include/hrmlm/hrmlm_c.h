/* C interface to the hrmlm core: opaque run handles, integer status codes,
 * thread-local error text. Every function returns HRMLM_OK (0) on success or
 * a nonzero status; hrmlm_last_error() describes the most recent failure on
 * the calling thread. String outputs are written NUL-terminated and
 * truncated to the given capacity. */
#ifndef HRMLM_C_H
#define HRMLM_C_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define HRMLM_OK 0
#define HRMLM_ERR_CONFIG 2   /* bad config file, key, value, or shape */
#define HRMLM_ERR_DATA 3     /* missing/empty corpus, bad checkpoint, io */
#define HRMLM_ERR_NUMERIC 4  /* non-finite values or degenerate math */
#define HRMLM_ERR_ACCEPT 5   /* a checked tolerance was exceeded */

typedef struct hrmlm_run hrmlm_run;

const char* hrmlm_version(void);
/* Thread-local text for the last failure; empty string when none. */
const char* hrmlm_last_error(void);

/* Parses a config file and applies "section.key=value" overrides in order.
 * Returns NULL on failure (see hrmlm_last_error). */
hrmlm_run* hrmlm_run_open(const char* config_path,
                          const char* const* overrides, int32_t n_overrides);
void hrmlm_run_close(hrmlm_run* run);
/* One more "section.key=value" override on an open handle. */
int32_t hrmlm_run_set(hrmlm_run* run, const char* assignment);
/* Canonical serialized form of the run's config. */
int32_t hrmlm_config_text(hrmlm_run* run, char* buf, int64_t cap);

/* Trains per the run config. result_json (optional) receives a summary:
 * {"steps_run":..,"final_train_loss":..,"final_val_ce":..,"best_val_ce":..,
 *  "stopped_early":..,"stability_violations":..,"final_checkpoint":".."} */
int32_t hrmlm_train(hrmlm_run* run, char* result_json, int64_t cap);

/* Central-difference check of the full-model gradient on one deterministic
 * batch, evaluated at full gradient window and a single supervision pass so
 * the probe differentiates the same function the tape does. Fills the worst
 * relative error and the offending parameter; returns HRMLM_ERR_ACCEPT when
 * the error exceeds 1e-5. */
int32_t hrmlm_gradcheck(hrmlm_run* run, double* max_rel_err,
                        char* worst_param, int64_t cap);

/* what: "trace" | "freeze" | "stability" | "amplification".
 * checkpoint: optional (NULL/empty analyzes the freshly initialized model).
 * Writes report files into out_dir and a one-object JSON summary. */
int32_t hrmlm_analyze(hrmlm_run* run, const char* what, const char* checkpoint,
                      const char* out_dir, char* summary_json, int64_t cap);

/* Stateless memory/parameter/compute calculator. spec_json fields:
 *   kind ("hrm"|"transformer"|"unitf"), d, vocab, layers, steps, window,
 *   passes, seq, heads, bytes, ref_layers  (all optional except kind).
 * Emits every quantity the given fields determine: parameter breakdown,
 * kv cache bytes, cache-depth ratio, training FLOPs coefficient.
 * as_json != 0 emits JSON, otherwise an aligned text table. */
int32_t hrmlm_memcalc(const char* spec_json, int32_t as_json, char* out,
                      int64_t cap);

#ifdef __cplusplus
}
#endif

#endif /* HRMLM_C_H */
