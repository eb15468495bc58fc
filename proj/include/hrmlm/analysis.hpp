#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hrmlm/model.hpp"
#include "hrmlm/trainer.hpp"

namespace hrmlm {

// ---- memory ----

struct KVSpec {
  int64_t depth = 0;     // cached block applications (layers, or M for shared)
  int64_t seq = 0;       // cached positions
  int64_t heads = 0;
  int64_t head_dim = 0;
  int64_t bytes_per_element = 2;
};

// 2 (K and V) * depth * seq * heads * head_dim * bytes.
int64_t kv_cache_bytes(const KVSpec& spec);

// Cache depth of a shared-weight model relative to a stacked reference:
// the shared model caches per recurrence step.
double kv_depth_ratio(int64_t shared_steps, int64_t ref_layers);

// ---- parameters ----

struct ParamGroup {
  std::string name;
  int64_t count = 0;
};

struct ParamReport {
  std::string kind;
  std::vector<ParamGroup> groups;
  int64_t trainable = 0;
  int64_t stored = 0;  // trainable + frozen state prototypes
};

ParamReport param_report_hrm(int64_t d, int64_t vocab);
ParamReport param_report_transformer(int64_t d, int64_t vocab, int64_t layers);
ParamReport param_report_unitf(int64_t d, int64_t vocab);

// Attention-weight savings of the two-speed model (3 stored block instances:
// encoder, fast, slow) against a stacked reference of `ref_layers` blocks.
double attn_block_savings(int64_t ref_layers);

// ---- compute ----

// Training cost as a multiple of C, the per-application block forward cost
// (backward counted as 2x forward, so a fully on-tape application costs 3C).
struct FlopsReport {
  int64_t coeff = 0;
  std::string expr;  // e.g. "36C"
};

// transformer: 3 * layers; shared-weight: passes * (steps + 2 * window).
FlopsReport train_flops(const std::string& kind, int64_t depth, int64_t window,
                        int64_t passes);

// ---- behavioral probes ----

struct FreezeReport {
  double ce_normal = 0.0;
  double ce_frozen = 0.0;  // slow module never fires
  double delta = 0.0;      // frozen - normal
};

FreezeReport freeze_h_eval(LanguageModel& model, const Corpus& corpus,
                           int64_t windows = 8);

// Mean per-step trace over the corpus's eval windows. The CSV step column is
// 0-indexed.
std::vector<StepTrace> trace_report(LanguageModel& model, const Corpus& corpus,
                                    int64_t windows = 8);
void write_trace_csv(const std::string& path,
                     const std::vector<StepTrace>& rows);

// ---- contraction bound ----

struct StabilityReport {
  int64_t trials = 0;
  int64_t violations = 0;
  double max_excess = 0.0;  // worst (new - bound), <= 0 when clean
};

// Fuzzes the gated update z' = g*z + (1-g)*a elementwise with random
// g in (0,1), z, a, and checks max|z'| <= max(max|z|, max|a|) + tol.
StabilityReport stability_fuzz(uint64_t seed, int64_t trials, double tol = 1e-12);

// Same bound checked on recorded model traces.
int64_t count_trace_violations(const std::vector<StepTrace>& trace,
                               double tol = 1e-12);

// ---- gradient amplification ----

// For the aligned linear chain z_{i+1} = z_i + theta * x (loss = z_k), the
// parameter gradient is exactly k * x; returns |grad(k)| / |grad(1)|
// measured through the tape.
double linear_chain_grad_ratio(int64_t k, double theta, double x);

struct AmplificationReport {
  std::vector<int64_t> windows;
  std::vector<double> linear_ratio;  // == window, exactly
  std::vector<double> model_ratio;   // measured on a toy model, reported only
};

AmplificationReport amplification_probe(const std::vector<int64_t>& windows,
                                        uint64_t seed);

}  // namespace hrmlm
