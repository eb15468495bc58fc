#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hrmlm/tensor.hpp"

namespace hrmlm {

// Per-step recurrence diagnostics (shared-weight models only).
struct StepTrace {
  int64_t step = 0;  // 1-indexed within a pass
  bool h_fired = false;
  double gate_mean = 0.0;
  double norm_zl = 0.0;        // mean per-row L2 after the fast update
  double norm_zh_before = 0.0;
  double norm_zh_after = 0.0;
  double cos_hl = 0.0;         // mean per-row cosine(z_H, z_L)
  // Contraction-bound monitor inputs: the fast state's max-abs before and
  // after the update and the max-abs of the gated injection term.
  double zl_inf_prev = 0.0;
  double zl_inf_new = 0.0;
  double inj_inf = 0.0;
};

struct EvalOptions {
  bool freeze_slow = false;     // skip every slow-module update
  int64_t window_override = 0;  // > 0: replace the configured grad window
};

struct ForwardOut {
  Tensor loss;        // scalar training objective
  double ce = 0.0;    // token-mean cross entropy (nats), averaged over passes
  Tensor logits;      // [n, vocab] from the final pass
  std::vector<StepTrace> trace;                  // all passes concatenated
  std::vector<std::array<double, 3>> fusion_weights;  // mean mix per pass
};

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::string kind() const = 0;
  // xs/ys: token ids, ys[t] is the target for position t.
  virtual ForwardOut forward_loss(const std::vector<int64_t>& xs,
                                  const std::vector<int64_t>& ys,
                                  const EvalOptions& opts = {}) = 0;
  virtual std::vector<NamedParam>& params() = 0;
  // Number of shared-weight recurrence steps per pass (0 for a stacked model).
  virtual int64_t shared_steps() const = 0;
  // On-tape tail steps (equals shared_steps when nothing is truncated).
  virtual int64_t grad_window() const = 0;
  virtual int64_t vocab() const = 0;
  virtual int64_t max_seq() const = 0;

  int64_t trainable_param_count();
  int64_t stored_param_count();
};

}  // namespace hrmlm
