#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hrmlm/baselines.hpp"
#include "hrmlm/hrm.hpp"
#include "hrmlm/model.hpp"

namespace hrmlm {

// ---- optimizer ----

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;  // decoupled; applies to decay-flagged params
};

class AdamW {
 public:
  AdamW(std::vector<NamedParam>& params, const AdamWConfig& cfg);
  // Bias-corrected moment update + decoupled decay. An empty grad buffer
  // counts as a zero gradient. Frozen params are untouched.
  void step(double lr);
  void zero_grad();
  int64_t t() const { return t_; }
  void set_t(int64_t t) { t_ = t; }
  // Moment buffers as named tensors ("adam.m.<param>", "adam.v.<param>")
  // for checkpointing.
  std::vector<NamedParam>& state() { return state_; }

 private:
  std::vector<NamedParam>* params_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::vector<NamedParam> state_;  // m then v per trainable param
};

// Linear warmup to lr_max, then cosine decay to lr_min at max_steps.
// step is 1-indexed; lr_at(warmup) == lr_max, lr_at(max_steps) == lr_min.
double lr_at(int64_t step, int64_t warmup, int64_t max_steps, double lr_max,
             double lr_min);

struct ClipResult {
  double pre_norm = 0.0;  // global L2 over all trainable grads
  double scale = 1.0;     // factor applied (1 when under the threshold)
};

// Global-norm clipping; a non-finite gradient raises a numeric_error naming
// the parameter.
ClipResult clip_gradients(std::vector<NamedParam>& params, double max_norm);

// ---- data ----

struct Corpus {
  std::vector<uint8_t> tokens;
  std::string source;
};

// spec forms:
//   copy:<period>:<length>      one random byte pattern of the given period,
//                               tiled to length
//   counting:<length>           (start + i * stride) mod 256
//   mixed:<length>              alternating 4096-token chunks of the above
//   <path>                      raw bytes of a file
Corpus load_corpus(const std::string& spec, uint64_t seed);

// Deterministic window sampler over a corpus: training offsets are a pure
// function of (seed, step, index); evaluation windows are the fixed tail.
class Batcher {
 public:
  Batcher(const Corpus& corpus, int64_t seq, int64_t eval_windows = 8);
  int64_t eval_windows() const { return eval_windows_; }
  void window_at(int64_t offset, std::vector<int64_t>& xs,
                 std::vector<int64_t>& ys) const;
  int64_t train_offset(uint64_t seed, int64_t step, int64_t index) const;
  void eval_window(int64_t i, std::vector<int64_t>& xs,
                   std::vector<int64_t>& ys) const;

 private:
  const Corpus* corpus_;
  int64_t seq_;
  int64_t eval_windows_;
  int64_t train_span_;  // exclusive upper bound for training offsets
  int64_t eval_start_;
};

// ---- checkpoints ----
// Layout (little-endian): magic "HRMCKPT1", u32 version, u64 model tensor
// count, per tensor {u32 name length, name bytes, u32 rank, u64 dims...,
// f64 payload}, u64 optimizer tensor count, same per-tensor scheme, u64 step.

void save_checkpoint(const std::string& path,
                     const std::vector<NamedParam>& model_tensors,
                     const std::vector<NamedParam>& opt_tensors, uint64_t step);

// Loads into existing tensors, matched by name. Any name or shape mismatch
// is a config_error naming the first offending tensor. Passing a null
// opt_tensors skips the optimizer section.
void load_checkpoint(const std::string& path,
                     std::vector<NamedParam>& model_tensors,
                     std::vector<NamedParam>* opt_tensors, uint64_t* step);

// ---- run configuration ----

struct TrainConfig {
  // model
  std::string kind = "hrm";  // hrm | transformer | unitf
  HRMConfig hrm;
  int64_t layers = 2;        // transformer depth
  int64_t unitf_steps = 4;   // unitf block applications (M)
  int64_t unitf_window = 0;  // unitf on-tape tail (K); 0 = all
  double init_safety = 2.0;
  double init_std_override = 0.0;  // > 0 replaces the default init scale

  // optimization
  uint64_t seed = 42;
  int64_t batch = 8;
  int64_t grad_accum = 1;
  int64_t max_steps = 100;
  int64_t warmup = -1;  // -1: max(1000, steps_per_pass * 100) for hrm, 1000 otherwise
  double lr_max = 1e-3;
  double lr_min = -1.0;  // -1: lr_max / 10
  double clip_base = 1.0;
  AdamWConfig adamw;
  bool lr_scale_by_passes = false;  // divide lr by S when S > 1

  // data and IO
  std::string corpus = "copy:8:65536";
  int64_t eval_interval = 50;
  int64_t checkpoint_interval = 0;  // 0: final checkpoint only
  double stop_at_val_ce = 0.0;      // > 0: stop once val CE drops below
  bool monitor_stability = true;
  std::string metrics_path;     // JSONL; empty disables
  std::string curves_path;      // CSV of (iter, val_ce); empty disables
  std::string checkpoint_dir;   // empty disables checkpoints
  std::string resume;           // checkpoint to continue from

  // config echo for the metrics header ("section.key" -> value)
  std::vector<std::pair<std::string, std::string>> echo;

  int64_t shared_steps() const;
  int64_t grad_window_value() const;
  double effective_clip() const;
  int64_t effective_warmup() const;
  double effective_lr_max() const;
  double effective_lr_min() const;
  void validate() const;
};

std::unique_ptr<LanguageModel> build_model(const TrainConfig& cfg);

struct TrainResult {
  int64_t steps_run = 0;
  double final_train_loss = 0.0;
  double final_val_ce = 0.0;
  double best_val_ce = 0.0;
  bool stopped_early = false;
  int64_t stability_violations = 0;
  std::string final_checkpoint;  // empty when checkpoints are disabled
};

// If HRMLM_METRICS_DIR is set, metrics/curves files land in that directory
// (keeping their base names).
std::string resolve_metrics_path(const std::string& configured);

TrainResult train_loop(const TrainConfig& cfg);

}  // namespace hrmlm
