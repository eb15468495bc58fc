#pragma once

#include "hrmlm/blocks.hpp"
#include "hrmlm/model.hpp"
#include "hrmlm/rng.hpp"

namespace hrmlm {

struct HRMConfig {
  int64_t d = 8;
  int64_t heads = 2;
  int64_t vocab = 11;
  int64_t seq = 6;
  int64_t cycles = 2;   // slow-module firings per pass (N)
  int64_t t_steps = 3;  // fast steps per slow firing (T)
  int64_t passes = 1;   // supervision passes per example (S)
  int64_t window = 0;   // on-tape tail steps (K); 0 means the full pass
  double lambda_entropy = 0.01;  // weight of the mix-entropy bonus
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  int64_t steps_per_pass() const { return cycles * t_steps; }  // M
  void validate() const;
};

// One gated recurrent module: reads a normalized context, produces a sigmoid
// gate and a bounded injection, and convexly mixes them into the state:
//   c = rms_norm([parts])
//   g = sigmoid(c w_gate)
//   h = block(c w_in)
//   z' = g * z + (1 - g) * (alpha * h w_out)
struct GatedModuleParams {
  Tensor norm_c;  // [width * d]
  Tensor w_gate;  // [width * d, d]
  Tensor w_in;    // [width * d, d]
  AttnBlockParams block;
  Tensor w_out;   // [d, d]
  Tensor alpha;   // [1], learned injection scale
  int64_t width = 0;  // context parts (3 for the fast module, 2 for the slow)
};

struct FusionParams {
  Tensor norm_h, norm_l, norm_i;  // [d] each
  Tensor w_og;                    // [3d, 3]
  Tensor w_final;                 // [d, d]
  Tensor tau;                     // [1], learned mix temperature
};

struct FusionOut {
  Tensor logits;  // [n, vocab]
  Tensor mix;     // [n, 3] softmax mix weights
  Tensor mix_mean;  // [3]
};

// Closed-form per-group parameter counts (trainable; the frozen state
// prototypes are stored separately).
int64_t hrm_param_count_embedding(int64_t d, int64_t vocab);  // V d
int64_t hrm_param_count_encoder(int64_t d);                   // 16 d^2 + 2 d
int64_t hrm_param_count_fast(int64_t d);                      // 23 d^2 + 5 d + 1
int64_t hrm_param_count_slow(int64_t d);                      // 21 d^2 + 4 d + 1
int64_t hrm_param_count_fusion(int64_t d);                    // d^2 + 12 d + 1
int64_t hrm_param_count_total(int64_t d, int64_t vocab);

class HRMModel : public LanguageModel {
 public:
  // init_std_override > 0 replaces the default 0.02/sqrt(M) for the
  // step-shared matrices (blocks and module projections).
  HRMModel(const HRMConfig& cfg, Rng& rng, double init_std_override = 0.0);

  const HRMConfig& config() const { return cfg_; }

  // Token embedding followed by one encoder block application: [n, d].
  Tensor input_encode(const std::vector<int64_t>& tokens);
  // States start as row-broadcast frozen prototypes.
  std::pair<Tensor, Tensor> init_states(int64_t n);  // {z_H, z_L}
  Tensor fast_update(const Tensor& zl, const Tensor& zh, const Tensor& xt,
                     StepTrace* tr = nullptr);
  Tensor slow_update(const Tensor& zh, const Tensor& zl);
  // Runs M = cycles * t_steps interleaved updates on (zh, zl): the fast
  // module every step, the slow module whenever the 1-indexed step is a
  // multiple of t_steps. The first M - window steps run off-tape; values are
  // identical for every window in [1, M].
  void one_pass(const Tensor& xt, Tensor& zh, Tensor& zl, int64_t window,
                bool freeze_slow, std::vector<StepTrace>* trace);
  FusionOut output_fusion(const Tensor& zh, const Tensor& zl, const Tensor& xt);

  ForwardOut forward_loss(const std::vector<int64_t>& xs,
                          const std::vector<int64_t>& ys,
                          const EvalOptions& opts = {}) override;

  std::vector<NamedParam>& params() override { return params_; }
  std::string kind() const override { return "hrm"; }
  int64_t shared_steps() const override { return cfg_.steps_per_pass(); }
  int64_t grad_window() const override;
  int64_t vocab() const override { return cfg_.vocab; }
  int64_t max_seq() const override { return cfg_.seq; }

  GatedModuleParams& fast() { return fast_; }
  GatedModuleParams& slow() { return slow_; }
  FusionParams& fusion() { return fusion_; }
  Tensor& embedding_weight() { return emb_; }
  AttnBlockParams& encoder() { return encoder_; }

 private:
  Tensor gated_update(const GatedModuleParams& p, const Tensor& z,
                      const std::vector<Tensor>& context, StepTrace* tr);

  HRMConfig cfg_;
  RopeTable rope_;
  Tensor emb_;  // [vocab, d], tied with the output projection
  AttnBlockParams encoder_;
  GatedModuleParams fast_;
  GatedModuleParams slow_;
  FusionParams fusion_;
  Tensor proto_h_, proto_l_;  // [d] frozen initial-state prototypes
  std::vector<NamedParam> params_;
};

// Data-side diagnostics shared with the analysis pass.
double mean_row_l2(const Tensor& x);
double max_abs(const Tensor& x);
double mean_row_cosine(const Tensor& a, const Tensor& b);

}  // namespace hrmlm
