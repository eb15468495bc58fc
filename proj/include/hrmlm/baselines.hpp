#pragma once

#include "hrmlm/blocks.hpp"
#include "hrmlm/model.hpp"
#include "hrmlm/rng.hpp"

namespace hrmlm {

struct TransformerConfig {
  int64_t d = 8;
  int64_t heads = 2;
  int64_t vocab = 11;
  int64_t seq = 6;
  int64_t layers = 2;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  void validate() const;
};

// Stacked pre-LN-free residual blocks, tied embedding/output.
class TransformerModel : public LanguageModel {
 public:
  TransformerModel(const TransformerConfig& cfg, Rng& rng,
                   double init_std = 0.02);
  ForwardOut forward_loss(const std::vector<int64_t>& xs,
                          const std::vector<int64_t>& ys,
                          const EvalOptions& opts = {}) override;
  std::vector<NamedParam>& params() override { return params_; }
  std::string kind() const override { return "transformer"; }
  int64_t shared_steps() const override { return 0; }
  int64_t grad_window() const override { return cfg_.layers; }
  int64_t vocab() const override { return cfg_.vocab; }
  int64_t max_seq() const override { return cfg_.seq; }
  const TransformerConfig& config() const { return cfg_; }

  // Hidden state after the full stack (pre output norm/logits); for tests.
  Tensor encode(const std::vector<int64_t>& xs);

 private:
  TransformerConfig cfg_;
  RopeTable rope_;
  Tensor emb_;
  std::vector<AttnBlockParams> blocks_;
  Tensor final_norm_;
  std::vector<NamedParam> params_;
};

int64_t transformer_param_count(int64_t d, int64_t vocab, int64_t layers);

struct UniTFConfig {
  int64_t d = 8;
  int64_t heads = 2;
  int64_t vocab = 11;
  int64_t seq = 6;
  int64_t steps = 4;   // block applications per forward (M)
  int64_t window = 0;  // on-tape tail applications (K); 0 means all
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  double init_safety = 2.0;
  void validate() const;
};

// Width-adjusted initialization scale for a block reused `steps` times:
// 0.02 / sqrt(safety * steps * d / d_base).
double unitf_init_std(int64_t steps, int64_t d, int64_t d_base = 4096,
                      double safety = 2.0);

// One shared block applied `steps` times; optional truncation runs the first
// steps - window applications off-tape (forward values are unaffected).
class UniTFModel : public LanguageModel {
 public:
  // init_std_override > 0 replaces the width-adjusted default.
  UniTFModel(const UniTFConfig& cfg, Rng& rng, double init_std_override = 0.0);
  ForwardOut forward_loss(const std::vector<int64_t>& xs,
                          const std::vector<int64_t>& ys,
                          const EvalOptions& opts = {}) override;
  std::vector<NamedParam>& params() override { return params_; }
  std::string kind() const override { return "unitf"; }
  int64_t shared_steps() const override { return cfg_.steps; }
  int64_t grad_window() const override {
    return cfg_.window == 0 ? cfg_.steps : cfg_.window;
  }
  int64_t vocab() const override { return cfg_.vocab; }
  int64_t max_seq() const override { return cfg_.seq; }
  const UniTFConfig& config() const { return cfg_; }
  AttnBlockParams& block() { return block_; }
  Tensor& embedding_weight() { return emb_; }
  Tensor& final_norm() { return final_norm_; }

 private:
  UniTFConfig cfg_;
  RopeTable rope_;
  Tensor emb_;
  AttnBlockParams block_;
  Tensor final_norm_;
  std::vector<NamedParam> params_;
};

int64_t unitf_param_count(int64_t d, int64_t vocab);

}  // namespace hrmlm
