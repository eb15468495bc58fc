#include "hrmlm/baselines.hpp"

#include <cmath>

#include "hrmlm/errors.hpp"

namespace hrmlm {

namespace {

void validate_common(int64_t d, int64_t heads, int64_t vocab, int64_t seq) {
  if (d <= 0) throw config_error("model width must be positive");
  if (heads <= 0 || d % heads != 0) {
    throw config_error("width " + std::to_string(d) + " is not divisible into " +
                       std::to_string(heads) + " heads");
  }
  if ((d / heads) % 2 != 0) {
    throw config_error("head dimension " + std::to_string(d / heads) +
                       " must be even for rotary positions");
  }
  if (vocab < 2) throw config_error("vocabulary must have at least 2 entries");
  if (seq < 1) throw config_error("sequence length must be positive");
}

Tensor normal_matrix(int64_t r, int64_t c, Rng& rng, double std) {
  Tensor t = Tensor::zeros({r, c}, true);
  for (double& v : t.vec()) v = rng.normal(0.0, std);
  return t;
}

std::vector<int64_t> checked_targets(const std::vector<int64_t>& xs,
                                     const std::vector<int64_t>& ys) {
  if (xs.size() != ys.size()) {
    throw data_error("forward_loss: " + std::to_string(xs.size()) +
                     " inputs vs " + std::to_string(ys.size()) + " targets");
  }
  if (xs.empty()) throw data_error("forward_loss: empty token sequence");
  return ys;
}

}  // namespace

void TransformerConfig::validate() const {
  validate_common(d, heads, vocab, seq);
  if (layers < 1) throw config_error("layers must be positive");
  if (norm_eps <= 0.0) throw config_error("norm_eps must be positive");
}

TransformerModel::TransformerModel(const TransformerConfig& cfg, Rng& rng,
                                   double init_std)
    : cfg_(cfg) {
  cfg_.validate();
  rope_ = make_rope_table(cfg_.seq, cfg_.d / cfg_.heads, cfg_.rope_base);
  emb_ = normal_matrix(cfg_.vocab, cfg_.d, rng, 0.02);
  for (int64_t l = 0; l < cfg_.layers; ++l)
    blocks_.push_back(make_attn_block(cfg_.d, rng, init_std));
  final_norm_ = Tensor::full({cfg_.d}, 1.0, true);
  params_.push_back({"emb.weight", emb_, true});
  for (int64_t l = 0; l < cfg_.layers; ++l)
    collect_block_params("layer" + std::to_string(l) + ".block", blocks_[static_cast<size_t>(l)], params_);
  params_.push_back({"final_norm", final_norm_, false});
}

Tensor TransformerModel::encode(const std::vector<int64_t>& xs) {
  if (static_cast<int64_t>(xs.size()) > cfg_.seq) {
    throw data_error("sequence of " + std::to_string(xs.size()) +
                     " tokens exceeds the configured length " +
                     std::to_string(cfg_.seq));
  }
  Tensor h = embedding(emb_, xs);
  for (AttnBlockParams& b : blocks_)
    h = attn_block_forward(h, b, cfg_.heads, rope_, cfg_.norm_eps);
  return h;
}

ForwardOut TransformerModel::forward_loss(const std::vector<int64_t>& xs,
                                          const std::vector<int64_t>& ys,
                                          const EvalOptions&) {
  checked_targets(xs, ys);
  Tensor h = rms_norm(encode(xs), final_norm_, cfg_.norm_eps);
  ForwardOut out;
  out.logits = matmul_nt(h, emb_);
  out.loss = cross_entropy(out.logits, ys);
  out.ce = out.loss.item();
  return out;
}

int64_t transformer_param_count(int64_t d, int64_t vocab, int64_t layers) {
  return vocab * d + layers * block_param_count(d) + d;
}

void UniTFConfig::validate() const {
  validate_common(d, heads, vocab, seq);
  if (steps < 1) throw config_error("steps must be positive");
  if (window < 0 || window > steps) {
    throw config_error("grad window " + std::to_string(window) + " outside [0, " +
                       std::to_string(steps) + "]");
  }
  if (init_safety <= 0.0) throw config_error("init_safety must be positive");
  if (norm_eps <= 0.0) throw config_error("norm_eps must be positive");
}

double unitf_init_std(int64_t steps, int64_t d, int64_t d_base, double safety) {
  if (steps < 1 || d < 1 || d_base < 1 || safety <= 0.0) {
    throw config_error("unitf_init_std: all factors must be positive");
  }
  return 0.02 / std::sqrt(safety * static_cast<double>(steps) *
                          static_cast<double>(d) / static_cast<double>(d_base));
}

UniTFModel::UniTFModel(const UniTFConfig& cfg, Rng& rng,
                       double init_std_override)
    : cfg_(cfg) {
  cfg_.validate();
  rope_ = make_rope_table(cfg_.seq, cfg_.d / cfg_.heads, cfg_.rope_base);
  const double std = init_std_override > 0.0
                         ? init_std_override
                         : unitf_init_std(cfg_.steps, cfg_.d, 4096, cfg_.init_safety);
  emb_ = normal_matrix(cfg_.vocab, cfg_.d, rng, 0.02);
  block_ = make_attn_block(cfg_.d, rng, std);
  final_norm_ = Tensor::full({cfg_.d}, 1.0, true);
  params_.push_back({"emb.weight", emb_, true});
  collect_block_params("block", block_, params_);
  params_.push_back({"final_norm", final_norm_, false});
}

ForwardOut UniTFModel::forward_loss(const std::vector<int64_t>& xs,
                                    const std::vector<int64_t>& ys,
                                    const EvalOptions& opts) {
  checked_targets(xs, ys);
  if (static_cast<int64_t>(xs.size()) > cfg_.seq) {
    throw data_error("sequence of " + std::to_string(xs.size()) +
                     " tokens exceeds the configured length " +
                     std::to_string(cfg_.seq));
  }
  int64_t window = opts.window_override > 0 ? opts.window_override
                                            : grad_window();
  if (window < 1 || window > cfg_.steps) {
    throw config_error("grad window " + std::to_string(window) + " outside [1, " +
                       std::to_string(cfg_.steps) + "]");
  }
  Tensor h = embedding(emb_, xs);
  const int64_t off_tape = cfg_.steps - window;
  for (int64_t i = 0; i < cfg_.steps; ++i) {
    if (i < off_tape) {
      NoGradGuard ng;
      h = attn_block_forward(h, block_, cfg_.heads, rope_, cfg_.norm_eps);
    } else {
      h = attn_block_forward(h, block_, cfg_.heads, rope_, cfg_.norm_eps);
    }
  }
  h = rms_norm(h, final_norm_, cfg_.norm_eps);
  ForwardOut out;
  out.logits = matmul_nt(h, emb_);
  out.loss = cross_entropy(out.logits, ys);
  out.ce = out.loss.item();
  return out;
}

int64_t unitf_param_count(int64_t d, int64_t vocab) {
  return vocab * d + block_param_count(d) + d;
}

}  // namespace hrmlm
