#include "hrmlm/hrm.hpp"

#include <cmath>

#include "hrmlm/errors.hpp"

namespace hrmlm {

void HRMConfig::validate() const {
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
  if (cycles < 1) throw config_error("cycles must be positive");
  if (t_steps < 1) throw config_error("t_steps must be positive");
  if (passes < 1) throw config_error("passes must be positive");
  if (window < 0 || window > steps_per_pass()) {
    throw config_error("grad window " + std::to_string(window) +
                       " outside [0, " + std::to_string(steps_per_pass()) + "]");
  }
  if (lambda_entropy < 0.0) throw config_error("lambda_entropy must be non-negative");
  if (norm_eps <= 0.0) throw config_error("norm_eps must be positive");
}

int64_t hrm_param_count_embedding(int64_t d, int64_t vocab) { return vocab * d; }
int64_t hrm_param_count_encoder(int64_t d) { return block_param_count(d); }
int64_t hrm_param_count_fast(int64_t d) {
  // 3d norm + 2 * 3d*d projections + block + d^2 out + alpha
  return 3 * d + 6 * d * d + block_param_count(d) + d * d + 1;
}
int64_t hrm_param_count_slow(int64_t d) {
  return 2 * d + 4 * d * d + block_param_count(d) + d * d + 1;
}
int64_t hrm_param_count_fusion(int64_t d) { return 3 * d + 9 * d + d * d + 1; }
int64_t hrm_param_count_total(int64_t d, int64_t vocab) {
  return hrm_param_count_embedding(d, vocab) + hrm_param_count_encoder(d) +
         hrm_param_count_fast(d) + hrm_param_count_slow(d) +
         hrm_param_count_fusion(d);
}

namespace {

Tensor normal_matrix(int64_t r, int64_t c, Rng& rng, double std) {
  Tensor t = Tensor::zeros({r, c}, true);
  for (double& v : t.vec()) v = rng.normal(0.0, std);
  return t;
}

GatedModuleParams make_gated_module(int64_t d, int64_t width, Rng& rng,
                                    double std, double alpha_init) {
  GatedModuleParams p;
  p.norm_c = Tensor::full({width * d}, 1.0, true);
  p.w_gate = normal_matrix(width * d, d, rng, std);
  p.w_in = normal_matrix(width * d, d, rng, std);
  p.block = make_attn_block(d, rng, std);
  p.w_out = normal_matrix(d, d, rng, std);
  p.alpha = Tensor::from_data({1}, {alpha_init}, true);
  p.width = width;
  return p;
}

void collect_gated_params(const std::string& prefix, GatedModuleParams& p,
                          std::vector<NamedParam>& out) {
  out.push_back({prefix + ".norm_c", p.norm_c, false});
  out.push_back({prefix + ".w_gate", p.w_gate, true});
  out.push_back({prefix + ".w_in", p.w_in, true});
  collect_block_params(prefix + ".block", p.block, out);
  out.push_back({prefix + ".w_out", p.w_out, true});
  out.push_back({prefix + ".alpha", p.alpha, false});
}

}  // namespace

HRMModel::HRMModel(const HRMConfig& cfg, Rng& rng, double init_std_override)
    : cfg_(cfg) {
  cfg_.validate();
  const int64_t d = cfg_.d;
  rope_ = make_rope_table(cfg_.seq, d / cfg_.heads, cfg_.rope_base);
  const double shared_std =
      init_std_override > 0.0
          ? init_std_override
          : 0.02 / std::sqrt(static_cast<double>(cfg_.steps_per_pass()));

  emb_ = normal_matrix(cfg_.vocab, d, rng, 0.02);
  encoder_ = make_attn_block(d, rng, shared_std);
  fast_ = make_gated_module(d, 3, rng, shared_std, 0.1);
  slow_ = make_gated_module(d, 2, rng, shared_std, 0.1);
  fusion_.norm_h = Tensor::full({d}, 1.0, true);
  fusion_.norm_l = Tensor::full({d}, 1.0, true);
  fusion_.norm_i = Tensor::full({d}, 1.0, true);
  fusion_.w_og = normal_matrix(3 * d, 3, rng, 0.02);
  fusion_.w_final = normal_matrix(d, d, rng, 0.02);
  fusion_.tau = Tensor::from_data({1}, {1.0}, true);
  proto_h_ = Tensor::zeros({d}, false);
  for (double& v : proto_h_.vec()) v = rng.truncated_normal(0.0, 1.0, -2.0, 2.0);
  proto_l_ = Tensor::zeros({d}, false);
  for (double& v : proto_l_.vec()) v = rng.truncated_normal(0.0, 1.0, -2.0, 2.0);

  params_.push_back({"emb.weight", emb_, true});
  collect_block_params("enc.block", encoder_, params_);
  collect_gated_params("fast", fast_, params_);
  collect_gated_params("slow", slow_, params_);
  params_.push_back({"fus.norm_h", fusion_.norm_h, false});
  params_.push_back({"fus.norm_l", fusion_.norm_l, false});
  params_.push_back({"fus.norm_i", fusion_.norm_i, false});
  params_.push_back({"fus.w_og", fusion_.w_og, true});
  params_.push_back({"fus.w_final", fusion_.w_final, true});
  params_.push_back({"fus.tau", fusion_.tau, false});
  params_.push_back({"state.proto_h", proto_h_, false});
  params_.push_back({"state.proto_l", proto_l_, false});
}

int64_t HRMModel::grad_window() const {
  return cfg_.window == 0 ? cfg_.steps_per_pass() : cfg_.window;
}

Tensor HRMModel::input_encode(const std::vector<int64_t>& tokens) {
  if (tokens.empty()) throw data_error("input_encode: empty token sequence");
  if (static_cast<int64_t>(tokens.size()) > cfg_.seq) {
    throw data_error("sequence of " + std::to_string(tokens.size()) +
                     " tokens exceeds the configured length " +
                     std::to_string(cfg_.seq));
  }
  Tensor e = embedding(emb_, tokens);
  return attn_block_forward(e, encoder_, cfg_.heads, rope_, cfg_.norm_eps);
}

std::pair<Tensor, Tensor> HRMModel::init_states(int64_t n) {
  return {row_broadcast(proto_h_, n), row_broadcast(proto_l_, n)};
}

Tensor HRMModel::gated_update(const GatedModuleParams& p, const Tensor& z,
                              const std::vector<Tensor>& context, StepTrace* tr) {
  Tensor c = rms_norm(concat_cols(context), p.norm_c, cfg_.norm_eps);
  Tensor g = sigmoid(matmul(c, p.w_gate));  // [n, d]
  Tensor h = attn_block_forward(matmul(c, p.w_in), p.block, cfg_.heads, rope_,
                                cfg_.norm_eps);
  Tensor inj = mul_scalar(matmul(h, p.w_out), p.alpha);
  Tensor z_new = add(mul(g, z), mul(affine(g, -1.0, 1.0), inj));
  if (tr) {
    double gm = 0.0;
    for (double v : g.vec()) gm += v;
    tr->gate_mean = gm / static_cast<double>(g.numel());
    tr->zl_inf_prev = max_abs(z);
    tr->inj_inf = max_abs(inj);
    tr->zl_inf_new = max_abs(z_new);
  }
  return z_new;
}

Tensor HRMModel::fast_update(const Tensor& zl, const Tensor& zh,
                             const Tensor& xt, StepTrace* tr) {
  return gated_update(fast_, zl, {zl, zh, xt}, tr);
}

Tensor HRMModel::slow_update(const Tensor& zh, const Tensor& zl) {
  return gated_update(slow_, zh, {zh, zl}, nullptr);
}

void HRMModel::one_pass(const Tensor& xt, Tensor& zh, Tensor& zl,
                        int64_t window, bool freeze_slow,
                        std::vector<StepTrace>* trace) {
  const int64_t m = cfg_.steps_per_pass();
  if (window < 1 || window > m) {
    throw config_error("grad window " + std::to_string(window) +
                       " outside [1, " + std::to_string(m) + "]");
  }
  const int64_t off_tape = m - window;
  for (int64_t i = 1; i <= m; ++i) {
    StepTrace tr;
    tr.step = i;
    auto step_body = [&]() {
      zl = fast_update(zl, zh, xt, &tr);
      tr.norm_zl = mean_row_l2(zl);
      tr.norm_zh_before = mean_row_l2(zh);
      const bool fire = (i % cfg_.t_steps == 0) && !freeze_slow;
      tr.h_fired = fire;
      if (fire) zh = slow_update(zh, zl);
      tr.norm_zh_after = mean_row_l2(zh);
      tr.cos_hl = mean_row_cosine(zh, zl);
    };
    if (i <= off_tape) {
      NoGradGuard ng;
      step_body();
    } else {
      step_body();
    }
    if (trace) trace->push_back(tr);
  }
}

FusionOut HRMModel::output_fusion(const Tensor& zh, const Tensor& zl,
                                  const Tensor& xt) {
  if (fusion_.tau.item() <= 0.0) {
    throw config_error("fusion temperature must be positive, got " +
                       std::to_string(fusion_.tau.item()));
  }
  Tensor hh = rms_norm(zh, fusion_.norm_h, cfg_.norm_eps);
  Tensor hl = rms_norm(zl, fusion_.norm_l, cfg_.norm_eps);
  Tensor hi = rms_norm(xt, fusion_.norm_i, cfg_.norm_eps);
  Tensor cat = concat_cols({hh, hl, hi});                    // [n, 3d]
  Tensor mix_logits = mul_scalar(matmul(cat, fusion_.w_og),  // [n, 3]
                                 reciprocal(fusion_.tau));
  Tensor mix = softmax_lastdim(mix_logits);
  Tensor h_out = add(add(mul_colvec(hh, slice_cols(mix, 0, 1)),
                         mul_colvec(hl, slice_cols(mix, 1, 1))),
                     mul_colvec(hi, slice_cols(mix, 2, 1)));
  FusionOut out;
  out.logits = matmul_nt(matmul(h_out, fusion_.w_final), emb_);
  out.mix = mix;
  out.mix_mean = mean_rows(mix);
  return out;
}

ForwardOut HRMModel::forward_loss(const std::vector<int64_t>& xs,
                                  const std::vector<int64_t>& ys,
                                  const EvalOptions& opts) {
  if (xs.size() != ys.size()) {
    throw data_error("forward_loss: " + std::to_string(xs.size()) +
                     " inputs vs " + std::to_string(ys.size()) + " targets");
  }
  const int64_t window =
      opts.window_override > 0 ? opts.window_override : grad_window();
  Tensor xt = input_encode(xs);
  auto [zh, zl] = init_states(static_cast<int64_t>(xs.size()));
  ForwardOut out;
  Tensor total;
  double ce_sum = 0.0;
  for (int64_t s = 0; s < cfg_.passes; ++s) {
    one_pass(xt, zh, zl, window, opts.freeze_slow, &out.trace);
    FusionOut f = output_fusion(zh, zl, xt);
    Tensor ce = cross_entropy(f.logits, ys);
    // Mix-entropy bonus; the mean mix is strictly positive (softmax output).
    Tensor ent = neg(sum_all(mul(f.mix_mean, log_op(f.mix_mean))));
    Tensor pass_loss = sub(ce, scale(ent, cfg_.lambda_entropy));
    total = total.defined() ? add(total, pass_loss) : pass_loss;
    ce_sum += ce.item();
    out.fusion_weights.push_back(
        {f.mix_mean.data()[0], f.mix_mean.data()[1], f.mix_mean.data()[2]});
    out.logits = f.logits;
    if (s + 1 < cfg_.passes) {
      zh = zh.detach();
      zl = zl.detach();
    }
  }
  out.loss = scale(total, 1.0 / static_cast<double>(cfg_.passes));
  out.ce = ce_sum / static_cast<double>(cfg_.passes);
  return out;
}

double mean_row_l2(const Tensor& x) {
  int64_t rows = x.rank() == 2 ? x.dim(0) : 1;
  int64_t cols = x.rank() == 2 ? x.dim(1) : x.numel();
  double total = 0.0;
  for (int64_t t = 0; t < rows; ++t) {
    double s = 0.0;
    const double* r = x.data() + t * cols;
    for (int64_t j = 0; j < cols; ++j) s += r[j] * r[j];
    total += std::sqrt(s);
  }
  return total / static_cast<double>(rows);
}

double max_abs(const Tensor& x) {
  double m = 0.0;
  for (double v : x.vec()) m = std::max(m, std::abs(v));
  return m;
}

double mean_row_cosine(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw config_error("mean_row_cosine: shape mismatch");
  int64_t rows = a.rank() == 2 ? a.dim(0) : 1;
  int64_t cols = a.rank() == 2 ? a.dim(1) : a.numel();
  double total = 0.0;
  for (int64_t t = 0; t < rows; ++t) {
    const double* ra = a.data() + t * cols;
    const double* rb = b.data() + t * cols;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      dot += ra[j] * rb[j];
      na += ra[j] * ra[j];
      nb += rb[j] * rb[j];
    }
    const double denom = std::sqrt(na) * std::sqrt(nb);
    total += denom > 0.0 ? dot / denom : 0.0;
  }
  return total / static_cast<double>(rows);
}

}  // namespace hrmlm
