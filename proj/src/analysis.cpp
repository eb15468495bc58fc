#include "hrmlm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "hrmlm/errors.hpp"
#include "hrmlm/hrm.hpp"
#include "hrmlm/rng.hpp"

namespace hrmlm {

int64_t kv_cache_bytes(const KVSpec& spec) {
  if (spec.depth < 0 || spec.seq < 0 || spec.heads < 0 || spec.head_dim < 0 ||
      spec.bytes_per_element < 1) {
    throw config_error("kv_cache_bytes: negative or zero-size field");
  }
  return 2 * spec.depth * spec.seq * spec.heads * spec.head_dim *
         spec.bytes_per_element;
}

double kv_depth_ratio(int64_t shared_steps, int64_t ref_layers) {
  if (shared_steps < 1 || ref_layers < 1) {
    throw config_error("kv_depth_ratio: depths must be positive");
  }
  return static_cast<double>(shared_steps) / static_cast<double>(ref_layers);
}

ParamReport param_report_hrm(int64_t d, int64_t vocab) {
  if (d < 1 || vocab < 2) throw config_error("param report: bad dimensions");
  ParamReport r;
  r.kind = "hrm";
  r.groups = {{"embedding", hrm_param_count_embedding(d, vocab)},
              {"input_encoder", hrm_param_count_encoder(d)},
              {"fast_module", hrm_param_count_fast(d)},
              {"slow_module", hrm_param_count_slow(d)},
              {"output_fusion", hrm_param_count_fusion(d)}};
  r.trainable = hrm_param_count_total(d, vocab);
  r.stored = r.trainable + 2 * d;  // frozen state prototypes
  return r;
}

ParamReport param_report_transformer(int64_t d, int64_t vocab, int64_t layers) {
  if (d < 1 || vocab < 2 || layers < 1) {
    throw config_error("param report: bad dimensions");
  }
  ParamReport r;
  r.kind = "transformer";
  r.groups = {{"embedding", vocab * d},
              {"blocks", layers * block_param_count(d)},
              {"final_norm", d}};
  r.trainable = transformer_param_count(d, vocab, layers);
  r.stored = r.trainable;
  return r;
}

ParamReport param_report_unitf(int64_t d, int64_t vocab) {
  if (d < 1 || vocab < 2) throw config_error("param report: bad dimensions");
  ParamReport r;
  r.kind = "unitf";
  r.groups = {{"embedding", vocab * d},
              {"block", block_param_count(d)},
              {"final_norm", d}};
  r.trainable = unitf_param_count(d, vocab);
  r.stored = r.trainable;
  return r;
}

double attn_block_savings(int64_t ref_layers) {
  if (ref_layers < 1) throw config_error("savings ratio: layers must be positive");
  return static_cast<double>(ref_layers) / 3.0;
}

FlopsReport train_flops(const std::string& kind, int64_t depth, int64_t window,
                        int64_t passes) {
  if (depth < 1) throw config_error("train_flops: depth must be positive");
  FlopsReport r;
  if (kind == "transformer") {
    r.coeff = 3 * depth;
  } else if (kind == "hrm" || kind == "unitf") {
    if (window < 1 || window > depth) {
      throw config_error("train_flops: window outside [1, depth]");
    }
    if (passes < 1) throw config_error("train_flops: passes must be positive");
    const int64_t per_pass = depth + 2 * window;
    r.coeff = (kind == "hrm" ? passes : 1) * per_pass;
  } else {
    throw config_error("train_flops: unknown kind '" + kind + "'");
  }
  r.expr = std::to_string(r.coeff) + "C";
  return r;
}

FreezeReport freeze_h_eval(LanguageModel& model, const Corpus& corpus,
                           int64_t windows) {
  if (model.kind() != "hrm") {
    throw config_error("freeze eval only applies to the two-speed model, got '" +
                       model.kind() + "'");
  }
  Batcher batcher(corpus, model.max_seq(), windows);
  NoGradGuard ng;
  std::vector<int64_t> xs, ys;
  FreezeReport r;
  for (int64_t i = 0; i < windows; ++i) {
    batcher.eval_window(i, xs, ys);
    r.ce_normal += model.forward_loss(xs, ys).ce;
    EvalOptions frozen;
    frozen.freeze_slow = true;
    r.ce_frozen += model.forward_loss(xs, ys, frozen).ce;
  }
  r.ce_normal /= static_cast<double>(windows);
  r.ce_frozen /= static_cast<double>(windows);
  r.delta = r.ce_frozen - r.ce_normal;
  return r;
}

std::vector<StepTrace> trace_report(LanguageModel& model, const Corpus& corpus,
                                    int64_t windows) {
  if (model.shared_steps() == 0) {
    throw config_error("trace report needs a shared-weight model, got '" +
                       model.kind() + "'");
  }
  Batcher batcher(corpus, model.max_seq(), windows);
  NoGradGuard ng;
  std::vector<int64_t> xs, ys;
  std::vector<StepTrace> acc;
  for (int64_t i = 0; i < windows; ++i) {
    batcher.eval_window(i, xs, ys);
    ForwardOut out = model.forward_loss(xs, ys);
    if (acc.empty()) {
      acc.assign(out.trace.size(), StepTrace{});
      for (size_t s = 0; s < out.trace.size(); ++s) {
        acc[s].step = out.trace[s].step;
        acc[s].h_fired = out.trace[s].h_fired;
      }
    }
    if (out.trace.size() != acc.size()) {
      throw numeric_error("trace length changed between eval windows");
    }
    for (size_t s = 0; s < out.trace.size(); ++s) {
      acc[s].gate_mean += out.trace[s].gate_mean;
      acc[s].norm_zl += out.trace[s].norm_zl;
      acc[s].norm_zh_before += out.trace[s].norm_zh_before;
      acc[s].norm_zh_after += out.trace[s].norm_zh_after;
      acc[s].cos_hl += out.trace[s].cos_hl;
      acc[s].zl_inf_prev += out.trace[s].zl_inf_prev;
      acc[s].zl_inf_new += out.trace[s].zl_inf_new;
      acc[s].inj_inf += out.trace[s].inj_inf;
    }
  }
  const double inv = 1.0 / static_cast<double>(windows);
  for (StepTrace& tr : acc) {
    tr.gate_mean *= inv;
    tr.norm_zl *= inv;
    tr.norm_zh_before *= inv;
    tr.norm_zh_after *= inv;
    tr.cos_hl *= inv;
    tr.zl_inf_prev *= inv;
    tr.zl_inf_new *= inv;
    tr.inj_inf *= inv;
  }
  return acc;
}

void write_trace_csv(const std::string& path,
                     const std::vector<StepTrace>& rows) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw data_error("cannot write trace csv: " + path);
  out << "step,h_fired,gate_mean,norm_zL,norm_zH_before,norm_zH_after,cos_hl\n";
  out.precision(17);
  for (const StepTrace& tr : rows) {
    out << (tr.step - 1) << "," << (tr.h_fired ? 1 : 0) << "," << tr.gate_mean
        << "," << tr.norm_zl << "," << tr.norm_zh_before << ","
        << tr.norm_zh_after << "," << tr.cos_hl << "\n";
  }
  if (!out) throw data_error("short write on trace csv: " + path);
}

StabilityReport stability_fuzz(uint64_t seed, int64_t trials, double tol) {
  if (trials < 1) throw config_error("stability_fuzz: trials must be positive");
  Rng rng(seed);
  StabilityReport r;
  r.trials = trials;
  for (int64_t t = 0; t < trials; ++t) {
    const int64_t d = 1 + static_cast<int64_t>(rng.uniform_int(16));
    double z_inf = 0.0, a_inf = 0.0, new_inf = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double z = (rng.uniform() - 0.5) * 20.0;
      const double a = (rng.uniform() - 0.5) * 20.0;
      double g = rng.uniform();
      if (g == 0.0) g = 0.5;  // open interval
      const double zn = g * z + (1.0 - g) * a;
      z_inf = std::max(z_inf, std::abs(z));
      a_inf = std::max(a_inf, std::abs(a));
      new_inf = std::max(new_inf, std::abs(zn));
    }
    const double excess = new_inf - std::max(z_inf, a_inf);
    r.max_excess = std::max(r.max_excess, excess);
    if (excess > tol) ++r.violations;
  }
  return r;
}

int64_t count_trace_violations(const std::vector<StepTrace>& trace, double tol) {
  int64_t n = 0;
  for (const StepTrace& tr : trace) {
    if (tr.zl_inf_new > std::max(tr.zl_inf_prev, tr.inj_inf) + tol) ++n;
  }
  return n;
}

double linear_chain_grad_ratio(int64_t k, double theta, double x) {
  if (k < 1) throw config_error("linear_chain_grad_ratio: k must be positive");
  auto grad_for = [&](int64_t steps) {
    Tensor th = Tensor::from_data({1}, {theta}, true);
    Tensor xv = Tensor::from_data({1}, {x});
    Tensor z = Tensor::zeros({1});
    for (int64_t i = 0; i < steps; ++i) z = add(z, mul(th, xv));
    sum_all(z).backward();
    return th.node()->grad[0];
  };
  return std::abs(grad_for(k)) / std::abs(grad_for(1));
}

AmplificationReport amplification_probe(const std::vector<int64_t>& windows,
                                        uint64_t seed) {
  if (windows.empty()) throw config_error("amplification probe: no windows given");
  AmplificationReport r;
  r.windows = windows;

  HRMConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.vocab = 11;
  cfg.seq = 6;
  cfg.cycles = 1;
  cfg.t_steps = *std::max_element(windows.begin(), windows.end());
  cfg.window = 0;
  Rng rng(seed);
  HRMModel model(cfg, rng);
  Rng data_rng(seed ^ 0xA5A5ull);
  std::vector<int64_t> xs(static_cast<size_t>(cfg.seq)),
      ys(static_cast<size_t>(cfg.seq));
  for (auto& t : xs) t = static_cast<int64_t>(data_rng.uniform_int(cfg.vocab));
  for (auto& t : ys) t = static_cast<int64_t>(data_rng.uniform_int(cfg.vocab));

  auto grad_norm_for = [&](int64_t window) {
    for (NamedParam& p : model.params()) p.tensor.zero_grad();
    EvalOptions opts;
    opts.window_override = window;
    model.forward_loss(xs, ys, opts).loss.backward();
    double sq = 0.0;
    for (const NamedParam& p : model.params()) {
      for (double v : p.tensor.node()->grad) sq += v * v;
    }
    return std::sqrt(sq);
  };

  const double base = grad_norm_for(1);
  for (int64_t k : windows) {
    r.linear_ratio.push_back(linear_chain_grad_ratio(k, 0.37, 1.7));
    r.model_ratio.push_back(grad_norm_for(k) / base);
  }
  return r;
}

}  // namespace hrmlm
