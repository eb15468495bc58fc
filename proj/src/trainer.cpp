#include "hrmlm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <limits>
#include <fstream>

#include "json.hpp"

#include "hrmlm/errors.hpp"
#include "hrmlm/rng.hpp"

namespace hrmlm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- optimizer ----

AdamW::AdamW(std::vector<NamedParam>& params, const AdamWConfig& cfg)
    : params_(&params), cfg_(cfg) {
  for (NamedParam& p : params) {
    if (!p.tensor.requires_grad()) continue;
    state_.push_back({"adam.m." + p.name, Tensor::zeros(p.tensor.shape()), false});
    state_.push_back({"adam.v." + p.name, Tensor::zeros(p.tensor.shape()), false});
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  size_t si = 0;
  for (NamedParam& p : *params_) {
    if (!p.tensor.requires_grad()) continue;
    Tensor& m = state_[si].tensor;
    Tensor& v = state_[si + 1].tensor;
    si += 2;
    const std::vector<double>& g = p.tensor.node()->grad;
    double* x = p.tensor.data();
    double* md = m.data();
    double* vd = v.data();
    const int64_t n = p.tensor.numel();
    const double wd = p.decay ? cfg_.weight_decay : 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double gi = g.empty() ? 0.0 : g[static_cast<size_t>(i)];
      md[i] = cfg_.beta1 * md[i] + (1.0 - cfg_.beta1) * gi;
      vd[i] = cfg_.beta2 * vd[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mh = md[i] / c1;
      const double vh = vd[i] / c2;
      x[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + wd * x[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (NamedParam& p : *params_) p.tensor.zero_grad();
}

double lr_at(int64_t step, int64_t warmup, int64_t max_steps, double lr_max,
             double lr_min) {
  if (step < 1) throw config_error("lr_at: step is 1-indexed");
  if (max_steps < 1) throw config_error("lr_at: max_steps must be positive");
  if (warmup > 0 && step <= warmup) {
    return lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (step >= max_steps || warmup >= max_steps) return lr_min;
  const double prog = static_cast<double>(step - warmup) /
                      static_cast<double>(max_steps - warmup);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * prog));
}

ClipResult clip_gradients(std::vector<NamedParam>& params, double max_norm) {
  if (max_norm <= 0.0) throw config_error("clip threshold must be positive");
  double sq = 0.0;
  for (const NamedParam& p : params) {
    if (!p.tensor.requires_grad()) continue;
    for (double v : p.tensor.node()->grad) {
      if (!std::isfinite(v)) {
        throw numeric_error("non-finite gradient in " + p.name);
      }
      sq += v * v;
    }
  }
  ClipResult res;
  res.pre_norm = std::sqrt(sq);
  if (res.pre_norm > max_norm) {
    res.scale = max_norm / res.pre_norm;
    for (NamedParam& p : params) {
      if (!p.tensor.requires_grad()) continue;
      for (double& v : p.tensor.node()->grad) v *= res.scale;
    }
  }
  return res;
}

// ---- data ----

namespace {

int64_t parse_spec_int(const std::string& s, const std::string& what) {
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw config_error("corpus spec: bad " + what + " '" + s + "'");
  }
}

std::vector<uint8_t> gen_copy(int64_t period, int64_t length, Rng& rng) {
  if (period < 1) throw config_error("corpus spec: period must be positive");
  if (length < period) throw config_error("corpus spec: length below one period");
  std::vector<uint8_t> pattern(static_cast<size_t>(period));
  for (uint8_t& b : pattern) b = static_cast<uint8_t>(rng.uniform_int(256));
  std::vector<uint8_t> out(static_cast<size_t>(length));
  for (int64_t i = 0; i < length; ++i)
    out[static_cast<size_t>(i)] = pattern[static_cast<size_t>(i % period)];
  return out;
}

std::vector<uint8_t> gen_counting(int64_t length, Rng& rng) {
  if (length < 1) throw config_error("corpus spec: length must be positive");
  const uint64_t start = rng.uniform_int(256);
  const uint64_t stride = 2 * rng.uniform_int(128) + 1;  // odd, cycles all bytes
  std::vector<uint8_t> out(static_cast<size_t>(length));
  for (int64_t i = 0; i < length; ++i)
    out[static_cast<size_t>(i)] =
        static_cast<uint8_t>((start + static_cast<uint64_t>(i) * stride) & 0xFF);
  return out;
}

}  // namespace

Corpus load_corpus(const std::string& spec, uint64_t seed) {
  Corpus c;
  c.source = spec;
  if (spec.rfind("copy:", 0) == 0) {
    const std::string rest = spec.substr(5);
    const size_t colon = rest.find(':');
    if (colon == std::string::npos) {
      throw config_error("corpus spec: expected copy:<period>:<length>");
    }
    Rng rng(seed ^ 0x636F7079ull);  // distinct stream per generator
    c.tokens = gen_copy(parse_spec_int(rest.substr(0, colon), "period"),
                        parse_spec_int(rest.substr(colon + 1), "length"), rng);
    return c;
  }
  if (spec.rfind("counting:", 0) == 0) {
    Rng rng(seed ^ 0x636E74ull);
    c.tokens = gen_counting(parse_spec_int(spec.substr(9), "length"), rng);
    return c;
  }
  if (spec.rfind("mixed:", 0) == 0) {
    const int64_t length = parse_spec_int(spec.substr(6), "length");
    Rng rng_a(seed ^ 0x636F7079ull);
    Rng rng_b(seed ^ 0x636E74ull);
    std::vector<uint8_t> a = gen_copy(8, length, rng_a);
    std::vector<uint8_t> b = gen_counting(length, rng_b);
    c.tokens.resize(static_cast<size_t>(length));
    constexpr int64_t kChunk = 4096;
    for (int64_t i = 0; i < length; ++i) {
      const bool even = (i / kChunk) % 2 == 0;
      c.tokens[static_cast<size_t>(i)] =
          even ? a[static_cast<size_t>(i)] : b[static_cast<size_t>(i)];
    }
    return c;
  }
  std::ifstream in(spec, std::ios::binary);
  if (!in) throw data_error("cannot open corpus file: " + spec);
  c.tokens.assign(std::istreambuf_iterator<char>(in),
                  std::istreambuf_iterator<char>());
  if (c.tokens.empty()) throw data_error("corpus file is empty: " + spec);
  return c;
}

Batcher::Batcher(const Corpus& corpus, int64_t seq, int64_t eval_windows)
    : corpus_(&corpus), seq_(seq), eval_windows_(eval_windows) {
  if (seq < 1) throw config_error("sequence length must be positive");
  if (eval_windows < 1) throw config_error("need at least one eval window");
  const int64_t window_len = seq + 1;
  const int64_t size = static_cast<int64_t>(corpus.tokens.size());
  const int64_t need = (eval_windows + 1) * window_len;
  if (size < need) {
    throw data_error("corpus of " + std::to_string(size) +
                     " tokens is too small: need at least " +
                     std::to_string(need) + " for seq " + std::to_string(seq));
  }
  eval_start_ = size - eval_windows * window_len;
  train_span_ = eval_start_ - window_len;  // inclusive max offset
}

void Batcher::window_at(int64_t offset, std::vector<int64_t>& xs,
                        std::vector<int64_t>& ys) const {
  xs.resize(static_cast<size_t>(seq_));
  ys.resize(static_cast<size_t>(seq_));
  const std::vector<uint8_t>& t = corpus_->tokens;
  for (int64_t i = 0; i < seq_; ++i) {
    xs[static_cast<size_t>(i)] = t[static_cast<size_t>(offset + i)];
    ys[static_cast<size_t>(i)] = t[static_cast<size_t>(offset + i + 1)];
  }
}

int64_t Batcher::train_offset(uint64_t seed, int64_t step, int64_t index) const {
  const uint64_t h = Rng::hash3(seed, static_cast<uint64_t>(step),
                                static_cast<uint64_t>(index));
  return static_cast<int64_t>(h % static_cast<uint64_t>(train_span_ + 1));
}

void Batcher::eval_window(int64_t i, std::vector<int64_t>& xs,
                          std::vector<int64_t>& ys) const {
  if (i < 0 || i >= eval_windows_) throw config_error("eval window index out of range");
  window_at(eval_start_ + i * (seq_ + 1), xs, ys);
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'H', 'R', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ofstream& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.write(b, 4);
}

void put_u64(std::ofstream& out, uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.write(b, 8);
}

uint32_t get_u32(std::ifstream& in) {
  char b[4];
  in.read(b, 4);
  uint32_t v;
  std::memcpy(&v, b, 4);
  return v;
}

uint64_t get_u64(std::ifstream& in) {
  char b[8];
  in.read(b, 8);
  uint64_t v;
  std::memcpy(&v, b, 8);
  return v;
}

void put_tensor(std::ofstream& out, const NamedParam& p) {
  put_u32(out, static_cast<uint32_t>(p.name.size()));
  out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
  put_u32(out, static_cast<uint32_t>(p.tensor.rank()));
  for (int64_t d : p.tensor.shape()) put_u64(out, static_cast<uint64_t>(d));
  out.write(reinterpret_cast<const char*>(p.tensor.data()),
            static_cast<std::streamsize>(p.tensor.numel() * 8));
}

struct LoadedTensor {
  Shape shape;
  std::vector<double> data;
};

std::pair<std::string, LoadedTensor> get_tensor(std::ifstream& in,
                                                const std::string& path) {
  const uint32_t name_len = get_u32(in);
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  const uint32_t rank = get_u32(in);
  LoadedTensor t;
  int64_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    t.shape.push_back(static_cast<int64_t>(get_u64(in)));
    numel *= t.shape.back();
  }
  t.data.resize(static_cast<size_t>(numel));
  in.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(numel * 8));
  if (!in) throw data_error("truncated checkpoint: " + path);
  return {name, std::move(t)};
}

std::string shape_text(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

void fill_section(std::ifstream& in, const std::string& path,
                  std::vector<NamedParam>* dst, uint64_t count,
                  const char* what) {
  std::vector<std::pair<std::string, LoadedTensor>> loaded;
  loaded.reserve(static_cast<size_t>(count));
  for (uint64_t i = 0; i < count; ++i) loaded.push_back(get_tensor(in, path));
  if (!dst) return;
  if (loaded.size() != dst->size()) {
    throw config_error("checkpoint/config mismatch: file has " +
                       std::to_string(loaded.size()) + " " + what +
                       " tensors, model expects " + std::to_string(dst->size()));
  }
  for (NamedParam& p : *dst) {
    auto it = std::find_if(loaded.begin(), loaded.end(),
                           [&](const auto& lt) { return lt.first == p.name; });
    if (it == loaded.end()) {
      throw config_error("checkpoint is missing tensor '" + p.name + "'");
    }
    if (it->second.shape != p.tensor.shape()) {
      throw config_error("checkpoint/config mismatch at tensor '" + p.name +
                         "': expected " + shape_text(p.tensor.shape()) +
                         ", file has " + shape_text(it->second.shape));
    }
    p.tensor.vec() = std::move(it->second.data);
    it->first.clear();  // consumed
  }
  for (const auto& lt : loaded) {
    if (!lt.first.empty()) {
      throw config_error("checkpoint has unexpected tensor '" + lt.first + "'");
    }
  }
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<NamedParam>& model_tensors,
                     const std::vector<NamedParam>& opt_tensors, uint64_t step) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("cannot write checkpoint: " + path);
  out.write(kMagic, 8);
  put_u32(out, kVersion);
  put_u64(out, model_tensors.size());
  for (const NamedParam& t : model_tensors) put_tensor(out, t);
  put_u64(out, opt_tensors.size());
  for (const NamedParam& t : opt_tensors) put_tensor(out, t);
  put_u64(out, step);
  if (!out) throw data_error("short write while saving checkpoint: " + path);
}

void load_checkpoint(const std::string& path,
                     std::vector<NamedParam>& model_tensors,
                     std::vector<NamedParam>* opt_tensors, uint64_t* step) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) {
    throw data_error("not a checkpoint file: " + path);
  }
  const uint32_t version = get_u32(in);
  if (version != kVersion) {
    throw data_error("unsupported checkpoint version " + std::to_string(version));
  }
  fill_section(in, path, &model_tensors, get_u64(in), "model");
  fill_section(in, path, opt_tensors, get_u64(in), "optimizer");
  const uint64_t s = get_u64(in);
  if (!in) throw data_error("truncated checkpoint: " + path);
  if (step) *step = s;
}

// ---- run configuration ----

int64_t TrainConfig::shared_steps() const {
  if (kind == "hrm") return hrm.steps_per_pass();
  if (kind == "unitf") return unitf_steps;
  return 0;
}

int64_t TrainConfig::grad_window_value() const {
  if (kind == "hrm") return hrm.window == 0 ? hrm.steps_per_pass() : hrm.window;
  if (kind == "unitf") return unitf_window == 0 ? unitf_steps : unitf_window;
  return layers;
}

double TrainConfig::effective_clip() const {
  const int64_t m = shared_steps();
  if (m == 0) return clip_base;
  return clip_base * static_cast<double>(grad_window_value()) /
         static_cast<double>(m);
}

int64_t TrainConfig::effective_warmup() const {
  if (warmup >= 0) return warmup;
  if (kind == "hrm") return std::max<int64_t>(1000, hrm.steps_per_pass() * 100);
  return 1000;
}

double TrainConfig::effective_lr_max() const {
  if (lr_scale_by_passes && kind == "hrm" && hrm.passes > 1) {
    return lr_max / static_cast<double>(hrm.passes);
  }
  return lr_max;
}

double TrainConfig::effective_lr_min() const {
  const double base = lr_min < 0.0 ? lr_max / 10.0 : lr_min;
  if (lr_scale_by_passes && kind == "hrm" && hrm.passes > 1) {
    return base / static_cast<double>(hrm.passes);
  }
  return base;
}

void TrainConfig::validate() const {
  if (kind != "hrm" && kind != "transformer" && kind != "unitf") {
    throw config_error("unknown model kind '" + kind + "'");
  }
  if (kind == "hrm") hrm.validate();
  if (kind == "transformer" && layers < 1) throw config_error("layers must be positive");
  if (kind == "unitf") {
    if (unitf_steps < 1) throw config_error("steps must be positive");
    if (unitf_window < 0 || unitf_window > unitf_steps) {
      throw config_error("grad window " + std::to_string(unitf_window) +
                         " outside [0, " + std::to_string(unitf_steps) + "]");
    }
  }
  if (batch < 1) throw config_error("batch must be positive");
  if (grad_accum < 1) throw config_error("grad_accum must be positive");
  if (max_steps < 1) throw config_error("max_steps must be positive");
  if (eval_interval < 1) throw config_error("eval_interval must be positive");
  if (checkpoint_interval < 0) throw config_error("checkpoint_interval must be non-negative");
  if (lr_max <= 0.0) throw config_error("lr_max must be positive");
  if (clip_base <= 0.0) throw config_error("clip_base must be positive");
  if (adamw.weight_decay < 0.0) throw config_error("weight_decay must be non-negative");
  if (stop_at_val_ce < 0.0) throw config_error("stop_at_val_ce must be non-negative");
}

std::unique_ptr<LanguageModel> build_model(const TrainConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  if (cfg.kind == "hrm") {
    return std::make_unique<HRMModel>(cfg.hrm, rng, cfg.init_std_override);
  }
  if (cfg.kind == "transformer") {
    TransformerConfig tc;
    tc.d = cfg.hrm.d;
    tc.heads = cfg.hrm.heads;
    tc.vocab = cfg.hrm.vocab;
    tc.seq = cfg.hrm.seq;
    tc.layers = cfg.layers;
    tc.rope_base = cfg.hrm.rope_base;
    tc.norm_eps = cfg.hrm.norm_eps;
    const double std = cfg.init_std_override > 0.0 ? cfg.init_std_override : 0.02;
    return std::make_unique<TransformerModel>(tc, rng, std);
  }
  UniTFConfig uc;
  uc.d = cfg.hrm.d;
  uc.heads = cfg.hrm.heads;
  uc.vocab = cfg.hrm.vocab;
  uc.seq = cfg.hrm.seq;
  uc.steps = cfg.unitf_steps;
  uc.window = cfg.unitf_window;
  uc.rope_base = cfg.hrm.rope_base;
  uc.norm_eps = cfg.hrm.norm_eps;
  uc.init_safety = cfg.init_safety;
  return std::make_unique<UniTFModel>(uc, rng, cfg.init_std_override);
}

// ---- metrics + training loop ----

std::string resolve_metrics_path(const std::string& configured) {
  if (configured.empty()) return configured;
  const char* dir = std::getenv("HRMLM_METRICS_DIR");
  if (!dir || !*dir) return configured;
  return (fs::path(dir) / fs::path(configured).filename()).string();
}

namespace {

std::ofstream open_append(const std::string& path, const char* what) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw data_error(std::string("cannot open ") + what + ": " + path);
  return out;
}

double eval_ce(LanguageModel& model, const Batcher& batcher) {
  NoGradGuard ng;
  std::vector<int64_t> xs, ys;
  double total = 0.0;
  for (int64_t i = 0; i < batcher.eval_windows(); ++i) {
    batcher.eval_window(i, xs, ys);
    total += model.forward_loss(xs, ys).ce;
  }
  return total / static_cast<double>(batcher.eval_windows());
}

int64_t trace_violations(const std::vector<StepTrace>& trace, double tol) {
  int64_t n = 0;
  for (const StepTrace& tr : trace) {
    if (tr.zl_inf_new > std::max(tr.zl_inf_prev, tr.inj_inf) + tol) ++n;
  }
  return n;
}

}  // namespace

TrainResult train_loop(const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto wall_s = [&t0]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  Corpus corpus = load_corpus(cfg.corpus, cfg.seed);
  Batcher batcher(corpus, cfg.hrm.seq);
  std::unique_ptr<LanguageModel> model = build_model(cfg);
  AdamW opt(model->params(), cfg.adamw);

  uint64_t start_step = 0;
  if (!cfg.resume.empty()) {
    load_checkpoint(cfg.resume, model->params(), &opt.state(), &start_step);
    opt.set_t(static_cast<int64_t>(start_step));
  }

  const std::string metrics_path = resolve_metrics_path(cfg.metrics_path);
  const std::string curves_path = resolve_metrics_path(cfg.curves_path);
  std::ofstream metrics, curves;
  if (!metrics_path.empty()) {
    metrics = open_append(metrics_path, "metrics file");
    json header;
    header["format"] = "hrmlm.metrics.v1";
    header["kind"] = cfg.kind;
    header["seed"] = cfg.seed;
    header["max_steps"] = cfg.max_steps;
    header["corpus"] = cfg.corpus;
    header["resumed_from_step"] = start_step;
    json echo = json::object();
    for (const auto& [k, v] : cfg.echo) echo[k] = v;
    header["config"] = echo;
    metrics << header.dump() << "\n";
  }
  if (!curves_path.empty()) {
    curves = open_append(curves_path, "curves file");
    curves.precision(17);
    curves << "iter,val_ce\n";
  }

  TrainResult res;
  res.steps_run = static_cast<int64_t>(start_step);
  res.best_val_ce = std::numeric_limits<double>::infinity();
  const bool is_hrm = cfg.kind == "hrm";
  if (is_hrm && cfg.hrm.passes > 1 && !cfg.lr_scale_by_passes) {
    std::fprintf(stderr,
                 "note: %lld supervision passes multiply the effective "
                 "learning rate; train.lr_scale_by_passes=true compensates\n",
                 static_cast<long long>(cfg.hrm.passes));
  }
  const double eff_lr_max = cfg.effective_lr_max();
  const double eff_lr_min = cfg.effective_lr_min();
  const int64_t eff_warmup = cfg.effective_warmup();
  const double eff_clip = cfg.effective_clip();

  auto record_eval = [&](int64_t step, double train_loss, double val_ce,
                         double lr, const ClipResult& clip, double gate_mean,
                         double norm_zl, double norm_zh) {
    if (metrics.is_open()) {
      json rec;
      rec["iter"] = step;
      if (std::isfinite(train_loss)) rec["train_loss"] = train_loss;
      rec["val_ce"] = val_ce;
      rec["lr"] = lr;
      if (step > 0) {
        rec["grad_norm"] = clip.pre_norm;
        rec["clip_scale"] = clip.scale;
      }
      if (is_hrm && step > 0) {
        rec["gate_mean"] = gate_mean;
        rec["norm_zl"] = norm_zl;
        rec["norm_zh"] = norm_zh;
        rec["stability_violations"] = res.stability_violations;
      }
      rec["wall_s"] = wall_s();
      metrics << rec.dump() << "\n";
      metrics.flush();
    }
    if (curves.is_open()) {
      curves << step << "," << val_ce << "\n";
      curves.flush();
    }
  };

  auto checkpoint_at = [&](const std::string& name, uint64_t step) {
    if (cfg.checkpoint_dir.empty()) return std::string();
    const std::string path = (fs::path(cfg.checkpoint_dir) / name).string();
    save_checkpoint(path, model->params(), opt.state(), step);
    return path;
  };

  {
    const double val0 = eval_ce(*model, batcher);
    res.final_val_ce = val0;
    res.best_val_ce = std::min(res.best_val_ce, val0);
    record_eval(static_cast<int64_t>(start_step),
                std::numeric_limits<double>::quiet_NaN(), val0, 0.0, {}, 0, 0, 0);
  }

  std::vector<int64_t> xs, ys;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  bool stop = false;
  for (int64_t step = static_cast<int64_t>(start_step) + 1;
       step <= cfg.max_steps && !stop; ++step) {
    opt.zero_grad();
    double loss_sum = 0.0;
    double gate_sum = 0.0, zl_sum = 0.0, zh_sum = 0.0;
    int64_t gate_n = 0, final_n = 0;
    try {
      for (int64_t g = 0; g < cfg.grad_accum; ++g) {
        Tensor micro;
        for (int64_t b = 0; b < cfg.batch; ++b) {
          const int64_t idx = g * cfg.batch + b;
          batcher.window_at(batcher.train_offset(cfg.seed, step, idx), xs, ys);
          ForwardOut out = model->forward_loss(xs, ys);
          micro = micro.defined() ? add(micro, out.loss) : out.loss;
          if (is_hrm) {
            if (cfg.monitor_stability) {
              res.stability_violations += trace_violations(out.trace, 1e-12);
            }
            for (const StepTrace& tr : out.trace) {
              gate_sum += tr.gate_mean;
              ++gate_n;
            }
            if (!out.trace.empty()) {
              zl_sum += out.trace.back().norm_zl;
              zh_sum += out.trace.back().norm_zh_after;
              ++final_n;
            }
          }
        }
        Tensor scaled = scale(
            micro, 1.0 / static_cast<double>(cfg.batch * cfg.grad_accum));
        scaled.backward();
        loss_sum += scaled.item();
      }
    } catch (const numeric_error& e) {
      if (metrics.is_open()) {
        json rec;
        rec["iter"] = step;
        rec["error"] = e.what();
        rec["wall_s"] = wall_s();
        metrics << rec.dump() << "\n";
      }
      throw;
    }
    train_loss = loss_sum;
    const ClipResult clip = clip_gradients(model->params(), eff_clip);
    const double lr =
        lr_at(step, eff_warmup, cfg.max_steps, eff_lr_max, eff_lr_min);
    opt.step(lr);

    const bool do_eval = step % cfg.eval_interval == 0 || step == cfg.max_steps;
    if (do_eval) {
      const double val = eval_ce(*model, batcher);
      res.final_val_ce = val;
      res.best_val_ce = std::min(res.best_val_ce, val);
      record_eval(step, train_loss, val, lr, clip,
                  gate_n ? gate_sum / static_cast<double>(gate_n) : 0.0,
                  final_n ? zl_sum / static_cast<double>(final_n) : 0.0,
                  final_n ? zh_sum / static_cast<double>(final_n) : 0.0);
      if (cfg.stop_at_val_ce > 0.0 && val < cfg.stop_at_val_ce) {
        res.stopped_early = true;
        stop = true;
      }
    }
    if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) {
      checkpoint_at("ckpt_" + std::to_string(step) + ".bin",
                    static_cast<uint64_t>(step));
    }
    res.steps_run = step;
    res.final_train_loss = train_loss;
  }

  res.final_checkpoint =
      checkpoint_at("ckpt_final.bin", static_cast<uint64_t>(res.steps_run));
  return res;
}

}  // namespace hrmlm
