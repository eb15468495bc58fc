#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "hrmlm/analysis.hpp"
#include "hrmlm/baselines.hpp"
#include "hrmlm/errors.hpp"
#include "hrmlm/hrm.hpp"
#include "hrmlm/rng.hpp"
#include "hrmlm/trainer.hpp"

using namespace hrmlm;
namespace fs = std::filesystem;

namespace {

HRMConfig probe_config() {
  HRMConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.vocab = 256;
  cfg.seq = 6;
  cfg.cycles = 4;
  cfg.t_steps = 3;  // M = 12
  cfg.passes = 1;
  return cfg;
}

int64_t group_count(const ParamReport& r, const std::string& name) {
  for (const ParamGroup& g : r.groups) {
    if (g.name == name) return g.count;
  }
  FAIL("missing group ", name);
  return -1;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("kv cache bytes follow the closed form") {
  KVSpec spec;
  spec.depth = 12;
  spec.seq = 1024;
  spec.heads = 16;
  spec.head_dim = 256;
  spec.bytes_per_element = 2;
  CHECK(kv_cache_bytes(spec) == 201326592);

  KVSpec longer = spec;
  longer.seq = 8192;
  CHECK(kv_cache_bytes(longer) == 8 * kv_cache_bytes(spec));

  KVSpec empty = spec;
  empty.depth = 0;
  CHECK(kv_cache_bytes(empty) == 0);

  KVSpec bad = spec;
  bad.seq = -1;
  CHECK_THROWS_AS(kv_cache_bytes(bad), config_error);
  bad = spec;
  bad.bytes_per_element = 0;
  CHECK_THROWS_AS(kv_cache_bytes(bad), config_error);
}

TEST_CASE("cache depth ratio compares recurrence steps to layers") {
  CHECK(kv_depth_ratio(12, 4) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(kv_depth_ratio(12, 32) == doctest::Approx(0.375).epsilon(1e-15));
  CHECK(kv_depth_ratio(5, 5) == 1.0);
  CHECK_THROWS_AS(kv_depth_ratio(0, 4), config_error);
  CHECK_THROWS_AS(kv_depth_ratio(4, 0), config_error);
}

TEST_CASE("attention-weight savings count stored block instances") {
  CHECK(attn_block_savings(12) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(attn_block_savings(3) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(attn_block_savings(0), config_error);
}

TEST_CASE("parameter report reproduces the reference configuration") {
  ParamReport r = param_report_hrm(4096, 50257);
  CHECK(group_count(r, "embedding") == 205852672);
  CHECK(group_count(r, "input_encoder") == 268443648);
  CHECK(group_count(r, "fast_module") == 385896449);
  CHECK(group_count(r, "slow_module") == 352337921);
  CHECK(group_count(r, "output_fusion") == 16826369);
  CHECK(r.trainable == 1229357059);
  CHECK(r.stored == 1229357059 + 2 * 4096);

  int64_t sum = 0;
  for (const ParamGroup& g : r.groups) sum += g.count;
  CHECK(sum == r.trainable);

  CHECK_THROWS_AS(param_report_hrm(0, 50257), config_error);
  CHECK_THROWS_AS(param_report_hrm(4096, 1), config_error);
}

TEST_CASE("parameter reports agree with live toy models") {
  SUBCASE("two-speed model") {
    HRMConfig cfg = probe_config();
    cfg.vocab = 11;
    Rng rng(5);
    HRMModel model(cfg, rng);
    ParamReport r = param_report_hrm(cfg.d, cfg.vocab);
    CHECK(r.trainable == model.trainable_param_count());
    CHECK(r.stored == model.stored_param_count());
  }
  SUBCASE("stacked baseline") {
    TransformerConfig tc;
    tc.d = 8;
    tc.heads = 2;
    tc.vocab = 11;
    tc.seq = 6;
    tc.layers = 3;
    Rng rng(5);
    TransformerModel model(tc, rng, 0.02);
    ParamReport r = param_report_transformer(tc.d, tc.vocab, tc.layers);
    CHECK(r.trainable == model.trainable_param_count());
    CHECK(r.stored == r.trainable);
    CHECK(group_count(r, "blocks") == 3 * block_param_count(8));
  }
  SUBCASE("flat shared-weight baseline") {
    UniTFConfig uc;
    uc.d = 8;
    uc.heads = 2;
    uc.vocab = 11;
    uc.seq = 6;
    uc.steps = 4;
    Rng rng(5);
    UniTFModel model(uc, rng);
    ParamReport r = param_report_unitf(uc.d, uc.vocab);
    CHECK(r.trainable == model.trainable_param_count());
    CHECK(group_count(r, "block") == block_param_count(8));
  }
}

TEST_CASE("training flops count block applications") {
  FlopsReport tf = train_flops("transformer", 12, 0, 1);
  CHECK(tf.coeff == 36);
  CHECK(tf.expr == "36C");

  // truncated shared-weight training: M forward + 2K backward-weighted
  CHECK(train_flops("hrm", 12, 2, 1).coeff == 16);
  CHECK(train_flops("unitf", 12, 2, 4).coeff == 16);  // passes are a 2-speed knob
  CHECK(train_flops("hrm", 12, 2, 2).coeff == 32);

  // a fully on-tape pass costs the same as a stack of equal depth
  CHECK(train_flops("hrm", 12, 12, 1).coeff == train_flops("transformer", 12, 0, 1).coeff);

  CHECK_THROWS_AS(train_flops("hrm", 12, 0, 1), config_error);
  CHECK_THROWS_AS(train_flops("hrm", 12, 13, 1), config_error);
  CHECK_THROWS_AS(train_flops("hrm", 12, 2, 0), config_error);
  CHECK_THROWS_AS(train_flops("hrm", 0, 0, 1), config_error);
  CHECK_THROWS_AS(train_flops("gru", 4, 2, 1), config_error);
}

TEST_CASE("freeze probe reports the slow module's contribution") {
  HRMConfig cfg = probe_config();
  Rng rng(9);
  HRMModel model(cfg, rng);
  Corpus corpus = load_corpus("copy:8:400", 3);

  FreezeReport r = freeze_h_eval(model, corpus);
  CHECK(std::isfinite(r.ce_normal));
  CHECK(std::isfinite(r.ce_frozen));
  CHECK(r.ce_normal > 0.0);
  CHECK(r.ce_frozen > 0.0);
  CHECK(r.delta == r.ce_frozen - r.ce_normal);

  // deterministic: a second evaluation reproduces the numbers bitwise
  FreezeReport again = freeze_h_eval(model, corpus);
  CHECK(r.ce_normal == again.ce_normal);
  CHECK(r.ce_frozen == again.ce_frozen);

  SUBCASE("only the two-speed model has a slow module") {
    TransformerConfig tc;
    tc.d = 8;
    tc.heads = 2;
    tc.vocab = 256;
    tc.seq = 6;
    tc.layers = 1;
    Rng r2(9);
    TransformerModel tf(tc, r2, 0.02);
    CHECK_THROWS_AS(freeze_h_eval(tf, corpus), config_error);
  }
}

TEST_CASE("trace report marks the slow firing schedule") {
  HRMConfig cfg = probe_config();  // T=3, M=12
  Rng rng(11);
  HRMModel model(cfg, rng);
  Corpus corpus = load_corpus("copy:8:400", 3);

  std::vector<StepTrace> rows = trace_report(model, corpus);
  REQUIRE(rows.size() == 12);
  for (size_t s = 0; s < rows.size(); ++s) {
    CHECK(rows[s].step == int64_t(s) + 1);
    CHECK(rows[s].h_fired == ((s + 1) % 3 == 0));
    CHECK(rows[s].gate_mean > 0.0);
    CHECK(rows[s].gate_mean < 1.0);
    CHECK(rows[s].norm_zl > 0.0);
    CHECK(rows[s].cos_hl >= -1.0);
    CHECK(rows[s].cos_hl <= 1.0);
  }

  SUBCASE("csv lists 0-indexed steps with the firing flag") {
    fs::path dir = fs::temp_directory_path() / "hrmlm_test_trace";
    fs::remove_all(dir);
    const std::string path = (dir / "trace.csv").string();
    write_trace_csv(path, rows);

    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,h_fired,gate_mean,norm_zL,norm_zH_before,norm_zH_after,cos_hl");
    int idx = 0;
    std::vector<int> fired;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string step_s, fired_s;
      std::getline(ss, step_s, ',');
      std::getline(ss, fired_s, ',');
      CHECK(std::stoi(step_s) == idx);
      if (fired_s == "1") fired.push_back(idx);
      ++idx;
    }
    CHECK(idx == 12);
    CHECK(fired == std::vector<int>{2, 5, 8, 11});
  }

  SUBCASE("stacked models have no shared recurrence to trace") {
    TransformerConfig tc;
    tc.d = 8;
    tc.heads = 2;
    tc.vocab = 256;
    tc.seq = 6;
    tc.layers = 1;
    Rng r2(11);
    TransformerModel tf(tc, r2, 0.02);
    CHECK_THROWS_AS(trace_report(tf, corpus), config_error);
  }
}

TEST_CASE("gated updates never exceed the contraction bound") {
  StabilityReport r = stability_fuzz(123, 10000);
  CHECK(r.trials == 10000);
  CHECK(r.violations == 0);
  CHECK(r.max_excess <= 0.0);

  // different seed, same invariant
  CHECK(stability_fuzz(987, 1000).violations == 0);
  CHECK_THROWS_AS(stability_fuzz(1, 0), config_error);
}

TEST_CASE("trace violation counter checks the elementwise bound") {
  StepTrace ok;
  ok.zl_inf_prev = 2.0;
  ok.inj_inf = 4.0;
  ok.zl_inf_new = 3.0;  // 3 <= max(2,4)
  StepTrace edge = ok;
  edge.zl_inf_new = 4.0;  // equality passes
  StepTrace bad = ok;
  bad.zl_inf_new = 4.5;  // exceeds the bound

  CHECK(count_trace_violations({ok, edge}) == 0);
  CHECK(count_trace_violations({ok, bad, bad}) == 2);
  CHECK(count_trace_violations({}) == 0);

  SUBCASE("live forward traces satisfy the bound per window") {
    HRMConfig cfg = probe_config();
    Rng rng(17);
    HRMModel model(cfg, rng);
    Rng data(99);
    std::vector<int64_t> xs(6), ys(6);
    for (auto& t : xs) t = int64_t(data.uniform_int(256));
    for (auto& t : ys) t = int64_t(data.uniform_int(256));
    NoGradGuard ng;
    ForwardOut out = model.forward_loss(xs, ys);
    CHECK(count_trace_violations(out.trace) == 0);
  }
}

TEST_CASE("tape gradient through an aligned chain grows linearly") {
  for (int64_t k : {1, 2, 4, 8}) {
    CHECK(linear_chain_grad_ratio(k, 0.37, 1.7) ==
          doctest::Approx(double(k)).epsilon(1e-12));
  }
  CHECK(linear_chain_grad_ratio(5, -0.2, 0.3) ==
        doctest::Approx(5.0).epsilon(1e-12));
  CHECK_THROWS_AS(linear_chain_grad_ratio(0, 1.0, 1.0), config_error);
}

TEST_CASE("amplification probe pairs the exact law with a model measurement") {
  AmplificationReport r = amplification_probe({1, 2, 4, 8}, 21);
  REQUIRE(r.windows.size() == 4);
  REQUIRE(r.linear_ratio.size() == 4);
  REQUIRE(r.model_ratio.size() == 4);
  for (size_t i = 0; i < r.windows.size(); ++i) {
    CHECK(r.linear_ratio[i] ==
          doctest::Approx(double(r.windows[i])).epsilon(1e-12));
    CHECK(std::isfinite(r.model_ratio[i]));
    CHECK(r.model_ratio[i] > 0.0);
  }
  CHECK(r.model_ratio[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(amplification_probe({}, 21), config_error);
}

}  // TEST_SUITE
