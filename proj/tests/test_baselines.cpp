#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "hrmlm/baselines.hpp"
#include "hrmlm/errors.hpp"
#include "hrmlm/rng.hpp"

using namespace hrmlm;

namespace {

UniTFConfig unitf_toy() {
  UniTFConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.vocab = 7;
  cfg.seq = 4;
  cfg.steps = 4;
  return cfg;
}

std::vector<int64_t> random_tokens(int64_t n, int64_t vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<int64_t> out(static_cast<size_t>(n));
  for (auto& t : out)
    t = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(vocab)));
  return out;
}

const Tensor& find_param(std::vector<NamedParam>& params,
                         const std::string& name) {
  for (NamedParam& p : params)
    if (p.name == name) return p.tensor;
  throw std::runtime_error("no parameter named " + name);
}

std::map<std::string, std::vector<double>> grad_snapshot(
    std::vector<NamedParam>& params) {
  std::map<std::string, std::vector<double>> out;
  for (NamedParam& p : params) {
    if (!p.tensor.requires_grad()) continue;
    out[p.name] = p.tensor.has_grad()
                      ? p.tensor.grad_vec()
                      : std::vector<double>(p.tensor.vec().size(), 0.0);
  }
  return out;
}

}  // namespace

TEST_SUITE("baselines") {

TEST_CASE("stacked parameter count matches enumeration") {
  TransformerConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.vocab = 11;
  cfg.seq = 6;
  cfg.layers = 3;
  Rng rng(1);
  TransformerModel model(cfg, rng);
  int64_t total = 0;
  for (NamedParam& p : model.params()) total += p.tensor.numel();
  CHECK_EQ(total, transformer_param_count(8, 11, 3));
  CHECK_EQ(transformer_param_count(8, 11, 3),
           11 * 8 + 3 * (16 * 64 + 16) + 8);
  CHECK_EQ(model.trainable_param_count(), model.stored_param_count());
}

TEST_CASE("flat iteration with one step equals a one-layer stack") {
  TransformerConfig tf;
  tf.d = 8;
  tf.heads = 2;
  tf.vocab = 7;
  tf.seq = 4;
  tf.layers = 1;
  Rng rng(3);
  TransformerModel stacked(tf, rng);

  UniTFConfig uf = unitf_toy();
  uf.steps = 1;
  Rng rng2(4);
  UniTFModel flat(uf, rng2);
  // Copy the stacked model's weights into the flat one.
  for (NamedParam& p : flat.params()) {
    const std::string src = p.name.rfind("block.", 0) == 0
                                ? "layer0." + p.name
                                : p.name;
    p.tensor.vec() = find_param(stacked.params(), src).vec();
  }
  auto xs = random_tokens(4, 7, 11);
  auto ys = random_tokens(4, 7, 12);
  NoGradGuard ng;
  ForwardOut a = stacked.forward_loss(xs, ys);
  ForwardOut b = flat.forward_loss(xs, ys);
  CHECK_EQ(a.ce, b.ce);
  CHECK_EQ(a.logits.vec(), b.logits.vec());
}

TEST_CASE("two flat steps equal manual double application") {
  UniTFConfig cfg = unitf_toy();
  cfg.steps = 2;
  Rng rng(7);
  UniTFModel model(cfg, rng);
  auto xs = random_tokens(4, 7, 21);
  auto ys = random_tokens(4, 7, 22);
  NoGradGuard ng;
  ForwardOut out = model.forward_loss(xs, ys);
  RopeTable rope = make_rope_table(cfg.seq, cfg.d / cfg.heads, cfg.rope_base);
  Tensor h = embedding(model.embedding_weight(), xs);
  h = attn_block_forward(h, model.block(), cfg.heads, rope, cfg.norm_eps);
  h = attn_block_forward(h, model.block(), cfg.heads, rope, cfg.norm_eps);
  Tensor logits = matmul_nt(rms_norm(h, model.final_norm(), cfg.norm_eps),
                            model.embedding_weight());
  CHECK_EQ(out.logits.vec(), logits.vec());
}

TEST_CASE("flat parameter count is independent of the step count") {
  UniTFConfig a = unitf_toy();
  a.steps = 1;
  UniTFConfig b = unitf_toy();
  b.steps = 7;
  Rng r1(9), r2(9);
  UniTFModel ma(a, r1), mb(b, r2);
  CHECK_EQ(ma.trainable_param_count(), mb.trainable_param_count());
  CHECK_EQ(ma.trainable_param_count(), unitf_param_count(8, 7));
  CHECK_EQ(unitf_param_count(8, 7), 7 * 8 + 16 * 64 + 2 * 8 + 8);
}

TEST_CASE("width-adjusted initialization scale") {
  CHECK_EQ(unitf_init_std(12, 5760, 4096, 2.0),
           doctest::Approx(0.00344).epsilon(0.002));
  CHECK_EQ(unitf_init_std(12, 5760, 4096, 1.0),
           doctest::Approx(0.00487).epsilon(0.002));
  CHECK_EQ(unitf_init_std(1, 4096, 4096, 1.0), 0.02);
  CHECK_THROWS_AS(unitf_init_std(0, 8, 4096, 2.0), config_error);
}

TEST_CASE("truncated tape leaves forward values untouched") {
  UniTFConfig cfg = unitf_toy();
  Rng rng(13);
  UniTFModel model(cfg, rng);
  auto xs = random_tokens(4, 7, 31);
  auto ys = random_tokens(4, 7, 32);
  EvalOptions k1, kM;
  k1.window_override = 1;
  kM.window_override = cfg.steps;
  ForwardOut a = model.forward_loss(xs, ys, k1);
  ForwardOut b = model.forward_loss(xs, ys, kM);
  CHECK_EQ(a.ce, b.ce);
  CHECK_EQ(a.logits.vec(), b.logits.vec());
  for (NamedParam& p : model.params()) p.tensor.zero_grad();
}

TEST_CASE("tape size grows linearly with the window") {
  UniTFConfig cfg = unitf_toy();
  Rng rng(17);
  UniTFModel model(cfg, rng);
  auto xs = random_tokens(4, 7, 41);
  auto ys = random_tokens(4, 7, 42);
  auto nodes_for = [&](int64_t window) {
    EvalOptions opts;
    opts.window_override = window;
    const int64_t before = detail::tracked_nodes_created();
    model.forward_loss(xs, ys, opts);
    return detail::tracked_nodes_created() - before;
  };
  const int64_t n1 = nodes_for(1), n2 = nodes_for(2), n4 = nodes_for(4);
  CHECK(n1 < n2);
  CHECK_EQ(n2 - n1, (n4 - n2) / 2);  // constant per-application cost

  EvalOptions bad;
  bad.window_override = 5;
  CHECK_THROWS_AS(model.forward_loss(xs, ys, bad), config_error);
}

TEST_CASE("full-window gradients match the untruncated graph bitwise") {
  UniTFConfig cfg = unitf_toy();
  Rng rng(19);
  UniTFModel model(cfg, rng);
  auto xs = random_tokens(4, 7, 51);
  auto ys = random_tokens(4, 7, 52);

  EvalOptions full;
  full.window_override = cfg.steps;
  model.forward_loss(xs, ys, full).loss.backward();
  auto g_full = grad_snapshot(model.params());

  for (NamedParam& p : model.params()) p.tensor.zero_grad();
  model.forward_loss(xs, ys).loss.backward();  // window 0 -> all steps
  auto g_default = grad_snapshot(model.params());
  for (auto& [name, g] : g_full) CHECK_EQ(g, g_default.at(name));
}

TEST_CASE("single-step window equals a hand-built truncated graph") {
  UniTFConfig cfg = unitf_toy();
  Rng rng(23);
  UniTFModel model(cfg, rng);
  auto xs = random_tokens(4, 7, 61);
  auto ys = random_tokens(4, 7, 62);

  EvalOptions k1;
  k1.window_override = 1;
  model.forward_loss(xs, ys, k1).loss.backward();
  auto got = grad_snapshot(model.params());

  for (NamedParam& p : model.params()) p.tensor.zero_grad();
  RopeTable rope = make_rope_table(cfg.seq, cfg.d / cfg.heads, cfg.rope_base);
  Tensor h = embedding(model.embedding_weight(), xs);
  {
    NoGradGuard ng;
    for (int64_t i = 0; i < cfg.steps - 1; ++i)
      h = attn_block_forward(h, model.block(), cfg.heads, rope, cfg.norm_eps);
  }
  h = attn_block_forward(h, model.block(), cfg.heads, rope, cfg.norm_eps);
  Tensor logits = matmul_nt(rms_norm(h, model.final_norm(), cfg.norm_eps),
                            model.embedding_weight());
  cross_entropy(logits, ys).backward();
  auto expect = grad_snapshot(model.params());
  for (auto& [name, g] : got) CHECK_EQ(g, expect.at(name));
}

TEST_CASE("stacked model passes the gradient check") {
  TransformerConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.vocab = 7;
  cfg.seq = 4;
  cfg.layers = 2;
  Rng rng(29);
  TransformerModel model(cfg, rng);
  auto xs = random_tokens(4, 7, 71);
  auto ys = random_tokens(4, 7, 72);
  GradCheckResult res = grad_check(
      [&]() { return model.forward_loss(xs, ys).loss; }, model.params());
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("flat model passes the gradient check") {
  UniTFConfig cfg = unitf_toy();
  Rng rng(31);
  UniTFModel model(cfg, rng);
  auto xs = random_tokens(4, 7, 81);
  auto ys = random_tokens(4, 7, 82);
  GradCheckResult res = grad_check(
      [&]() { return model.forward_loss(xs, ys).loss; }, model.params());
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("baseline validation") {
  UniTFConfig cfg = unitf_toy();
  cfg.window = 5;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  TransformerConfig tf;
  tf.d = 8;
  tf.heads = 3;
  CHECK_THROWS_AS(tf.validate(), config_error);
}

}  // TEST_SUITE
