// Command-line driver for the hrmlm shared library. Talks to the core only
// through the C interface.
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hrmlm/hrmlm_c.h"

namespace {

constexpr int64_t kBufCap = 1 << 20;

int fail(int32_t code) {
  std::fprintf(stderr, "error: %s\n", hrmlm_last_error());
  return static_cast<int>(code);
}

hrmlm_run* open_run(const std::string& config,
                    const std::vector<std::string>& sets, uint64_t seed,
                    bool seed_given) {
  std::vector<std::string> overrides = sets;
  if (seed_given) overrides.push_back("train.seed=" + std::to_string(seed));
  std::vector<const char*> ptrs;
  ptrs.reserve(overrides.size());
  for (const std::string& s : overrides) ptrs.push_back(s.c_str());
  return hrmlm_run_open(config.c_str(), ptrs.empty() ? nullptr : ptrs.data(),
                        static_cast<int32_t>(ptrs.size()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-speed recurrent language model lab"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;

  auto add_run_opts = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "run config file")->required();
    cmd->add_option("--set", sets, "override, section.key=value (repeatable)");
    cmd->add_option("--seed", seed, "shortcut for train.seed")
        ->each([&](const std::string&) { seed_given = true; });
  };

  auto* train = app.add_subcommand("train", "train a model per config");
  add_run_opts(train);

  auto* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference check of the full-model gradient");
  add_run_opts(gradcheck);

  auto* analyze = app.add_subcommand("analyze", "behavioral reports");
  std::string what, checkpoint, out_dir = "analysis_out";
  analyze->add_option("what", what,
                      "trace | freeze | stability | amplification")
      ->required();
  add_run_opts(analyze);
  analyze->add_option("--checkpoint", checkpoint, "checkpoint to load");
  analyze->add_option("--out-dir", out_dir, "directory for report files");

  auto* memcalc = app.add_subcommand(
      "memcalc", "parameter, kv-cache, and compute calculator");
  std::string kind, format = "text";
  int64_t d = 0, vocab = 0, layers = 0, steps = 0, window = 0, passes = 0;
  int64_t n = 0, heads = 0, bytes = 2, ref_layers = 0;
  memcalc->add_option("--kind", kind, "hrm | transformer | unitf")->required();
  memcalc->add_option("--d", d, "model width");
  memcalc->add_option("--vocab", vocab, "vocabulary size");
  memcalc->add_option("--L", layers, "stacked layers");
  memcalc->add_option("--M", steps, "shared-weight steps per pass");
  int64_t cycles = 0, t_steps = 0;
  memcalc->add_option("--N", cycles, "slow-module firings per pass");
  memcalc->add_option("--T", t_steps, "fast steps per slow firing");
  memcalc->add_option("--K", window, "on-tape tail steps");
  memcalc->add_option("--S", passes, "supervision passes");
  memcalc->add_option("--n", n, "sequence length");
  memcalc->add_option("--heads", heads, "attention heads");
  memcalc->add_option("--bytes", bytes, "bytes per cached element");
  memcalc->add_option("--ref-L", ref_layers, "reference stacked depth");
  memcalc->add_option("--format", format, "text | json");

  auto* version = app.add_subcommand("version", "print the library version");

  CLI11_PARSE(app, argc, argv);

  std::string buf(kBufCap, '\0');

  if (version->parsed()) {
    std::printf("%s\n", hrmlm_version());
    return 0;
  }

  if (memcalc->parsed()) {
    if (cycles > 0 && t_steps > 0) steps = cycles * t_steps;
    std::string spec = "{\"kind\":\"" + kind + "\"";
    auto put = [&spec](const char* key, int64_t v) {
      if (v > 0) spec += std::string(",\"") + key + "\":" + std::to_string(v);
    };
    put("d", d);
    put("vocab", vocab);
    put("layers", layers);
    put("steps", steps);
    put("window", window);
    put("passes", passes);
    put("seq", n);
    put("heads", heads);
    put("ref_layers", ref_layers);
    spec += ",\"bytes\":" + std::to_string(bytes) + "}";
    const int32_t rc =
        hrmlm_memcalc(spec.c_str(), format == "json" ? 1 : 0, buf.data(), kBufCap);
    if (rc != HRMLM_OK) return fail(rc);
    std::printf("%s", buf.c_str());
    return 0;
  }

  hrmlm_run* run = open_run(config, sets, seed, seed_given);
  if (!run) return fail(HRMLM_ERR_CONFIG);

  int32_t rc = HRMLM_OK;
  if (train->parsed()) {
    rc = hrmlm_train(run, buf.data(), kBufCap);
    if (rc == HRMLM_OK) std::printf("%s\n", buf.c_str());
  } else if (gradcheck->parsed()) {
    double max_rel_err = 0.0;
    std::string worst(256, '\0');
    rc = hrmlm_gradcheck(run, &max_rel_err, worst.data(),
                         static_cast<int64_t>(worst.size()));
    if (rc == HRMLM_OK || rc == HRMLM_ERR_ACCEPT) {
      std::printf("max_rel_err %.3e worst %s: %s\n", max_rel_err, worst.c_str(),
                  rc == HRMLM_OK ? "PASS" : "FAIL");
    }
  } else if (analyze->parsed()) {
    rc = hrmlm_analyze(run, what.c_str(), checkpoint.c_str(), out_dir.c_str(),
                       buf.data(), kBufCap);
    if (rc == HRMLM_OK) std::printf("%s\n", buf.c_str());
  }

  hrmlm_run_close(run);
  if (rc != HRMLM_OK && std::string(hrmlm_last_error()).size() > 0) {
    std::fprintf(stderr, "error: %s\n", hrmlm_last_error());
  }
  return static_cast<int>(rc);
}
