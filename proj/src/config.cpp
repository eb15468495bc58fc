#include "hrmlm/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "hrmlm/errors.hpp"

namespace hrmlm {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ConfigFile ConfigFile::parse_string(const std::string& text) {
  ConfigFile f;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  Section* cur = nullptr;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw config_error("config line " + std::to_string(lineno) +
                           ": unterminated section header");
      }
      const std::string name = trim(t.substr(1, t.size() - 2));
      if (name.empty()) {
        throw config_error("config line " + std::to_string(lineno) +
                           ": empty section name");
      }
      for (const Section& s : f.sections) {
        if (s.name == name) {
          throw config_error("config line " + std::to_string(lineno) +
                             ": duplicate section [" + name + "]");
        }
      }
      f.sections.push_back({name, {}});
      cur = &f.sections.back();
      continue;
    }
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw config_error("config line " + std::to_string(lineno) +
                         ": expected key = value, got '" + t + "'");
    }
    if (!cur) {
      throw config_error("config line " + std::to_string(lineno) +
                         ": key outside any section");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw config_error("config line " + std::to_string(lineno) + ": empty key");
    }
    for (const auto& [k, v] : cur->entries) {
      if (k == key) {
        throw config_error("config line " + std::to_string(lineno) +
                           ": duplicate key '" + key + "' in [" + cur->name + "]");
      }
    }
    cur->entries.emplace_back(key, value);
  }
  return f;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str());
}

std::string ConfigFile::serialize() const {
  std::ostringstream out;
  bool first = true;
  for (const Section& s : sections) {
    if (!first) out << "\n";
    first = false;
    out << "[" << s.name << "]\n";
    for (const auto& [k, v] : s.entries) out << k << " = " << v << "\n";
  }
  return out.str();
}

const std::string* ConfigFile::find(const std::string& section,
                                    const std::string& key) const {
  for (const Section& s : sections) {
    if (s.name != section) continue;
    for (const auto& [k, v] : s.entries) {
      if (k == key) return &v;
    }
  }
  return nullptr;
}

void ConfigFile::set(const std::string& section, const std::string& key,
                     const std::string& value) {
  for (Section& s : sections) {
    if (s.name != section) continue;
    for (auto& [k, v] : s.entries) {
      if (k == key) {
        v = value;
        return;
      }
    }
    s.entries.emplace_back(key, value);
    return;
  }
  sections.push_back({section, {{key, value}}});
}

void ConfigFile::set_dotted(const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw config_error("override must look like section.key=value, got '" +
                       assignment + "'");
  }
  const std::string path = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  const size_t dot = path.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 >= path.size()) {
    throw config_error("override key must be section.key, got '" + path + "'");
  }
  set(path.substr(0, dot), path.substr(dot + 1), value);
}

std::vector<std::pair<std::string, std::string>> ConfigFile::flattened() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const Section& s : sections) {
    for (const auto& [k, v] : s.entries) out.emplace_back(s.name + "." + k, v);
  }
  return out;
}

namespace {

int64_t to_int(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    const int64_t x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error(where + ": expected an integer, got '" + v + "'");
  }
}

double to_double(const std::string& v, const std::string& where) {
  try {
    size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error(where + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& v, const std::string& where) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw config_error(where + ": expected true or false, got '" + v + "'");
}

}  // namespace

TrainConfig build_train_config(const ConfigFile& file) {
  TrainConfig cfg;
  for (const ConfigFile::Section& s : file.sections) {
    if (s.name != "model" && s.name != "train" && s.name != "out") {
      throw config_error("unknown config section [" + s.name + "]");
    }
    for (const auto& [key, value] : s.entries) {
      const std::string where = s.name + "." + key;
      if (s.name == "model") {
        if (key == "kind") cfg.kind = value;
        else if (key == "d") cfg.hrm.d = to_int(value, where);
        else if (key == "heads") cfg.hrm.heads = to_int(value, where);
        else if (key == "vocab") cfg.hrm.vocab = to_int(value, where);
        else if (key == "seq") cfg.hrm.seq = to_int(value, where);
        else if (key == "cycles") cfg.hrm.cycles = to_int(value, where);
        else if (key == "t_steps") cfg.hrm.t_steps = to_int(value, where);
        else if (key == "passes") cfg.hrm.passes = to_int(value, where);
        else if (key == "window") {
          cfg.hrm.window = to_int(value, where);
          cfg.unitf_window = cfg.hrm.window;
        } else if (key == "lambda_entropy") {
          cfg.hrm.lambda_entropy = to_double(value, where);
        } else if (key == "rope_base") cfg.hrm.rope_base = to_double(value, where);
        else if (key == "norm_eps") cfg.hrm.norm_eps = to_double(value, where);
        else if (key == "layers") cfg.layers = to_int(value, where);
        else if (key == "steps") cfg.unitf_steps = to_int(value, where);
        else if (key == "init_safety") cfg.init_safety = to_double(value, where);
        else if (key == "init_std_override") cfg.init_std_override = to_double(value, where);
        else throw config_error("unknown config key " + where);
      } else if (s.name == "train") {
        if (key == "seed") cfg.seed = static_cast<uint64_t>(to_int(value, where));
        else if (key == "batch") cfg.batch = to_int(value, where);
        else if (key == "grad_accum") cfg.grad_accum = to_int(value, where);
        else if (key == "max_steps") cfg.max_steps = to_int(value, where);
        else if (key == "warmup") cfg.warmup = to_int(value, where);
        else if (key == "lr_max") cfg.lr_max = to_double(value, where);
        else if (key == "lr_min") cfg.lr_min = to_double(value, where);
        else if (key == "clip_base") cfg.clip_base = to_double(value, where);
        else if (key == "weight_decay") cfg.adamw.weight_decay = to_double(value, where);
        else if (key == "beta1") cfg.adamw.beta1 = to_double(value, where);
        else if (key == "beta2") cfg.adamw.beta2 = to_double(value, where);
        else if (key == "adam_eps") cfg.adamw.eps = to_double(value, where);
        else if (key == "lr_scale_by_passes") cfg.lr_scale_by_passes = to_bool(value, where);
        else if (key == "corpus") cfg.corpus = value;
        else if (key == "eval_interval") cfg.eval_interval = to_int(value, where);
        else if (key == "checkpoint_interval") cfg.checkpoint_interval = to_int(value, where);
        else if (key == "stop_at_val_ce") cfg.stop_at_val_ce = to_double(value, where);
        else if (key == "monitor_stability") cfg.monitor_stability = to_bool(value, where);
        else if (key == "resume") cfg.resume = value;
        else throw config_error("unknown config key " + where);
      } else {  // out
        if (key == "metrics") cfg.metrics_path = value;
        else if (key == "curves") cfg.curves_path = value;
        else if (key == "checkpoint_dir") cfg.checkpoint_dir = value;
        else throw config_error("unknown config key " + where);
      }
    }
  }
  cfg.echo = file.flattened();
  cfg.validate();
  return cfg;
}

}  // namespace hrmlm
