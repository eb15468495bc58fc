#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hrmlm/trainer.hpp"

namespace hrmlm {

// Line-oriented `key = value` file with `[section]` headers and full-line
// `#` comments. Keys must appear inside a section; duplicates are rejected.
// serialize() is canonical: parse(serialize(parse(text))) reproduces the
// same sections, keys, and values.
struct ConfigFile {
  struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;
  };
  std::vector<Section> sections;

  static ConfigFile parse_string(const std::string& text);
  static ConfigFile parse_file(const std::string& path);
  std::string serialize() const;

  const std::string* find(const std::string& section,
                          const std::string& key) const;
  // Replaces the value if the key exists, appends otherwise (creating the
  // section when needed).
  void set(const std::string& section, const std::string& key,
           const std::string& value);
  // "section.key=value" form used by command-line overrides.
  void set_dotted(const std::string& assignment);

  std::vector<std::pair<std::string, std::string>> flattened() const;
};

// Validates sections/keys against the run schema (unknown names are
// config errors) and produces the typed config.
TrainConfig build_train_config(const ConfigFile& file);

}  // namespace hrmlm
