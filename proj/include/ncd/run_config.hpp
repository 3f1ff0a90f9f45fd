#pragma once

// Flat key=value run configuration shared by every command.

#include <filesystem>
#include <utility>
#include <vector>
#include <optional>
#include <string>

#include "ncd/datagen.hpp"
#include "ncd/trainer.hpp"

namespace ncd {

struct EvalOptions {
  int queries_per_class = 10;
  double drop_probability = 0.0;         // modality dropping applied before training
  std::optional<std::size_t> drop_modality;  // removed from the data before evaluation
  int eval_every = 1;                    // epochs between evaluations; 0 evaluates only the last

  bool operator==(const EvalOptions&) const = default;
};

struct RunConfig {
  GeneratorConfig data;
  TrainConfig train;
  EvalOptions eval;
  std::string dataset;  // train/eval on this file instead of generating

  std::uint64_t seed() const { return train.seed; }
  void set_seed(std::uint64_t seed);
  void validate() const;

  // Applies one key=value setting; unknown keys and bad values throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  static RunConfig from_text(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

// Splits "key=value" lines in order; '#' starts a comment.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

}  // namespace ncd
