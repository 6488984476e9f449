#pragma once

// Run configuration: a flat "section.key = value" text file with '#'
// comments. Unknown keys are rejected; every key has a default.

#include <filesystem>
#include <string>
#include <vector>

#include "dior/evaluate.hpp"
#include "dior/model.hpp"
#include "dior/trainer.hpp"

namespace dior {

struct RunPaths {
  std::string train = "data/train.jsonl";
  std::string eval = "data/eval.jsonl";
  std::string vocab = "data/vocab.txt";
  std::string checkpoint = "runs/model.ckpt";
  std::string log_dir = "runs";
};

struct RunConfig {
  ModelConfig model;  // vocab_size is filled from the vocabulary file
  PriorConfig prior;
  TrainConfig train;
  EvalOptions eval;
  RunPaths paths;

  RunConfig();

  /// Sets one key from its text form; throws on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  /// Every key with its current value and a one-line description.
  std::string to_text() const;
  static const std::vector<std::string>& keys();
};

/// Applies the file over `config`. Errors name the file and line.
void load_run_config(const std::filesystem::path& path, RunConfig& config);

/// Splits "key=value" (as given to --set) and applies it.
void apply_override(RunConfig& config, const std::string& assignment);

}  // namespace dior
