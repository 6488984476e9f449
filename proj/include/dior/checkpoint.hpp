#pragma once

// Binary checkpoint container.
//
//   "DIORCKPT" | u32 version | u32 manifest bytes | manifest (key=value lines)
//   | u32 entry count | entries: u32 name bytes, name, u32 rows, u32 cols,
//   rows*cols little-endian values (f32 or f64 per the manifest precision).
//
// Optimiser moments are stored as entries named "adam.m/<param>" and
// "adam.v/<param>".

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "dior/model.hpp"
#include "dior/trainer.hpp"

namespace dior {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using Manifest = std::map<std::string, std::string>;

Manifest describe(const ModelConfig& model, const PriorConfig& prior);
ModelConfig model_config_from(const Manifest& manifest);
PriorConfig prior_config_from(const Manifest& manifest);

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const DiorCvae<S>& model,
                     const Manifest& extra = {}, const AdamState<S>* adam = nullptr);

template <typename S>
struct LoadedCheckpoint {
  DiorCvae<S> model;
  Manifest manifest;
  std::optional<AdamState<S>> adam;
};

/// Loads into precision S, converting from the stored precision if needed.
template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::filesystem::path& path);

}  // namespace dior
