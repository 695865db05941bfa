#pragma once

#include "ldic/model.hpp"

#include <filesystem>
#include <optional>

namespace ldic {

inline constexpr uint32_t kCheckpointVersion = 1;

// Single-file checkpoint:
//   "LDCK" | version u32 | config json | frozen entropy tables | named tensors
// All integers little-endian; tensors stored as float32.
//
// Saving freezes the model's entropy tables first.
void save_checkpoint(model::Model& model, const std::filesystem::path& path);

// Builds a model from the embedded config. When `expected` is given and
// differs from the stored config, throws CheckpointError.
model::Model load_checkpoint(const std::filesystem::path& path,
                             const std::optional<ModelConfig>& expected = std::nullopt);

// Loads weights into an existing model; the stored config must equal the
// model's config exactly.
void load_weights(model::Model& model, const std::filesystem::path& path);

ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace ldic
