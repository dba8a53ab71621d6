#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>

#include "fvlm/corpus.hpp"
#include "fvlm/io.hpp"
#include "fvlm/models.hpp"

namespace fvlm {

// On-disk layout, little-endian throughout:
//
//   "FVLM"  u32 version  u32 arch tag
//   u32 config length, config text ("key=value\n" lines)
//   u64 vocabulary hash
//   u32 block count, then per block:
//     u32 name length, name, u64 rows, u64 cols, u8 float width (4 or 8),
//     rows * cols row-major floats

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class FloatWidth : std::uint8_t { f32 = 4, f64 = 8 };

using AnyModel = std::variant<BaselineLm, FvPredictor, EnhancedLm, MultiTaskLm>;

ArchKind kind_of(const AnyModel& model);

struct Checkpoint {
  AnyModel model;
  std::uint64_t vocab_hash = 0;
  FloatWidth width = FloatWidth::f64;
};

std::string serialize_checkpoint(const AnyModel& model, std::uint64_t vocab_hash,
                                 FloatWidth width = FloatWidth::f64);
Checkpoint deserialize_checkpoint(const std::string& bytes);

/// Written to a temporary sibling and renamed into place.
void save_checkpoint(const AnyModel& model, std::uint64_t vocab_hash,
                     const std::filesystem::path& path, FloatWidth width = FloatWidth::f64);

/// Throws CheckpointError on bad magic, version, truncation or shape
/// mismatches.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// As load_checkpoint, but also rejects a file holding another architecture
/// with a message naming expected and found kinds.
Checkpoint load_checkpoint(const std::filesystem::path& path, ArchKind expected);

/// Warning text when the checkpoint was trained against another vocabulary.
std::optional<std::string> vocab_mismatch(const Checkpoint& checkpoint, const Vocabulary& vocab);

/// Throws CheckpointError for the FV predictor, which is not a language model.
LanguageModel to_language_model(AnyModel model);

}  // namespace fvlm
