#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "pathflow/field.hpp"
#include "pathflow/targets.hpp"
#include "pathflow/train.hpp"

namespace pathflow::io {

inline constexpr int kCheckpointFormat = 1;
inline constexpr int kDatasetFormat = 1;
inline constexpr const char* kEngineVersion = "0.1.0";

nlohmann::json arch_to_json(const FieldArch& arch);
FieldArch arch_from_json(const nlohmann::json& j);

// Checkpoint layout: one JSON header line (format version, arch, counts)
// terminated by '\n', then the flat parameter vector as little-endian
// float64. Round-trips byte-exactly.
void save_checkpoint(const std::filesystem::path& path, const FieldParams& params);
FieldParams load_checkpoint(const std::filesystem::path& path);

// Optimizer sidecar: JSON header line + m and v as little-endian float64.
void save_optimizer(const std::filesystem::path& path, const train::OptimizerState& opt);
train::OptimizerState load_optimizer(const std::filesystem::path& path);

// Dataset layout: JSON header line (format version, n, d, model descriptor,
// has_forces, provenance) + row-major little-endian float64 samples, then
// forces when present.
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

// FNV-1a over the file bytes, rendered as 16 hex digits.
std::string file_checksum(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace pathflow::io
