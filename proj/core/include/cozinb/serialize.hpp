#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cozinb/model.hpp"

namespace cozinb {

/// Raw little-endian float64 arrays.
void write_doubles(const std::filesystem::path& path, const double* data, std::size_t n);
std::vector<double> read_doubles(const std::filesystem::path& path, std::size_t expected);

/// Writes `name`.bin into `dir` and returns its manifest entry {file, rows, cols}.
nlohmann::json write_block(const std::filesystem::path& dir, const std::string& name, const double* data,
                           std::size_t rows, std::size_t cols);
/// Reads a block described by a manifest entry; checks the shape.
std::vector<double> read_block(const std::filesystem::path& dir, const nlohmann::json& entry, std::size_t rows,
                               std::size_t cols);

nlohmann::json to_json(const HyperParams& hp);
HyperParams hyperparams_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Schedule& s);
Schedule schedule_from_json(const nlohmann::json& j);

struct Checkpoint {
    HyperParams hp;
    Schedule schedule;
    GlobalState global;
    int epoch = 0;
    std::string rng_state;
    /// Free-form extra fields stored verbatim (resolved run settings).
    std::string extra_json = "{}";
};

/// Checkpoint directory: manifest.json plus one .bin per global block.
/// Network weights are stored layer-major (weight, then bias, per layer)
/// with their shapes in the manifest.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir);
/// Throws DataError when the manifest is missing or inconsistent.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace cozinb
