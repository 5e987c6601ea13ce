#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cozinb/generative.hpp"
#include "cozinb/inference.hpp"

namespace cozinb {

/// Settings of the synthetic-corpus command.
struct SynthSettings {
    int J = 100;
    int M = 50;
    std::optional<PlantedConfig> planted;
    bool use_kernel = true;
    std::optional<double> kernel_override_scale;
    std::vector<std::vector<double>> kernel_override_locations;
    SelectorMode selectors = SelectorMode::Sample;
    std::optional<double> fixed_r;
    std::optional<double> fixed_p;
    std::optional<double> fixed_gamma0;
};

struct RunConfig {
    HyperParams hp;
    Schedule schedule;
    InferenceOptions opts;  // opts.threads is a run setting, not part of the snapshot
    std::uint64_t seed = 0;
    std::string data;
    std::string format = "triplet";
    std::string labels;
    std::string output = "cozinb_out";
    std::vector<std::string> feature_blacklist;
    std::size_t top_features = 0;  // 0 keeps every feature
    /// Share of samples held out for validation, and share of each held-out
    /// sample's tokens used as the scoring target.
    double validation_fraction = 0.2;
    double heldout_token_fraction = 0.5;
    bool cavi = false;
    bool record_wall_time = false;
    SynthSettings synth;

    void validate() const;
    SynthConfig synth_config() const;
};

/// Strict parse: unknown keys at any level raise ConfigError.
nlohmann::json to_json(const HyperParams& hp);
nlohmann::json to_json(const Schedule& s);

RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
/// Applies a single `key=value` override; the value is read as JSON when it
/// parses, otherwise as a string. Dotted keys reach nested objects.
void apply_override(RunConfig& c, const std::string& assignment);
/// Every field, explicit; loading this reproduces the run.
nlohmann::json to_json(const RunConfig& c);

}  // namespace cozinb
