#include "cozinb/config.hpp"

#include <fstream>
#include <functional>
#include <map>

#include <nlohmann/json.hpp>

#include "cozinb/error.hpp"

namespace cozinb {

using nlohmann::json;

namespace {

using Setter = std::function<void(const json&)>;

template <typename T>
T get_as(const json& v, const std::string& key) {
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key '" + key + "' has the wrong type");
    }
}

/// Fails on any key not in `setters`.
void apply_object(const json& obj, const std::map<std::string, Setter>& setters, const std::string& where) {
    if (!obj.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        const auto s = setters.find(it.key());
        if (s == setters.end()) {
            throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
        }
        s->second(it.value());
    }
}

template <typename T>
Setter field(T& dst, const std::string& key) {
    return [&dst, key](const json& v) { dst = get_as<T>(v, key); };
}

template <typename T>
Setter opt_field(std::optional<T>& dst, const std::string& key) {
    return [&dst, key](const json& v) {
        if (v.is_null()) {
            dst.reset();
        } else {
            dst = get_as<T>(v, key);
        }
    };
}

SelectorMode parse_selectors(const std::string& s) {
    if (s == "sample") return SelectorMode::Sample;
    if (s == "all_on") return SelectorMode::AllOn;
    if (s == "all_off") return SelectorMode::AllOff;
    throw ConfigError("synth.selectors must be sample, all_on or all_off");
}

std::string selectors_name(SelectorMode m) {
    switch (m) {
        case SelectorMode::AllOn: return "all_on";
        case SelectorMode::AllOff: return "all_off";
        default: return "sample";
    }
}

std::map<std::string, Setter> planted_setters(PlantedConfig& p) {
    return {{"K_star", field(p.K_star, "synth.planted.K_star")},
            {"target_mean_tml", field(p.target_mean_tml, "synth.planted.target_mean_tml")},
            {"background", field(p.background, "synth.planted.background")},
            {"pi", field(p.pi, "synth.planted.pi")},
            {"r", field(p.r, "synth.planted.r")}};
}

std::map<std::string, Setter> synth_setters(SynthSettings& s) {
    return {{"J", field(s.J, "synth.J")},
            {"M", field(s.M, "synth.M")},
            {"planted",
             [&s](const json& v) {
                 if (v.is_null()) {
                     s.planted.reset();
                     return;
                 }
                 if (!s.planted) s.planted = PlantedConfig{};
                 apply_object(v, planted_setters(*s.planted), "synth.planted");
             }},
            {"use_kernel", field(s.use_kernel, "synth.use_kernel")},
            {"kernel_override_scale", opt_field(s.kernel_override_scale, "synth.kernel_override_scale")},
            {"kernel_override_locations", field(s.kernel_override_locations, "synth.kernel_override_locations")},
            {"selectors", [&s](const json& v) { s.selectors = parse_selectors(get_as<std::string>(v, "synth.selectors")); }},
            {"fixed_r", opt_field(s.fixed_r, "synth.fixed_r")},
            {"fixed_p", opt_field(s.fixed_p, "synth.fixed_p")},
            {"fixed_gamma0", opt_field(s.fixed_gamma0, "synth.fixed_gamma0")}};
}

std::map<std::string, Setter> top_setters(RunConfig& c) {
    HyperParams& hp = c.hp;
    Schedule& s = c.schedule;
    InferenceOptions& o = c.opts;
    return {
        {"a", field(hp.a, "a")},
        {"b", field(hp.b, "b")},
        {"alpha", field(hp.alpha, "alpha")},
        {"eta0", field(hp.eta0, "eta0")},
        {"a0", field(hp.a0, "a0")},
        {"b0", field(hp.b0, "b0")},
        {"e0", field(hp.e0, "e0")},
        {"f0", field(hp.f0, "f0")},
        {"K", field(hp.K, "K")},
        {"d_h", field(hp.d_h, "d_h")},
        {"d_l", field(hp.d_l, "d_l")},
        {"encoder_hidden", field(hp.encoder_hidden, "encoder_hidden")},
        {"decoder_hidden", field(hp.decoder_hidden, "decoder_hidden")},
        {"activation", [&hp](const json& v) { hp.activation = parse_activation(get_as<std::string>(v, "activation")); }},
        {"batch_size", field(s.batch_size, "batch_size")},
        {"tau0", field(s.tau0, "tau0")},
        {"kappa", field(s.kappa, "kappa")},
        {"max_epochs", field(s.max_epochs, "max_epochs")},
        {"tolerance", field(s.tolerance, "tolerance")},
        {"patience", field(s.patience, "patience")},
        {"learning_rate", field(s.learning_rate, "learning_rate")},
        {"local_iters", field(s.local_iters, "local_iters")},
        {"local_tol", field(s.local_tol, "local_tol")},
        {"zero_inflation", field(o.zero_inflation, "zero_inflation")},
        {"kernel", field(o.kernel, "kernel")},
        {"gradient_crt", field(o.gradient_crt, "gradient_crt")},
        {"kernel_sampling", field(o.kernel_sampling, "kernel_sampling")},
        {"freeze_gradient", field(o.freeze_gradient, "freeze_gradient")},
        {"prune", field(o.prune, "prune")},
        {"local_moves", field(o.local_moves, "local_moves")},
        {"delete_every", field(o.delete_every, "delete_every")},
        {"delete_candidates", field(o.delete_candidates, "delete_candidates")},
        {"delete_sweeps", field(o.delete_sweeps, "delete_sweeps")},
        {"seed", field(c.seed, "seed")},
        {"data", field(c.data, "data")},
        {"format", field(c.format, "format")},
        {"labels", field(c.labels, "labels")},
        {"output", field(c.output, "output")},
        {"feature_blacklist", field(c.feature_blacklist, "feature_blacklist")},
        {"top_features", field(c.top_features, "top_features")},
        {"validation_fraction", field(c.validation_fraction, "validation_fraction")},
        {"heldout_token_fraction", field(c.heldout_token_fraction, "heldout_token_fraction")},
        {"cavi", field(c.cavi, "cavi")},
        {"record_wall_time", field(c.record_wall_time, "record_wall_time")},
        {"synth", [&c](const json& v) { apply_object(v, synth_setters(c.synth), "synth"); }},
    };
}

}  // namespace

void RunConfig::validate() const {
    hp.validate();
    schedule.validate();
    parse_count_format(format);
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
        throw ConfigError("validation_fraction must lie in (0, 1)");
    }
    if (!(heldout_token_fraction > 0.0 && heldout_token_fraction < 1.0)) {
        throw ConfigError("heldout_token_fraction must lie in (0, 1)");
    }
    if (opts.delete_every < 0 || opts.delete_candidates < 0 || opts.delete_sweeps < 1) {
        throw ConfigError("delete_every and delete_candidates must be >= 0, delete_sweeps >= 1");
    }
}

SynthConfig RunConfig::synth_config() const {
    SynthConfig sc;
    sc.hp = hp;
    sc.J = synth.J;
    sc.M = synth.M;
    sc.seed = seed;
    sc.planted = synth.planted;
    sc.use_kernel = synth.use_kernel;
    if (synth.kernel_override_scale) {
        KernelOverride ko;
        ko.scale = *synth.kernel_override_scale;
        const auto& L = synth.kernel_override_locations;
        if (!L.empty()) {
            ko.locations.resize(static_cast<Eigen::Index>(L.size()), static_cast<Eigen::Index>(L.front().size()));
            for (std::size_t k = 0; k < L.size(); ++k) {
                if (L[k].size() != L.front().size()) throw ConfigError("kernel_override_locations rows differ in length");
                for (std::size_t d = 0; d < L[k].size(); ++d) ko.locations(k, d) = L[k][d];
            }
        }
        sc.kernel_override = ko;
    } else if (!synth.kernel_override_locations.empty()) {
        throw ConfigError("kernel_override_locations needs kernel_override_scale");
    }
    sc.selectors = synth.selectors;
    sc.fixed_r = synth.fixed_r;
    sc.fixed_p = synth.fixed_p;
    sc.fixed_gamma0 = synth.fixed_gamma0;
    sc.validate();
    return sc;
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    apply_object(j, top_setters(c), "");
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

void apply_override(RunConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::exception&) {
        value = text;
    }
    // Build the nested object for dotted keys.
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
        parts.push_back(rest.substr(0, pos));
    }
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    apply_object(patch, top_setters(c), "");
    c.validate();
}

json to_json(const RunConfig& c) {
    json j = cozinb::to_json(c.hp);
    const json sched = cozinb::to_json(c.schedule);
    for (const auto& [k, v] : sched.items()) j[k] = v;
    j["zero_inflation"] = c.opts.zero_inflation;
    j["kernel"] = c.opts.kernel;
    j["gradient_crt"] = c.opts.gradient_crt;
    j["kernel_sampling"] = c.opts.kernel_sampling;
    j["freeze_gradient"] = c.opts.freeze_gradient;
    j["prune"] = c.opts.prune;
    j["local_moves"] = c.opts.local_moves;
    j["delete_every"] = c.opts.delete_every;
    j["delete_candidates"] = c.opts.delete_candidates;
    j["delete_sweeps"] = c.opts.delete_sweeps;
    j["seed"] = c.seed;
    j["data"] = c.data;
    j["format"] = c.format;
    j["labels"] = c.labels;
    j["output"] = c.output;
    j["feature_blacklist"] = c.feature_blacklist;
    j["top_features"] = c.top_features;
    j["validation_fraction"] = c.validation_fraction;
    j["heldout_token_fraction"] = c.heldout_token_fraction;
    j["cavi"] = c.cavi;
    j["record_wall_time"] = c.record_wall_time;
    json s = {{"J", c.synth.J},
              {"M", c.synth.M},
              {"use_kernel", c.synth.use_kernel},
              {"kernel_override_scale", c.synth.kernel_override_scale ? json(*c.synth.kernel_override_scale) : json()},
              {"kernel_override_locations", c.synth.kernel_override_locations},
              {"selectors", selectors_name(c.synth.selectors)},
              {"fixed_r", c.synth.fixed_r ? json(*c.synth.fixed_r) : json()},
              {"fixed_p", c.synth.fixed_p ? json(*c.synth.fixed_p) : json()},
              {"fixed_gamma0", c.synth.fixed_gamma0 ? json(*c.synth.fixed_gamma0) : json()}};
    if (c.synth.planted) {
        const PlantedConfig& p = *c.synth.planted;
        s["planted"] = {{"K_star", p.K_star}, {"target_mean_tml", p.target_mean_tml}, {"background", p.background},
                        {"pi", p.pi}, {"r", p.r}};
    } else {
        s["planted"] = nullptr;
    }
    j["synth"] = s;
    return j;
}

}  // namespace cozinb
