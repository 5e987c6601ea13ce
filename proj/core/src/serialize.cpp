#include "cozinb/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cozinb/error.hpp"

namespace cozinb {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
}

json read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("missing checkpoint manifest '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed manifest '" + path.string() + "': " + e.what());
    }
}

void write_weights(const std::filesystem::path& dir, const std::string& prefix, const MlpWeights& w,
                   const AdamState& adam, json& arrays, json& meta) {
    json widths = w.spec.widths;
    json acts = json::array();
    for (Activation a : w.spec.activations) acts.push_back(to_string(a));
    meta[prefix] = {{"widths", widths}, {"activations", acts}, {"generation", w.generation},
                    {"adam_step", adam.step}, {"lr", adam.config.lr}};
    for (std::size_t l = 0; l < w.weight.size(); ++l) {
        const std::string tag = prefix + "_" + std::to_string(l);
        // Weight blocks are written row-major (out x in).
        const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> W = w.weight[l];
        const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> mW = adam.m_weight[l];
        const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> vW = adam.v_weight[l];
        arrays[tag + "_weight"] = write_block(dir, tag + "_weight", W.data(), W.rows(), W.cols());
        arrays[tag + "_bias"] = write_block(dir, tag + "_bias", w.bias[l].data(), w.bias[l].size(), 1);
        arrays[tag + "_adam_m_weight"] = write_block(dir, tag + "_adam_m_weight", mW.data(), mW.rows(), mW.cols());
        arrays[tag + "_adam_v_weight"] = write_block(dir, tag + "_adam_v_weight", vW.data(), vW.rows(), vW.cols());
        arrays[tag + "_adam_m_bias"] =
            write_block(dir, tag + "_adam_m_bias", adam.m_bias[l].data(), adam.m_bias[l].size(), 1);
        arrays[tag + "_adam_v_bias"] =
            write_block(dir, tag + "_adam_v_bias", adam.v_bias[l].data(), adam.v_bias[l].size(), 1);
    }
}

void read_weights(const std::filesystem::path& dir, const std::string& prefix, const json& arrays, const json& meta,
                  MlpWeights& w, AdamState& adam) {
    const json& m = meta.at(prefix);
    MlpSpec spec;
    spec.widths = m.at("widths").get<std::vector<int>>();
    for (const auto& a : m.at("activations")) spec.activations.push_back(parse_activation(a.get<std::string>()));
    spec.validate();
    w = MlpWeights::zeros(spec);
    AdamConfig ac;
    ac.lr = m.at("lr");
    adam = AdamState::for_weights(w, ac);
    adam.step = m.at("adam_step");
    using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        const std::string tag = prefix + "_" + std::to_string(l);
        const std::size_t out = spec.widths[l + 1], in = spec.widths[l];
        auto mat = [&](const std::string& name) {
            const std::vector<double> v = read_block(dir, arrays.at(name), out, in);
            return Matrix(Eigen::Map<const RM>(v.data(), out, in));
        };
        auto vec = [&](const std::string& name) {
            const std::vector<double> v = read_block(dir, arrays.at(name), out, 1);
            return Vector(Eigen::Map<const Vector>(v.data(), out));
        };
        w.weight[l] = mat(tag + "_weight");
        w.bias[l] = vec(tag + "_bias");
        adam.m_weight[l] = mat(tag + "_adam_m_weight");
        adam.v_weight[l] = mat(tag + "_adam_v_weight");
        adam.m_bias[l] = vec(tag + "_adam_m_bias");
        adam.v_bias[l] = vec(tag + "_adam_v_bias");
    }
    w.generation = m.at("generation");
}

}  // namespace

void write_doubles(const std::filesystem::path& path, const double* data, std::size_t n) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    std::vector<std::uint64_t> buf(n);
    for (std::size_t i = 0; i < n; ++i) buf[i] = to_le(std::bit_cast<std::uint64_t>(data[i]));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(n * 8));
    if (!out) throw DataError("short write to '" + path.string() + "'");
}

std::vector<double> read_doubles(const std::filesystem::path& path, std::size_t expected) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DataError("missing array file '" + path.string() + "'");
    const auto size = static_cast<std::size_t>(in.tellg());
    if (size != expected * 8) {
        throw DataError("array file '" + path.string() + "' has " + std::to_string(size) + " bytes, expected " +
                        std::to_string(expected * 8));
    }
    in.seekg(0);
    std::vector<std::uint64_t> buf(expected);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
    std::vector<double> v(expected);
    for (std::size_t i = 0; i < expected; ++i) v[i] = std::bit_cast<double>(to_le(buf[i]));
    return v;
}

json write_block(const std::filesystem::path& dir, const std::string& name, const double* data, std::size_t rows,
                 std::size_t cols) {
    const std::string file = name + ".bin";
    write_doubles(dir / file, data, rows * cols);
    return json{{"file", file}, {"rows", rows}, {"cols", cols}};
}

std::vector<double> read_block(const std::filesystem::path& dir, const json& entry, std::size_t rows,
                               std::size_t cols) {
    const std::size_t r = entry.at("rows"), c = entry.at("cols");
    if (r != rows || c != cols) {
        throw DataError("array '" + entry.at("file").get<std::string>() + "' has shape " + std::to_string(r) + "x" +
                        std::to_string(c) + ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    return read_doubles(dir / entry.at("file").get<std::string>(), rows * cols);
}

json to_json(const HyperParams& hp) {
    return json{{"a", hp.a},
                {"b", hp.b},
                {"alpha", hp.alpha},
                {"eta0", hp.eta0},
                {"a0", hp.a0},
                {"b0", hp.b0},
                {"e0", hp.e0},
                {"f0", hp.f0},
                {"K", hp.K},
                {"d_h", hp.d_h},
                {"d_l", hp.d_l},
                {"encoder_hidden", hp.encoder_hidden},
                {"decoder_hidden", hp.decoder_hidden},
                {"activation", to_string(hp.activation)}};
}

HyperParams hyperparams_from_json(const json& j) {
    HyperParams hp;
    hp.a = j.at("a");
    hp.b = j.at("b");
    hp.alpha = j.at("alpha");
    hp.eta0 = j.at("eta0");
    hp.a0 = j.at("a0");
    hp.b0 = j.at("b0");
    hp.e0 = j.at("e0");
    hp.f0 = j.at("f0");
    hp.K = j.at("K");
    hp.d_h = j.at("d_h");
    hp.d_l = j.at("d_l");
    hp.encoder_hidden = j.at("encoder_hidden").get<std::vector<int>>();
    hp.decoder_hidden = j.at("decoder_hidden").get<std::vector<int>>();
    hp.activation = parse_activation(j.at("activation").get<std::string>());
    return hp;
}

json to_json(const Schedule& s) {
    return json{{"batch_size", s.batch_size}, {"tau0", s.tau0},           {"kappa", s.kappa},
                {"max_epochs", s.max_epochs}, {"tolerance", s.tolerance}, {"patience", s.patience},
                {"learning_rate", s.learning_rate}, {"local_iters", s.local_iters}, {"local_tol", s.local_tol}};
}

Schedule schedule_from_json(const json& j) {
    Schedule s;
    s.batch_size = j.at("batch_size");
    s.tau0 = j.at("tau0");
    s.kappa = j.at("kappa");
    s.max_epochs = j.at("max_epochs");
    s.tolerance = j.at("tolerance");
    s.patience = j.at("patience");
    s.learning_rate = j.at("learning_rate");
    s.local_iters = j.at("local_iters");
    s.local_tol = j.at("local_tol");
    return s;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const GlobalState& g = c.global;
    json arrays, nets;
    arrays["eta"] = write_block(dir, "eta", g.eta.data(), g.K, g.M);
    arrays["tau1"] = write_block(dir, "tau1", g.tau1.data(), g.K, 1);
    arrays["tau2"] = write_block(dir, "tau2", g.tau2.data(), g.K, 1);
    arrays["r_shape"] = write_block(dir, "r_shape", g.r_shape.data(), g.K, 1);
    arrays["r_scale"] = write_block(dir, "r_scale", g.r_scale.data(), g.K, 1);
    arrays["anchor_logit"] = write_block(dir, "anchor_logit", g.anchor_logit.data(), g.K, 1);
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> l = g.l;
    arrays["l"] = write_block(dir, "l", l.data(), l.rows(), l.cols());
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> lm =
        Eigen::Map<const Matrix>(g.adam_l.m.data(), g.l.rows(), g.l.cols());
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> lv =
        Eigen::Map<const Matrix>(g.adam_l.v.data(), g.l.rows(), g.l.cols());
    arrays["adam_l_m"] = write_block(dir, "adam_l_m", lm.data(), lm.rows(), lm.cols());
    arrays["adam_l_v"] = write_block(dir, "adam_l_v", lv.data(), lv.rows(), lv.cols());
    write_weights(dir, "encoder", g.encoder, g.adam_encoder, arrays, nets);
    write_weights(dir, "decoder", g.decoder, g.adam_decoder, arrays, nets);

    json extra;
    try {
        extra = json::parse(c.extra_json);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("checkpoint extra fields are not JSON: ") + e.what());
    }
    json man = {{"format", "cozinb-checkpoint"},
                {"version", 1},
                {"hyperparams", to_json(c.hp)},
                {"schedule", to_json(c.schedule)},
                {"epoch", c.epoch},
                {"iteration", g.iteration},
                {"rng_state", c.rng_state},
                {"K", g.K},
                {"M", g.M},
                {"gamma0", g.gamma0},
                {"adam_l_step", g.adam_l.step},
                {"adam_log_gamma0", {{"step", g.adam_log_gamma0.step},
                                     {"m", g.adam_log_gamma0.m[0]},
                                     {"v", g.adam_log_gamma0.v[0]}}},
                {"networks", nets},
                {"arrays", arrays},
                {"extra", extra}};
    std::ofstream out(dir / "manifest.json");
    if (!out) throw DataError("cannot write '" + (dir / "manifest.json").string() + "'");
    out << man.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const json man = read_manifest(dir / "manifest.json");
    try {
        if (man.at("format") != "cozinb-checkpoint") throw DataError("not a cozinb checkpoint: " + dir.string());
        Checkpoint c;
        c.hp = hyperparams_from_json(man.at("hyperparams"));
        c.schedule = schedule_from_json(man.at("schedule"));
        c.epoch = man.at("epoch");
        c.rng_state = man.at("rng_state");
        c.extra_json = man.at("extra").dump();
        GlobalState& g = c.global;
        g.K = man.at("K");
        g.M = man.at("M");
        g.gamma0 = man.at("gamma0");
        g.iteration = man.at("iteration");
        const json& a = man.at("arrays");
        const std::size_t K = g.K, M = g.M, dl = c.hp.d_l;
        auto vec = [&](const char* name) {
            const std::vector<double> v = read_block(dir, a.at(name), K, 1);
            return Eigen::ArrayXd(Eigen::Map<const Eigen::ArrayXd>(v.data(), K));
        };
        {
            const std::vector<double> v = read_block(dir, a.at("eta"), K, M);
            g.eta = Eigen::Map<const RowArray>(v.data(), K, M);
        }
        g.tau1 = vec("tau1");
        g.tau2 = vec("tau2");
        g.r_shape = vec("r_shape");
        g.r_scale = vec("r_scale");
        g.anchor_logit = vec("anchor_logit");
        using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        auto lmat = [&](const char* name) {
            const std::vector<double> v = read_block(dir, a.at(name), K, dl);
            return Matrix(Eigen::Map<const RM>(v.data(), K, dl));
        };
        g.l = lmat("l");
        const json& nets = man.at("networks");
        read_weights(dir, "encoder", a, nets, g.encoder, g.adam_encoder);
        read_weights(dir, "decoder", a, nets, g.decoder, g.adam_decoder);
        AdamConfig ac;
        ac.lr = g.adam_encoder.config.lr;
        g.adam_l = AdamVector(static_cast<Eigen::Index>(K * dl), ac);
        g.adam_l.step = man.at("adam_l_step");
        const Matrix lm = lmat("adam_l_m"), lv = lmat("adam_l_v");
        g.adam_l.m = Eigen::Map<const Eigen::ArrayXd>(lm.data(), lm.size());
        g.adam_l.v = Eigen::Map<const Eigen::ArrayXd>(lv.data(), lv.size());
        g.adam_log_gamma0 = AdamVector(1, ac);
        const json& ag = man.at("adam_log_gamma0");
        g.adam_log_gamma0.step = ag.at("step");
        g.adam_log_gamma0.m[0] = ag.at("m");
        g.adam_log_gamma0.v[0] = ag.at("v");
        if (g.encoder.spec.input_dim() != g.M) throw DataError("checkpoint encoder input width does not match M");
        g.validate();
        return c;
    } catch (const json::exception& e) {
        throw DataError("inconsistent checkpoint manifest in '" + dir.string() + "': " + e.what());
    } catch (const NumericalError& e) {
        throw DataError("checkpoint in '" + dir.string() + "' holds invalid state: " + e.what());
    }
}

}  // namespace cozinb
