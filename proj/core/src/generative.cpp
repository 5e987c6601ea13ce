#include "cozinb/generative.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cozinb/error.hpp"
#include "cozinb/kernel_net.hpp"
#include "cozinb/serialize.hpp"
#include "cozinb/special.hpp"

namespace cozinb {

namespace {

// Beta draws with tiny parameters underflow to exactly 0 or 1; the selector
// prior needs an interior point.
double clamp_open(double v, double eps) { return std::clamp(v, eps, 1.0 - eps); }

/// Feature draw from a precomputed cumulative distribution.
std::uint32_t draw_from_cdf(Rng& rng, const std::vector<double>& cdf) {
    const double u = rng.uniform() * cdf.back();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    return static_cast<std::uint32_t>(std::min<std::size_t>(it - cdf.begin(), cdf.size() - 1));
}

}  // namespace

void SynthConfig::validate() const {
    hp.validate();
    if (J < 0 || M < 1) throw ConfigError("synthetic corpus needs J >= 0 and M >= 1");
    if (planted) {
        const PlantedConfig& pc = *planted;
        if (pc.K_star < 1 || pc.K_star > hp.K) throw ConfigError("planted K* must lie in [1, K]");
        if (pc.K_star > M) throw ConfigError("planted K* cannot exceed M");
        if (!(pc.target_mean_tml > 0.0)) throw ConfigError("planted target mean TML must be positive");
        if (!(pc.background >= 0.0)) throw ConfigError("planted background mass must be >= 0");
        if (!(pc.pi > 0.0 && pc.pi < 1.0)) throw ConfigError("planted usage probability must lie in (0, 1)");
        if (!(pc.r > 0.0)) throw ConfigError("planted shape r must be positive");
    }
    if (kernel_override) {
        if (hp.d_h != hp.d_l) throw ConfigError("kernel override needs d_h == d_l");
        const Matrix& L = kernel_override->locations;
        const int K = planted ? planted->K_star : hp.K;
        if (L.size() > 0 && (L.rows() != K || L.cols() != hp.d_l)) {
            throw ConfigError("kernel override locations must be K x d_l");
        }
    }
    if (fixed_r && !(*fixed_r > 0.0)) throw ConfigError("fixed r must be positive");
    if (fixed_p && !(*fixed_p > 0.0 && *fixed_p < 1.0)) throw ConfigError("fixed p must lie in (0, 1)");
    if (fixed_gamma0 && !(*fixed_gamma0 > 0.0)) throw ConfigError("fixed gamma0 must be positive");
}

double sigma_inv_shift(double pi, double f) {
    if (!(pi > 0.0 && pi < 1.0)) throw DomainError("sigma_inv_shift: pi must lie strictly inside (0, 1)");
    if (f == 0.0) return pi;
    return special::sigmoid(std::log(pi) - std::log1p(-pi) + f);
}

SyntheticCorpus sample_corpus(const SynthConfig& cfg) {
    cfg.validate();
    const HyperParams& hp = cfg.hp;
    const int K = cfg.planted ? cfg.planted->K_star : hp.K;
    const int M = cfg.M;
    const int J = cfg.J;
    const Rng root(cfg.seed);
    Rng grng = root.split(0);

    GroundTruth t;
    t.gamma0 = cfg.fixed_gamma0 ? *cfg.fixed_gamma0 : gamma_draw(grng, hp.e0, 1.0 / hp.f0);
    t.r.resize(K);
    t.pi.resize(K);
    for (int k = 0; k < K; ++k) {
        if (cfg.fixed_r) {
            t.r[k] = *cfg.fixed_r;
        } else if (cfg.planted) {
            t.r[k] = cfg.planted->r;
        } else {
            t.r[k] = t.gamma0 > 0.0 ? gamma_draw(grng, t.gamma0, 1.0 / hp.alpha) : 0.0;
        }
    }
    const double pa = hp.alpha / hp.K;
    const double pb = hp.K > 1 ? hp.alpha * (1.0 - 1.0 / hp.K) : hp.alpha;
    for (int k = 0; k < K; ++k) {
        t.pi[k] = cfg.planted ? cfg.planted->pi : clamp_open(beta_draw(grng, pa, pb), 1e-12);
    }
    t.l.resize(K, hp.d_l);
    for (int k = 0; k < K; ++k)
        for (int d = 0; d < hp.d_l; ++d) t.l(k, d) = std::sqrt(hp.b) * grng.normal();
    if (cfg.kernel_override && cfg.kernel_override->locations.size() > 0) {
        for (int k = 0; k < K; ++k)
            for (int d = 0; d < hp.d_l; ++d) t.l(k, d) = cfg.kernel_override->locations(k, d);
    }

    t.phi.resize(K, M);
    if (cfg.planted) {
        const double bg = cfg.planted->background;
        for (int k = 0; k < K; ++k) {
            const int lo = k * M / K, hi = (k + 1) * M / K;
            const double in_block = 1.0 / (hi - lo);
            for (int m = 0; m < M; ++m) t.phi(k, m) = (m >= lo && m < hi ? in_block : 0.0) + bg / M;
            t.phi.row(k) /= t.phi.row(k).sum();
        }
    } else {
        std::vector<double> alpha(M, hp.eta0);
        for (int k = 0; k < K; ++k) {
            const std::vector<double> row = dirichlet_draw(grng, alpha);
            for (int m = 0; m < M; ++m) t.phi(k, m) = row[m];
        }
    }

    const bool override_kernel = cfg.kernel_override.has_value();
    MlpWeights decoder;
    if (cfg.use_kernel && !override_kernel) {
        decoder = MlpWeights::init(MlpSpec::make(hp.d_h + hp.d_l, hp.decoder_hidden, 2, hp.activation), grng);
    }

    std::vector<std::vector<double>> cdf(K, std::vector<double>(M));
    for (int k = 0; k < K; ++k) {
        double acc = 0.0;
        for (int m = 0; m < M; ++m) cdf[k][m] = (acc += t.phi(k, m));
    }

    double planted_p = 0.5;
    if (cfg.planted) {
        const double odds = cfg.planted->target_mean_tml / (K * cfg.planted->pi * cfg.planted->r);
        planted_p = odds / (1.0 + odds);
    }

    t.p.resize(J);
    t.b = RowArray::Zero(J, K);
    t.theta = RowArray::Zero(J, K);
    t.f = RowArray::Zero(J, K);
    t.h.resize(J, hp.d_h);
    std::vector<SparseRow> rows(J);
    std::vector<std::string> ids(J);
    const Rng sample_root = root.split(1);
    for (int j = 0; j < J; ++j) {
        Rng rng = sample_root.split(static_cast<std::uint64_t>(j));
        ids[j] = "s" + std::to_string(j + 1);
        Vector h(hp.d_h);
        for (int d = 0; d < hp.d_h; ++d) h[d] = std::sqrt(hp.a) * rng.normal();
        t.h.row(j) = h.transpose().array();
        double p;
        if (cfg.fixed_p) {
            p = *cfg.fixed_p;
        } else if (cfg.planted) {
            p = planted_p;
        } else {
            p = clamp_open(beta_draw(rng, hp.a0, hp.b0), 1e-6);
        }
        t.p[j] = p;
        const double odds = p / (1.0 - p);
        std::vector<std::uint32_t> cols;
        for (int k = 0; k < K; ++k) {
            double f = 0.0;
            if (override_kernel) {
                f = cfg.kernel_override->scale * h.dot(t.l.row(k).transpose().matrix());
            } else if (cfg.use_kernel) {
                const KernelOutput out = kernel_forward(decoder, h, t.l.row(k).transpose());
                f = out.mean + std::exp(out.log_sigma) * rng.normal();
            }
            t.f(j, k) = f;
            bool on = false;
            switch (cfg.selectors) {
                case SelectorMode::AllOn: on = true; break;
                case SelectorMode::AllOff: on = false; break;
                case SelectorMode::Sample: on = bernoulli_draw(rng, sigma_inv_shift(t.pi[k], f)); break;
            }
            t.b(j, k) = on ? 1.0 : 0.0;
            // Zero shape is a point mass at 0.
            const double shape = on ? t.r[k] : 0.0;
            const double theta = shape > 0.0 ? gamma_draw(rng, shape, odds) : 0.0;
            t.theta(j, k) = theta;
            const std::uint64_t n = theta > 0.0 ? poisson_draw(rng, theta) : 0;
            for (std::uint64_t i = 0; i < n; ++i) cols.push_back(draw_from_cdf(rng, cdf[k]));
        }
        std::sort(cols.begin(), cols.end());
        for (std::size_t i = 0; i < cols.size();) {
            std::size_t e = i;
            while (e < cols.size() && cols[e] == cols[i]) ++e;
            rows[j].push_back(Entry{cols[i], static_cast<std::uint32_t>(e - i)});
            i = e;
        }
    }
    std::vector<std::string> features(M);
    for (int m = 0; m < M; ++m) features[m] = "f" + std::to_string(m + 1);
    SyntheticCorpus out;
    out.corpus.counts = CountMatrix(M, std::move(rows), std::move(ids));
    out.corpus.vocab = Vocab(std::move(features));
    out.truth = std::move(t);
    return out;
}

SparseRow posterior_predictive(const GlobalState& g, const std::vector<LocalState>& locals, std::size_t j, Rng& rng) {
    if (j >= locals.size()) throw DomainError("posterior_predictive: unknown sample " + std::to_string(j));
    const LocalState& s = locals[j];
    const Eigen::ArrayXd rate = s.rate_mean();
    std::vector<std::uint32_t> cols;
    std::vector<double> cdf(g.M);
    for (int k = 0; k < g.K; ++k) {
        if (!(rate[k] > 0.0)) continue;
        const std::uint64_t n = poisson_draw(rng, rate[k]);
        if (n == 0) continue;
        double acc = 0.0;
        for (int m = 0; m < g.M; ++m) cdf[m] = (acc += g.eta(k, m));
        for (std::uint64_t i = 0; i < n; ++i) cols.push_back(draw_from_cdf(rng, cdf));
    }
    std::sort(cols.begin(), cols.end());
    SparseRow row;
    for (std::size_t i = 0; i < cols.size();) {
        std::size_t e = i;
        while (e < cols.size() && cols[e] == cols[i]) ++e;
        row.push_back(Entry{cols[i], static_cast<std::uint32_t>(e - i)});
        i = e;
    }
    return row;
}

void save_ground_truth(const GroundTruth& t, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::size_t K = t.phi.rows(), M = t.phi.cols(), J = t.b.rows();
    nlohmann::json arrays;
    arrays["phi"] = write_block(dir, "phi", t.phi.data(), K, M);
    arrays["r"] = write_block(dir, "r", t.r.data(), K, 1);
    arrays["pi"] = write_block(dir, "pi", t.pi.data(), K, 1);
    arrays["p"] = write_block(dir, "p", t.p.data(), J, 1);
    arrays["b"] = write_block(dir, "b", t.b.data(), J, K);
    arrays["theta"] = write_block(dir, "theta", t.theta.data(), J, K);
    arrays["f"] = write_block(dir, "f", t.f.data(), J, K);
    arrays["l"] = write_block(dir, "l", t.l.data(), K, t.l.cols());
    arrays["h"] = write_block(dir, "h", t.h.data(), J, t.h.cols());
    nlohmann::json man = {{"K", K}, {"M", M}, {"J", J}, {"d_l", t.l.cols()}, {"d_h", t.h.cols()},
                          {"gamma0", t.gamma0}, {"arrays", arrays}};
    std::ofstream out(dir / "truth.json");
    if (!out) throw DataError("cannot write '" + (dir / "truth.json").string() + "'");
    out << man.dump(2) << '\n';
}

GroundTruth load_ground_truth(const std::filesystem::path& dir) {
    const auto path = dir / "truth.json";
    std::ifstream in(path);
    if (!in) throw DataError("missing ground-truth manifest '" + path.string() + "'");
    nlohmann::json man;
    try {
        man = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed ground-truth manifest '" + path.string() + "': " + e.what());
    }
    try {
        const std::size_t K = man.at("K"), M = man.at("M"), J = man.at("J"), dl = man.at("d_l"), dh = man.at("d_h");
        const auto& a = man.at("arrays");
        auto fill = [&](RowArray& dst, const char* name, std::size_t rows, std::size_t cols) {
            const std::vector<double> v = read_block(dir, a.at(name), rows, cols);
            dst = Eigen::Map<const RowArray>(v.data(), rows, cols);
        };
        auto fill_vec = [&](Eigen::ArrayXd& dst, const char* name, std::size_t n) {
            const std::vector<double> v = read_block(dir, a.at(name), n, 1);
            dst = Eigen::Map<const Eigen::ArrayXd>(v.data(), n);
        };
        GroundTruth t;
        fill(t.phi, "phi", K, M);
        fill_vec(t.r, "r", K);
        fill_vec(t.pi, "pi", K);
        fill_vec(t.p, "p", J);
        fill(t.b, "b", J, K);
        fill(t.theta, "theta", J, K);
        fill(t.f, "f", J, K);
        fill(t.l, "l", K, dl);
        fill(t.h, "h", J, dh);
        t.gamma0 = man.at("gamma0");
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("inconsistent ground-truth manifest '" + path.string() + "': " + e.what());
    }
}

}  // namespace cozinb
