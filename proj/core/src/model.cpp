#include "cozinb/model.hpp"

#include <cmath>
#include <string>

#include "cozinb/error.hpp"
#include "cozinb/special.hpp"

namespace cozinb {

namespace {

void require_positive(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive and finite");
}

void require_all(const Eigen::ArrayXd& v, bool positive, const char* name) {
    if (!v.allFinite()) throw NumericalError(std::string("non-finite entry in ") + name);
    if (positive && (v <= 0.0).any()) throw NumericalError(std::string("non-positive entry in ") + name);
}

}  // namespace

void HyperParams::validate() const {
    require_positive(a, "a");
    require_positive(b, "b");
    require_positive(alpha, "alpha");
    require_positive(eta0, "eta0");
    require_positive(a0, "a0");
    require_positive(b0, "b0");
    require_positive(e0, "e0");
    require_positive(f0, "f0");
    if (K < 1) throw ConfigError("K must be at least 1");
    if (d_h < 1 || d_l < 1) throw ConfigError("d_h and d_l must be at least 1");
    for (int w : encoder_hidden)
        if (w < 1) throw ConfigError("encoder widths must be positive");
    for (int w : decoder_hidden)
        if (w < 1) throw ConfigError("decoder widths must be positive");
}

void Schedule::validate() const {
    if (batch_size < 0) throw ConfigError("batch_size must be >= 0");
    if (!(tau0 >= 0.0)) throw ConfigError("tau0 must be >= 0");
    if (!(kappa > 0.5 && kappa <= 1.0)) throw ConfigError("kappa must lie in (0.5, 1]");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (!(tolerance >= 0.0)) throw ConfigError("tolerance must be >= 0");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    require_positive(learning_rate, "learning_rate");
    if (local_iters < 1) throw ConfigError("local_iters must be >= 1");
    if (!(local_tol >= 0.0)) throw ConfigError("local_tol must be >= 0");
}

double Schedule::rho(std::uint64_t t) const {
    const double r = std::pow(static_cast<double>(t) + tau0, -kappa);
    return r > 1.0 ? 1.0 : r;
}

GlobalState init_global(const HyperParams& hp, int M, std::uint64_t seed, double learning_rate) {
    hp.validate();
    if (M < 1) throw DataError("cannot initialise a model with zero features");
    Rng root(seed);
    GlobalState g;
    g.K = hp.K;
    g.M = M;
    {
        Rng rng = root.split(1);
        g.eta.resize(hp.K, M);
        for (int k = 0; k < hp.K; ++k)
            for (int m = 0; m < M; ++m) g.eta(k, m) = hp.eta0 + 0.1 * rng.uniform();
    }
    g.tau1 = Eigen::ArrayXd::Constant(hp.K, hp.alpha / hp.K);
    g.tau2 = Eigen::ArrayXd::Constant(hp.K, hp.alpha * (1.0 - 1.0 / hp.K));
    if (hp.K == 1) g.tau2.setConstant(hp.alpha);  // Beta(alpha, 0) is improper
    g.r_shape = Eigen::ArrayXd::Ones(hp.K);
    g.r_scale = Eigen::ArrayXd::Ones(hp.K);
    g.gamma0 = 1.0;
    {
        Rng rng = root.split(2);
        g.l.resize(hp.K, hp.d_l);
        const double sd = std::sqrt(hp.b);
        for (int k = 0; k < hp.K; ++k)
            for (int d = 0; d < hp.d_l; ++d) g.l(k, d) = sd * rng.normal();
    }
    {
        Rng rng = root.split(3);
        g.encoder = MlpWeights::init(MlpSpec::make(M, hp.encoder_hidden, hp.d_h, hp.activation), rng);
    }
    {
        Rng rng = root.split(4);
        g.decoder = MlpWeights::init(MlpSpec::make(hp.d_h + hp.d_l, hp.decoder_hidden, 2, hp.activation), rng);
    }
    AdamConfig ac;
    ac.lr = learning_rate;
    g.adam_encoder = AdamState::for_weights(g.encoder, ac);
    g.adam_decoder = AdamState::for_weights(g.decoder, ac);
    g.adam_l = AdamVector(static_cast<Eigen::Index>(hp.K) * hp.d_l, ac);
    g.adam_log_gamma0 = AdamVector(1, ac);
    g.anchor_logit.resize(hp.K);
    for (int k = 0; k < hp.K; ++k) g.anchor_logit[k] = special::digamma(g.tau1[k]) - special::digamma(g.tau2[k]);
    return g;
}

void GlobalState::validate() const {
    if (eta.rows() != K || eta.cols() != M) throw ShapeError("GlobalState: eta shape mismatch");
    if (!eta.allFinite() || (eta <= 0.0).any()) throw NumericalError("GlobalState: eta must be positive and finite");
    require_all(tau1, true, "tau1");
    require_all(tau2, true, "tau2");
    require_all(r_shape, true, "r_shape");
    require_all(r_scale, true, "r_scale");
    require_all(anchor_logit, false, "anchor_logit");
    if (!(gamma0 > 0.0) || !std::isfinite(gamma0)) throw NumericalError("GlobalState: gamma0 must be positive");
    if (l.rows() != K || !l.allFinite()) throw NumericalError("GlobalState: locations invalid");
    encoder.validate();
    decoder.validate();
}

GlobalExpectations GlobalExpectations::compute(const GlobalState& g) {
    GlobalExpectations e;
    e.elog_phi.resize(g.M, g.K);
    e.mean_phi.resize(g.M, g.K);
    for (int k = 0; k < g.K; ++k) {
        const double total = g.eta.row(k).sum();
        const double dig_total = special::digamma(total);
        for (int m = 0; m < g.M; ++m) {
            e.elog_phi(m, k) = special::digamma(g.eta(k, m)) - dig_total;
            e.mean_phi(m, k) = g.eta(k, m) / total;
        }
    }
    e.er = g.r_shape * g.r_scale;
    e.elnr.resize(g.K);
    e.elogit_pi.resize(g.K);
    e.eln_pi.resize(g.K);
    e.eln1m_pi.resize(g.K);
    for (int k = 0; k < g.K; ++k) {
        e.elnr[k] = special::digamma(g.r_shape[k]) + std::log(g.r_scale[k]);
        const double d1 = special::digamma(g.tau1[k]);
        const double d2 = special::digamma(g.tau2[k]);
        const double d12 = special::digamma(g.tau1[k] + g.tau2[k]);
        e.elogit_pi[k] = d1 - d2;
        e.eln_pi[k] = d1 - d12;
        e.eln1m_pi[k] = d2 - d12;
    }
    return e;
}

Eigen::ArrayXd LocalState::expected_counts(const SparseRow& row) const {
    Eigen::ArrayXd n = Eigen::ArrayXd::Zero(theta1.size());
    for (std::size_t i = 0; i < row.size(); ++i) n += row[i].count * psi.row(static_cast<Eigen::Index>(i)).transpose();
    return n;
}

void LocalState::validate(const SparseRow& row) const {
    if (static_cast<std::size_t>(psi.rows()) != row.size()) throw ShapeError("LocalState: psi rows != distinct features");
    for (Eigen::Index i = 0; i < psi.rows(); ++i) {
        if (std::abs(psi.row(i).sum() - 1.0) > 1e-10 || (psi.row(i) < 0.0).any()) {
            throw NumericalError("LocalState: psi row " + std::to_string(i) + " is not a distribution");
        }
    }
    require_all(theta1, true, "theta1");
    require_all(theta2, true, "theta2");
    if (!nu.allFinite() || (nu < 0.0).any() || (nu > 1.0).any()) throw NumericalError("LocalState: nu outside [0, 1]");
    if (!(a_tilde > 0.0) || !(b_tilde > 0.0)) throw NumericalError("LocalState: Beta parameters must be positive");
    require_all(L_tilde, false, "L_tilde");
    if ((L_tilde < 0.0).any()) throw NumericalError("LocalState: L_tilde negative");
}

}  // namespace cozinb
