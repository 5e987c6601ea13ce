#include "cozinb/distributions.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "cozinb/error.hpp"
#include "cozinb/special.hpp"

namespace cozinb {

namespace {

bool positive_finite(double x) { return x > 0.0 && std::isfinite(x); }

}  // namespace

GammaParams::GammaParams(double shape_, double scale_) : shape(shape_), scale(scale_) {
    if (!positive_finite(shape) || !positive_finite(scale)) {
        throw DomainError("GammaParams: shape and scale must be positive and finite");
    }
}

BetaParams::BetaParams(double alpha_, double beta_) : alpha(alpha_), beta(beta_) {
    if (!positive_finite(alpha) || !positive_finite(beta)) {
        throw DomainError("BetaParams: alpha and beta must be positive and finite");
    }
}

double nb_log_pmf(std::uint64_t n, double r, double p) {
    if (!positive_finite(r)) throw DomainError("nb_log_pmf: r must be positive");
    if (!(p > 0.0 && p < 1.0)) throw DomainError("nb_log_pmf: p must lie in (0, 1)");
    const double nd = static_cast<double>(n);
    double out = r * std::log1p(-p);
    if (n > 0) {
        out += special::lgamma(nd + r) - special::lgamma(r) - special::lgamma(nd + 1.0) + nd * std::log(p);
    }
    return out;
}

double poisson_log_pmf(std::uint64_t n, double mean) {
    if (!(mean >= 0.0) || !std::isfinite(mean)) throw DomainError("poisson_log_pmf: mean must be >= 0");
    if (mean == 0.0) return n == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
    const double nd = static_cast<double>(n);
    return nd * std::log(mean) - mean - special::lgamma(nd + 1.0);
}

std::uint64_t crt_sample(std::uint64_t n, double a, Rng& rng) {
    if (!positive_finite(a)) throw DomainError("crt_sample: a must be positive");
    std::uint64_t tables = 0;
    for (std::uint64_t i = 1; i <= n; ++i) {
        if (rng.uniform() < a / (a + static_cast<double>(i) - 1.0)) ++tables;
    }
    return tables;
}

double crt_mean(std::uint64_t n, double a) {
    if (!positive_finite(a)) throw DomainError("crt_mean: a must be positive");
    if (n == 0) return 0.0;
    const double nd = static_cast<double>(n);
    if (nd <= 64.0) {
        // Exact finite sum; avoids cancellation in psi(a + n) - psi(a) for large a.
        double s = 0.0;
        for (std::uint64_t i = 0; i < n; ++i) s += a / (a + static_cast<double>(i));
        return s;
    }
    return a * (special::digamma(a + nd) - special::digamma(a));
}

double e_log_gamma(const GammaParams& g) { return special::digamma(g.shape) + std::log(g.scale); }

std::pair<double, double> e_log_beta_sides(const BetaParams& b) {
    const double total = special::digamma(b.alpha + b.beta);
    return {special::digamma(b.alpha) - total, special::digamma(b.beta) - total};
}

std::vector<double> e_log_dirichlet(std::span<const double> alpha) {
    if (alpha.empty()) throw DomainError("e_log_dirichlet: empty parameter vector");
    double sum = 0.0;
    for (double a : alpha) {
        if (!positive_finite(a)) throw DomainError("e_log_dirichlet: parameters must be positive");
        sum += a;
    }
    const double psi_sum = special::digamma(sum);
    std::vector<double> out(alpha.size());
    for (std::size_t i = 0; i < alpha.size(); ++i) out[i] = special::digamma(alpha[i]) - psi_sum;
    return out;
}

double entropy_gamma(const GammaParams& g) {
    return g.shape + std::log(g.scale) + special::lgamma(g.shape) + (1.0 - g.shape) * special::digamma(g.shape);
}

double entropy_beta(const BetaParams& b) {
    const double s = b.alpha + b.beta;
    return special::lbeta(b.alpha, b.beta) - (b.alpha - 1.0) * special::digamma(b.alpha) -
           (b.beta - 1.0) * special::digamma(b.beta) + (s - 2.0) * special::digamma(s);
}

double entropy_dirichlet(std::span<const double> alpha) {
    double sum = 0.0;
    double log_norm = 0.0;
    for (double a : alpha) {
        if (!positive_finite(a)) throw DomainError("entropy_dirichlet: parameters must be positive");
        sum += a;
        log_norm += special::lgamma(a);
    }
    log_norm -= special::lgamma(sum);
    const double k = static_cast<double>(alpha.size());
    double out = log_norm + (sum - k) * special::digamma(sum);
    for (double a : alpha) out -= (a - 1.0) * special::digamma(a);
    return out;
}

double entropy_bernoulli(double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("entropy_bernoulli: p must lie in [0, 1]");
    double h = 0.0;
    if (p > 0.0) h -= p * std::log(p);
    if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
    return h;
}

}  // namespace cozinb
