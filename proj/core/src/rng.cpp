#include "cozinb/rng.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "cozinb/error.hpp"
#include "cozinb/special.hpp"

namespace cozinb {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

Rng Rng::split(std::uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::uniform_open() {
    for (;;) {
        double u = uniform();
        if (u > 0.0) return u;
    }
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw DomainError("Rng::below: n must be positive");
    // Rejection on the top range keeps the draw exactly uniform.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    for (;;) {
        std::uint64_t v = engine_();
        if (v < limit) return v % n;
    }
}

double Rng::normal() {
    // Marsaglia polar method; the spare value is discarded so the state
    // stays a pure function of the engine.
    for (;;) {
        double u = 2.0 * uniform() - 1.0;
        double v = 2.0 * uniform() - 1.0;
        double s = u * u + v * v;
        if (s > 0.0 && s < 1.0) return u * std::sqrt(-2.0 * std::log(s) / s);
    }
}

std::string Rng::state() const {
    std::ostringstream os;
    os << seed_ << ' ' << engine_;
    return os.str();
}

void Rng::restore(const std::string& state) {
    std::istringstream is(state);
    is >> seed_ >> engine_;
    if (!is) throw DataError("Rng::restore: malformed state");
}

double gamma_draw(Rng& rng, double shape, double scale) {
    if (!(shape > 0.0) || !(scale > 0.0) || !std::isfinite(shape) || !std::isfinite(scale)) {
        throw DomainError("gamma_draw: shape and scale must be positive and finite");
    }
    if (shape < 1.0) {
        // Boost: Gamma(a) = Gamma(a + 1) * U^(1/a), done in log space for tiny a.
        double g = gamma_draw(rng, shape + 1.0, 1.0);
        double log_u = std::log(rng.uniform_open()) / shape;
        return scale * g * std::exp(log_u);
    }
    // Marsaglia-Tsang.
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = rng.normal();
        double v = 1.0 + c * x;
        if (v <= 0.0) continue;
        v = v * v * v;
        double u = rng.uniform_open();
        if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return scale * d * v;
    }
}

double beta_draw(Rng& rng, double alpha, double beta) {
    if (!(alpha > 0.0) || !(beta > 0.0)) throw DomainError("beta_draw: parameters must be positive");
    double x = gamma_draw(rng, alpha, 1.0);
    double y = gamma_draw(rng, beta, 1.0);
    double s = x + y;
    if (s == 0.0) {
        // Both underflowed (tiny shapes): choose a side with the mean as weight.
        return rng.uniform() < alpha / (alpha + beta) ? 1.0 : 0.0;
    }
    return x / s;
}

std::vector<double> dirichlet_draw(Rng& rng, std::span<const double> alpha) {
    if (alpha.empty()) throw DomainError("dirichlet_draw: empty parameter vector");
    std::vector<double> out(alpha.size());
    double total = 0.0;
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        out[i] = gamma_draw(rng, alpha[i], 1.0);
        total += out[i];
    }
    if (total == 0.0) {
        // All draws underflowed: put the mass on one coordinate drawn by alpha.
        std::size_t k = categorical_draw(rng, alpha);
        std::fill(out.begin(), out.end(), 0.0);
        out[k] = 1.0;
        return out;
    }
    for (double& v : out) v /= total;
    return out;
}

std::uint64_t poisson_draw(Rng& rng, double mean) {
    if (!(mean >= 0.0) || !std::isfinite(mean)) throw DomainError("poisson_draw: mean must be finite and >= 0");
    if (mean == 0.0) return 0;
    if (mean < 30.0) {
        // Inversion by sequential search.
        double u = rng.uniform();
        double p = std::exp(-mean);
        double cdf = p;
        std::uint64_t k = 0;
        while (u > cdf) {
            ++k;
            p *= mean / static_cast<double>(k);
            cdf += p;
            if (p < 1e-300 && cdf >= 1.0 - 1e-15) break;
        }
        return k;
    }
    // PTRS transformed rejection (Hormann 1993).
    const double slam = std::sqrt(mean);
    const double loglam = std::log(mean);
    const double b = 0.931 + 2.53 * slam;
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double vr = 0.9277 - 3.6224 / (b - 2.0);
    for (;;) {
        double u = rng.uniform() - 0.5;
        double v = rng.uniform_open();
        double us = 0.5 - std::fabs(u);
        double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
        if (us >= 0.07 && v <= vr) return static_cast<std::uint64_t>(k);
        if (k < 0.0 || (us < 0.013 && v > us)) continue;
        double lhs = std::log(v * inv_alpha / (a / (us * us) + b));
        double rhs = -mean + k * loglam - special::lgamma(k + 1.0);
        if (lhs <= rhs) return static_cast<std::uint64_t>(k);
    }
}

bool bernoulli_draw(Rng& rng, double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("bernoulli_draw: p must lie in [0, 1]");
    return rng.uniform() < p;
}

std::size_t categorical_draw(Rng& rng, std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw DomainError("categorical_draw: weights must be finite and >= 0");
        total += w;
    }
    if (!(total > 0.0)) throw DomainError("categorical_draw: weights sum to zero");
    double u = rng.uniform() * total;
    double cdf = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        cdf += weights[i];
        if (u < cdf) return i;
    }
    // Rounding fell off the end: return the last positive weight.
    for (std::size_t i = weights.size(); i-- > 0;) {
        if (weights[i] > 0.0) return i;
    }
    return 0;
}

}  // namespace cozinb
