#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cozinb/rng.hpp"

namespace cozinb {

/// Gamma in (shape, scale) form everywhere in this library.
struct GammaParams {
    double shape;
    double scale;

    GammaParams(double shape, double scale);
    double mean() const { return shape * scale; }
};

struct BetaParams {
    double alpha;
    double beta;

    BetaParams(double alpha, double beta);
    double mean() const { return alpha / (alpha + beta); }
};

/// ln NB(n; r, p) with P(n) = Gamma(n+r) / (n! Gamma(r)) p^n (1-p)^r.
double nb_log_pmf(std::uint64_t n, double r, double p);

/// ln Poisson(n; mean). mean == 0 gives 0 for n == 0 and -inf otherwise.
double poisson_log_pmf(std::uint64_t n, double mean);

/// Chinese restaurant table count: sum of Bernoulli(a / (a + i - 1)), i = 1..n.
std::uint64_t crt_sample(std::uint64_t n, double a, Rng& rng);

/// E[CRT(n, a)] = a (psi(a + n) - psi(a)); zero when n == 0.
double crt_mean(std::uint64_t n, double a);

/// E[ln x] under Gamma(shape, scale).
double e_log_gamma(const GammaParams& g);
/// (E[ln p], E[ln(1 - p)]) under Beta(alpha, beta).
std::pair<double, double> e_log_beta_sides(const BetaParams& b);
/// E[ln phi_m] under Dirichlet(alpha).
std::vector<double> e_log_dirichlet(std::span<const double> alpha);

// Entropies, used by the objective.
double entropy_gamma(const GammaParams& g);
double entropy_beta(const BetaParams& b);
double entropy_dirichlet(std::span<const double> alpha);
double entropy_bernoulli(double p);

}  // namespace cozinb
