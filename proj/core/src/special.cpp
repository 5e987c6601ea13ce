#include "cozinb/special.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "cozinb/error.hpp"

namespace cozinb::special {

namespace {

void require_positive(double x, const char* fn) {
    if (!(x > 0.0) || !std::isfinite(x)) {
        throw DomainError(std::string(fn) + ": argument must be positive and finite, got " +
                          std::to_string(x));
    }
}

constexpr double kAsymptoticFrom = 10.0;

}  // namespace

double digamma(double x) {
    require_positive(x, "digamma");
    double acc = 0.0;
    while (x < kAsymptoticFrom) {
        acc -= 1.0 / x;
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    // Bernoulli-number series: B_2n / (2n x^2n)
    double series = inv2 * (1.0 / 12.0 -
                    inv2 * (1.0 / 120.0 -
                    inv2 * (1.0 / 252.0 -
                    inv2 * (1.0 / 240.0 -
                    inv2 * (1.0 / 132.0 -
                    inv2 * (691.0 / 32760.0 -
                    inv2 * (1.0 / 12.0)))))));
    return acc + std::log(x) - 0.5 * inv - series;
}

double trigamma(double x) {
    require_positive(x, "trigamma");
    double acc = 0.0;
    while (x < kAsymptoticFrom) {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    double series = inv * (1.0 + inv * (0.5 +
                    inv * (1.0 / 6.0 -
                    inv2 * (1.0 / 30.0 -
                    inv2 * (1.0 / 42.0 -
                    inv2 * (1.0 / 30.0 -
                    inv2 * (5.0 / 66.0)))))));
    return acc + series;
}

double lgamma(double x) {
    require_positive(x, "lgamma");
    double prod = 1.0;
    while (x < 12.0) {
        prod *= x;
        x += 1.0;
    }
    const double shift = std::log(prod);
    const double inv = 1.0 / x;
    const double inv2 = inv * inv;
    const double series = inv * (1.0 / 12.0 -
                          inv2 * (1.0 / 360.0 -
                          inv2 * (1.0 / 1260.0 -
                          inv2 * (1.0 / 1680.0 -
                          inv2 * (1.0 / 1188.0 -
                          inv2 * (691.0 / 360360.0))))));
    const double half_log_two_pi = 0.5 * std::log(2.0 * std::numbers::pi);
    return (x - 0.5) * std::log(x) - x + half_log_two_pi + series - shift;
}

double lbeta(double a, double b) { return lgamma(a) + lgamma(b) - lgamma(a + b); }

double softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace cozinb::special
