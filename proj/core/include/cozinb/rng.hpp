#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cozinb {

/// Seeded random stream. The engine is std::mt19937_64, whose output
/// sequence is fixed by the standard; all distributions on top of it are
/// implemented here so draws are identical on every platform.
///
/// Streams split deterministically: `split(i)` derives an independent child
/// stream from the parent's seed and the index alone, so a child does not
/// depend on how many draws the parent has made.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t seed() const { return seed_; }
    Rng split(std::uint64_t stream) const;

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    /// Uniform on (0, 1).
    double uniform_open();
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    double normal();

    /// Engine state as text (the standard's stream format), for checkpoints.
    std::string state() const;
    void restore(const std::string& state);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

// Samplers. Each throws DomainError on invalid parameters.

double gamma_draw(Rng& rng, double shape, double scale);
double beta_draw(Rng& rng, double alpha, double beta);
std::vector<double> dirichlet_draw(Rng& rng, std::span<const double> alpha);
std::uint64_t poisson_draw(Rng& rng, double mean);
bool bernoulli_draw(Rng& rng, double p);
/// Index drawn proportional to nonnegative, not necessarily normalised weights.
std::size_t categorical_draw(Rng& rng, std::span<const double> weights);

/// Fisher-Yates shuffle driven by `rng`.
template <typename T>
void shuffle(Rng& rng, std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace cozinb
