#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "cozinb/data.hpp"
#include "cozinb/model.hpp"

namespace cozinb {

/// Block-structured factors: factor k puts its mass on the k-th contiguous
/// block of M / K* features, with `background` mass spread elsewhere before
/// renormalising.
struct PlantedConfig {
    int K_star = 5;
    double target_mean_tml = 40.0;
    double background = 1e-3;
    double pi = 0.4;  // usage probability of every planted factor
    double r = 2.0;   // shape of every planted factor
};

/// Replaces the decoder with f_jk = scale * <h_j, l_k> (d_h must equal d_l).
/// `locations` (K x d_l), when non-empty, replaces the prior draw of l.
struct KernelOverride {
    double scale = 1.0;
    Matrix locations;
};

enum class SelectorMode { Sample, AllOn, AllOff };

struct SynthConfig {
    HyperParams hp;
    int J = 100;
    int M = 50;
    std::uint64_t seed = 0;
    std::optional<PlantedConfig> planted;
    std::optional<KernelOverride> kernel_override;
    /// false draws no kernel at all (f = 0).
    bool use_kernel = true;
    SelectorMode selectors = SelectorMode::Sample;
    std::optional<double> fixed_r;
    std::optional<double> fixed_p;
    std::optional<double> fixed_gamma0;

    void validate() const;
};

struct GroundTruth {
    RowArray phi;      // K x M
    Eigen::ArrayXd r;  // K
    Eigen::ArrayXd pi;  // K
    Eigen::ArrayXd p;   // J
    RowArray b;        // J x K, entries 0 or 1
    RowArray theta;    // J x K
    RowArray f;        // J x K kernel values
    RowArray l;        // K x d_l
    RowArray h;        // J x d_h
    double gamma0 = 0.0;

    int K() const { return static_cast<int>(phi.rows()); }
    int J() const { return static_cast<int>(b.rows()); }
};

struct SyntheticCorpus {
    Corpus corpus;
    GroundTruth truth;
};

/// Ancestral sampling of the full generative process; deterministic per seed.
/// Sample j draws from its own split stream, so samples are independent of
/// each other's draw counts.
SyntheticCorpus sample_corpus(const SynthConfig& cfg);

/// sigmoid(logit(pi) + f), in log space. Throws DomainError unless 0 < pi < 1.
double sigma_inv_shift(double pi, double f);

/// Row drawn from Poisson(E[lambda_jk]) factor counts and features from E[phi_k].
SparseRow posterior_predictive(const GlobalState& g, const std::vector<LocalState>& locals, std::size_t j, Rng& rng);

/// JSON manifest (truth.json) plus one little-endian float64 file per array.
void save_ground_truth(const GroundTruth& t, const std::filesystem::path& dir);
GroundTruth load_ground_truth(const std::filesystem::path& dir);

}  // namespace cozinb
