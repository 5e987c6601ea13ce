#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cozinb/data.hpp"
#include "cozinb/inference.hpp"

namespace cozinb {

/// p(feature m | sample j) for target scoring.
using PredictiveFn = std::function<double(std::size_t j, std::uint32_t m)>;

/// exp(-(1/|target tokens|) sum ln p). Throws DataError when the target is
/// empty. `per_sample` (optional) receives each sample's summed log-likelihood.
double perplexity(const CountMatrix& target, const PredictiveFn& predictive,
                  std::vector<double>* per_sample = nullptr);

/// Predictive p(m | j) = sum_k E[lambda_jk] E[phi_km] / sum_k E[lambda_jk].
PredictiveFn model_predictive(const std::vector<LocalState>& locals, const GlobalExpectations& e);

/// Infers locals on `observed` with globals frozen, then scores `target`.
double heldout_perplexity(const CountMatrix& observed, const CountMatrix& target, const GlobalState& g,
                          const HyperParams& hp, const InferenceOptions& opts, const LocalSettings& settings,
                          std::vector<double>* per_sample = nullptr);

/// One held-out distinct feature per sample.
struct PrecisionTargets {
    CountMatrix observed;               // rows with the target feature removed
    std::vector<std::size_t> sample;    // row of `observed` for each target
    std::vector<std::uint32_t> feature;
    std::vector<std::uint32_t> count;
    std::vector<std::uint64_t> tml;     // original row total
};

/// Picks one distinct feature uniformly per non-empty sample.
PrecisionTargets designate_targets(const CountMatrix& counts, Rng& rng);

/// Predicted mean count of feature m in sample j.
using CountPredictor = std::function<double(std::size_t j, std::uint32_t m)>;

struct PrecisionBin {
    std::uint64_t tml_lo = 0;  // inclusive
    std::uint64_t tml_hi = 0;  // exclusive
    std::size_t n = 0;
    double precision = 0.0;
};

struct PrecisionResult {
    double precision_at_1 = 0.0;
    std::vector<bool> hit;
    /// Power-of-two TML bins [2^b, 2^(b+1)); empty bins omitted.
    std::vector<PrecisionBin> curve;
};

/// Exact-match rate of round(predicted mean) against the held-out count.
/// Throws DataError when there are no targets.
PrecisionResult precision_at_1(const PrecisionTargets& targets, const CountPredictor& predictor);

/// E[count_m | j] = sum_k E[lambda_jk] E[phi_km].
CountPredictor model_count_predictor(const std::vector<LocalState>& locals, const GlobalExpectations& e);

struct FactorSummary {
    int id = 0;
    std::vector<std::pair<std::uint32_t, double>> top;  // (feature, E[phi]) descending
    double usage = 0.0;  // sum_j nu_jk
    double mass = 0.0;   // sum_j E[lambda_jk]
};

struct TmlRow {
    std::size_t sample = 0;
    std::uint64_t tml = 0;
    std::vector<int> active;  // factors with nu > 0.5
};

struct FactorReport {
    std::vector<FactorSummary> factors;
    bool has_labels = false;
    std::vector<std::string> labels;              // distinct labels, sorted
    std::vector<std::vector<std::size_t>> occurrence;  // label x K, count of nu > 0.5
    std::vector<TmlRow> tml_table;
};

/// Throws DomainError when T exceeds the vocabulary size.
FactorReport factor_report(const GlobalState& g, const std::vector<LocalState>& locals, const CountMatrix& counts,
                           std::size_t T);

struct Recovery {
    double mean_cosine = 0.0;
    /// assignment[i] = row of the second argument matched to row i of the
    /// first, or -1 when the first has more rows.
    std::vector<int> assignment;
};

/// Optimal one-to-one matching of rows maximising summed cosine similarity.
Recovery recovery_score(const RowArray& a, const RowArray& b);
/// Minimum-cost assignment of rows to columns (rows <= cols).
std::vector<int> hungarian(const Eigen::MatrixXd& cost);

/// Mean of the factor loading rows: eta_k / sum eta_k.
RowArray mean_phi(const GlobalState& g);

/// Tables for external plotting.
void write_factor_tsv(const FactorReport& r, const Vocab& vocab, const std::filesystem::path& path);
void write_factor_json(const FactorReport& r, const Vocab& vocab, const std::filesystem::path& path);
void write_label_tsv(const FactorReport& r, const std::filesystem::path& path);
void write_tml_tsv(const FactorReport& r, const CountMatrix& counts, const std::filesystem::path& path);
void write_precision_curve_tsv(const PrecisionResult& r, const std::filesystem::path& path);

/// Per-sample factor features (E[lambda_jk] and nu_jk) for downstream tools.
void write_sample_features_tsv(const std::vector<LocalState>& locals, const CountMatrix& counts,
                               const std::filesystem::path& path);

}  // namespace cozinb
