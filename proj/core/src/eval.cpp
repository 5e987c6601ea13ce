#include "cozinb/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cozinb/error.hpp"

namespace cozinb {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    out.precision(17);
    return out;
}

}  // namespace

double perplexity(const CountMatrix& target, const PredictiveFn& predictive, std::vector<double>* per_sample) {
    const std::uint64_t tokens = target.total_tokens();
    if (tokens == 0) throw DataError("held-out target set is empty; perplexity is undefined");
    if (per_sample) per_sample->assign(target.rows(), 0.0);
    double total = 0.0;
    for (std::size_t j = 0; j < target.rows(); ++j) {
        double ll = 0.0;
        for (const Entry& en : target.row(j)) {
            const double p = predictive(j, en.col);
            if (!(p > 0.0)) return std::numeric_limits<double>::infinity();
            ll += en.count * std::log(p);
        }
        if (per_sample) (*per_sample)[j] = ll;
        total += ll;
    }
    return std::exp(-total / static_cast<double>(tokens));
}

PredictiveFn model_predictive(const std::vector<LocalState>& locals, const GlobalExpectations& e) {
    std::vector<Eigen::ArrayXd> weights;
    weights.reserve(locals.size());
    for (const LocalState& s : locals) {
        Eigen::ArrayXd w = s.rate_mean();
        weights.push_back(w / w.sum());
    }
    return [weights = std::move(weights), phi = e.mean_phi](std::size_t j, std::uint32_t m) {
        return (weights.at(j) * phi.row(m).transpose()).sum();
    };
}

double heldout_perplexity(const CountMatrix& observed, const CountMatrix& target, const GlobalState& g,
                          const HyperParams& hp, const InferenceOptions& opts, const LocalSettings& settings,
                          std::vector<double>* per_sample) {
    if (observed.rows() != target.rows()) throw ShapeError("observed and target parts have different sample counts");
    if (target.total_tokens() == 0) throw DataError("held-out target set is empty; perplexity is undefined");
    const std::vector<LocalState> locals = infer_locals(observed, g, hp, opts, settings);
    const GlobalExpectations e = GlobalExpectations::compute(g);
    return perplexity(target, model_predictive(locals, e), per_sample);
}

PrecisionTargets designate_targets(const CountMatrix& counts, Rng& rng) {
    PrecisionTargets t;
    std::vector<SparseRow> rows = counts.all_rows();
    for (std::size_t j = 0; j < rows.size(); ++j) {
        if (rows[j].empty()) continue;
        const std::size_t pick = static_cast<std::size_t>(rng.below(rows[j].size()));
        t.sample.push_back(j);
        t.feature.push_back(rows[j][pick].col);
        t.count.push_back(rows[j][pick].count);
        t.tml.push_back(counts.total(j));
        rows[j].erase(rows[j].begin() + static_cast<std::ptrdiff_t>(pick));
    }
    t.observed = CountMatrix(counts.cols(), std::move(rows), counts.sample_ids(), counts.labels());
    return t;
}

PrecisionResult precision_at_1(const PrecisionTargets& t, const CountPredictor& predictor) {
    if (t.sample.empty()) throw DataError("no designated Precision@1 targets");
    PrecisionResult r;
    std::map<int, std::pair<std::size_t, std::size_t>> bins;  // bin -> (n, hits)
    std::size_t hits = 0;
    for (std::size_t i = 0; i < t.sample.size(); ++i) {
        const double mean = predictor(t.sample[i], t.feature[i]);
        const bool hit = std::isfinite(mean) && std::llround(mean) == static_cast<long long>(t.count[i]);
        r.hit.push_back(hit);
        hits += hit;
        const std::uint64_t tml = i < t.tml.size() ? t.tml[i] : 1;
        const int b = tml == 0 ? 0 : static_cast<int>(std::floor(std::log2(static_cast<double>(tml))));
        auto& slot = bins[b];
        ++slot.first;
        slot.second += hit;
    }
    r.precision_at_1 = static_cast<double>(hits) / static_cast<double>(t.sample.size());
    for (const auto& [b, nh] : bins) {
        PrecisionBin pb;
        pb.tml_lo = std::uint64_t{1} << b;
        pb.tml_hi = std::uint64_t{1} << (b + 1);
        pb.n = nh.first;
        pb.precision = static_cast<double>(nh.second) / static_cast<double>(nh.first);
        r.curve.push_back(pb);
    }
    return r;
}

CountPredictor model_count_predictor(const std::vector<LocalState>& locals, const GlobalExpectations& e) {
    std::vector<Eigen::ArrayXd> rates;
    rates.reserve(locals.size());
    for (const LocalState& s : locals) rates.push_back(s.rate_mean());
    return [rates = std::move(rates), phi = e.mean_phi](std::size_t j, std::uint32_t m) {
        return (rates.at(j) * phi.row(m).transpose()).sum();
    };
}

RowArray mean_phi(const GlobalState& g) {
    RowArray phi = g.eta;
    for (Eigen::Index k = 0; k < phi.rows(); ++k) phi.row(k) /= phi.row(k).sum();
    return phi;
}

FactorReport factor_report(const GlobalState& g, const std::vector<LocalState>& locals, const CountMatrix& counts,
                           std::size_t T) {
    if (T > static_cast<std::size_t>(g.M)) {
        throw DomainError("top count " + std::to_string(T) + " exceeds vocabulary size " + std::to_string(g.M));
    }
    if (locals.size() != counts.rows()) throw ShapeError("factor_report: one local state per sample required");
    const RowArray phi = mean_phi(g);
    FactorReport r;
    r.factors.resize(g.K);
    std::vector<std::uint32_t> idx(g.M);
    for (int k = 0; k < g.K; ++k) {
        FactorSummary& f = r.factors[k];
        f.id = k;
        std::iota(idx.begin(), idx.end(), 0u);
        std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t x, std::uint32_t y) { return phi(k, x) > phi(k, y); });
        for (std::size_t t = 0; t < T; ++t) f.top.emplace_back(idx[t], phi(k, idx[t]));
    }
    for (const LocalState& s : locals) {
        const Eigen::ArrayXd rate = s.rate_mean();
        for (int k = 0; k < g.K; ++k) {
            r.factors[k].usage += s.nu[k];
            r.factors[k].mass += rate[k];
        }
    }
    r.has_labels = counts.has_labels();
    std::map<std::string, std::size_t> label_index;
    if (r.has_labels) {
        for (const std::string& lab : counts.labels()) label_index.emplace(lab, 0);
        for (auto& [lab, i] : label_index) {
            i = r.labels.size();
            r.labels.push_back(lab);
        }
        r.occurrence.assign(r.labels.size(), std::vector<std::size_t>(g.K, 0));
    }
    for (std::size_t j = 0; j < locals.size(); ++j) {
        TmlRow row;
        row.sample = j;
        row.tml = counts.total(j);
        for (int k = 0; k < g.K; ++k) {
            if (locals[j].nu[k] > 0.5) {
                row.active.push_back(k);
                if (r.has_labels) ++r.occurrence[label_index.at(counts.labels()[j])][k];
            }
        }
        r.tml_table.push_back(std::move(row));
    }
    return r;
}

std::vector<int> hungarian(const Eigen::MatrixXd& cost) {
    const int n = static_cast<int>(cost.rows());
    const int m = static_cast<int>(cost.cols());
    if (n > m) throw ShapeError("hungarian: more rows than columns");
    const double inf = std::numeric_limits<double>::infinity();
    // Potentials u (rows), v (columns); p[j] = row matched to column j (1-based).
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> assign(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] != 0) assign[p[j] - 1] = j - 1;
    return assign;
}

Recovery recovery_score(const RowArray& a, const RowArray& b) {
    if (a.cols() != b.cols()) throw ShapeError("recovery_score: factor rows have different lengths");
    if (a.rows() == 0 || b.rows() == 0) throw ShapeError("recovery_score: no factors to match");
    Eigen::MatrixXd cos(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.rows(); ++j) {
            const double na = std::sqrt(a.row(i).square().sum());
            const double nb = std::sqrt(b.row(j).square().sum());
            cos(i, j) = (na > 0 && nb > 0) ? (a.row(i) * b.row(j)).sum() / (na * nb) : 0.0;
        }
    }
    Recovery r;
    r.assignment.assign(a.rows(), -1);
    double sum = 0.0;
    if (a.rows() <= b.rows()) {
        r.assignment = hungarian(-cos);
        for (Eigen::Index i = 0; i < a.rows(); ++i) sum += cos(i, r.assignment[i]);
    } else {
        const std::vector<int> back = hungarian(-cos.transpose());
        for (std::size_t j = 0; j < back.size(); ++j) {
            r.assignment[back[j]] = static_cast<int>(j);
            sum += cos(back[j], static_cast<Eigen::Index>(j));
        }
    }
    r.mean_cosine = sum / static_cast<double>(std::min(a.rows(), b.rows()));
    return r;
}

void write_factor_tsv(const FactorReport& r, const Vocab& vocab, const std::filesystem::path& path) {
    std::ofstream out = open_out(path);
    out << "factor_id\tfeature\tweight\n";
    for (const FactorSummary& f : r.factors)
        for (const auto& [m, w] : f.top) out << f.id << '\t' << vocab.at(m) << '\t' << w << '\n';
}

void write_factor_json(const FactorReport& r, const Vocab& vocab, const std::filesystem::path& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const FactorSummary& f : r.factors) {
        nlohmann::json top = nlohmann::json::array();
        for (const auto& [m, w] : f.top) top.push_back({{"feature", vocab.at(m)}, {"weight", w}});
        j.push_back({{"factor_id", f.id}, {"usage", f.usage}, {"mass", f.mass}, {"top", top}});
    }
    nlohmann::json doc = {{"factors", j}};
    if (r.has_labels) {
        nlohmann::json occ = nlohmann::json::object();
        for (std::size_t l = 0; l < r.labels.size(); ++l) occ[r.labels[l]] = r.occurrence[l];
        doc["label_occurrence"] = occ;
    }
    std::ofstream out = open_out(path);
    out << doc.dump(2) << '\n';
}

void write_label_tsv(const FactorReport& r, const std::filesystem::path& path) {
    std::ofstream out = open_out(path);
    out << "label\tfactor_id\tcount\n";
    for (std::size_t l = 0; l < r.labels.size(); ++l)
        for (std::size_t k = 0; k < r.occurrence[l].size(); ++k)
            out << r.labels[l] << '\t' << k << '\t' << r.occurrence[l][k] << '\n';
}

void write_tml_tsv(const FactorReport& r, const CountMatrix& counts, const std::filesystem::path& path) {
    std::ofstream out = open_out(path);
    out << "sample_id\ttml\tactive_factors\n";
    for (const TmlRow& row : r.tml_table) {
        out << counts.sample_id(row.sample) << '\t' << row.tml << '\t';
        for (std::size_t i = 0; i < row.active.size(); ++i) out << (i ? "," : "") << row.active[i];
        out << '\n';
    }
}

void write_precision_curve_tsv(const PrecisionResult& r, const std::filesystem::path& path) {
    std::ofstream out = open_out(path);
    out << "tml_lo\ttml_hi\tn\tprecision_at_1\n";
    for (const PrecisionBin& b : r.curve) out << b.tml_lo << '\t' << b.tml_hi << '\t' << b.n << '\t' << b.precision << '\n';
}

void write_sample_features_tsv(const std::vector<LocalState>& locals, const CountMatrix& counts,
                               const std::filesystem::path& path) {
    std::ofstream out = open_out(path);
    if (locals.size() != counts.rows()) throw ShapeError("sample features: one local state per sample required");
    const Eigen::Index K = locals.empty() ? 0 : locals.front().nu.size();
    out << "sample_id";
    for (Eigen::Index k = 0; k < K; ++k) out << "\trate_" << k;
    for (Eigen::Index k = 0; k < K; ++k) out << "\tnu_" << k;
    out << '\n';
    for (std::size_t j = 0; j < locals.size(); ++j) {
        out << counts.sample_id(j);
        const Eigen::ArrayXd rate = locals[j].rate_mean();
        for (Eigen::Index k = 0; k < K; ++k) out << '\t' << rate[k];
        for (Eigen::Index k = 0; k < K; ++k) out << '\t' << locals[j].nu[k];
        out << '\n';
    }
}

}  // namespace cozinb
