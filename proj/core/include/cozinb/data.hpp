#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cozinb/rng.hpp"

namespace cozinb {

/// Ordered feature identifiers (gene symbols, tokens) with their inverse index.
class Vocab {
public:
    Vocab() = default;
    explicit Vocab(std::vector<std::string> entries);

    /// Returns the id of `id`, inserting it at the end when new.
    std::uint32_t intern(const std::string& id);
    std::optional<std::uint32_t> find(const std::string& id) const;

    const std::string& at(std::uint32_t col) const { return entries_.at(col); }
    const std::vector<std::string>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    bool operator==(const Vocab& other) const { return entries_ == other.entries_; }

private:
    std::vector<std::string> entries_;
    std::unordered_map<std::string, std::uint32_t> index_;
};

struct Entry {
    std::uint32_t col;
    std::uint32_t count;

    bool operator==(const Entry&) const = default;
};

using SparseRow = std::vector<Entry>;

/// Sparse J x M count matrix. Rows hold strictly positive counts with
/// strictly increasing column ids; empty rows are legal.
class CountMatrix {
public:
    CountMatrix() = default;
    /// Validates every row; throws DataError on any invariant violation.
    CountMatrix(std::size_t num_cols, std::vector<SparseRow> rows, std::vector<std::string> sample_ids,
                std::vector<std::string> labels = {});

    std::size_t rows() const { return rows_.size(); }
    std::size_t cols() const { return cols_; }
    const SparseRow& row(std::size_t j) const { return rows_.at(j); }
    const std::vector<SparseRow>& all_rows() const { return rows_; }
    std::uint64_t total(std::size_t j) const { return totals_.at(j); }
    std::uint64_t total_tokens() const;

    const std::vector<std::string>& sample_ids() const { return sample_ids_; }
    const std::string& sample_id(std::size_t j) const { return sample_ids_.at(j); }
    bool has_labels() const { return !labels_.empty(); }
    const std::vector<std::string>& labels() const { return labels_; }
    void set_labels(std::vector<std::string> labels);

    /// Per-column count totals.
    std::vector<std::uint64_t> column_totals() const;
    /// Subset of rows in the order given.
    CountMatrix select_rows(const std::vector<std::size_t>& which) const;

    bool operator==(const CountMatrix& other) const;

private:
    std::size_t cols_ = 0;
    std::vector<SparseRow> rows_;
    std::vector<std::uint64_t> totals_;
    std::vector<std::string> sample_ids_;
    std::vector<std::string> labels_;
};

struct Corpus {
    CountMatrix counts;
    Vocab vocab;
};

enum class CountFormat { TripletTsv, MatrixMarket };

CountFormat parse_count_format(const std::string& name);

/// Loads a count file. Zero counts are dropped; empty samples are kept.
/// Triplet input builds the vocabulary in first-seen order. Matrix Market
/// input takes identifiers from `% sample` / `% feature` comment lines when
/// present and names them s1.. / f1.. otherwise.
Corpus load_counts(const std::filesystem::path& path, CountFormat format);
Corpus parse_triplets(std::istream& in);
Corpus parse_matrix_market(std::istream& in);

void save_counts(const Corpus& corpus, const std::filesystem::path& path, CountFormat format);
void write_triplets(const Corpus& corpus, std::ostream& out);
void write_matrix_market(const Corpus& corpus, std::ostream& out);

/// Reads `sample_id TAB label` lines and attaches labels in sample order.
/// Samples missing from the file get an empty label.
void attach_labels(CountMatrix& counts, const std::filesystem::path& path);

/// Drops the listed feature identifiers (e.g. a non-gene locus) from the corpus.
Corpus remove_features(const Corpus& corpus, const std::unordered_set<std::string>& blacklist);

/// Keeps the `top` columns with the largest total count; ties go to the
/// lower column id. Kept columns retain their relative order.
Corpus filter_top_features(const Corpus& corpus, std::size_t top);

/// Re-expresses the corpus in the columns of `vocab`. Features missing from
/// `vocab` are dropped; `dropped`, when given, receives their token count.
Corpus align_to_vocab(const Corpus& corpus, const Vocab& vocab, std::uint64_t* dropped = nullptr);

struct HeldoutSplit {
    CountMatrix train;
    CountMatrix test_observed;
    CountMatrix test_target;
    /// Row of the source corpus for each train / test sample.
    std::vector<std::size_t> train_index;
    std::vector<std::size_t> test_index;
};

/// Sample-level shuffle into train/test, then per-token assignment of test
/// samples to the target with probability `fraction`.
HeldoutSplit split_heldout(const CountMatrix& counts, double fraction, std::uint64_t seed,
                           double test_sample_fraction = 0.1);

/// Splits every row's tokens (no sample partition) with probability `fraction`
/// to the target side. Returns {observed, target}.
std::pair<CountMatrix, CountMatrix> split_tokens(const CountMatrix& counts, double fraction, Rng& rng);

}  // namespace cozinb
