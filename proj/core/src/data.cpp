#include "cozinb/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string_view>

#include "cozinb/error.hpp"

namespace cozinb {

// ---------------------------------------------------------------- Vocab

Vocab::Vocab(std::vector<std::string> entries) {
    for (auto& e : entries) {
        if (e.empty()) throw DataError("Vocab: empty identifier");
        auto [it, fresh] = index_.emplace(e, static_cast<std::uint32_t>(entries_.size()));
        if (!fresh) throw DataError("Vocab: duplicate identifier '" + e + "'");
        entries_.push_back(std::move(e));
    }
}

std::uint32_t Vocab::intern(const std::string& id) {
    if (id.empty()) throw DataError("Vocab: empty identifier");
    auto [it, fresh] = index_.emplace(id, static_cast<std::uint32_t>(entries_.size()));
    if (fresh) entries_.push_back(id);
    return it->second;
}

std::optional<std::uint32_t> Vocab::find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

// ---------------------------------------------------------- CountMatrix

CountMatrix::CountMatrix(std::size_t num_cols, std::vector<SparseRow> rows, std::vector<std::string> sample_ids,
                         std::vector<std::string> labels)
    : cols_(num_cols), rows_(std::move(rows)), sample_ids_(std::move(sample_ids)) {
    if (sample_ids_.size() != rows_.size()) {
        throw DataError("CountMatrix: " + std::to_string(sample_ids_.size()) + " sample ids for " +
                        std::to_string(rows_.size()) + " rows");
    }
    totals_.reserve(rows_.size());
    for (std::size_t j = 0; j < rows_.size(); ++j) {
        std::uint64_t total = 0;
        for (std::size_t i = 0; i < rows_[j].size(); ++i) {
            const Entry& e = rows_[j][i];
            if (e.count == 0) throw DataError("CountMatrix: zero count stored in row " + std::to_string(j));
            if (e.col >= cols_) throw DataError("CountMatrix: column id out of range in row " + std::to_string(j));
            if (i > 0 && rows_[j][i - 1].col >= e.col) {
                throw DataError("CountMatrix: column ids not strictly increasing in row " + std::to_string(j));
            }
            total += e.count;
        }
        totals_.push_back(total);
    }
    set_labels(std::move(labels));
}

void CountMatrix::set_labels(std::vector<std::string> labels) {
    if (!labels.empty() && labels.size() != rows_.size()) {
        throw DataError("CountMatrix: label count does not match sample count");
    }
    labels_ = std::move(labels);
}

std::uint64_t CountMatrix::total_tokens() const {
    return std::accumulate(totals_.begin(), totals_.end(), std::uint64_t{0});
}

std::vector<std::uint64_t> CountMatrix::column_totals() const {
    std::vector<std::uint64_t> out(cols_, 0);
    for (const auto& row : rows_)
        for (const auto& e : row) out[e.col] += e.count;
    return out;
}

CountMatrix CountMatrix::select_rows(const std::vector<std::size_t>& which) const {
    std::vector<SparseRow> rows;
    std::vector<std::string> ids;
    std::vector<std::string> labels;
    rows.reserve(which.size());
    for (std::size_t j : which) {
        rows.push_back(rows_.at(j));
        ids.push_back(sample_ids_.at(j));
        if (has_labels()) labels.push_back(labels_[j]);
    }
    return CountMatrix(cols_, std::move(rows), std::move(ids), std::move(labels));
}

bool CountMatrix::operator==(const CountMatrix& other) const {
    return cols_ == other.cols_ && rows_ == other.rows_ && sample_ids_ == other.sample_ids_ &&
           labels_ == other.labels_;
}

// --------------------------------------------------------------- parsing

CountFormat parse_count_format(const std::string& name) {
    if (name == "triplet" || name == "triplet-tsv" || name == "tsv") return CountFormat::TripletTsv;
    if (name == "matrix-market" || name == "mtx" || name == "mm") return CountFormat::MatrixMarket;
    throw ConfigError("unknown count format '" + name + "' (expected triplet-tsv or matrix-market)");
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        std::size_t pos = line.find('\t', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\n')) s.remove_suffix(1);
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    return s;
}

std::uint64_t parse_uint(std::string_view s, std::size_t line_no, const char* what) {
    s = trim(s);
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
        throw ParseError(std::string("expected nonnegative integer ") + what + ", got '" + std::string(s) + "'",
                         line_no);
    }
    return v;
}

std::uint32_t checked_count(std::uint64_t v, std::size_t line_no) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw ParseError("count too large", line_no);
    return static_cast<std::uint32_t>(v);
}

/// Accumulates (sample, column, count) triples into sorted sparse rows.
class RowBuilder {
public:
    void ensure(std::size_t sample) {
        if (sample >= rows_.size()) rows_.resize(sample + 1);
    }
    void add(std::size_t sample, std::uint32_t col, std::uint32_t count, std::size_t line_no) {
        ensure(sample);
        auto [it, fresh] = rows_[sample].emplace(col, count);
        if (!fresh) throw ParseError("duplicate (sample, feature) pair", line_no);
    }
    std::vector<SparseRow> finish(std::size_t num_rows) {
        ensure(num_rows == 0 ? 0 : num_rows - 1);
        if (num_rows == 0) rows_.clear();
        std::vector<SparseRow> out(rows_.size());
        for (std::size_t j = 0; j < rows_.size(); ++j) {
            for (auto [col, count] : rows_[j]) {
                if (count > 0) out[j].push_back(Entry{col, count});
            }
        }
        return out;
    }

private:
    // Zero-count entries are kept here so duplicates are still detected.
    std::vector<std::map<std::uint32_t, std::uint32_t>> rows_;
};

}  // namespace

Corpus parse_triplets(std::istream& in) {
    Vocab vocab;
    Vocab samples;
    RowBuilder builder;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        auto fields = split_tabs(line);
        if (fields.size() != 3) {
            throw ParseError("expected 3 tab-separated fields (sample, feature, count), got " +
                                 std::to_string(fields.size()),
                             line_no);
        }
        std::string sample(trim(fields[0]));
        std::string feature(trim(fields[1]));
        if (sample.empty() || feature.empty()) throw ParseError("empty sample or feature identifier", line_no);
        std::uint32_t count = checked_count(parse_uint(fields[2], line_no, "count"), line_no);
        std::uint32_t j = samples.intern(sample);
        std::uint32_t m = vocab.intern(feature);
        builder.add(j, m, count, line_no);
    }
    auto rows = builder.finish(samples.size());
    CountMatrix counts(vocab.size(), std::move(rows), samples.entries());
    return Corpus{std::move(counts), std::move(vocab)};
}

Corpus parse_matrix_market(std::istream& in) {
    std::string raw;
    std::size_t line_no = 0;
    std::vector<std::string> sample_names;
    std::vector<std::string> feature_names;
    bool header_seen = false;
    bool size_seen = false;
    std::size_t num_rows = 0, num_cols = 0, nnz = 0, read = 0;
    RowBuilder builder;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = trim(raw);
        if (!header_seen) {
            if (line.rfind("%%MatrixMarket", 0) != 0) {
                if (line.empty()) continue;
                throw ParseError("missing %%MatrixMarket header", line_no);
            }
            std::istringstream hs{std::string(line)};
            std::string tag, object, layout, field, symmetry;
            hs >> tag >> object >> layout >> field >> symmetry;
            if (object != "matrix" || layout != "coordinate" || field != "integer" || symmetry != "general") {
                throw ParseError("only 'matrix coordinate integer general' is supported", line_no);
            }
            header_seen = true;
            continue;
        }
        if (line.empty()) continue;
        if (line.front() == '%') {
            auto fields = split_tabs(line);
            if (fields.size() == 2 && trim(fields[0]) == "% sample") sample_names.emplace_back(trim(fields[1]));
            if (fields.size() == 2 && trim(fields[0]) == "% feature") feature_names.emplace_back(trim(fields[1]));
            continue;
        }
        std::istringstream ls{std::string(line)};
        std::string a, b, c, extra;
        ls >> a >> b >> c >> extra;
        if (c.empty() || !extra.empty()) throw ParseError("expected three whitespace-separated integers", line_no);
        if (!size_seen) {
            num_rows = parse_uint(a, line_no, "row count");
            num_cols = parse_uint(b, line_no, "column count");
            nnz = parse_uint(c, line_no, "nonzero count");
            size_seen = true;
            continue;
        }
        std::uint64_t i = parse_uint(a, line_no, "row index");
        std::uint64_t k = parse_uint(b, line_no, "column index");
        std::uint32_t v = checked_count(parse_uint(c, line_no, "count"), line_no);
        if (i < 1 || i > num_rows || k < 1 || k > num_cols) throw ParseError("index out of range", line_no);
        builder.add(i - 1, static_cast<std::uint32_t>(k - 1), v, line_no);
        ++read;
    }
    if (!header_seen) {
        // An empty file is the empty corpus, mirroring the triplet reader.
        return Corpus{};
    }
    if (!size_seen) throw ParseError("missing size line", line_no);
    if (read != nnz) {
        throw ParseError("declared " + std::to_string(nnz) + " entries, found " + std::to_string(read), line_no);
    }
    if (sample_names.empty()) {
        for (std::size_t j = 0; j < num_rows; ++j) sample_names.push_back("s" + std::to_string(j + 1));
    }
    if (feature_names.empty()) {
        for (std::size_t m = 0; m < num_cols; ++m) feature_names.push_back("f" + std::to_string(m + 1));
    }
    if (sample_names.size() != num_rows || feature_names.size() != num_cols) {
        throw ParseError("identifier comments do not match the declared matrix size", 0);
    }
    auto rows = builder.finish(num_rows);
    CountMatrix counts(num_cols, std::move(rows), Vocab(sample_names).entries());
    return Corpus{std::move(counts), Vocab(std::move(feature_names))};
}

Corpus load_counts(const std::filesystem::path& path, CountFormat format) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open count file '" + path.string() + "'");
    return format == CountFormat::TripletTsv ? parse_triplets(in) : parse_matrix_market(in);
}

// --------------------------------------------------------------- writing

void write_triplets(const Corpus& corpus, std::ostream& out) {
    const CountMatrix& c = corpus.counts;
    const Vocab& v = corpus.vocab;
    // Re-reading assigns feature ids in first-seen order. If the natural row
    // order would permute ids, or some feature has no counts, lead with
    // lines for the first sample that register every feature in id order
    // (zero where it has no count).
    std::vector<bool> seen(c.cols(), false);
    std::uint32_t next = 0;
    bool natural = true;
    for (std::size_t j = 0; j < c.rows() && natural; ++j) {
        for (const Entry& e : c.row(j)) {
            if (seen[e.col]) continue;
            if (e.col != next) {
                natural = false;
                break;
            }
            seen[e.col] = true;
            ++next;
        }
    }
    if (next != c.cols()) natural = false;
    std::size_t first = 0;
    if (!natural && c.rows() > 0 && c.cols() > 0) {
        std::vector<std::uint32_t> row0(c.cols(), 0);
        for (const Entry& e : c.row(0)) row0[e.col] = e.count;
        for (std::size_t m = 0; m < c.cols(); ++m) out << c.sample_id(0) << '\t' << v.at(m) << '\t' << row0[m] << '\n';
        first = 1;
    }
    for (std::size_t j = first; j < c.rows(); ++j) {
        if (c.row(j).empty()) {
            if (c.cols() > 0) out << c.sample_id(j) << '\t' << v.at(0) << "\t0\n";
            continue;
        }
        for (const Entry& e : c.row(j)) out << c.sample_id(j) << '\t' << v.at(e.col) << '\t' << e.count << '\n';
    }
}

void write_matrix_market(const Corpus& corpus, std::ostream& out) {
    const CountMatrix& c = corpus.counts;
    out << "%%MatrixMarket matrix coordinate integer general\n";
    for (const auto& id : c.sample_ids()) out << "% sample\t" << id << '\n';
    for (const auto& id : corpus.vocab.entries()) out << "% feature\t" << id << '\n';
    std::size_t nnz = 0;
    for (const auto& row : c.all_rows()) nnz += row.size();
    out << c.rows() << ' ' << c.cols() << ' ' << nnz << '\n';
    for (std::size_t j = 0; j < c.rows(); ++j)
        for (const Entry& e : c.row(j)) out << (j + 1) << ' ' << (e.col + 1) << ' ' << e.count << '\n';
}

void save_counts(const Corpus& corpus, const std::filesystem::path& path, CountFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    if (format == CountFormat::TripletTsv) {
        write_triplets(corpus, out);
    } else {
        write_matrix_market(corpus, out);
    }
    if (!out) throw DataError("write failed for '" + path.string() + "'");
}

void attach_labels(CountMatrix& counts, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open label file '" + path.string() + "'");
    std::unordered_map<std::string, std::string> by_id;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        auto fields = split_tabs(line);
        if (fields.size() != 2) throw ParseError("expected 'sample_id TAB label'", line_no);
        by_id[std::string(trim(fields[0]))] = std::string(trim(fields[1]));
    }
    std::vector<std::string> labels;
    labels.reserve(counts.rows());
    for (const auto& id : counts.sample_ids()) {
        auto it = by_id.find(id);
        labels.push_back(it == by_id.end() ? std::string() : it->second);
    }
    counts.set_labels(std::move(labels));
}

// -------------------------------------------------------- transformations

namespace {

Corpus project_columns(const Corpus& corpus, const std::vector<std::uint32_t>& keep_sorted) {
    const CountMatrix& c = corpus.counts;
    std::vector<std::int64_t> remap(c.cols(), -1);
    std::vector<std::string> names;
    for (std::size_t i = 0; i < keep_sorted.size(); ++i) {
        remap[keep_sorted[i]] = static_cast<std::int64_t>(i);
        names.push_back(corpus.vocab.at(keep_sorted[i]));
    }
    std::vector<SparseRow> rows(c.rows());
    for (std::size_t j = 0; j < c.rows(); ++j) {
        for (const Entry& e : c.row(j)) {
            if (remap[e.col] >= 0) rows[j].push_back(Entry{static_cast<std::uint32_t>(remap[e.col]), e.count});
        }
    }
    CountMatrix out(keep_sorted.size(), std::move(rows), c.sample_ids(), c.labels());
    return Corpus{std::move(out), Vocab(std::move(names))};
}

}  // namespace

Corpus remove_features(const Corpus& corpus, const std::unordered_set<std::string>& blacklist) {
    std::vector<std::uint32_t> keep;
    for (std::uint32_t m = 0; m < corpus.vocab.size(); ++m) {
        if (!blacklist.contains(corpus.vocab.at(m))) keep.push_back(m);
    }
    return project_columns(corpus, keep);
}

Corpus filter_top_features(const Corpus& corpus, std::size_t top) {
    if (top < 1) throw DataError("filter_top_features: H must be at least 1");
    const std::size_t M = corpus.counts.cols();
    if (top > M) {
        throw DataError("filter_top_features: H = " + std::to_string(top) + " exceeds vocabulary size " +
                        std::to_string(M));
    }
    auto totals = corpus.counts.column_totals();
    std::vector<std::uint32_t> order(M);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return totals[a] > totals[b]; });
    order.resize(top);
    std::sort(order.begin(), order.end());
    return project_columns(corpus, order);
}

Corpus align_to_vocab(const Corpus& corpus, const Vocab& vocab, std::uint64_t* dropped) {
    std::vector<std::optional<std::uint32_t>> to(corpus.vocab.size());
    for (std::uint32_t c = 0; c < corpus.vocab.size(); ++c) to[c] = vocab.find(corpus.vocab.at(c));
    std::uint64_t lost = 0;
    std::vector<SparseRow> rows(corpus.counts.rows());
    for (std::size_t j = 0; j < rows.size(); ++j) {
        for (const Entry& e : corpus.counts.row(j)) {
            if (to[e.col]) {
                rows[j].push_back(Entry{*to[e.col], e.count});
            } else {
                lost += e.count;
            }
        }
        std::sort(rows[j].begin(), rows[j].end(), [](const Entry& a, const Entry& b) { return a.col < b.col; });
    }
    if (dropped) *dropped = lost;
    return Corpus{CountMatrix(vocab.size(), std::move(rows), corpus.counts.sample_ids(), corpus.counts.labels()), vocab};
}

std::pair<CountMatrix, CountMatrix> split_tokens(const CountMatrix& counts, double fraction, Rng& rng) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw DomainError("split_tokens: fraction must lie in (0, 1)");
    std::vector<SparseRow> observed(counts.rows()), target(counts.rows());
    for (std::size_t j = 0; j < counts.rows(); ++j) {
        for (const Entry& e : counts.row(j)) {
            std::uint32_t held = 0;
            for (std::uint32_t t = 0; t < e.count; ++t) held += rng.uniform() < fraction ? 1u : 0u;
            if (held > 0) target[j].push_back(Entry{e.col, held});
            if (held < e.count) observed[j].push_back(Entry{e.col, e.count - held});
        }
    }
    return {CountMatrix(counts.cols(), std::move(observed), counts.sample_ids(), counts.labels()),
            CountMatrix(counts.cols(), std::move(target), counts.sample_ids(), counts.labels())};
}

HeldoutSplit split_heldout(const CountMatrix& counts, double fraction, std::uint64_t seed,
                           double test_sample_fraction) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw DomainError("split_heldout: fraction must lie in (0, 1)");
    if (!(test_sample_fraction > 0.0 && test_sample_fraction <= 1.0)) {
        throw DomainError("split_heldout: test_sample_fraction must lie in (0, 1]");
    }
    Rng root(seed);
    Rng shuffle_rng = root.split(0);
    Rng token_rng = root.split(1);

    const std::size_t J = counts.rows();
    std::vector<std::size_t> order(J);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(shuffle_rng, order);
    std::size_t n_test = 0;
    if (J > 0) {
        n_test = static_cast<std::size_t>(std::llround(test_sample_fraction * static_cast<double>(J)));
        n_test = std::clamp<std::size_t>(n_test, 1, J);
    }
    std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());

    HeldoutSplit out;
    out.train = counts.select_rows(train);
    auto [observed, target] = split_tokens(counts.select_rows(test), fraction, token_rng);
    out.test_observed = std::move(observed);
    out.test_target = std::move(target);
    out.train_index = std::move(train);
    out.test_index = std::move(test);
    return out;
}

}  // namespace cozinb
