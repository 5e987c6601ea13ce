#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <gtest/gtest.h>

#include "cozinb/data.hpp"
#include "cozinb/error.hpp"

using namespace cozinb;
namespace fs = std::filesystem;

namespace {

Corpus parse(const std::string& text) {
    std::istringstream in(text);
    return parse_triplets(in);
}

CountMatrix random_matrix(Rng& rng, int J, int M, double density = 0.3, int max_count = 6) {
    std::vector<SparseRow> rows(J);
    std::vector<std::string> ids;
    for (int j = 0; j < J; ++j) {
        ids.push_back("s" + std::to_string(j));
        for (int m = 0; m < M; ++m)
            if (rng.uniform() < density)
                rows[j].push_back({static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(1 + rng.below(max_count))});
    }
    return CountMatrix(M, rows, ids);
}

Corpus with_vocab(CountMatrix m) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < m.cols(); ++i) v.push_back("g" + std::to_string(i));
    return {std::move(m), Vocab(v)};
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("cozinb_unit_" + name); }

}  // namespace

TEST(Triplets, Tally) {
    const Corpus c = parse("s1\tTP53\t2\ns1\tKRAS\t1\ns2\tTP53\t1\n");
    EXPECT_EQ(c.counts.rows(), 2u);
    EXPECT_EQ(c.counts.cols(), 2u);
    EXPECT_EQ(c.counts.total(0), 3u);
    EXPECT_EQ(c.counts.total(1), 1u);
    EXPECT_EQ(c.vocab.at(0), "TP53");
    EXPECT_EQ(c.vocab.at(1), "KRAS");
}

TEST(Triplets, EmptyInput) {
    const Corpus c = parse("");
    EXPECT_EQ(c.counts.rows(), 0u);
    EXPECT_EQ(c.counts.cols(), 0u);
}

TEST(Triplets, NegativeCountNamesLine) {
    try {
        parse("s1\tA\t1\ns1\tB\t-1\n");
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line, 2u);
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(Triplets, DuplicatePair) { EXPECT_THROW(parse("s1\tA\t1\ns1\tA\t2\n"), ParseError); }

TEST(Triplets, MalformedLine) { EXPECT_THROW(parse("s1\tA\n"), ParseError); }

TEST(Triplets, ZeroCountsKeepSamplesAndFeatures) {
    const Corpus c = parse("s1\tA\t0\ns2\tB\t3\n");
    EXPECT_EQ(c.counts.rows(), 2u);
    EXPECT_EQ(c.counts.cols(), 2u);
    EXPECT_TRUE(c.counts.row(0).empty());
    EXPECT_EQ(c.counts.total(1), 3u);
}

TEST(Matrix, RejectsBadRows) {
    EXPECT_THROW(CountMatrix(2, {{{1, 1}, {0, 1}}}, {"s"}), DataError);
    EXPECT_THROW(CountMatrix(2, {{{0, 0}}}, {"s"}), DataError);
    EXPECT_THROW(CountMatrix(2, {{{2, 1}}}, {"s"}), DataError);
    EXPECT_THROW(CountMatrix(2, {{}}, {}), DataError);
}

TEST(RoundTrip, TripletsBitIdentical) {
    Rng rng(1);
    const Corpus c = with_vocab(random_matrix(rng, 15, 12));
    const fs::path p = temp_file("rt.tsv");
    save_counts(c, p, CountFormat::TripletTsv);
    const Corpus back = load_counts(p, CountFormat::TripletTsv);
    EXPECT_EQ(back.counts, c.counts);
    EXPECT_EQ(back.vocab, c.vocab);
    const fs::path p2 = temp_file("rt2.tsv");
    save_counts(back, p2, CountFormat::TripletTsv);
    std::ifstream a(p), b(p2);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_EQ(sa.str(), sb.str());
    fs::remove(p);
    fs::remove(p2);
}

TEST(RoundTrip, TripletsWithEmptyRowsAndUnusedFeatures) {
    // Vocabulary order differs from first-seen order, the first row is
    // empty and one feature is never counted.
    const CountMatrix m(4, {{}, {{2, 1}, {3, 2}}, {{0, 5}}, {}}, {"a", "b", "c", "d"});
    const Corpus c{m, Vocab({"w", "x", "y", "z"})};
    std::stringstream s;
    write_triplets(c, s);
    const Corpus back = parse_triplets(s);
    EXPECT_EQ(back.counts, c.counts);
    EXPECT_EQ(back.vocab, c.vocab);
}

TEST(RoundTrip, TripletsFirstRowCounted) {
    const CountMatrix m(3, {{{1, 2}}, {{0, 1}, {2, 4}}}, {"a", "b"});
    const Corpus c{m, Vocab({"x", "y", "z"})};
    std::stringstream s;
    write_triplets(c, s);
    const Corpus back = parse_triplets(s);
    EXPECT_EQ(back.counts, c.counts);
    EXPECT_EQ(back.vocab, c.vocab);
}

TEST(RoundTrip, MatrixMarket) {
    Rng rng(2);
    const Corpus c = with_vocab(random_matrix(rng, 9, 7));
    const fs::path p = temp_file("rt.mtx");
    save_counts(c, p, CountFormat::MatrixMarket);
    const Corpus back = load_counts(p, CountFormat::MatrixMarket);
    EXPECT_EQ(back.counts, c.counts);
    EXPECT_EQ(back.vocab, c.vocab);
    fs::remove(p);
}

TEST(MatrixMarket, DefaultIdentifiers) {
    std::istringstream in("%%MatrixMarket matrix coordinate integer general\n2 3 2\n1 1 4\n2 3 1\n");
    const Corpus c = parse_matrix_market(in);
    EXPECT_EQ(c.counts.sample_id(1), "s2");
    EXPECT_EQ(c.vocab.at(2), "f3");
    EXPECT_EQ(c.counts.total(0), 4u);
}

TEST(MatrixMarket, EntryCountMismatch) {
    std::istringstream in("%%MatrixMarket matrix coordinate integer general\n2 3 2\n1 1 4\n");
    EXPECT_THROW(parse_matrix_market(in), ParseError);
}

TEST(Load, MissingFileNamesPath) {
    try {
        load_counts("/definitely/not/here.tsv", CountFormat::TripletTsv);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("/definitely/not/here.tsv"), std::string::npos);
    }
}

TEST(TopFeatures, Identity) {
    Rng rng(3);
    const Corpus c = with_vocab(random_matrix(rng, 10, 6));
    const Corpus f = filter_top_features(c, 6);
    EXPECT_EQ(f.counts, c.counts);
    EXPECT_EQ(f.vocab, c.vocab);
}

TEST(TopFeatures, TieGoesToLowerId) {
    // Column totals 5, 9, 9, 1.
    const CountMatrix m(4, {{{0, 5}, {1, 4}, {2, 9}}, {{1, 5}, {3, 1}}}, {"a", "b"});
    const Corpus f = filter_top_features({m, Vocab({"c0", "c1", "c2", "c3"})}, 2);
    EXPECT_EQ(f.vocab.entries(), (std::vector<std::string>{"c1", "c2"}));
    const CountMatrix m3(4, {{{0, 5}, {1, 4}, {2, 9}}, {{1, 5}, {3, 1}}}, {"a", "b"});
    const Corpus g = filter_top_features({m3, Vocab({"c0", "c1", "c2", "c3"})}, 1);
    EXPECT_EQ(g.vocab.entries(), (std::vector<std::string>{"c1"}));
}

TEST(TopFeatures, RetainedMassMatchesBruteForce) {
    Rng rng(4);
    const Corpus c = with_vocab(random_matrix(rng, 20, 50));
    const Corpus f = filter_top_features(c, 10);
    std::vector<std::uint64_t> tot = c.counts.column_totals();
    std::sort(tot.begin(), tot.end(), std::greater<>());
    EXPECT_EQ(f.counts.total_tokens(), std::accumulate(tot.begin(), tot.begin() + 10, std::uint64_t{0}));
}

TEST(TopFeatures, Idempotent) {
    Rng rng(5);
    const Corpus c = with_vocab(random_matrix(rng, 20, 30));
    const Corpus once = filter_top_features(c, 8);
    const Corpus twice = filter_top_features(once, 8);
    EXPECT_EQ(once.counts, twice.counts);
    EXPECT_EQ(once.vocab, twice.vocab);
}

TEST(TopFeatures, TooMany) {
    Rng rng(6);
    const Corpus c = with_vocab(random_matrix(rng, 3, 4));
    EXPECT_THROW(filter_top_features(c, 5), DataError);
}

TEST(RemoveFeatures, DropsBlacklisted) {
    const CountMatrix m(3, {{{0, 1}, {1, 2}, {2, 3}}}, {"a"});
    const Corpus f = remove_features({m, Vocab({"TP53", "LOC1", "KRAS"})}, {"LOC1"});
    EXPECT_EQ(f.vocab.entries(), (std::vector<std::string>{"TP53", "KRAS"}));
    EXPECT_EQ(f.counts.total(0), 4u);
}

TEST(AlignVocab, DropsUnknown) {
    const CountMatrix m(3, {{{0, 1}, {1, 2}, {2, 3}}}, {"a"});
    std::uint64_t dropped = 0;
    const Corpus f = align_to_vocab({m, Vocab({"x", "y", "z"})}, Vocab({"z", "x", "w"}), &dropped);
    EXPECT_EQ(dropped, 2u);
    EXPECT_EQ(f.counts.cols(), 3u);
    EXPECT_EQ(f.counts.row(0), (SparseRow{{0, 3}, {1, 1}}));
}

TEST(Labels, Attach) {
    const fs::path p = temp_file("labels.tsv");
    {
        std::ofstream out(p);
        out << "b\tLUAD\na\tBRCA\n";
    }
    CountMatrix m(1, {{}, {}, {}}, {"a", "b", "c"});
    attach_labels(m, p);
    EXPECT_EQ(m.labels(), (std::vector<std::string>{"BRCA", "LUAD", ""}));
    fs::remove(p);
}

TEST(Split, Deterministic) {
    Rng rng(7);
    const CountMatrix m = random_matrix(rng, 40, 20);
    const HeldoutSplit a = split_heldout(m, 0.5, 99), b = split_heldout(m, 0.5, 99);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test_observed, b.test_observed);
    EXPECT_EQ(a.test_target, b.test_target);
    EXPECT_EQ(a.test_index, b.test_index);
}

TEST(Split, ReconstructsRows) {
    Rng rng(8);
    const CountMatrix m = random_matrix(rng, 50, 25);
    const HeldoutSplit s = split_heldout(m, 0.3, 5, 0.4);
    EXPECT_EQ(s.train.rows() + s.test_observed.rows(), m.rows());
    EXPECT_EQ(s.test_observed.rows(), s.test_target.rows());
    for (std::size_t i = 0; i < s.test_index.size(); ++i) {
        std::vector<std::uint64_t> sum(m.cols(), 0);
        for (const Entry& e : s.test_observed.row(i)) sum[e.col] += e.count;
        for (const Entry& e : s.test_target.row(i)) sum[e.col] += e.count;
        std::vector<std::uint64_t> orig(m.cols(), 0);
        for (const Entry& e : m.row(s.test_index[i])) orig[e.col] = e.count;
        EXPECT_EQ(sum, orig);
    }
    for (std::size_t i = 0; i < s.train_index.size(); ++i) EXPECT_EQ(s.train.row(i), m.row(s.train_index[i]));
}

TEST(Split, BinomialTargetSize) {
    const CountMatrix m(1, {{{0, 1000}}}, {"only"});
    const HeldoutSplit s = split_heldout(m, 0.5, 12, 1.0);
    ASSERT_EQ(s.test_target.rows(), 1u);
    const double n = static_cast<double>(s.test_target.total(0));
    EXPECT_NEAR(n, 500.0, 3 * std::sqrt(250.0));
}

TEST(Split, TinyFractionMayLeaveEmptyTarget) {
    const CountMatrix m(2, {{{0, 1}}, {{1, 1}}}, {"a", "b"});
    const HeldoutSplit s = split_heldout(m, 0.001, 3, 0.5);
    EXPECT_LE(s.test_target.total_tokens(), 1u);
}

TEST(Split, BadFraction) {
    const CountMatrix m(1, {{{0, 1}}}, {"a"});
    EXPECT_THROW(split_heldout(m, 0.0, 1), DomainError);
    EXPECT_THROW(split_heldout(m, 1.0, 1), DomainError);
}
