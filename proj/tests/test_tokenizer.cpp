#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "cellrefine/errors.hpp"
#include "cellrefine/tokenizer.hpp"
#include "cellrefine/vocab.hpp"

using namespace cellrefine;

namespace {

GeneVocabulary abcd() { return GeneVocabulary::from_genes({"A", "B", "C", "D"}); }

std::vector<double> unit_medians(int n) { return std::vector<double>(n, 1.0); }

}  // namespace

TEST_CASE("vocabulary reserves MASK and PAD at the top") {
    GeneVocabulary v = abcd();
    CHECK(v.size() == 6);
    CHECK(v.n_genes() == 4);
    CHECK(v.mask_id() == 4);
    CHECK(v.pad_id() == 5);
    CHECK(v.id_of("C") == 2);
    CHECK(v.has_gene("D"));
    CHECK_FALSE(v.has_gene("Z"));
    CHECK_THROWS_AS(v.id_of("Z"), UnknownGene);
}

TEST_CASE("tokenize sorts by normalized value, drops zeros") {
    GeneVocabulary v = abcd();
    TokenSequence seq = tokenize({0.1, 5.0, 0.0, 2.0}, v, unit_medians(4), 10);
    CHECK(seq.tokens == std::vector<int>{v.id_of("B"), v.id_of("D"), v.id_of("A")});
    CHECK(seq.masked_positions.empty());
    CHECK(seq.targets.empty());
}

TEST_CASE("equal values fall back to gene-id order") {
    GeneVocabulary v = abcd();
    TokenSequence seq = tokenize({3.0, 3.0, 3.0, 3.0}, v, unit_medians(4), 10);
    CHECK(seq.tokens == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("median normalization reorders") {
    GeneVocabulary v = abcd();
    // raw B > D, but B's median is huge so D outranks it
    std::vector<double> med = {1.0, 100.0, 1.0, 1.0};
    TokenSequence seq = tokenize({0.0, 5.0, 0.0, 2.0}, v, med, 10);
    CHECK(seq.tokens == std::vector<int>{v.id_of("D"), v.id_of("B")});
}

TEST_CASE("truncation keeps the top max_len") {
    GeneVocabulary v = GeneVocabulary::from_genes({"g0", "g1", "g2", "g3", "g4"});
    TokenSequence seq = tokenize({1.0, 5.0, 3.0, 4.0, 2.0}, v, unit_medians(5), 3);
    CHECK(seq.tokens == std::vector<int>{1, 3, 2});
}

TEST_CASE("tokenize contract errors") {
    GeneVocabulary v = abcd();
    CHECK_THROWS_AS(tokenize({1.0, 2.0}, v, unit_medians(4), 10), LengthMismatch);
    CHECK_THROWS_AS(tokenize({0.0, 0.0, 0.0, 0.0}, v, unit_medians(4), 10), AllZeroExpression);
}

TEST_CASE("tokenize is idempotent under re-ranking") {
    GeneVocabulary v = GeneVocabulary::from_genes({"g0", "g1", "g2", "g3", "g4", "g5"});
    std::vector<double> expr = {0.0, 2.5, 7.0, 0.4, 0.4, 1.0};
    TokenSequence seq = tokenize(expr, v, unit_medians(6), 10);
    // rebuild values implied by the ranks and tokenize again
    std::vector<double> implied(6, 0.0);
    for (int i = 0; i < seq.length(); ++i) {
        implied[seq.tokens[i]] = static_cast<double>(seq.length() - i);
    }
    TokenSequence again = tokenize(implied, v, unit_medians(6), 10);
    CHECK(again.tokens == seq.tokens);
}

TEST_CASE("gene medians use nonzero entries with unit fallback") {
    std::vector<std::vector<double>> cells = {
        {0.0, 2.0, 4.0},
        {0.0, 4.0, 0.0},
        {0.0, 6.0, 8.0},
    };
    std::vector<double> med = compute_gene_medians(cells, 3);
    CHECK(med[0] == 1.0);  // never nonzero
    CHECK(med[1] == 4.0);
    CHECK(med[2] == 6.0);  // even count -> mean of middle two
}

TEST_CASE("mask rate zero and one") {
    GeneVocabulary v = abcd();
    TokenSequence seq = tokenize({1.0, 2.0, 3.0, 4.0}, v, unit_medians(4), 10);

    TokenSequence none = mask_tokens(seq, 0.0, 1, v);
    CHECK(none.masked_positions.empty());
    CHECK(none.tokens == seq.tokens);

    TokenSequence all = mask_tokens(seq, 1.0, 1, v);
    CHECK(static_cast<int>(all.masked_positions.size()) == seq.length());
    for (int tok : all.tokens) CHECK(tok == v.mask_id());
    // restoring targets rebuilds the original
    TokenSequence restored = all;
    for (size_t i = 0; i < all.masked_positions.size(); ++i) {
        restored.tokens[all.masked_positions[i]] = all.targets[i];
    }
    CHECK(restored.tokens == seq.tokens);
}

TEST_CASE("mask count is round(rate * t)") {
    GeneVocabulary v = GeneVocabulary::from_genes(
        {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"});
    std::vector<double> expr(10);
    for (int i = 0; i < 10; ++i) expr[i] = 10.0 - i;
    TokenSequence seq = tokenize(expr, v, unit_medians(10), 20);
    REQUIRE(seq.length() == 10);
    CHECK(mask_tokens(seq, 0.15, 3, v).masked_positions.size() == 2);  // round(1.5)
    CHECK(mask_tokens(seq, 0.24, 3, v).masked_positions.size() == 2);
    CHECK(mask_tokens(seq, 0.25, 3, v).masked_positions.size() == 3);  // round half up
    CHECK_THROWS_AS(mask_tokens(seq, -0.1, 3, v), RateOutOfRange);
    CHECK_THROWS_AS(mask_tokens(seq, 1.1, 3, v), RateOutOfRange);
}

TEST_CASE("masking is seeded and without replacement") {
    GeneVocabulary v = GeneVocabulary::from_genes({"a", "b", "c", "d", "e", "f"});
    TokenSequence seq = tokenize({6, 5, 4, 3, 2, 1}, v, unit_medians(6), 10);
    TokenSequence m1 = mask_tokens(seq, 0.5, 9, v);
    TokenSequence m2 = mask_tokens(seq, 0.5, 9, v);
    CHECK(m1.masked_positions == m2.masked_positions);
    CHECK(m1.targets == m2.targets);
    CHECK(std::is_sorted(m1.masked_positions.begin(), m1.masked_positions.end()));
    std::set<int> uniq(m1.masked_positions.begin(), m1.masked_positions.end());
    CHECK(uniq.size() == m1.masked_positions.size());

    bool differs = false;
    for (uint64_t s = 0; s < 20 && !differs; ++s) {
        differs = mask_tokens(seq, 0.5, s, v).masked_positions != m1.masked_positions;
    }
    CHECK(differs);
}

TEST_CASE("mask fraction stays within 1/t of the rate") {
    GeneVocabulary v = GeneVocabulary::from_genes({"a", "b", "c", "d", "e", "f", "g"});
    for (int t = 1; t <= 7; ++t) {
        std::vector<double> expr(7, 0.0);
        for (int i = 0; i < t; ++i) expr[i] = t - i;
        TokenSequence seq = tokenize(expr, v, unit_medians(7), 10);
        REQUIRE(seq.length() == t);
        for (double rate : {0.1, 0.15, 0.33, 0.5, 0.85}) {
            const double got =
                static_cast<double>(mask_tokens(seq, rate, 4, v).masked_positions.size()) / t;
            CHECK(got >= rate - 1.0 / t - 1e-12);
            CHECK(got <= rate + 1.0 / t + 1e-12);
        }
    }
}
