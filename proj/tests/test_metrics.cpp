#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "kpt/metrics.hpp"
#include "test_support.hpp"

using namespace kpt;

namespace {

Tokens words(const std::string& s) { return split_whitespace(s); }

AttributeSpan span(const std::string& attr, std::size_t start, std::size_t end) {
    return AttributeSpan{attr, start, end, {}};
}

Tokens random_tokens(std::mt19937_64& rng, std::size_t max_len, std::size_t alphabet) {
    Tokens t(kpt::testing::random_size(rng, 0, max_len));
    for (auto& w : t) w = "w" + std::to_string(kpt::testing::random_size(rng, 0, alphabet - 1));
    return t;
}

Tokens relabel(const Tokens& t, const std::map<std::string, std::string>& m) {
    Tokens out;
    for (const auto& w : t) out.push_back(m.at(w));
    return out;
}

}  // namespace

TEST_CASE("rouge on the cat sat / the cat ran") {
    const Tokens c = words("the cat sat"), r = words("the cat ran");
    CHECK(rouge_n(c, r, 1).f1 == doctest::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(rouge_n(c, r, 2).f1 == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(rouge_l(c, r).f1 == doctest::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(lcs_length(c, r) == 2);
}

TEST_CASE("rouge edge cases") {
    const Tokens abcd = words("a b c d"), dcba = words("d c b a");
    CHECK(rouge_l(abcd, abcd).f1 == 1.0);
    const PRF rev = rouge_l(dcba, abcd);
    CHECK(rev.precision == doctest::Approx(0.25));
    CHECK(rev.recall == doctest::Approx(0.25));
    CHECK(rouge_n({}, abcd, 1).f1 == 0.0);
    CHECK(rouge_l(abcd, {}).f1 == 0.0);
    // clipping: repeated candidate unigrams only count as often as in the reference
    const PRF clipped = rouge_n(words("the the the"), words("the cat"), 1);
    CHECK(clipped.precision == doctest::Approx(1.0 / 3));
    CHECK(clipped.recall == doctest::Approx(0.5));
}

TEST_CASE("bleu matches reference values") {
    // reference values from an independent re-implementation; the first one
    // also agrees with nltk's sentence_bleu since no smoothing is involved
    CHECK(bleu(words("the cat sat on mat"), words("the cat sat on the mat")) ==
          doctest::Approx(0.5789300674674098).epsilon(1e-12));
    CHECK(bleu(words("a b c d"), words("a b x d")) == doctest::Approx(0.45180100180492233).epsilon(1e-12));
    CHECK(corpus_bleu({words("a b c d e"), words("x y z")}, {words("a b c d f"), words("x y w z")}) ==
          doctest::Approx(0.545352603040424).epsilon(1e-12));
    CHECK(std::string(kBleuName) == "bleu4-smooth1");
}

TEST_CASE("bleu trivial cases") {
    const Tokens c = words("a b c d e f g h");
    CHECK(bleu(c, c) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(bleu({}, c) == 0.0);
    CHECK(bleu(words("q r s"), c) == 0.0);
    // half-length candidate with perfect precisions: only the brevity penalty remains
    const Tokens ref = words("a b c d e f g h i j k l m n o p");
    CHECK(bleu(c, ref) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("metrics stay in [0, 1] and are symmetric where required") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        const Tokens a = random_tokens(rng, 12, 6), b = random_tokens(rng, 12, 6);
        for (const PRF& p : {rouge_n(a, b, 1), rouge_n(a, b, 2), rouge_l(a, b)}) {
            REQUIRE(p.precision >= 0.0);
            REQUIRE(p.precision <= 1.0);
            REQUIRE(p.recall <= 1.0);
            REQUIRE(p.f1 <= 1.0);
        }
        const double s = bleu(a, b);
        REQUIRE(s >= 0.0);
        REQUIRE(s <= 1.0 + 1e-12);
        if (!a.empty()) REQUIRE(rouge_n(a, a, 1).f1 == doctest::Approx(1.0));
        // LCS is symmetric and bounded by both lengths
        REQUIRE(lcs_length(a, b) == lcs_length(b, a));
        REQUIRE(lcs_length(a, b) <= std::min(a.size(), b.size()));
    }
}

TEST_CASE("rouge and bleu are invariant under token relabeling") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::string> names(6);
        for (std::size_t i = 0; i < names.size(); ++i) names[i] = "w" + std::to_string(i);
        std::vector<std::string> perm = names;
        std::shuffle(perm.begin(), perm.end(), rng);
        std::map<std::string, std::string> m;
        for (std::size_t i = 0; i < names.size(); ++i) m[names[i]] = "t" + perm[i];
        const Tokens a = random_tokens(rng, 10, 6), b = random_tokens(rng, 10, 6);
        const Tokens ra = relabel(a, m), rb = relabel(b, m);
        REQUIRE(bleu(a, b) == bleu(ra, rb));
        REQUIRE(rouge_n(a, b, 2).f1 == rouge_n(ra, rb, 2).f1);
        REQUIRE(rouge_l(a, b).f1 == rouge_l(ra, rb).f1);
    }
}

TEST_CASE("span_prf hand case") {
    const SpanSet gold = {span("Color", 0, 2), span("Material", 3, 4), span("Size", 5, 6)};
    const SpanSet pred = {span("Color", 0, 2), span("Material", 3, 5)};
    const PRF p = span_prf(pred, gold);
    CHECK(p.precision == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(p.recall == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(p.f1 == doctest::Approx(0.4).epsilon(1e-12));
    const PRF same = span_prf(gold, gold);
    CHECK(same.precision == 1.0);
    CHECK(same.recall == 1.0);
    CHECK(same.f1 == 1.0);
    CHECK(span_prf(SpanSet{}, SpanSet{}).f1 == 0.0);
}

TEST_CASE("span_prf matching ignores the value but not the attribute") {
    AttributeSpan a = span("Color", 1, 3);
    a.value = {"bright", "yellow"};
    CHECK(span_prf({a}, {span("Color", 1, 3)}).f1 == 1.0);
    CHECK(span_prf({span("Size", 1, 3)}, {span("Color", 1, 3)}).f1 == 0.0);
}

TEST_CASE("span_prf micro-averages pooled counts") {
    const std::vector<SpanSet> gold = {{span("A", 0, 1)}, {span("A", 0, 1), span("B", 1, 2), span("C", 2, 3)}};
    const std::vector<SpanSet> pred = {{span("A", 0, 1)}, {}};
    const PRF p = span_prf(pred, gold);
    CHECK(p.precision == 1.0);
    CHECK(p.recall == doctest::Approx(0.25));
    CHECK_THROWS(span_prf(pred, std::vector<SpanSet>{}));
}

TEST_CASE("recall at k definitions") {
    CHECK(recall_at_k({0, 0, 0}, 10, 1) == 1.0);
    // gold in 3rd place
    CHECK(recall_at_k({2}, 10, 2) == 0.0);
    CHECK(recall_at_k({2}, 10, 5) == 1.0);
    CHECK_THROWS(recall_at_k({0}, 10, 11));
    CHECK_THROWS(recall_at_k({0}, 10, 0));
    CHECK_THROWS(recall_at_k({}, 10, 1));
    CHECK_THROWS(recall_at_k({10}, 10, 1));
    CHECK(gold_rank({4, 2, 0, 1, 3}, 0) == 2);
}

TEST_CASE("recall at k is monotone in k") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> ranks(kpt::testing::random_size(rng, 1, 50));
        for (auto& r : ranks) r = kpt::testing::random_size(rng, 0, 9);
        double prev = 0.0;
        for (std::size_t k = 1; k <= 10; ++k) {
            const double v = recall_at_k(ranks, 10, k);
            REQUIRE(v >= prev);
            prev = v;
        }
        CHECK(prev == 1.0);
    }
}

TEST_CASE("random ranking gives R10@1 near 0.1") {
    std::mt19937_64 rng(2024);
    std::vector<std::size_t> ranks(10000);
    for (auto& r : ranks) {
        std::vector<std::size_t> perm(10);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        r = gold_rank(perm, 0);
    }
    CHECK(std::abs(recall_at_k(ranks, 10, 1) - 0.1) <= 0.01);
}

TEST_CASE("PRF from counts") {
    const PRF p = PRF::from_counts(3, 4, 6);
    CHECK(p.precision == 0.75);
    CHECK(p.recall == 0.5);
    CHECK(p.f1 == doctest::Approx(0.6));
    const PRF z = PRF::from_counts(0, 0, 0);
    CHECK(z.f1 == 0.0);
}
