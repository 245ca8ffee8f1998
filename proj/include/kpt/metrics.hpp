#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace kpt {

struct PRF {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    static PRF from_counts(std::size_t overlap, std::size_t predicted, std::size_t gold);
};

/// A typed attribute value: tokens [start, end) of one input.
struct AttributeSpan {
    std::string attribute;
    std::size_t start = 0;
    std::size_t end = 0;
    std::vector<std::string> value;

    /// Spans match on (attribute, start, end); the value is informational.
    bool same_span(const AttributeSpan& other) const {
        return attribute == other.attribute && start == other.start && end == other.end;
    }
};

using SpanSet = std::vector<AttributeSpan>;

/// Exact-match span P/R/F1 for one example.
PRF span_prf(const SpanSet& predicted, const SpanSet& gold);
/// Micro-averaged over examples: counts are pooled before dividing.
PRF span_prf(const std::vector<SpanSet>& predicted, const std::vector<SpanSet>& gold);

using Tokens = std::vector<std::string>;

/// Clipped n-gram overlap.
PRF rouge_n(const Tokens& candidate, const Tokens& reference, std::size_t n);
/// Longest-common-subsequence overlap.
PRF rouge_l(const Tokens& candidate, const Tokens& reference);
std::size_t lcs_length(const Tokens& a, const Tokens& b);

/// Reported name of the BLEU variant below.
inline constexpr const char* kBleuName = "bleu4-smooth1";

/// Corpus BLEU: clipped n-gram precisions pooled over all pairs, geometric
/// mean over n = 1..max_n, times min(1, exp(1 - r/c)). For n >= 2 a zero
/// matched count becomes 1 / (total + 1).
double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                   std::size_t max_n = 4);
double bleu(const Tokens& candidate, const Tokens& reference, std::size_t max_n = 4);

/// Fraction of examples whose gold candidate lies in the top k. `ranks` holds
/// each example's 0-based gold position.
double recall_at_k(const std::vector<std::size_t>& ranks, std::size_t n, std::size_t k);
/// Gold position within a ranked permutation of candidate indices.
std::size_t gold_rank(const std::vector<std::size_t>& permutation, std::size_t gold_index);

Tokens split_whitespace(const std::string& text);

}  // namespace kpt
