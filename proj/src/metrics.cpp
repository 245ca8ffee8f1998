#include "kpt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace kpt {

PRF PRF::from_counts(std::size_t overlap, std::size_t predicted, std::size_t gold) {
    PRF out;
    out.precision = predicted ? static_cast<double>(overlap) / static_cast<double>(predicted) : 0.0;
    out.recall = gold ? static_cast<double>(overlap) / static_cast<double>(gold) : 0.0;
    const double s = out.precision + out.recall;
    out.f1 = s > 0.0 ? 2.0 * out.precision * out.recall / s : 0.0;
    return out;
}

namespace {

// Matched predicted spans; each gold span can be claimed once.
std::size_t span_overlap(const SpanSet& predicted, const SpanSet& gold) {
    std::vector<bool> used(gold.size(), false);
    std::size_t hits = 0;
    for (const auto& p : predicted) {
        for (std::size_t i = 0; i < gold.size(); ++i) {
            if (!used[i] && p.same_span(gold[i])) {
                used[i] = true;
                ++hits;
                break;
            }
        }
    }
    return hits;
}

using NgramCounts = std::map<Tokens, std::size_t>;

NgramCounts ngrams(const Tokens& tokens, std::size_t n) {
    NgramCounts out;
    if (tokens.size() < n) return out;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++out[Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                     tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return out;
}

std::size_t clipped_overlap(const NgramCounts& cand, const NgramCounts& ref) {
    std::size_t hits = 0;
    for (const auto& [gram, count] : cand) {
        auto it = ref.find(gram);
        if (it != ref.end()) hits += std::min(count, it->second);
    }
    return hits;
}

std::size_t ngram_total(const Tokens& tokens, std::size_t n) {
    return tokens.size() >= n ? tokens.size() - n + 1 : 0;
}

}  // namespace

PRF span_prf(const SpanSet& predicted, const SpanSet& gold) {
    return PRF::from_counts(span_overlap(predicted, gold), predicted.size(), gold.size());
}

PRF span_prf(const std::vector<SpanSet>& predicted, const std::vector<SpanSet>& gold) {
    if (predicted.size() != gold.size()) {
        throw std::invalid_argument("span_prf: " + std::to_string(predicted.size()) + " predictions for " +
                                    std::to_string(gold.size()) + " gold examples");
    }
    std::size_t hits = 0, n_pred = 0, n_gold = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        hits += span_overlap(predicted[i], gold[i]);
        n_pred += predicted[i].size();
        n_gold += gold[i].size();
    }
    return PRF::from_counts(hits, n_pred, n_gold);
}

PRF rouge_n(const Tokens& candidate, const Tokens& reference, std::size_t n) {
    if (n == 0) throw std::invalid_argument("rouge_n: n must be >= 1");
    const std::size_t hits = clipped_overlap(ngrams(candidate, n), ngrams(reference, n));
    return PRF::from_counts(hits, ngram_total(candidate, n), ngram_total(reference, n));
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

PRF rouge_l(const Tokens& candidate, const Tokens& reference) {
    return PRF::from_counts(lcs_length(candidate, reference), candidate.size(), reference.size());
}

double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                   std::size_t max_n) {
    if (candidates.size() != references.size()) {
        throw std::invalid_argument("corpus_bleu: candidate and reference counts differ");
    }
    if (max_n == 0) throw std::invalid_argument("corpus_bleu: max_n must be >= 1");
    std::size_t c = 0, r = 0;
    std::vector<std::size_t> hits(max_n + 1, 0), totals(max_n + 1, 0);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        c += candidates[i].size();
        r += references[i].size();
        for (std::size_t n = 1; n <= max_n; ++n) {
            hits[n] += clipped_overlap(ngrams(candidates[i], n), ngrams(references[i], n));
            totals[n] += ngram_total(candidates[i], n);
        }
    }
    if (c == 0 || hits[1] == 0) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        double p;
        if (hits[n] > 0) {
            p = static_cast<double>(hits[n]) / static_cast<double>(totals[n]);
        } else {
            p = 1.0 / static_cast<double>(totals[n] + 1);
        }
        log_sum += std::log(p);
    }
    const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)));
    return bp * std::exp(log_sum / static_cast<double>(max_n));
}

double bleu(const Tokens& candidate, const Tokens& reference, std::size_t max_n) {
    return corpus_bleu({candidate}, {reference}, max_n);
}

double recall_at_k(const std::vector<std::size_t>& ranks, std::size_t n, std::size_t k) {
    if (k == 0 || k > n) {
        throw std::invalid_argument("recall_at_k: k=" + std::to_string(k) + " must lie in [1, n=" +
                                    std::to_string(n) + "]");
    }
    if (ranks.empty()) throw std::invalid_argument("recall_at_k: no examples");
    std::size_t hits = 0;
    for (std::size_t r : ranks) {
        if (r >= n) throw std::invalid_argument("recall_at_k: rank " + std::to_string(r) + " outside n");
        if (r < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

std::size_t gold_rank(const std::vector<std::size_t>& permutation, std::size_t gold_index) {
    auto it = std::find(permutation.begin(), permutation.end(), gold_index);
    if (it == permutation.end()) throw std::invalid_argument("gold_rank: gold index missing from ranking");
    return static_cast<std::size_t>(it - permutation.begin());
}

Tokens split_whitespace(const std::string& text) {
    std::istringstream in(text);
    Tokens out;
    for (std::string t; in >> t;) out.push_back(t);
    return out;
}

}  // namespace kpt
