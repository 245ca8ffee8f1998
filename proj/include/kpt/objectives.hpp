#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kpt/corpus.hpp"
#include "kpt/model.hpp"

namespace kpt {

enum class Objective { kmlm, kms2s, peabd, pecc, peasg };

inline constexpr std::array<Objective, 5> kAllObjectives = {
    Objective::kmlm, Objective::kms2s, Objective::peabd, Objective::pecc, Objective::peasg};

using ObjectiveSet = std::set<Objective>;

const char* objective_name(Objective objective);
Objective parse_objective(const std::string& name);
ObjectiveSet all_objectives();

/// 15% of the content length, round-half-up, at least 1.
std::size_t mask_budget(std::size_t content_len);
/// 30% of the content length, round-half-up, at least 1.
std::size_t span_budget(std::size_t content_len);

enum class Corruption { mask, random_token, keep };

struct MaskedInstance {
    enum class Mode { kmlm, kms2s };
    Mode mode = Mode::kmlm;
    std::vector<int> corrupted;

    // kmlm: sorted distinct positions and their original ids
    std::vector<std::pair<std::size_t, int>> targets;
    std::vector<Corruption> corruption;  // parallel to targets

    // kms2s: inclusive window [span_start, span_end]
    std::size_t span_start = 0;
    std::size_t span_end = 0;
    std::vector<int> span_ids;
    std::vector<int> decoder_input;  // [BOS] + span_ids without its last token
};

/// Knowledge-first token masking. Random replacements draw uniformly from
/// the non-special ids [7, random_token_limit).
MaskedInstance kmlm_mask(const FlatDocument& flat, std::size_t random_token_limit, std::mt19937_64& rng);

/// Masks the contiguous content window of span_budget(M) tokens covering the
/// most knowledge tokens; ties are broken uniformly with `rng`.
MaskedInstance kms2s_mask(const FlatDocument& flat, std::mt19937_64& rng);

/// Knowledge tokens covered by every window start in [1, M - len + 1].
std::vector<std::size_t> window_coverage(const std::vector<std::uint8_t>& knowledge_mask, std::size_t len);

Tensor kmlm_loss(TransformerModel& model, const MaskedInstance& instance);
Tensor kms2s_loss(TransformerModel& model, const MaskedInstance& instance);
Tensor peabd_loss(TransformerModel& model, const FlatDocument& flat);
Tensor pecc_loss(TransformerModel& model, const FlatDocument& flat);
/// Argmax of the category head on the uncorrupted document (lowest id on ties).
int predict_category(TransformerModel& model, std::span<const int> tokens);
/// Encoder input [CLS] + description; decoder [BOS] + summary; targets summary + [EOS].
Tensor peasg_loss(TransformerModel& model, const std::vector<int>& description,
                  const std::vector<int>& summary);
Tensor peasg_loss(TransformerModel& model, const AspectSection& aspect, const Vocab& vocab);

/// Everything one joint step needs from one document.
struct JointInstances {
    FlatDocument flat;
    MaskedInstance kmlm;
    MaskedInstance kms2s;
    std::size_t peasg_aspect = 0;
};

JointInstances build_joint_instances(const FlatDocument& flat, std::size_t random_token_limit,
                                     std::mt19937_64& rng);

struct LossBreakdown {
    std::optional<double> kmlm, kms2s, peabd, pecc, peasg;
    double total = 0.0;
    ObjectiveSet enabled;
    Tensor total_tensor;  // differentiable sum, for backward

    std::optional<double> get(Objective objective) const;
    std::optional<double>& slot(Objective objective);
};

LossBreakdown joint_loss(TransformerModel& model, const JointInstances& instances,
                         const ObjectiveSet& enabled);
LossBreakdown joint_loss(TransformerModel& model, const FlatDocument& flat, std::size_t random_token_limit,
                         std::mt19937_64& rng, const ObjectiveSet& enabled);

}  // namespace kpt
