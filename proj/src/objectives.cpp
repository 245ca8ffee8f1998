#include "kpt/objectives.hpp"

#include <algorithm>
#include <stdexcept>

#include "kpt/ops.hpp"

namespace kpt {

const char* objective_name(Objective objective) {
    switch (objective) {
        case Objective::kmlm: return "kmlm";
        case Objective::kms2s: return "kms2s";
        case Objective::peabd: return "peabd";
        case Objective::pecc: return "pecc";
        case Objective::peasg: return "peasg";
    }
    return "?";
}

Objective parse_objective(const std::string& name) {
    for (Objective o : kAllObjectives) {
        if (name == objective_name(o)) return o;
    }
    throw std::invalid_argument("unknown objective '" + name + "'");
}

ObjectiveSet all_objectives() { return ObjectiveSet(kAllObjectives.begin(), kAllObjectives.end()); }

std::size_t mask_budget(std::size_t content_len) {
    return std::max<std::size_t>(1, (15 * content_len + 50) / 100);
}

std::size_t span_budget(std::size_t content_len) {
    return std::max<std::size_t>(1, (30 * content_len + 50) / 100);
}

namespace {
void require_content(const FlatDocument& flat) {
    if (flat.tokens.size() < 2) throw std::invalid_argument("document has no content tokens");
    if (flat.knowledge_mask.size() != flat.tokens.size()) {
        throw std::invalid_argument("knowledge mask does not align with tokens");
    }
}
}  // namespace

MaskedInstance kmlm_mask(const FlatDocument& flat, std::size_t random_token_limit, std::mt19937_64& rng) {
    require_content(flat);
    if (random_token_limit <= static_cast<std::size_t>(kNumSpecialTokens)) {
        throw std::invalid_argument("kmlm_mask: vocabulary has no non-special tokens");
    }
    const std::size_t m = flat.content_length();
    const std::size_t budget = mask_budget(m);
    std::vector<std::size_t> knowledge, plain;
    for (std::size_t p = 1; p <= m; ++p) (flat.knowledge_mask[p] ? knowledge : plain).push_back(p);

    std::vector<std::size_t> chosen;
    if (knowledge.size() >= budget) {
        std::sample(knowledge.begin(), knowledge.end(), std::back_inserter(chosen), budget, rng);
    } else {
        chosen = knowledge;
        std::sample(plain.begin(), plain.end(), std::back_inserter(chosen), budget - knowledge.size(), rng);
    }
    std::sort(chosen.begin(), chosen.end());

    MaskedInstance inst;
    inst.mode = MaskedInstance::Mode::kmlm;
    inst.corrupted = flat.tokens;
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<int> random_id(kNumSpecialTokens, static_cast<int>(random_token_limit) - 1);
    for (std::size_t p : chosen) {
        inst.targets.emplace_back(p, flat.tokens[p]);
        const double u = coin(rng);
        if (u < 0.8) {
            inst.corrupted[p] = kMaskId;
            inst.corruption.push_back(Corruption::mask);
        } else if (u < 0.9) {
            inst.corrupted[p] = random_id(rng);
            inst.corruption.push_back(Corruption::random_token);
        } else {
            inst.corruption.push_back(Corruption::keep);
        }
    }
    return inst;
}

std::vector<std::size_t> window_coverage(const std::vector<std::uint8_t>& knowledge_mask, std::size_t len) {
    const std::size_t m = knowledge_mask.size() - 1;
    if (len == 0 || len > m) throw std::invalid_argument("window_coverage: invalid window length");
    std::vector<std::size_t> prefix(m + 2, 0);
    for (std::size_t p = 1; p <= m; ++p) prefix[p + 1] = prefix[p] + (knowledge_mask[p] ? 1 : 0);
    std::vector<std::size_t> coverage;
    for (std::size_t u = 1; u + len - 1 <= m; ++u) coverage.push_back(prefix[u + len] - prefix[u]);
    return coverage;
}

MaskedInstance kms2s_mask(const FlatDocument& flat, std::mt19937_64& rng) {
    require_content(flat);
    const std::size_t m = flat.content_length();
    const std::size_t len = span_budget(m);
    const auto coverage = window_coverage(flat.knowledge_mask, len);
    const std::size_t best = *std::max_element(coverage.begin(), coverage.end());
    std::vector<std::size_t> starts;
    for (std::size_t i = 0; i < coverage.size(); ++i) {
        if (coverage[i] == best) starts.push_back(i + 1);
    }
    std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
    const std::size_t u = starts[pick(rng)];

    MaskedInstance inst;
    inst.mode = MaskedInstance::Mode::kms2s;
    inst.corrupted = flat.tokens;
    inst.span_start = u;
    inst.span_end = u + len - 1;
    inst.decoder_input.push_back(kBosId);
    for (std::size_t p = u; p <= inst.span_end; ++p) {
        inst.span_ids.push_back(flat.tokens[p]);
        inst.corrupted[p] = kMaskId;
    }
    inst.decoder_input.insert(inst.decoder_input.end(), inst.span_ids.begin(), inst.span_ids.end() - 1);
    return inst;
}

Tensor kmlm_loss(TransformerModel& model, const MaskedInstance& instance) {
    if (instance.mode != MaskedInstance::Mode::kmlm) throw std::invalid_argument("kmlm_loss: not a kmlm instance");
    if (instance.targets.empty()) throw std::invalid_argument("kmlm_loss: instance has no targets");
    Tensor enc = model.encode(instance.corrupted);
    std::vector<int> rows, targets;
    for (const auto& [pos, id] : instance.targets) {
        rows.push_back(static_cast<int>(pos));
        targets.push_back(id);
    }
    Tensor logits = model.project(ops::gather_rows(enc, rows));
    return ops::cross_entropy_logits(logits, targets);
}

Tensor kms2s_loss(TransformerModel& model, const MaskedInstance& instance) {
    if (instance.mode != MaskedInstance::Mode::kms2s) throw std::invalid_argument("kms2s_loss: not a kms2s instance");
    if (instance.span_ids.empty()) throw std::invalid_argument("kms2s_loss: empty span");
    Tensor enc = model.encode(instance.corrupted);
    Tensor logits = model.decode(enc, instance.corrupted, instance.decoder_input);
    return ops::cross_entropy_logits(logits, instance.span_ids);
}

namespace {
Tensor peabd_from_states(TransformerModel& model, const Tensor& enc, const FlatDocument& flat) {
    if (flat.boundary_labels.size() != flat.tokens.size()) {
        throw std::invalid_argument("peabd_loss: boundary labels do not align with tokens");
    }
    Tensor content = ops::slice_rows(enc, 1, flat.content_length());
    std::vector<int> labels(flat.boundary_labels.begin() + 1, flat.boundary_labels.end());
    return ops::cross_entropy_logits(model.boundary_head()(content), labels);
}

Tensor pecc_from_states(TransformerModel& model, const Tensor& enc, const FlatDocument& flat) {
    if (flat.category < 0 || static_cast<std::size_t>(flat.category) >= model.config().n_categories) {
        throw std::out_of_range("pecc_loss: category " + std::to_string(flat.category) + " out of range");
    }
    Tensor cls = ops::reshape(model.cls_state(enc), {1, model.config().d_model});
    const std::vector<int> target = {flat.category};
    return ops::cross_entropy_logits(model.category_head()(cls), target);
}
}  // namespace

Tensor peabd_loss(TransformerModel& model, const FlatDocument& flat) {
    require_content(flat);
    return peabd_from_states(model, model.encode(flat.tokens), flat);
}

Tensor pecc_loss(TransformerModel& model, const FlatDocument& flat) {
    require_content(flat);
    return pecc_from_states(model, model.encode(flat.tokens), flat);
}

int predict_category(TransformerModel& model, std::span<const int> tokens) {
    NoGradGuard no_grad;
    Tensor cls = ops::reshape(model.cls_state(model.encode(tokens)), {1, model.config().d_model});
    Tensor logits = model.category_head()(cls);
    const auto v = logits.data();
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

Tensor peasg_loss(TransformerModel& model, const std::vector<int>& description,
                  const std::vector<int>& summary) {
    if (description.empty() || summary.empty()) {
        throw std::invalid_argument("peasg_loss: description and summary must be non-empty");
    }
    std::vector<int> src = {kClsId};
    src.insert(src.end(), description.begin(), description.end());
    std::vector<int> dec = {kBosId};
    dec.insert(dec.end(), summary.begin(), summary.end());
    std::vector<int> tgt = summary;
    tgt.push_back(kEosId);
    Tensor enc = model.encode(src);
    return ops::cross_entropy_logits(model.decode(enc, src, dec), tgt);
}

Tensor peasg_loss(TransformerModel& model, const AspectSection& aspect, const Vocab& vocab) {
    return peasg_loss(model, vocab.encode(aspect.description), vocab.encode(aspect.summary));
}

JointInstances build_joint_instances(const FlatDocument& flat, std::size_t random_token_limit,
                                     std::mt19937_64& rng) {
    JointInstances inst;
    inst.flat = flat;
    inst.kmlm = kmlm_mask(flat, random_token_limit, rng);
    inst.kms2s = kms2s_mask(flat, rng);
    if (flat.aspect_offsets.empty()) throw std::invalid_argument("document has no aspects");
    std::uniform_int_distribution<std::size_t> pick(0, flat.aspect_offsets.size() - 1);
    inst.peasg_aspect = pick(rng);
    return inst;
}

std::optional<double> LossBreakdown::get(Objective objective) const {
    switch (objective) {
        case Objective::kmlm: return kmlm;
        case Objective::kms2s: return kms2s;
        case Objective::peabd: return peabd;
        case Objective::pecc: return pecc;
        case Objective::peasg: return peasg;
    }
    return std::nullopt;
}

std::optional<double>& LossBreakdown::slot(Objective objective) {
    switch (objective) {
        case Objective::kmlm: return kmlm;
        case Objective::kms2s: return kms2s;
        case Objective::peabd: return peabd;
        case Objective::pecc: return pecc;
        case Objective::peasg: break;
    }
    return peasg;
}

LossBreakdown joint_loss(TransformerModel& model, const JointInstances& instances,
                         const ObjectiveSet& enabled) {
    if (enabled.empty()) throw std::invalid_argument("joint_loss: no objective enabled");
    LossBreakdown out;
    out.enabled = enabled;
    std::vector<Tensor> parts;
    auto take = [&](std::optional<double>& slot, Tensor loss) {
        slot = loss.item();
        parts.push_back(std::move(loss));
    };
    if (enabled.count(Objective::kmlm)) take(out.kmlm, kmlm_loss(model, instances.kmlm));
    if (enabled.count(Objective::kms2s)) take(out.kms2s, kms2s_loss(model, instances.kms2s));
    if (enabled.count(Objective::peabd) || enabled.count(Objective::pecc)) {
        Tensor enc = model.encode(instances.flat.tokens);
        if (enabled.count(Objective::peabd)) take(out.peabd, peabd_from_states(model, enc, instances.flat));
        if (enabled.count(Objective::pecc)) take(out.pecc, pecc_from_states(model, enc, instances.flat));
    }
    if (enabled.count(Objective::peasg)) {
        const auto& flat = instances.flat;
        const auto [begin, end] = flat.aspect_offsets.at(instances.peasg_aspect);
        std::vector<int> description(flat.tokens.begin() + static_cast<std::ptrdiff_t>(begin),
                                     flat.tokens.begin() + static_cast<std::ptrdiff_t>(end));
        take(out.peasg, peasg_loss(model, description, flat.summaries.at(instances.peasg_aspect)));
    }
    out.total_tensor = ops::add_scalars(parts);
    out.total = 0.0;
    for (Objective o : kAllObjectives) out.total += out.get(o).value_or(0.0);
    return out;
}

LossBreakdown joint_loss(TransformerModel& model, const FlatDocument& flat, std::size_t random_token_limit,
                         std::mt19937_64& rng, const ObjectiveSet& enabled) {
    return joint_loss(model, build_joint_instances(flat, random_token_limit, rng), enabled);
}

}  // namespace kpt
