#include "kpt/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "kpt/ops.hpp"

namespace kpt {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// BIO labels
// ---------------------------------------------------------------------------

BioLabelSet::BioLabelSet(std::vector<std::string> attributes) : attributes_(std::move(attributes)) {
    labels_.push_back("O");
    for (const auto& a : attributes_) {
        if (a.empty() || a.find(',') != std::string::npos) {
            throw std::invalid_argument("invalid attribute name '" + a + "'");
        }
        labels_.push_back(a + "-B");
        labels_.push_back(a + "-I");
    }
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        if (!index_.emplace(labels_[i], static_cast<int>(i)).second) {
            throw std::invalid_argument("duplicate label '" + labels_[i] + "'");
        }
    }
}

namespace {
// Splits "<attr>-B" / "<attr>-I"; returns false for "O".
bool split_label(const std::string& label, std::string& attribute, char& kind) {
    if (label == "O") return false;
    const auto dash = label.rfind('-');
    if (dash == std::string::npos || dash == 0 || dash + 2 != label.size() ||
        (label[dash + 1] != 'B' && label[dash + 1] != 'I')) {
        throw std::invalid_argument("malformed BIO label '" + label + "'");
    }
    attribute = label.substr(0, dash);
    kind = label[dash + 1];
    return true;
}
}  // namespace

BioLabelSet BioLabelSet::from_labels(const std::vector<std::vector<std::string>>& label_sequences) {
    std::set<std::string> attrs;
    for (const auto& seq : label_sequences) {
        for (const auto& l : seq) {
            std::string a;
            char k;
            if (split_label(l, a, k)) attrs.insert(a);
        }
    }
    return BioLabelSet(std::vector<std::string>(attrs.begin(), attrs.end()));
}

int BioLabelSet::id(const std::string& label) const {
    auto it = index_.find(label);
    if (it == index_.end()) throw std::invalid_argument("unknown BIO label '" + label + "'");
    return it->second;
}

const std::string& BioLabelSet::label(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= labels_.size()) {
        throw std::out_of_range("BIO label id " + std::to_string(id) + " out of range");
    }
    return labels_[static_cast<std::size_t>(id)];
}

std::vector<int> BioLabelSet::encode(const std::vector<std::string>& labels) const {
    std::vector<int> out;
    out.reserve(labels.size());
    for (const auto& l : labels) out.push_back(id(l));
    return out;
}

std::vector<std::string> BioLabelSet::decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(label(i));
    return out;
}

std::string BioLabelSet::serialize() const {
    std::string s;
    for (const auto& a : attributes_) s += (s.empty() ? "" : ",") + a;
    return s;
}

BioLabelSet BioLabelSet::deserialize(const std::string& text) {
    std::vector<std::string> attrs;
    std::stringstream ss(text);
    for (std::string a; std::getline(ss, a, ',');) attrs.push_back(a);
    return BioLabelSet(std::move(attrs));
}

std::vector<std::string> encode_bio(const SpanSet& spans, std::size_t n_tokens) {
    std::vector<std::string> labels(n_tokens, "O");
    std::vector<bool> taken(n_tokens, false);
    for (const auto& s : spans) {
        if (!(s.start < s.end && s.end <= n_tokens)) {
            throw std::invalid_argument("encode_bio: span [" + std::to_string(s.start) + "," +
                                        std::to_string(s.end) + ") out of bounds");
        }
        for (std::size_t i = s.start; i < s.end; ++i) {
            if (taken[i]) throw std::invalid_argument("encode_bio: overlapping spans at token " + std::to_string(i));
            taken[i] = true;
            labels[i] = s.attribute + (i == s.start ? "-B" : "-I");
        }
    }
    return labels;
}

SpanSet decode_bio(const std::vector<std::string>& labels, const TokenList& tokens) {
    if (!tokens.empty() && tokens.size() != labels.size()) {
        throw std::invalid_argument("decode_bio: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(tokens.size()) + " tokens");
    }
    SpanSet spans;
    std::optional<AttributeSpan> open;
    auto close = [&] {
        if (!open) return;
        if (!tokens.empty()) {
            open->value.assign(tokens.begin() + static_cast<std::ptrdiff_t>(open->start),
                               tokens.begin() + static_cast<std::ptrdiff_t>(open->end));
        }
        spans.push_back(std::move(*open));
        open.reset();
    };
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::string attr;
        char kind = 'O';
        if (!split_label(labels[i], attr, kind)) {
            close();
            continue;
        }
        if (kind == 'I' && open && open->attribute == attr) {
            open->end = i + 1;
            continue;
        }
        close();
        open = AttributeSpan{attr, i, i + 1, {}};
    }
    close();
    return spans;
}

// ---------------------------------------------------------------------------
// Task datasets
// ---------------------------------------------------------------------------

namespace {

template <typename Fn>
void read_jsonl(const std::filesystem::path& path, Fn&& on_line) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            on_line(json::parse(line), line_no);
        } catch (const json::exception& e) {
            throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
        }
    }
    if (line_no == 0) throw CorpusError(path.string() + ": empty file");
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorpusError("cannot write " + path.string());
    return out;
}

std::string id_or_line(const json& j, std::size_t line_no) {
    return j.contains("id") ? j.at("id").get<std::string>() : "line-" + std::to_string(line_no);
}

}  // namespace

std::vector<KbcExample> load_kbc(const std::filesystem::path& path) {
    std::vector<KbcExample> out;
    for (const auto& doc : load_corpus(path)) {
        for (std::size_t a = 0; a < doc.aspects.size(); ++a) {
            const auto& asp = doc.aspects[a];
            if (asp.bio_labels.empty()) continue;
            std::string id = doc.aspects.size() == 1 ? doc.id : doc.id + "#" + std::to_string(a);
            out.push_back({std::move(id), asp.description, asp.bio_labels});
        }
    }
    if (out.empty()) throw CorpusError(path.string() + ": no aspect carries bio_labels");
    return out;
}

void save_kbc(const std::filesystem::path& path, const std::vector<KbcExample>& examples) {
    Corpus docs;
    for (const auto& ex : examples) {
        AspectSection asp;
        asp.description = ex.tokens;
        asp.bio_labels = ex.labels;
        for (const auto& s : decode_bio(ex.labels, ex.tokens)) {
            asp.spans.push_back({s.start, s.end, SpanKind::kb_attribute});
            asp.summary.insert(asp.summary.end(), s.value.begin(), s.value.end());
        }
        if (asp.summary.empty()) asp.summary = ex.tokens;
        docs.push_back({ex.id, 0, {std::move(asp)}});
    }
    save_corpus(path, docs);
}

std::vector<Seq2SeqPair> load_pairs(const std::filesystem::path& path) {
    std::vector<Seq2SeqPair> out;
    read_jsonl(path, [&](const json& j, std::size_t line_no) {
        Seq2SeqPair p{id_or_line(j, line_no), j.at("source").get<TokenList>(), j.at("target").get<TokenList>()};
        if (p.source.empty() || p.target.empty()) {
            throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": pair '" + p.id +
                              "' has an empty source or target");
        }
        out.push_back(std::move(p));
    });
    return out;
}

void save_pairs(const std::filesystem::path& path, const std::vector<Seq2SeqPair>& pairs) {
    auto out = open_out(path);
    for (const auto& p : pairs) out << json{{"id", p.id}, {"source", p.source}, {"target", p.target}}.dump() << '\n';
}

std::vector<DialogueExample> load_dialogues(const std::filesystem::path& path) {
    std::vector<DialogueExample> out;
    read_jsonl(path, [&](const json& j, std::size_t line_no) {
        DialogueExample d;
        d.id = id_or_line(j, line_no);
        d.turns = j.at("turns").get<std::vector<TokenList>>();
        d.response = j.at("response").get<TokenList>();
        if (j.contains("negatives")) d.negatives = j.at("negatives").get<std::vector<TokenList>>();
        if (d.turns.empty()) {
            throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": dialogue '" + d.id + "' has no turns");
        }
        out.push_back(std::move(d));
    });
    return out;
}

void save_dialogues(const std::filesystem::path& path, const std::vector<DialogueExample>& dialogues) {
    auto out = open_out(path);
    for (const auto& d : dialogues) {
        json j{{"id", d.id}, {"turns", d.turns}, {"response", d.response}};
        if (!d.negatives.empty()) j["negatives"] = d.negatives;
        out << j.dump() << '\n';
    }
}

std::vector<TokenList> token_streams(const std::vector<KbcExample>& examples) {
    std::vector<TokenList> out;
    for (const auto& e : examples) out.push_back(e.tokens);
    return out;
}

std::vector<TokenList> token_streams(const std::vector<Seq2SeqPair>& pairs) {
    std::vector<TokenList> out;
    for (const auto& p : pairs) {
        out.push_back(p.source);
        out.push_back(p.target);
    }
    return out;
}

std::vector<TokenList> token_streams(const std::vector<DialogueExample>& dialogues) {
    std::vector<TokenList> out;
    for (const auto& d : dialogues) {
        out.insert(out.end(), d.turns.begin(), d.turns.end());
        out.push_back(d.response);
        out.insert(out.end(), d.negatives.begin(), d.negatives.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic task data
// ---------------------------------------------------------------------------

namespace {

struct AttributeLexicon {
    std::string name;
    std::vector<std::string> values;  // space-separated multi-token values allowed
};

const std::vector<AttributeLexicon>& kbc_lexicon() {
    static const std::vector<AttributeLexicon> lex = {
        {"Color", {"red", "navy blue", "bright yellow", "dark green", "white", "light pink", "black", "sky blue"}},
        {"Material", {"cotton", "leather", "stainless steel", "nylon", "genuine wool", "silk", "bamboo fiber"}},
        {"Size", {"small", "medium", "large", "extra large", "xl"}},
        {"Brand", {"acme", "zento", "lumio", "north peak", "ravel"}},
        {"Style", {"vintage", "casual", "sporty", "classic", "minimalist"}},
        {"Pattern", {"striped", "plaid", "floral", "polka dot", "solid"}},
        {"Season", {"summer", "winter", "all season", "spring"}},
        {"Fit", {"slim fit", "loose fit", "regular fit"}},
    };
    return lex;
}

// "{Attr}" slots are filled from the lexicon, "{item}" with a product noun.
const std::vector<std::string>& kbc_templates() {
    static const std::vector<std::string> t = {
        "A {Color} {item}",
        "A {Color} {Material} {item}",
        "{Brand} {Style} {item} in {Color}",
        "this {item} is made of {Material} and comes in {Size}",
        "{Pattern} {item} for {Season} with a {Fit}",
        "new {Brand} {item} , {Size} size , {Color}",
        "a {Fit} {Style} {item} made from {Material}",
        "perfect {Season} {item} with {Pattern} print",
        "{Color} {Pattern} {item} by {Brand}",
        "our {Size} {item} is {Style} and {Fit}",
    };
    return t;
}

const std::vector<std::string> kItems = {"collar", "leash", "shirt", "jacket", "bag", "scarf", "hat", "sweater"};

std::size_t pick(std::mt19937_64& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace

std::vector<KbcExample> generate_kbc(std::uint64_t seed, std::size_t n) {
    std::mt19937_64 rng(seed);
    const auto& lex = kbc_lexicon();
    std::vector<KbcExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string& tmpl = kbc_templates()[pick(rng, kbc_templates().size())];
        KbcExample ex;
        ex.id = "kbc-" + std::to_string(i);
        SpanSet spans;
        for (const auto& word : split_whitespace(tmpl)) {
            if (word == "{item}") {
                ex.tokens.push_back(kItems[pick(rng, kItems.size())]);
                continue;
            }
            auto it = std::find_if(lex.begin(), lex.end(), [&](const auto& a) { return "{" + a.name + "}" == word; });
            if (it == lex.end()) {
                ex.tokens.push_back(word);
                continue;
            }
            const auto value = split_whitespace(it->values[pick(rng, it->values.size())]);
            spans.push_back({it->name, ex.tokens.size(), ex.tokens.size() + value.size(), value});
            ex.tokens.insert(ex.tokens.end(), value.begin(), value.end());
        }
        ex.labels = encode_bio(spans, ex.tokens.size());
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<Seq2SeqPair> generate_summaries(std::uint64_t seed, std::size_t n) {
    std::vector<Seq2SeqPair> out;
    if (n == 0) return out;
    // Every document has at least two aspects.
    const Corpus docs = generate_synthetic(seed, (n + 1) / 2);
    for (const auto& doc : docs) {
        for (std::size_t a = 0; a < doc.aspects.size() && out.size() < n; ++a) {
            out.push_back({doc.id + "#" + std::to_string(a), doc.aspects[a].description, doc.aspects[a].summary});
        }
    }
    return out;
}

std::vector<DialogueExample> generate_dialogues(std::uint64_t seed, std::size_t n, std::size_t n_negatives) {
    constexpr std::size_t kMarkers = 12;
    constexpr std::size_t kFiller = 30;
    std::mt19937_64 rng(seed);
    auto filler = [&](std::size_t lo, std::size_t hi) {
        TokenList t(lo + pick(rng, hi - lo + 1));
        for (auto& w : t) w = "w" + std::to_string(pick(rng, kFiller));
        return t;
    };
    auto with_marker = [&](TokenList t, std::size_t marker) {
        t.insert(t.begin() + static_cast<std::ptrdiff_t>(pick(rng, t.size() + 1)), "m" + std::to_string(marker));
        return t;
    };
    std::vector<DialogueExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        DialogueExample d;
        d.id = "dlg-" + std::to_string(i);
        const std::size_t marker = pick(rng, kMarkers);
        const std::size_t n_turns = 2 + pick(rng, 2);
        const std::size_t marked_turn = pick(rng, n_turns);
        for (std::size_t t = 0; t < n_turns; ++t) {
            TokenList turn = filler(3, 6);
            d.turns.push_back(t == marked_turn ? with_marker(std::move(turn), marker) : std::move(turn));
        }
        d.response = with_marker(filler(3, 5), marker);
        for (std::size_t k = 0; k < n_negatives; ++k) {
            const std::size_t other = (marker + 1 + pick(rng, kMarkers - 1)) % kMarkers;
            d.negatives.push_back(with_marker(filler(3, 5), other));
        }
        out.push_back(std::move(d));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

namespace {

// Shared loop: seeded shuffled order, accumulated micro-batches, scheduled Adam.
void run_finetune(TransformerModel& model, const NamedTensors& params, std::size_t n_examples,
                  const FinetuneConfig& config,
                  const std::function<Tensor(std::size_t, std::mt19937_64&)>& example_loss,
                  const LossCallback& on_step) {
    config.schedule.validate();
    if (n_examples == 0) throw std::invalid_argument("fine-tune: empty training set");
    if (config.accum_steps == 0) throw std::invalid_argument("fine-tune: accum_steps must be >= 1");
    OptimizerState state;
    state.hyper = config.adam;
    std::mt19937_64 order_rng(config.seed ^ 0x243f6a8885a308d3ULL);
    std::mt19937_64 sample_rng(config.seed ^ 0x13198a2e03707344ULL);
    std::vector<std::size_t> order(n_examples);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    std::size_t cursor = 0;
    const double inv_accum = 1.0 / static_cast<double>(config.accum_steps);
    model.set_training(true);
    for (std::size_t k = 1; k <= config.schedule.total_steps; ++k) {
        zero_grads(params);
        double step_loss = 0.0;
        for (std::size_t micro = 0; micro < config.accum_steps; ++micro) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), order_rng);
                cursor = 0;
            }
            Tensor loss = example_loss(order[cursor++], sample_rng);
            const double v = loss.item();
            if (!std::isfinite(v)) {
                Tape::current().clear();
                model.set_training(false);
                throw NonFiniteLoss(k - 1, "non-finite loss at step " + std::to_string(k - 1));
            }
            step_loss += v * inv_accum;
            backward(ops::scale(loss, inv_accum));
        }
        const double lr = lr_at(k, config.schedule, config.adam.peak_lr);
        adam_step(params, state, lr);
        if (on_step) on_step(k - 1, lr, step_loss);
    }
    model.set_training(false);
}

NamedTensors select_params(const TransformerModel& model, const std::function<bool(const std::string&)>& keep) {
    NamedTensors out;
    for (auto& [name, t] : model.parameters()) {
        if (keep(name)) out.emplace_back(name, t);
    }
    return out;
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

std::vector<int> with_cls(const std::vector<int>& ids) {
    std::vector<int> out = {kClsId};
    out.insert(out.end(), ids.begin(), ids.end());
    return out;
}

void check_fits(std::size_t len, const TransformerModel& model, const std::string& id, const char* what) {
    if (len > model.config().max_len) {
        throw std::invalid_argument(std::string(what) + " '" + id + "' needs " + std::to_string(len) +
                                    " positions, max_len is " + std::to_string(model.config().max_len));
    }
}

void check_vocab(const TransformerModel& model, const Vocab& vocab) {
    if (vocab.size() > model.config().vocab_size) {
        throw std::invalid_argument("vocabulary of " + std::to_string(vocab.size()) +
                                    " tokens exceeds model vocab_size " + std::to_string(model.config().vocab_size));
    }
}

}  // namespace

Tensor tagging_loss(TransformerModel& model, const std::vector<int>& token_ids, const std::vector<int>& label_ids) {
    if (token_ids.empty() || token_ids.size() != label_ids.size()) {
        throw std::invalid_argument("tagging_loss: need one label per token");
    }
    Tensor enc = model.encode(with_cls(token_ids));
    Tensor logits = model.tagging_head()(ops::slice_rows(enc, 1, token_ids.size()));
    return ops::cross_entropy_logits(logits, label_ids);
}

void finetune_tagger(TransformerModel& model, const Vocab& vocab, const BioLabelSet& labels,
                     const std::vector<KbcExample>& train, const FinetuneConfig& config,
                     const LossCallback& on_step) {
    check_vocab(model, vocab);
    if (!model.has_tagging_head()) {
        model.attach_tagging_head(labels.size());
    } else if (model.n_tag_labels() != labels.size()) {
        throw std::invalid_argument("tagging head has " + std::to_string(model.n_tag_labels()) +
                                    " labels, label set has " + std::to_string(labels.size()));
    }
    std::vector<std::vector<int>> ids, tags;
    for (const auto& ex : train) {
        if (ex.tokens.size() != ex.labels.size() || ex.tokens.empty()) {
            throw std::invalid_argument("example '" + ex.id + "': " + std::to_string(ex.labels.size()) +
                                        " labels for " + std::to_string(ex.tokens.size()) + " tokens");
        }
        check_fits(ex.tokens.size() + 1, model, ex.id, "example");
        ids.push_back(vocab.encode(ex.tokens));
        tags.push_back(labels.encode(ex.labels));
    }
    const bool unfreeze = config.unfreeze_decoder;
    const auto params = select_params(model, [&](const std::string& name) {
        if (starts_with(name, "head.")) return starts_with(name, "head.tagging.");
        return unfreeze || !starts_with(name, "decoder.");
    });
    run_finetune(model, params, train.size(), config,
                 [&](std::size_t i, std::mt19937_64&) { return tagging_loss(model, ids[i], tags[i]); }, on_step);
}

std::vector<int> tag_ids(TransformerModel& model, const std::vector<int>& token_ids) {
    if (token_ids.empty()) return {};
    NoGradGuard guard;
    const bool was_training = model.training();
    model.set_training(false);
    Tensor enc = model.encode(with_cls(token_ids));
    Tensor logits = model.tagging_head()(ops::slice_rows(enc, 1, token_ids.size()));
    model.set_training(was_training);
    const std::size_t n = logits.dim(1);
    const auto data = logits.data();
    std::vector<int> out;
    for (std::size_t r = 0; r < token_ids.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < n; ++c) {
            if (data[r * n + c] > data[r * n + best]) best = c;
        }
        out.push_back(static_cast<int>(best));
    }
    return out;
}

std::vector<std::string> tag(TransformerModel& model, const Vocab& vocab, const BioLabelSet& labels,
                             const TokenList& tokens) {
    return labels.decode(tag_ids(model, vocab.encode(tokens)));
}

Tensor seq2seq_loss(TransformerModel& model, const std::vector<int>& source, const std::vector<int>& target) {
    if (target.empty()) throw std::invalid_argument("seq2seq_loss: empty target");
    return peasg_loss(model, source, target);
}

void finetune_seq2seq(TransformerModel& model, const Vocab& vocab, const std::vector<Seq2SeqPair>& pairs,
                      const FinetuneConfig& config, const LossCallback& on_step) {
    check_vocab(model, vocab);
    std::vector<std::vector<int>> src, tgt;
    for (const auto& p : pairs) {
        if (p.target.empty()) throw std::invalid_argument("pair '" + p.id + "' has an empty target");
        if (p.source.empty()) throw std::invalid_argument("pair '" + p.id + "' has an empty source");
        check_fits(p.source.size() + 1, model, p.id, "source of pair");
        check_fits(p.target.size() + 1, model, p.id, "target of pair");
        src.push_back(vocab.encode(p.source));
        tgt.push_back(vocab.encode(p.target));
    }
    const auto params = select_params(model, [](const std::string& name) {
        return !starts_with(name, "head.");
    });
    run_finetune(model, params, pairs.size(), config,
                 [&](std::size_t i, std::mt19937_64&) { return seq2seq_loss(model, src[i], tgt[i]); }, on_step);
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

double Hypothesis::normalized(double length_penalty) const {
    if (tokens.empty() || length_penalty == 0.0) return score;
    return score / std::pow(static_cast<double>(tokens.size()), length_penalty);
}

namespace {

void check_beam_config(const BeamConfig& config) {
    if (config.beam_size == 0) throw std::invalid_argument("beam_size must be >= 1");
    if (config.max_len == 0) throw std::invalid_argument("beam max_len must be >= 1");
}

std::vector<double> checked_log_probs(NextTokenScorer& scorer, const std::vector<int>& prefix) {
    auto lp = scorer.log_probs(prefix);
    if (lp.size() != scorer.vocab_size()) throw std::logic_error("scorer returned the wrong number of log-probs");
    return lp;
}

// Higher normalized score first, then earlier finish, then lexicographic tokens.
bool better_final(const Hypothesis& a, const Hypothesis& b, double penalty) {
    const double sa = a.normalized(penalty), sb = b.normalized(penalty);
    if (sa != sb) return sa > sb;
    if (a.finish_step != b.finish_step) return a.finish_step < b.finish_step;
    return a.tokens < b.tokens;
}

}  // namespace

Hypothesis beam_search(NextTokenScorer& scorer, const BeamConfig& config) {
    check_beam_config(config);
    std::vector<Hypothesis> beam(1);
    std::vector<Hypothesis> finished;
    struct Candidate {
        double score;
        int token;
        std::size_t parent;
    };
    for (std::size_t step = 1; step <= config.max_len && !beam.empty(); ++step) {
        std::vector<Candidate> cands;
        for (std::size_t b = 0; b < beam.size(); ++b) {
            const auto lp = checked_log_probs(scorer, beam[b].tokens);
            for (std::size_t t = 0; t < lp.size(); ++t) {
                cands.push_back({beam[b].score + lp[t], static_cast<int>(t), b});
            }
        }
        const std::size_t keep = std::min(config.beam_size, cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                          [](const Candidate& x, const Candidate& y) {
                              if (x.score != y.score) return x.score > y.score;
                              if (x.token != y.token) return x.token < y.token;
                              return x.parent < y.parent;
                          });
        std::vector<Hypothesis> next;
        for (std::size_t i = 0; i < keep; ++i) {
            Hypothesis h;
            h.tokens = beam[cands[i].parent].tokens;
            h.tokens.push_back(cands[i].token);
            h.score = cands[i].score;
            if (config.eos && cands[i].token == *config.eos) {
                h.finished = true;
                h.finish_step = step;
                finished.push_back(std::move(h));
            } else {
                next.push_back(std::move(h));
            }
        }
        beam = std::move(next);
    }
    const auto& pool = finished.empty() ? beam : finished;
    if (pool.empty()) throw std::logic_error("beam_search produced no hypothesis");
    const Hypothesis* best = &pool.front();
    for (const auto& h : pool) {
        if (better_final(h, *best, config.length_penalty)) best = &h;
    }
    return *best;
}

Hypothesis greedy_decode(NextTokenScorer& scorer, const BeamConfig& config) {
    check_beam_config(config);
    Hypothesis h;
    for (std::size_t step = 1; step <= config.max_len; ++step) {
        const auto lp = checked_log_probs(scorer, h.tokens);
        std::size_t best = 0;
        for (std::size_t t = 1; t < lp.size(); ++t) {
            if (lp[t] > lp[best]) best = t;
        }
        h.tokens.push_back(static_cast<int>(best));
        h.score = h.score + lp[best];
        if (config.eos && static_cast<int>(best) == *config.eos) {
            h.finished = true;
            h.finish_step = step;
            break;
        }
    }
    return h;
}

namespace {
std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    const double lz = mx + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
    return out;
}
}  // namespace

HashedToyScorer::HashedToyScorer(std::uint64_t seed, std::vector<int> source, std::size_t vocab_size, double scale)
    : seed_(seed), source_(std::move(source)), vocab_size_(vocab_size), scale_(scale) {
    if (vocab_size_ < 2) throw std::invalid_argument("toy scorer needs at least two tokens");
}

std::vector<double> HashedToyScorer::log_probs(const std::vector<int>& prefix) {
    std::uint64_t h = splitmix(seed_);
    for (int s : source_) h = splitmix(h ^ static_cast<std::uint64_t>(s + 1));
    h = splitmix(h ^ 0xabcdefULL);
    for (int p : prefix) h = splitmix(h ^ static_cast<std::uint64_t>(p + 1));
    std::vector<double> logits(vocab_size_);
    for (std::size_t t = 0; t < vocab_size_; ++t) {
        const std::uint64_t r = splitmix(h ^ (t + 1) * 0x632be59bd9b4e019ULL);
        const double u = static_cast<double>(r >> 11) * 0x1.0p-53;  // [0, 1)
        logits[t] = scale_ * (2.0 * u - 1.0);
    }
    return log_softmax(logits);
}

ModelScorer::ModelScorer(TransformerModel& model, std::vector<int> source)
    : model_(model), source_(with_cls(source)) {
    check_fits(source_.size(), model_, "source", "generation input");
    NoGradGuard guard;
    enc_ = model_.encode(source_);
}

std::size_t ModelScorer::vocab_size() const { return model_.config().vocab_size; }

std::vector<double> ModelScorer::log_probs(const std::vector<int>& prefix) {
    NoGradGuard guard;
    std::vector<int> dec = {kBosId};
    dec.insert(dec.end(), prefix.begin(), prefix.end());
    Tensor logits = model_.decode(enc_, source_, dec);
    const std::size_t v = logits.dim(1);
    const auto data = logits.data();
    std::vector<double> last(data.end() - static_cast<std::ptrdiff_t>(v), data.end());
    return log_softmax(last);
}

TokenList generate(TransformerModel& model, const Vocab& vocab, const TokenList& source, const BeamConfig& config) {
    const bool was_training = model.training();
    model.set_training(false);
    ModelScorer scorer(model, vocab.encode(source));
    BeamConfig cfg = config;
    // The decoder input is [BOS] + all but the last generated token.
    cfg.max_len = std::min(cfg.max_len, model.config().max_len);
    Hypothesis h = beam_search(scorer, cfg);
    model.set_training(was_training);
    if (h.finished && !h.tokens.empty()) h.tokens.pop_back();
    TokenList out;
    for (int id : h.tokens) out.push_back(id < static_cast<int>(vocab.size()) ? vocab.token(id) : "[UNK]");
    return out;
}

// ---------------------------------------------------------------------------
// Dialogue
// ---------------------------------------------------------------------------

TokenList context_tokens(const std::vector<TokenList>& turns, std::size_t budget) {
    if (turns.empty()) throw std::invalid_argument("dialogue context has no turns");
    std::size_t first = turns.size();
    std::size_t used = 0;
    while (first > 0 && used + turns[first - 1].size() + 1 <= budget) {
        used += turns[first - 1].size() + 1;
        --first;
    }
    if (first == turns.size()) {
        throw std::invalid_argument("most recent turn (" + std::to_string(turns.back().size()) +
                                    " tokens) does not fit a context budget of " + std::to_string(budget));
    }
    TokenList out;
    for (std::size_t t = first; t < turns.size(); ++t) {
        out.insert(out.end(), turns[t].begin(), turns[t].end());
        out.push_back("[SEP]");
    }
    return out;
}

std::vector<int> retrieval_input(const Vocab& vocab, const std::vector<TokenList>& turns, const TokenList& response,
                                 std::size_t max_len) {
    if (response.size() + 2 >= max_len) throw std::invalid_argument("response too long for max_len");
    std::vector<int> ids = {kClsId};
    for (int id : vocab.encode(context_tokens(turns, max_len - response.size() - 2))) ids.push_back(id);
    for (int id : vocab.encode(response)) ids.push_back(id);
    ids.push_back(kSepId);
    return ids;
}

Tensor retrieval_logits(TransformerModel& model, const std::vector<int>& input) {
    Tensor enc = model.encode(input);
    return model.retrieval_head()(ops::reshape(model.cls_state(enc), {1, model.config().d_model}));
}

double retrieval_score(TransformerModel& model, const Vocab& vocab, const std::vector<TokenList>& turns,
                       const TokenList& response) {
    NoGradGuard guard;
    const bool was_training = model.training();
    model.set_training(false);
    Tensor logits = retrieval_logits(model, retrieval_input(vocab, turns, response, model.config().max_len));
    model.set_training(was_training);
    const double a = logits.at(0), b = logits.at(1);
    return 1.0 / (1.0 + std::exp(a - b));
}

void finetune_retrieval(TransformerModel& model, const Vocab& vocab, const std::vector<DialogueExample>& train,
                        const FinetuneConfig& config, const LossCallback& on_step) {
    check_vocab(model, vocab);
    const std::size_t max_len = model.config().max_len;
    std::vector<std::vector<int>> pos;
    std::vector<std::vector<std::vector<int>>> negs;
    for (const auto& d : train) {
        if (d.negatives.empty()) throw std::invalid_argument("dialogue '" + d.id + "' has no negatives");
        pos.push_back(retrieval_input(vocab, d.turns, d.response, max_len));
        negs.emplace_back();
        for (const auto& n : d.negatives) negs.back().push_back(retrieval_input(vocab, d.turns, n, max_len));
    }
    const auto params = select_params(model, [](const std::string& name) {
        return !starts_with(name, "head.") || starts_with(name, "head.retrieval.");
    });
    const std::vector<int> one = {1}, zero = {0};
    run_finetune(model, params, train.size(), config,
                 [&](std::size_t i, std::mt19937_64& rng) {
                     const auto& neg = negs[i][std::uniform_int_distribution<std::size_t>(0, negs[i].size() - 1)(rng)];
                     Tensor lp = ops::cross_entropy_logits(retrieval_logits(model, pos[i]), one);
                     Tensor ln = ops::cross_entropy_logits(retrieval_logits(model, neg), zero);
                     const Tensor both[] = {lp, ln};
                     return ops::scale(ops::add_scalars(both), 0.5);
                 },
                 on_step);
}

std::vector<std::size_t> rank_candidates(const std::vector<double>& scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

std::vector<std::size_t> rank_candidates(const std::function<double(std::size_t)>& scorer, std::size_t n) {
    if (n == 0) throw std::invalid_argument("rank_candidates: no candidates");
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) scores[i] = scorer(i);
    return rank_candidates(scores);
}

std::vector<Seq2SeqPair> dialogue_pairs(const std::vector<DialogueExample>& dialogues, std::size_t max_len) {
    std::vector<Seq2SeqPair> out;
    for (const auto& d : dialogues) out.push_back({d.id, context_tokens(d.turns, max_len - 1), d.response});
    return out;
}

TokenList generate_response(TransformerModel& model, const Vocab& vocab, const std::vector<TokenList>& turns,
                            const BeamConfig& config) {
    return generate(model, vocab, context_tokens(turns, model.config().max_len - 1), config);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

KbcReport evaluate_kbc(TransformerModel& model, const Vocab& vocab, const BioLabelSet& labels,
                       const std::vector<KbcExample>& examples) {
    if (examples.empty()) throw std::invalid_argument("evaluate_kbc: no examples");
    KbcReport report;
    std::vector<SpanSet> pred_spans, gold_spans;
    std::size_t exact = 0;
    for (const auto& ex : examples) {
        auto pred = tag(model, vocab, labels, ex.tokens);
        if (pred == ex.labels) ++exact;
        pred_spans.push_back(decode_bio(pred, ex.tokens));
        gold_spans.push_back(decode_bio(ex.labels, ex.tokens));
        report.predictions.push_back(std::move(pred));
    }
    report.spans = span_prf(pred_spans, gold_spans);
    report.exact_match = static_cast<double>(exact) / static_cast<double>(examples.size());
    return report;
}

GenerationReport evaluate_generation(const std::vector<TokenList>& outputs, const std::vector<TokenList>& references) {
    if (outputs.size() != references.size() || outputs.empty()) {
        throw std::invalid_argument("evaluate_generation: need one output per reference");
    }
    GenerationReport r;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        r.rouge1 += rouge_n(outputs[i], references[i], 1).f1;
        r.rouge2 += rouge_n(outputs[i], references[i], 2).f1;
        r.rougel += rouge_l(outputs[i], references[i]).f1;
    }
    const double n = static_cast<double>(outputs.size());
    r.rouge1 /= n;
    r.rouge2 /= n;
    r.rougel /= n;
    r.bleu = corpus_bleu(outputs, references);
    r.outputs = outputs;
    return r;
}

RetrievalReport evaluate_retrieval(const std::vector<DialogueExample>& examples,
                                   const std::function<double(const DialogueExample&, const TokenList&)>& scorer,
                                   const std::vector<std::size_t>& ks) {
    if (examples.empty()) throw std::invalid_argument("evaluate_retrieval: no examples");
    RetrievalReport r;
    r.n_candidates = examples.front().negatives.size() + 1;
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const auto& d = examples[e];
        if (d.negatives.size() + 1 != r.n_candidates) {
            throw std::invalid_argument("dialogue '" + d.id + "' has " + std::to_string(d.negatives.size() + 1) +
                                        " candidates, expected " + std::to_string(r.n_candidates));
        }
        // The gold response sits at a fixed pseudo-random slot so that index
        // tie-breaking cannot favour it.
        const std::size_t gold = splitmix(e) % r.n_candidates;
        auto candidate = [&](std::size_t i) -> const TokenList& {
            if (i == gold) return d.response;
            return d.negatives[i < gold ? i : i - 1];
        };
        const auto perm = rank_candidates([&](std::size_t i) { return scorer(d, candidate(i)); }, r.n_candidates);
        r.gold_ranks.push_back(gold_rank(perm, gold));
    }
    for (std::size_t k : ks) {
        if (k <= r.n_candidates) r.recall[k] = recall_at_k(r.gold_ranks, r.n_candidates, k);
    }
    return r;
}

}  // namespace kpt
