#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kpt/corpus.hpp"
#include "kpt/metrics.hpp"
#include "kpt/model.hpp"
#include "kpt/train.hpp"

namespace kpt {

// ---------------------------------------------------------------------------
// BIO labels
// ---------------------------------------------------------------------------

/// "O" = 0, then "<attr>-B" = 1 + 2i and "<attr>-I" = 2 + 2i for attribute i.
class BioLabelSet {
  public:
    BioLabelSet() = default;
    explicit BioLabelSet(std::vector<std::string> attributes);
    /// Attributes collected from label strings, sorted by name.
    static BioLabelSet from_labels(const std::vector<std::vector<std::string>>& label_sequences);

    std::size_t size() const { return 2 * attributes_.size() + 1; }
    const std::vector<std::string>& attributes() const { return attributes_; }
    int id(const std::string& label) const;
    const std::string& label(int id) const;
    std::vector<int> encode(const std::vector<std::string>& labels) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;

    /// Comma-joined attribute list, for checkpoint metadata.
    std::string serialize() const;
    static BioLabelSet deserialize(const std::string& text);

  private:
    std::vector<std::string> attributes_;
    std::vector<std::string> labels_;
    std::map<std::string, int> index_;
};

/// Labels for `n_tokens` tokens; spans must be in bounds and non-overlapping.
std::vector<std::string> encode_bio(const SpanSet& spans, std::size_t n_tokens);
/// B-then-I* runs of one attribute become spans. An I that does not continue
/// a run of the same attribute opens a new span.
SpanSet decode_bio(const std::vector<std::string>& labels, const TokenList& tokens);

// ---------------------------------------------------------------------------
// Task datasets
// ---------------------------------------------------------------------------

struct KbcExample {
    std::string id;
    TokenList tokens;
    std::vector<std::string> labels;
};

struct Seq2SeqPair {
    std::string id;
    TokenList source;
    TokenList target;
};

struct DialogueExample {
    std::string id;
    std::vector<TokenList> turns;
    TokenList response;
    std::vector<TokenList> negatives;
};

/// KBC files use the corpus schema; every aspect carrying bio_labels becomes
/// one example.
std::vector<KbcExample> load_kbc(const std::filesystem::path& path);
void save_kbc(const std::filesystem::path& path, const std::vector<KbcExample>& examples);
std::vector<Seq2SeqPair> load_pairs(const std::filesystem::path& path);
void save_pairs(const std::filesystem::path& path, const std::vector<Seq2SeqPair>& pairs);
std::vector<DialogueExample> load_dialogues(const std::filesystem::path& path);
void save_dialogues(const std::filesystem::path& path, const std::vector<DialogueExample>& dialogues);

/// Token streams of a task set, for building a vocabulary.
std::vector<TokenList> token_streams(const std::vector<KbcExample>& examples);
std::vector<TokenList> token_streams(const std::vector<Seq2SeqPair>& pairs);
std::vector<TokenList> token_streams(const std::vector<DialogueExample>& dialogues);

/// Templated product phrases over eight attributes (Color, Material, ...).
std::vector<KbcExample> generate_kbc(std::uint64_t seed, std::size_t n);
/// Aspect (description, summary) pairs drawn from the synthetic corpus.
std::vector<Seq2SeqPair> generate_summaries(std::uint64_t seed, std::size_t n);
/// Dialogues whose gold response repeats a marker token from the context;
/// negatives carry other markers.
std::vector<DialogueExample> generate_dialogues(std::uint64_t seed, std::size_t n, std::size_t n_negatives = 9);

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

struct FinetuneConfig {
    Schedule schedule{50, 1000};
    AdamConfig adam;
    std::uint64_t seed = 1;
    std::size_t accum_steps = 1;
    /// Tagging only: also train decoder parameters (they receive no gradient
    /// from the tagging loss, so this only matters for weight decay).
    bool unfreeze_decoder = false;
};

using LossCallback = std::function<void(std::size_t step, double lr, double loss)>;

/// Mean token cross-entropy of the tagging head over content positions.
Tensor tagging_loss(TransformerModel& model, const std::vector<int>& token_ids, const std::vector<int>& label_ids);
/// Attaches a zero tagging head when missing, then trains encoder + head.
void finetune_tagger(TransformerModel& model, const Vocab& vocab, const BioLabelSet& labels,
                     const std::vector<KbcExample>& train, const FinetuneConfig& config,
                     const LossCallback& on_step = {});
/// Argmax label id per content token (lowest id wins ties).
std::vector<int> tag_ids(TransformerModel& model, const std::vector<int>& token_ids);
std::vector<std::string> tag(TransformerModel& model, const Vocab& vocab, const BioLabelSet& labels,
                             const TokenList& tokens);

/// Encoder [CLS] + source; decoder [BOS] + target; targets target + [EOS].
Tensor seq2seq_loss(TransformerModel& model, const std::vector<int>& source, const std::vector<int>& target);
void finetune_seq2seq(TransformerModel& model, const Vocab& vocab, const std::vector<Seq2SeqPair>& pairs,
                      const FinetuneConfig& config, const LossCallback& on_step = {});

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

/// Log-probabilities of the next token given the tokens generated so far
/// (without [BOS]).
class NextTokenScorer {
  public:
    virtual ~NextTokenScorer() = default;
    virtual std::size_t vocab_size() const = 0;
    virtual std::vector<double> log_probs(const std::vector<int>& prefix) = 0;
};

struct BeamConfig {
    std::size_t beam_size = 5;
    std::size_t max_len = 32;  // generated tokens, [EOS] included
    double length_penalty = 1.0;
    /// Token that ends a hypothesis; none means every hypothesis runs to max_len.
    std::optional<int> eos = kEosId;
};

struct Hypothesis {
    std::vector<int> tokens;  // generated tokens, [EOS] included when finished
    double score = 0.0;       // sum of log-probabilities
    bool finished = false;
    std::size_t finish_step = 0;
    double normalized(double length_penalty) const;
};

Hypothesis beam_search(NextTokenScorer& scorer, const BeamConfig& config);
Hypothesis greedy_decode(NextTokenScorer& scorer, const BeamConfig& config);

/// Seeded table of next-token logits over (source, prefix), for search tests.
class HashedToyScorer : public NextTokenScorer {
  public:
    HashedToyScorer(std::uint64_t seed, std::vector<int> source, std::size_t vocab_size, double scale = 2.0);
    std::size_t vocab_size() const override { return vocab_size_; }
    std::vector<double> log_probs(const std::vector<int>& prefix) override;

  private:
    std::uint64_t seed_;
    std::vector<int> source_;
    std::size_t vocab_size_;
    double scale_;
};

/// Decoder of a trained model conditioned on one encoded source.
class ModelScorer : public NextTokenScorer {
  public:
    ModelScorer(TransformerModel& model, std::vector<int> source);
    std::size_t vocab_size() const override;
    std::vector<double> log_probs(const std::vector<int>& prefix) override;

  private:
    TransformerModel& model_;
    std::vector<int> source_;
    Tensor enc_;
};

/// Beam search over the model for [CLS] + source; the result drops [EOS].
TokenList generate(TransformerModel& model, const Vocab& vocab, const TokenList& source, const BeamConfig& config);

// ---------------------------------------------------------------------------
// Dialogue
// ---------------------------------------------------------------------------

/// turn₁ [SEP] … turnₙ [SEP], dropping oldest turns until `budget` tokens fit.
/// The most recent turn is kept whole; errors if it alone does not fit.
TokenList context_tokens(const std::vector<TokenList>& turns, std::size_t budget);
/// [CLS] + context + response + [SEP], within max_len.
std::vector<int> retrieval_input(const Vocab& vocab, const std::vector<TokenList>& turns, const TokenList& response,
                                 std::size_t max_len);
Tensor retrieval_logits(TransformerModel& model, const std::vector<int>& input);
/// Probability that `response` continues the context, in [0, 1].
double retrieval_score(TransformerModel& model, const Vocab& vocab, const std::vector<TokenList>& turns,
                       const TokenList& response);
/// Each step scores the gold response (label 1) and one sampled negative (label 0).
void finetune_retrieval(TransformerModel& model, const Vocab& vocab, const std::vector<DialogueExample>& train,
                        const FinetuneConfig& config, const LossCallback& on_step = {});
/// Candidate indices sorted by score descending, ties by index.
std::vector<std::size_t> rank_candidates(const std::vector<double>& scores);
std::vector<std::size_t> rank_candidates(const std::function<double(std::size_t)>& scorer, std::size_t n);

/// Context turn₁ [SEP] … turnₙ [SEP] as the seq2seq source, truncated so that
/// [CLS] + source fits max_len.
std::vector<Seq2SeqPair> dialogue_pairs(const std::vector<DialogueExample>& dialogues, std::size_t max_len);
TokenList generate_response(TransformerModel& model, const Vocab& vocab, const std::vector<TokenList>& turns,
                            const BeamConfig& config);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct KbcReport {
    PRF spans;
    double exact_match = 0.0;  // whole label sequence correct
    std::vector<std::vector<std::string>> predictions;
};
KbcReport evaluate_kbc(TransformerModel& model, const Vocab& vocab, const BioLabelSet& labels,
                       const std::vector<KbcExample>& examples);

struct GenerationReport {
    double rouge1 = 0.0, rouge2 = 0.0, rougel = 0.0;  // mean per-example F1
    double bleu = 0.0;                                // corpus level
    std::vector<TokenList> outputs;
};
GenerationReport evaluate_generation(const std::vector<TokenList>& outputs, const std::vector<TokenList>& references);

struct RetrievalReport {
    std::size_t n_candidates = 0;
    std::map<std::size_t, double> recall;  // k → Rₙ@k
    std::vector<std::size_t> gold_ranks;
};
/// Candidates are the gold response followed by the example's negatives.
RetrievalReport evaluate_retrieval(const std::vector<DialogueExample>& examples,
                                   const std::function<double(const DialogueExample&, const TokenList&)>& scorer,
                                   const std::vector<std::size_t>& ks = {1, 2, 5});

}  // namespace kpt
