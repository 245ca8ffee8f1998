#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpt/corpus.hpp"
#include "kpt/model.hpp"
#include "kpt/objectives.hpp"

namespace kpt {

struct AdamConfig {
    double peak_lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.01;
    bool operator==(const AdamConfig&) const = default;
};

struct Schedule {
    std::size_t warmup_steps = 10000;
    std::size_t total_steps = 100000;
    void validate() const;
};

/// peak_lr · min(step / warmup, (total - step) / (total - warmup)).
double lr_at(std::size_t step, const Schedule& schedule, double peak_lr);

/// Biases and layer-norm parameters are exempt from weight decay.
bool decays(const std::string& parameter_name);

struct OptimizerState {
    AdamConfig hyper;
    std::uint64_t step = 0;
    std::map<std::string, std::vector<double>> first_moment;
    std::map<std::string, std::vector<double>> second_moment;
    bool operator==(const OptimizerState&) const = default;
};

/// One bias-corrected Adam update with decoupled weight decay. Parameters
/// with no gradient buffer (untouched by backward) are left alone.
void adam_step(const NamedTensors& params, OptimizerState& state, double lr);

void zero_grads(const NamedTensors& params);

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> values;
    bool operator==(const CheckpointTensor&) const = default;
};

struct Checkpoint {
    ModelConfig config;
    std::vector<CheckpointTensor> parameters;  // sorted by name
    std::optional<OptimizerState> optimizer;
    std::string rng_state;
    std::uint64_t step = 0;
    std::map<std::string, std::string> metadata;
    bool operator==(const Checkpoint&) const = default;
};

Checkpoint make_checkpoint(const TransformerModel& model, const OptimizerState* optimizer = nullptr,
                           const std::mt19937_64* rng = nullptr, std::uint64_t step = 0,
                           std::map<std::string, std::string> metadata = {});
/// Rebuilds an f32 model (tagging head attached when present).
TransformerModel model_from_checkpoint(const Checkpoint& ckpt);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pre-training
// ---------------------------------------------------------------------------

struct TraceRow {
    std::size_t step = 0;
    double lr = 0.0;
    LossBreakdown losses;
};

std::string trace_header();
std::string trace_line(const TraceRow& row);
void write_trace(const std::filesystem::path& path, const std::vector<TraceRow>& rows);

struct PretrainConfig {
    ModelConfig model;
    InitScheme init = InitScheme::zero_output;
    Schedule schedule;
    AdamConfig adam;
    ObjectiveSet objectives = all_objectives();
    std::uint64_t seed = 1;
    std::size_t accum_steps = 1;
};

class NonFiniteLoss : public std::runtime_error {
  public:
    NonFiniteLoss(std::size_t step, const std::string& what)
        : std::runtime_error(what), step_(step) {}
    std::size_t step() const { return step_; }

  private:
    std::size_t step_;
};

struct PretrainResult {
    TransformerModel model;
    Checkpoint checkpoint;  // final weights, optimizer state, rng state
    std::vector<TraceRow> trace;
    std::size_t skipped_documents = 0;
};

/// Joint-objective training, one document per micro-batch, documents visited
/// in a seeded shuffled order that is reshuffled every pass.
PretrainResult pretrain(const Corpus& corpus, const Vocab& vocab, const PretrainConfig& config,
                        const std::function<void(const TraceRow&)>& on_step = {});

struct PretrainEval {
    LossBreakdown mean;  // per-objective means over documents and draws
    double pecc_accuracy = 0.0;
    std::size_t n_documents = 0;
    std::vector<double> document_totals;  // mean total per document
    std::vector<int> predicted_categories;
};

/// Eval-mode joint losses with `draws` seeded masking draws per document,
/// plus category accuracy on the uncorrupted documents. Documents longer than
/// max_len are skipped.
PretrainEval evaluate_pretraining(TransformerModel& model, const Corpus& corpus, const Vocab& vocab,
                                  const ObjectiveSet& objectives, std::uint64_t seed, std::size_t draws = 1);

std::string objectives_to_string(const ObjectiveSet& objectives);
ObjectiveSet objectives_from_string(const std::string& csv);

}  // namespace kpt
