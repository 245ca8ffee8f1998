#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "kpt/model.hpp"
#include "kpt/train.hpp"

namespace kpt::cli {

/// Bad flags, config keys or input files. Maps to exit code 1.
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    ModelConfig model = ModelConfig::desk();
    // Set when the config names model.vocab_size explicitly. Otherwise the
    // preset's vocab_size is a floor and grows to fit the vocabulary.
    bool vocab_size_fixed = false;
    InitScheme init = InitScheme::zero_output;
    Schedule schedule;
    AdamConfig adam;
    ObjectiveSet objectives = all_objectives();
    std::uint64_t seed = 1;
    std::size_t accum_steps = 1;
    std::size_t min_freq = 1;

    std::string corpus;      // pretraining corpus JSONL
    std::string data;        // fine-tuning training set
    std::string vocab;       // optional vocabulary file
    std::string checkpoint;  // optional starting checkpoint
    std::string out = "out";

    std::size_t beam_size = 5;
    double length_penalty = 1.0;
    std::size_t max_gen_len = 32;
    bool unfreeze_decoder = false;

    /// Throws ConfigError on the first invalid field.
    void validate() const;
};

/// Unknown keys are rejected. "model" is a preset name or an object whose
/// keys override the desk preset.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
/// Every field, defaults applied; loading it back gives the same config.
nlohmann::json config_to_json(const RunConfig& config);

std::string init_name(InitScheme init);
InitScheme init_from_name(const std::string& name);

}  // namespace kpt::cli
