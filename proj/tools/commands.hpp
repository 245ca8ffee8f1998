#pragma once

#include <cstdint>
#include <string>

#include "kpt/gradcheck.hpp"
#include "run_config.hpp"

namespace kpt::cli {

struct GenCorpusArgs {
    std::uint64_t seed = 1;
    std::size_t n_docs = 0;
    int n_categories = 40;
    std::string profile = "desk";
    std::string out = "out";
};

struct GenTaskArgs {
    std::string task;  // kbc | sum | dialog
    std::uint64_t seed = 1;
    std::size_t n = 0;
    std::size_t negatives = 9;
    std::string out = "out";
};

struct EvalArgs {
    std::string task;  // pretrain | kbc | sum | dialog-ret | dialog-gen
    std::string checkpoint;
    std::string data;
    std::string vocab;  // only needed when the checkpoint carries no vocabulary
    std::string out = "out";
    std::uint64_t seed = 1;
    std::size_t draws = 1;
    std::size_t beam_size = 5;
    double length_penalty = 1.0;
    std::size_t max_gen_len = 32;
};

struct GenerateArgs {
    std::string checkpoint;
    std::string input;  // one whitespace-tokenized source per line
    std::string vocab;
    std::string out = "out";
    std::size_t beam_size = 5;
    double length_penalty = 1.0;
    std::size_t max_gen_len = 32;
};

struct GradcheckArgs {
    std::string preset = "desk";
    std::uint64_t seed = 1;
    std::size_t coords = 500;
    std::string out;  // optional report directory
};

int cmd_gen_corpus(const GenCorpusArgs& args);
int cmd_gen_task(const GenTaskArgs& args);
int cmd_pretrain(const RunConfig& config);
/// task: kbc | sum | dialog-ret | dialog-gen
int cmd_finetune(const std::string& task, const RunConfig& config);
int cmd_eval(const EvalArgs& args);
int cmd_generate(const GenerateArgs& args);
int cmd_gradcheck(const GradcheckArgs& args);

/// Joint-loss gradient check of a freshly initialised 64-bit model of the
/// given preset on a fixed short probe document.
GradCheckReport preset_gradcheck(const std::string& preset, std::uint64_t seed, std::size_t coords_per_tensor);

}  // namespace kpt::cli
