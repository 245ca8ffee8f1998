#include <CLI11.hpp>

#include <iostream>

#include "commands.hpp"
#include "kpt/corpus.hpp"
#include "kpt/train.hpp"

using namespace kpt;
using namespace kpt::cli;

namespace {

// Options shared by the config-driven commands; each one given on the
// command line overrides the config file.
struct Overrides {
    std::string config;
    std::string out, corpus, data, vocab, checkpoint, objectives, init;
    std::uint64_t seed = 0;
    std::size_t steps = 0, warmup = 0, accum = 0;
    double lr = 0.0;

    CLI::Option* o_seed = nullptr;
    CLI::Option* o_steps = nullptr;
    CLI::Option* o_warmup = nullptr;
    CLI::Option* o_accum = nullptr;
    CLI::Option* o_lr = nullptr;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", config, "JSON run config (see README)");
        cmd->add_option("--out", out, "output directory");
        o_seed = cmd->add_option("--seed", seed, "random seed");
        o_steps = cmd->add_option("--steps", steps, "total optimizer steps");
        o_warmup = cmd->add_option("--warmup", warmup, "warmup steps");
        o_lr = cmd->add_option("--lr", lr, "peak learning rate");
        o_accum = cmd->add_option("--accum-steps", accum, "micro-batches per update");
        cmd->add_option("--vocab", vocab, "vocabulary file");
        cmd->add_option("--init", init, "normal | zero_output");
    }

    RunConfig resolve() const {
        RunConfig c = config.empty() ? RunConfig{} : load_config(config);
        if (!out.empty()) c.out = out;
        if (!corpus.empty()) c.corpus = corpus;
        if (!data.empty()) c.data = data;
        if (!vocab.empty()) c.vocab = vocab;
        if (!checkpoint.empty()) c.checkpoint = checkpoint;
        if (!init.empty()) c.init = init_from_name(init);
        if (!objectives.empty()) {
            try {
                c.objectives = objectives_from_string(objectives);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        }
        if (o_seed && o_seed->count()) c.seed = seed;
        if (o_steps && o_steps->count()) c.schedule.total_steps = steps;
        if (o_warmup && o_warmup->count()) c.schedule.warmup_steps = warmup;
        if (o_lr && o_lr->count()) c.adam.peak_lr = lr;
        if (o_accum && o_accum->count()) c.accum_steps = accum;
        return c;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kpt: knowledge-injected encoder-decoder pre-training at desk scale"};
    app.require_subcommand(1);

    GenCorpusArgs gc;
    auto* gen_corpus = app.add_subcommand("gen-corpus", "write a seeded synthetic product corpus and its vocabulary");
    gen_corpus->add_option("--seed", gc.seed, "generator seed");
    gen_corpus->add_option("--n-docs", gc.n_docs, "number of documents")->required();
    gen_corpus->add_option("--n-categories", gc.n_categories, "product categories")->capture_default_str();
    gen_corpus->add_option("--profile", gc.profile, "desk | paper | tiny")->capture_default_str();
    gen_corpus->add_option("--out", gc.out, "output directory")->capture_default_str();

    GenTaskArgs gt;
    auto* gen_task = app.add_subcommand("gen-task", "write a seeded synthetic downstream task set");
    gen_task->add_option("--task", gt.task, "kbc | sum | dialog")->required();
    gen_task->add_option("--seed", gt.seed, "generator seed");
    gen_task->add_option("--n", gt.n, "number of examples")->required();
    gen_task->add_option("--negatives", gt.negatives, "negatives per dialogue")->capture_default_str();
    gen_task->add_option("--out", gt.out, "output directory")->capture_default_str();

    Overrides pre;
    auto* pretrain_cmd = app.add_subcommand("pretrain", "joint pre-training with the enabled objectives");
    pre.add_to(pretrain_cmd);
    pretrain_cmd->add_option("--corpus", pre.corpus, "corpus JSONL");
    pretrain_cmd->add_option("--objectives", pre.objectives, "comma list, e.g. kmlm,pecc");

    Overrides fin;
    std::string fin_task;
    auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune on a downstream task");
    fin.add_to(finetune_cmd);
    finetune_cmd->add_option("--task", fin_task, "kbc | sum | dialog-ret | dialog-gen")->required();
    finetune_cmd->add_option("--data", fin.data, "training set");
    finetune_cmd->add_option("--checkpoint", fin.checkpoint, "start from this checkpoint");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint; writes metrics.json and examples.csv");
    eval_cmd->add_option("--task", ev.task, "pretrain | kbc | sum | dialog-ret | dialog-gen")->required();
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", ev.data, "evaluation set")->required();
    eval_cmd->add_option("--vocab", ev.vocab, "vocabulary, if the checkpoint has none");
    eval_cmd->add_option("--out", ev.out, "output directory")->capture_default_str();
    eval_cmd->add_option("--seed", ev.seed, "masking seed (pretrain)")->capture_default_str();
    eval_cmd->add_option("--draws", ev.draws, "masking draws per document (pretrain)")->capture_default_str();
    eval_cmd->add_option("--beam", ev.beam_size, "beam size (generation tasks)")->capture_default_str();
    eval_cmd->add_option("--length-penalty", ev.length_penalty, "length penalty exponent")->capture_default_str();
    eval_cmd->add_option("--max-len", ev.max_gen_len, "maximum generated tokens")->capture_default_str();

    GenerateArgs gen;
    auto* generate_cmd = app.add_subcommand("generate", "beam-search generation, one source per input line");
    generate_cmd->add_option("--checkpoint", gen.checkpoint, "checkpoint file")->required();
    generate_cmd->add_option("--input", gen.input, "text file, one whitespace-tokenized source per line")->required();
    generate_cmd->add_option("--vocab", gen.vocab, "vocabulary, if the checkpoint has none");
    generate_cmd->add_option("--beam", gen.beam_size, "beam size")->capture_default_str();
    generate_cmd->add_option("--length-penalty", gen.length_penalty, "length penalty exponent")->capture_default_str();
    generate_cmd->add_option("--max-len", gen.max_gen_len, "maximum generated tokens")->capture_default_str();
    generate_cmd->add_option("--out", gen.out, "output directory")->capture_default_str();

    GradcheckArgs gcheck;
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full joint loss");
    gradcheck_cmd->add_option("--preset", gcheck.preset, "model preset")->capture_default_str();
    gradcheck_cmd->add_option("--seed", gcheck.seed, "init and sampling seed")->capture_default_str();
    gradcheck_cmd->add_option("--coords", gcheck.coords, "coordinates per tensor")->capture_default_str();
    gradcheck_cmd->add_option("--out", gcheck.out, "write gradcheck.json here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*gen_corpus) return cmd_gen_corpus(gc);
        if (*gen_task) return cmd_gen_task(gt);
        if (*pretrain_cmd) return cmd_pretrain(pre.resolve());
        if (*finetune_cmd) return cmd_finetune(fin_task, fin.resolve());
        if (*eval_cmd) return cmd_eval(ev);
        if (*generate_cmd) return cmd_generate(gen);
        if (*gradcheck_cmd) return cmd_gradcheck(gcheck);
    } catch (const NonFiniteLoss& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const CorpusError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
