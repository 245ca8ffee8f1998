#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "kpt/objectives.hpp"
#include "kpt/tasks.hpp"
#include "kpt/train.hpp"

namespace kpt::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Progress goes to stderr and, timestamped, to <out>/run.log. Timestamps
// appear nowhere else so every other output file is reproducible.
class RunLog {
  public:
    explicit RunLog(const fs::path& dir) : file_(dir / "run.log", std::ios::app) {}
    void operator()(const std::string& msg) {
        std::cerr << msg << '\n';
        const std::time_t now = std::time(nullptr);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        file_ << stamp << ' ' << msg << '\n';
        file_.flush();
    }

  private:
    std::ofstream file_;
};

void require_file(const std::string& path, const char* what) {
    if (path.empty()) throw ConfigError(std::string("no ") + what + " given");
    if (!fs::is_regular_file(path)) throw ConfigError(std::string("missing ") + what + " file: " + path);
}

fs::path make_out_dir(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw ConfigError("cannot create output directory " + out + ": " + ec.message());
    return fs::path(out);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

std::string join(const std::vector<std::string>& tokens, char sep = ' ') {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += sep;
        s += tokens[i];
    }
    return s;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

std::string vocab_to_string(const Vocab& vocab) { return join(vocab.tokens(), '\n'); }

// The vocabulary travels in checkpoint metadata; --vocab is the fallback for
// checkpoints written without one.
Vocab checkpoint_vocab(const Checkpoint& ckpt, const std::string& fallback) {
    auto it = ckpt.metadata.find("vocab");
    if (it != ckpt.metadata.end()) {
        std::vector<std::string> tokens;
        std::stringstream ss(it->second);
        for (std::string t; std::getline(ss, t, '\n');) tokens.push_back(t);
        return Vocab::from_tokens(std::move(tokens));
    }
    if (fallback.empty()) throw ConfigError("checkpoint has no vocabulary; pass --vocab");
    require_file(fallback, "vocabulary");
    return Vocab::load(fallback);
}

std::string meta_or(const Checkpoint& ckpt, const std::string& key, const std::string& fallback) {
    auto it = ckpt.metadata.find(key);
    return it == ckpt.metadata.end() ? fallback : it->second;
}

Checkpoint load_checked(const std::string& path) {
    require_file(path, "checkpoint");
    try {
        return load_checkpoint(path);
    } catch (const CheckpointError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

}  // namespace

// ---------------------------------------------------------------------------

int cmd_gen_corpus(const GenCorpusArgs& args) {
    if (args.n_docs == 0) throw ConfigError("--n-docs must be >= 1");
    if (args.n_categories < 1) throw ConfigError("--n-categories must be >= 1");
    GeneratorProfile profile;
    try {
        profile = GeneratorProfile::named(args.profile);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    profile.n_categories = args.n_categories;
    const fs::path dir = make_out_dir(args.out);
    const Corpus corpus = generate_synthetic(args.seed, args.n_docs, profile);
    save_corpus(dir / "corpus.jsonl", corpus);
    const Vocab vocab = build_vocab(corpus);
    vocab.save(dir / "vocab.txt");
    std::cout << "wrote " << corpus.size() << " documents, vocabulary of " << vocab.size() << " tokens to "
              << dir.string() << '\n';
    return 0;
}

int cmd_gen_task(const GenTaskArgs& args) {
    if (args.n == 0) throw ConfigError("--n must be >= 1");
    const fs::path dir = make_out_dir(args.out);
    fs::path file;
    if (args.task == "kbc") {
        file = dir / "kbc.jsonl";
        save_kbc(file, generate_kbc(args.seed, args.n));
    } else if (args.task == "sum") {
        file = dir / "sum.jsonl";
        save_pairs(file, generate_summaries(args.seed, args.n));
    } else if (args.task == "dialog") {
        if (args.negatives == 0) throw ConfigError("--negatives must be >= 1");
        file = dir / "dialog.jsonl";
        save_dialogues(file, generate_dialogues(args.seed, args.n, args.negatives));
    } else {
        throw ConfigError("unknown task '" + args.task + "' (expected kbc, sum or dialog)");
    }
    std::cout << "wrote " << args.n << " examples to " << file.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

// Presets give a vocab_size floor; an explicit model.vocab_size is a hard cap.
static RunConfig fit_vocab(const RunConfig& config, std::size_t vocab_size) {
    RunConfig c = config;
    if (vocab_size <= c.model.vocab_size) return c;
    if (c.vocab_size_fixed) {
        throw ConfigError("vocabulary of " + std::to_string(vocab_size) + " tokens exceeds model.vocab_size " +
                          std::to_string(c.model.vocab_size));
    }
    c.model.vocab_size = vocab_size;
    return c;
}

int cmd_pretrain(const RunConfig& config) {
    config.validate();
    require_file(config.corpus, "corpus");
    if (!config.vocab.empty()) require_file(config.vocab, "vocabulary");
    const Corpus corpus = load_corpus(config.corpus);
    const Vocab vocab = config.vocab.empty() ? build_vocab(corpus, config.min_freq) : Vocab::load(config.vocab);
    const RunConfig effective = fit_vocab(config, vocab.size());

    const fs::path dir = make_out_dir(config.out);
    write_json(dir / "config.json", config_to_json(effective));
    vocab.save(dir / "vocab.txt");
    RunLog log(dir);
    log("pretrain: " + std::to_string(corpus.size()) + " documents, vocabulary " + std::to_string(vocab.size()) +
        ", objectives " + objectives_to_string(config.objectives));

    PretrainConfig pc;
    pc.model = effective.model;
    pc.init = config.init;
    pc.schedule = config.schedule;
    pc.adam = config.adam;
    pc.objectives = config.objectives;
    pc.seed = config.seed;
    pc.accum_steps = config.accum_steps;

    const std::size_t every = std::max<std::size_t>(1, config.schedule.total_steps / 20);
    const auto t0 = std::chrono::steady_clock::now();
    PretrainResult res = pretrain(corpus, vocab, pc, [&](const TraceRow& row) {
        if (row.step % every == 0 || row.step + 1 == config.schedule.total_steps) {
            log("step " + std::to_string(row.step) + " lr " + fmt(row.lr) + " total " + fmt(row.losses.total));
        }
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (res.skipped_documents) log("skipped " + std::to_string(res.skipped_documents) + " documents over max_len");

    res.checkpoint.metadata["vocab"] = vocab_to_string(vocab);
    save_checkpoint(dir / "checkpoint.kpt", res.checkpoint);
    write_trace(dir / "loss.csv", res.trace);
    log("done in " + fmt(secs) + " s; final total " + fmt(res.trace.back().losses.total));
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_finetune(const std::string& task, const RunConfig& config) {
    if (task != "kbc" && task != "sum" && task != "dialog-ret" && task != "dialog-gen") {
        throw ConfigError("unknown task '" + task + "' (expected kbc, sum, dialog-ret or dialog-gen)");
    }
    config.validate();
    require_file(config.data, "training data");
    if (!config.vocab.empty()) require_file(config.vocab, "vocabulary");

    std::vector<KbcExample> kbc;
    std::vector<Seq2SeqPair> pairs;
    std::vector<DialogueExample> dialogues;
    std::vector<TokenList> streams;
    if (task == "kbc") {
        kbc = load_kbc(config.data);
        streams = token_streams(kbc);
    } else if (task == "sum") {
        pairs = load_pairs(config.data);
        streams = token_streams(pairs);
    } else {
        dialogues = load_dialogues(config.data);
        streams = token_streams(dialogues);
    }

    std::optional<Checkpoint> start;
    if (!config.checkpoint.empty()) start = load_checked(config.checkpoint);
    const Vocab vocab = start ? checkpoint_vocab(*start, config.vocab)
                        : config.vocab.empty() ? Vocab::build(streams, config.min_freq)
                                               : Vocab::load(config.vocab);
    TransformerModel model = start ? model_from_checkpoint(*start)
                                   : TransformerModel(fit_vocab(config, vocab.size()).model, config.seed, config.init,
                                                      Precision::f32);
    if (vocab.size() > model.config().vocab_size) {
        throw ConfigError("vocabulary of " + std::to_string(vocab.size()) + " tokens exceeds model.vocab_size " +
                          std::to_string(model.config().vocab_size));
    }

    RunConfig effective = config;
    effective.model = model.config();
    const fs::path dir = make_out_dir(config.out);
    write_json(dir / "config.json", config_to_json(effective));
    vocab.save(dir / "vocab.txt");
    RunLog log(dir);
    log("finetune " + task + ": " + std::to_string(streams.size()) + " examples, vocabulary " +
        std::to_string(vocab.size()) + (start ? ", from " + config.checkpoint : ", from scratch"));

    FinetuneConfig fc;
    fc.schedule = config.schedule;
    fc.adam = config.adam;
    fc.seed = config.seed;
    fc.accum_steps = config.accum_steps;
    fc.unfreeze_decoder = config.unfreeze_decoder;

    std::string csv = "step,lr,loss\n";
    const std::size_t every = std::max<std::size_t>(1, config.schedule.total_steps / 20);
    auto on_step = [&](std::size_t step, double lr, double loss) {
        csv += std::to_string(step) + "," + fmt(lr) + "," + fmt(loss) + "\n";
        if (step % every == 0 || step + 1 == config.schedule.total_steps) {
            log("step " + std::to_string(step) + " lr " + fmt(lr) + " loss " + fmt(loss));
        }
    };

    std::map<std::string, std::string> meta = {{"task", task}, {"vocab", vocab_to_string(vocab)}};
    if (task == "kbc") {
        std::vector<std::vector<std::string>> seqs;
        for (const auto& ex : kbc) seqs.push_back(ex.labels);
        BioLabelSet labels = BioLabelSet::from_labels(seqs);
        if (start && start->metadata.count("labels")) labels = BioLabelSet::deserialize(start->metadata.at("labels"));
        finetune_tagger(model, vocab, labels, kbc, fc, on_step);
        meta["labels"] = labels.serialize();
    } else if (task == "sum") {
        finetune_seq2seq(model, vocab, pairs, fc, on_step);
    } else if (task == "dialog-gen") {
        finetune_seq2seq(model, vocab, dialogue_pairs(dialogues, model.config().max_len), fc, on_step);
    } else {
        finetune_retrieval(model, vocab, dialogues, fc, on_step);
    }

    save_checkpoint(dir / "checkpoint.kpt",
                    make_checkpoint(model, nullptr, nullptr, config.schedule.total_steps, std::move(meta)));
    write_text(dir / "loss.csv", csv);
    log("done; checkpoint written to " + (dir / "checkpoint.kpt").string());
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_eval(const EvalArgs& args) {
    if (args.beam_size == 0) throw ConfigError("--beam must be >= 1");
    if (args.draws == 0) throw ConfigError("--draws must be >= 1");
    const Checkpoint ckpt = load_checked(args.checkpoint);
    require_file(args.data, "evaluation data");
    const Vocab vocab = checkpoint_vocab(ckpt, args.vocab);
    TransformerModel model = model_from_checkpoint(ckpt);
    const fs::path dir = make_out_dir(args.out);

    json metrics = {{"task", args.task}, {"checkpoint", args.checkpoint}, {"data", args.data}};
    std::string csv;
    BeamConfig beam;
    beam.beam_size = args.beam_size;
    beam.length_penalty = args.length_penalty;
    beam.max_len = args.max_gen_len;

    auto run_generation = [&](const std::vector<Seq2SeqPair>& pairs) {
        std::vector<TokenList> outputs, refs;
        for (const auto& p : pairs) {
            outputs.push_back(generate(model, vocab, p.source, beam));
            refs.push_back(p.target);
        }
        const GenerationReport r = evaluate_generation(outputs, refs);
        metrics["rouge1"] = r.rouge1;
        metrics["rouge2"] = r.rouge2;
        metrics["rougeL"] = r.rougel;
        metrics["rouge_averaging"] = "mean of per-example F1";
        metrics["bleu"] = r.bleu;
        metrics["bleu_variant"] = kBleuName;
        metrics["bleu_averaging"] = "corpus-level counts";
        metrics["beam_size"] = args.beam_size;
        csv = "id,output,reference\n";
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            csv += csv_field(pairs[i].id) + "," + csv_field(join(outputs[i])) + "," + csv_field(join(refs[i])) + "\n";
        }
    };

    if (args.task == "pretrain") {
        const Corpus corpus = load_corpus(args.data);
        const ObjectiveSet objectives = objectives_from_string(meta_or(ckpt, "objectives", "kmlm,kms2s,peabd,pecc,peasg"));
        const PretrainEval ev = evaluate_pretraining(model, corpus, vocab, objectives, args.seed, args.draws);
        for (Objective o : kAllObjectives) {
            if (auto v = ev.mean.get(o)) metrics[objective_name(o)] = *v;
        }
        metrics["total"] = ev.mean.total;
        metrics["pecc_accuracy"] = ev.pecc_accuracy;
        metrics["n_documents"] = ev.n_documents;
        metrics["draws"] = args.draws;
        csv = "index,total,predicted_category\n";
        for (std::size_t i = 0; i < ev.n_documents; ++i) {
            csv += std::to_string(i) + "," + fmt(ev.document_totals[i]) + "," +
                   std::to_string(ev.predicted_categories[i]) + "\n";
        }
    } else if (args.task == "kbc") {
        if (!model.has_tagging_head() || !ckpt.metadata.count("labels")) {
            throw ConfigError("checkpoint " + args.checkpoint + " has no tagging head; fine-tune with --task kbc first");
        }
        const BioLabelSet labels = BioLabelSet::deserialize(ckpt.metadata.at("labels"));
        const auto examples = load_kbc(args.data);
        const KbcReport r = evaluate_kbc(model, vocab, labels, examples);
        metrics["span_precision"] = r.spans.precision;
        metrics["span_recall"] = r.spans.recall;
        metrics["span_f1"] = r.spans.f1;
        metrics["span_averaging"] = "micro";
        metrics["exact_match"] = r.exact_match;
        csv = "id,gold,predicted\n";
        for (std::size_t i = 0; i < examples.size(); ++i) {
            csv += csv_field(examples[i].id) + "," + csv_field(join(examples[i].labels)) + "," +
                   csv_field(join(r.predictions[i])) + "\n";
        }
    } else if (args.task == "sum") {
        run_generation(load_pairs(args.data));
    } else if (args.task == "dialog-gen") {
        run_generation(dialogue_pairs(load_dialogues(args.data), model.config().max_len));
    } else if (args.task == "dialog-ret") {
        const auto dialogues = load_dialogues(args.data);
        const RetrievalReport r = evaluate_retrieval(dialogues, [&](const DialogueExample& d, const TokenList& c) {
            return retrieval_score(model, vocab, d.turns, c);
        });
        metrics["n_candidates"] = r.n_candidates;
        for (const auto& [k, v] : r.recall) {
            metrics["r" + std::to_string(r.n_candidates) + "@" + std::to_string(k)] = v;
        }
        csv = "id,gold_rank\n";
        for (std::size_t i = 0; i < dialogues.size(); ++i) {
            csv += csv_field(dialogues[i].id) + "," + std::to_string(r.gold_ranks[i]) + "\n";
        }
    } else {
        throw ConfigError("unknown task '" + args.task + "' (expected pretrain, kbc, sum, dialog-ret or dialog-gen)");
    }

    write_json(dir / "metrics.json", metrics);
    write_text(dir / "examples.csv", csv);
    std::cout << metrics.dump(2) << '\n';
    return 0;
}

// ---------------------------------------------------------------------------

int cmd_generate(const GenerateArgs& args) {
    if (args.beam_size == 0) throw ConfigError("--beam must be >= 1");
    const Checkpoint ckpt = load_checked(args.checkpoint);
    require_file(args.input, "input");
    const Vocab vocab = checkpoint_vocab(ckpt, args.vocab);
    TransformerModel model = model_from_checkpoint(ckpt);
    BeamConfig beam;
    beam.beam_size = args.beam_size;
    beam.length_penalty = args.length_penalty;
    beam.max_len = args.max_gen_len;

    std::ifstream in(args.input);
    std::string jsonl;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const TokenList source = split_whitespace(line);
        if (source.empty()) continue;
        if (source.size() + 1 > model.config().max_len) {
            throw ConfigError(args.input + ":" + std::to_string(line_no) + ": source of " +
                              std::to_string(source.size()) + " tokens exceeds max_len");
        }
        const TokenList output = generate(model, vocab, source, beam);
        jsonl += json{{"id", "line-" + std::to_string(line_no)}, {"source", source}, {"output", output}}.dump() + "\n";
        std::cout << join(output) << '\n';
    }
    const fs::path dir = make_out_dir(args.out);
    write_text(dir / "generations.jsonl", jsonl);
    return 0;
}

// ---------------------------------------------------------------------------

GradCheckReport preset_gradcheck(const std::string& preset, std::uint64_t seed, std::size_t coords_per_tensor) {
    ModelConfig cfg = ModelConfig::preset(preset);
    cfg.dropout_p = 0.0;
    TransformerModel model(cfg, seed, InitScheme::normal, Precision::f64);

    // Two aspects of three tokens each, with knowledge tokens and summaries,
    // so that every objective has work to do. Kept short: each checked
    // coordinate costs two full joint forwards.
    FlatDocument doc;
    doc.tokens = {kClsId, 10, 11, 12, 13, 14, 15};
    doc.boundary_labels = {0, 1, 0, 0, 1, 0, 0};
    doc.knowledge_mask = {0, 0, 1, 0, 0, 1, 1};
    doc.category = 5;
    doc.aspect_offsets = {{1, 4}, {4, 7}};
    doc.summaries = {{20, 21}, {22}};
    std::mt19937_64 rng(seed);
    const JointInstances inst = build_joint_instances(doc, cfg.vocab_size, rng);

    GradCheckOptions opt;
    opt.max_coords_per_tensor = coords_per_tensor;
    opt.seed = seed;
    // Coordinates whose true gradient is exactly zero (e.g. key biases, which
    // softmax ignores) only see roundoff, which shrinks with a larger step.
    // A few FFN weights sit where GELU curves sharply and the plain central
    // difference is off by ~1e-10 absolute; those get the five-point stencil.
    opt.eps = 1e-4;
    opt.refine_eps = 1e-3;
    opt.abs_floor = 1e-6;
    return grad_check([&] { return joint_loss(model, inst, all_objectives()).total_tensor; }, model.parameters(), opt);
}

int cmd_gradcheck(const GradcheckArgs& args) {
    if (args.coords == 0) throw ConfigError("--coords must be >= 1");
    try {
        ModelConfig::preset(args.preset);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckReport report = preset_gradcheck(args.preset, args.seed, args.coords);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    json tensors = json::array();
    for (const auto& t : report.tensors) {
        std::printf("%-40s %5zu coords  max rel err %.3e  %s\n", t.name.c_str(), t.coords_checked, t.max_rel_error,
                    t.passed ? "ok" : "FAIL");
        tensors.push_back({{"name", t.name},
                           {"coords", t.coords_checked},
                           {"max_rel_error", t.max_rel_error},
                           {"worst_analytic", t.worst_analytic},
                           {"worst_numeric", t.worst_numeric},
                           {"passed", t.passed}});
    }
    std::printf("%s: max rel err %.3e over %zu coords in %zu tensors (%.1f s)\n",
                report.passed() ? "passed" : "FAILED", report.max_rel_error(), report.total_coords(),
                report.tensors.size(), secs);
    if (!args.out.empty()) {
        const fs::path dir = make_out_dir(args.out);
        write_json(dir / "gradcheck.json", {{"preset", args.preset},
                                            {"seed", args.seed},
                                            {"coords_per_tensor", args.coords},
                                            {"passed", report.passed()},
                                            {"max_rel_error", report.max_rel_error()},
                                            {"total_coords", report.total_coords()},
                                            {"tensors", tensors}});
    }
    return report.passed() ? 0 : 2;
}

}  // namespace kpt::cli
