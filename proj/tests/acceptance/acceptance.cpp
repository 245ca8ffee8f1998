// Runs the acceptance criteria and prints one [PASS]/[FAIL] line for each.
// With arguments, only the named criteria run (e.g. `acceptance AC-4 AC-9`).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "commands.hpp"
#include "kpt/corpus.hpp"
#include "kpt/metrics.hpp"
#include "kpt/objectives.hpp"
#include "kpt/ops.hpp"
#include "kpt/tasks.hpp"
#include "kpt/train.hpp"

#ifndef KPT_CLI_PATH
#error "KPT_CLI_PATH must point at the kpt binary"
#endif

using namespace kpt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("kpt_acceptance_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// [CLS] + m content tokens with knowledge at the given 1-based positions.
FlatDocument synthetic_flat(std::size_t m, const std::set<std::size_t>& knowledge) {
    FlatDocument f;
    f.tokens.push_back(kClsId);
    f.boundary_labels.push_back(0);
    f.knowledge_mask.push_back(0);
    for (std::size_t p = 1; p <= m; ++p) {
        f.tokens.push_back(7 + static_cast<int>(p % 50));
        f.boundary_labels.push_back(p == 1 ? 1 : 0);
        f.knowledge_mask.push_back(knowledge.count(p) ? 1 : 0);
    }
    f.aspect_offsets.push_back({1, m + 1});
    f.summaries.push_back({8});
    return f;
}

// ---------------------------------------------------------------------------

Outcome ac1() {
    const auto t0 = Clock::now();
    const GradCheckReport r = cli::preset_gradcheck("desk", 1, 500);
    const double secs = seconds_since(t0);
    // at least 500 coordinates per tensor, or all of a smaller one
    std::map<std::string, std::size_t> numel;
    TransformerModel shapes(ModelConfig::desk(), 1, InitScheme::normal, Precision::f64);
    for (const auto& [name, t] : shapes.parameters()) numel[name] = t.numel();
    bool enough = r.tensors.size() == numel.size();
    for (const auto& t : r.tensors) {
        if (t.coords_checked < std::min<std::size_t>(500, numel[t.name])) enough = false;
    }
    const bool pass = r.passed() && r.max_rel_error() < 1e-4 && enough && secs < 120.0;
    return {pass, fmt("max rel err %.3e over %zu coords in %zu tensors (>= 500 each: %s), %.1f s (limits 1e-4, 120 s)",
                      r.max_rel_error(), r.total_coords(), r.tensors.size(), enough ? "yes" : "no", secs)};
}

Outcome ac2() {
    std::mt19937_64 rng(2024);
    std::size_t counts[3] = {0, 0, 0}, total = 0;
    bool budget_ok = true, knowledge_ok = true;
    std::vector<std::size_t> positions(100);
    for (std::size_t i = 0; i < 100; ++i) positions[i] = i + 1;
    for (int n = 0; n < 10000; ++n) {
        std::shuffle(positions.begin(), positions.end(), rng);
        const std::set<std::size_t> knowledge(positions.begin(), positions.begin() + 10);
        const FlatDocument f = synthetic_flat(100, knowledge);
        const MaskedInstance inst = kmlm_mask(f, 200, rng);
        if (inst.targets.size() != 15) budget_ok = false;
        std::set<std::size_t> chosen;
        for (const auto& [pos, id] : inst.targets) chosen.insert(pos);
        for (std::size_t k : knowledge) {
            if (!chosen.count(k)) knowledge_ok = false;
        }
        for (Corruption c : inst.corruption) {
            ++counts[static_cast<int>(c)];
            ++total;
        }
    }
    const double n = static_cast<double>(total);
    const double mask = counts[0] / n, rnd = counts[1] / n, keep = counts[2] / n;
    const bool mix_ok = std::abs(mask - 0.8) <= 0.01 && std::abs(rnd - 0.1) <= 0.01 && std::abs(keep - 0.1) <= 0.01;
    return {budget_ok && knowledge_ok && mix_ok,
            fmt("budget 15 every instance: %s; all knowledge selected: %s; mix %.4f/%.4f/%.4f (tolerance 0.01)",
                budget_ok ? "yes" : "no", knowledge_ok ? "yes" : "no", mask, rnd, keep)};
}

Outcome ac3() {
    std::mt19937_64 rng(33);
    std::size_t bad_cover = 0, bad_len = 0, n = 0;
    for (std::size_t m : {10, 20, 33, 100}) {
        const auto want_len = static_cast<std::size_t>(std::lround(0.3 * static_cast<double>(m)));
        std::uniform_real_distribution<double> density(0.0, 0.6);
        for (int trial = 0; trial < 1000; ++trial, ++n) {
            std::bernoulli_distribution b(density(rng));
            std::set<std::size_t> knowledge;
            for (std::size_t p = 1; p <= m; ++p) {
                if (b(rng)) knowledge.insert(p);
            }
            const FlatDocument f = synthetic_flat(m, knowledge);
            const MaskedInstance inst = kms2s_mask(f, rng);
            const std::size_t len = inst.span_end - inst.span_start + 1;
            if (len != want_len) ++bad_len;
            std::size_t best = 0, got = 0;
            for (std::size_t u = 1; u + want_len - 1 <= m; ++u) {
                std::size_t c = 0;
                for (std::size_t p = u; p < u + want_len; ++p) c += knowledge.count(p);
                best = std::max(best, c);
                if (u == inst.span_start) got = c;
            }
            if (got != best) ++bad_cover;
        }
    }
    return {bad_cover == 0 && bad_len == 0,
            fmt("%zu instances over M in {10,20,33,100}: %zu below brute-force coverage, %zu wrong length", n,
                bad_cover, bad_len)};
}

// Settings for the overfit run. Short documents (about 14 tokens) keep the
// 10% random-replacement targets learnable inside the time budget; with the
// plain tiny profile the same budget stalls around 0.15.
constexpr std::uint64_t kOverfitCorpusSeed = 7;
constexpr std::size_t kOverfitSteps = 2000;
constexpr std::size_t kOverfitAccum = 24;
constexpr double kOverfitLr = 3e-3;

GeneratorProfile overfit_profile() {
    GeneratorProfile p = GeneratorProfile::named("tiny");
    p.min_description = 5;
    p.max_description = 8;
    p.max_aspects = 2;
    return p;
}

Outcome ac4() {
    const Corpus corpus = generate_synthetic(kOverfitCorpusSeed, 32, overfit_profile());
    const Vocab vocab = build_vocab(corpus, 1);
    PretrainConfig cfg;
    cfg.model = ModelConfig::desk();
    cfg.init = InitScheme::zero_output;
    cfg.schedule = {kOverfitSteps / 20, kOverfitSteps};
    cfg.adam.peak_lr = kOverfitLr;
    cfg.accum_steps = kOverfitAccum;
    cfg.seed = 1;

    const auto t0 = Clock::now();
    PretrainResult r = pretrain(corpus, vocab, cfg);
    const double secs = seconds_since(t0);

    const double v = static_cast<double>(cfg.model.vocab_size);
    const double expected0 = 3 * std::log(v) + std::log(2.0) + std::log(40.0);
    const double initial = r.trace.front().losses.total;
    const PretrainEval ev = evaluate_pretraining(r.model, corpus, vocab, all_objectives(), 99, 4);

    const bool init_ok = std::abs(initial - expected0) < 1e-3;
    const bool loss_ok = ev.mean.total < 0.1;
    const bool acc_ok = ev.pecc_accuracy == 1.0;
    const bool time_ok = secs < 600.0;
    return {init_ok && loss_ok && acc_ok && time_ok,
            fmt("initial %.6f vs %.6f; final mean total %.4f (< 0.1) [kmlm %.4f]; pecc accuracy %.3f; "
                "%zu steps x %zu docs in %.1f s (< 600)",
                initial, expected0, ev.mean.total, ev.mean.kmlm.value_or(0.0), ev.pecc_accuracy, kOverfitSteps,
                kOverfitAccum, secs)};
}

Outcome ac5() {
    const auto train = generate_kbc(1, 500);
    const auto test = generate_kbc(2, 100);
    std::set<std::string> attributes;
    for (const auto& ex : train) {
        for (const auto& s : decode_bio(ex.labels, ex.tokens)) attributes.insert(s.attribute);
    }
    const Vocab vocab = Vocab::build(token_streams(train), 1);
    std::vector<std::vector<std::string>> seqs;
    for (const auto& ex : train) seqs.push_back(ex.labels);
    const BioLabelSet labels = BioLabelSet::from_labels(seqs);

    ModelConfig mc = ModelConfig::desk();
    mc.vocab_size = std::max(mc.vocab_size, vocab.size());
    TransformerModel model(mc, 1, InitScheme::normal);
    FinetuneConfig fc;
    fc.schedule = {50, 500};
    fc.adam.peak_lr = 1e-3;
    const auto t0 = Clock::now();
    finetune_tagger(model, vocab, labels, train, fc);
    const KbcReport r = evaluate_kbc(model, vocab, labels, test);

    const TokenList example = {"A", "bright", "yellow", "collar"};
    const SpanSet spans = decode_bio(tag(model, vocab, labels, example), example);
    const bool worked = spans.size() == 1 && spans[0].attribute == "Color" && spans[0].start == 1 &&
                        spans[0].end == 3 && spans[0].value == TokenList{"bright", "yellow"};
    std::string decoded;
    for (const auto& s : spans) {
        decoded += " (" + s.attribute + ",";
        for (const auto& w : s.value) decoded += " " + w;
        decoded += ")";
    }
    return {r.spans.f1 >= 0.95 && worked && attributes.size() == 8,
            fmt("%zu attributes; held-out span F1 %.4f (>= 0.95); worked example ->%s; %.1f s", attributes.size(),
                r.spans.f1, decoded.empty() ? " (none)" : decoded.c_str(), seconds_since(t0))};
}

double exhaustive_best_score(NextTokenScorer& scorer, std::size_t length, std::vector<int>& best_tokens) {
    const std::size_t v = scorer.vocab_size();
    std::size_t total = 1;
    for (std::size_t i = 0; i < length; ++i) total *= v;
    double best = -INFINITY;
    std::vector<int> seq(length);
    for (std::size_t code = 0; code < total; ++code) {
        std::size_t c = code;
        for (std::size_t i = length; i-- > 0;) {
            seq[i] = static_cast<int>(c % v);
            c /= v;
        }
        double score = 0.0;
        std::vector<int> prefix;
        for (int t : seq) {
            score = score + scorer.log_probs(prefix)[static_cast<std::size_t>(t)];
            prefix.push_back(t);
        }
        if (score > best) {
            best = score;
            best_tokens = seq;
        }
    }
    return best;
}

Outcome ac6() {
    BeamConfig full;
    full.beam_size = 1296;
    full.max_len = 4;
    full.length_penalty = 0.0;
    full.eos.reset();
    std::size_t exhaustive_ok = 0, beam5_ok = 0, greedy_ok = 0;
    const std::size_t n = 100;
    for (std::uint64_t seed = 0; seed < n; ++seed) {
        HashedToyScorer scorer(seed, {static_cast<int>(seed % 6), static_cast<int>(seed / 6 % 6)}, 6);
        std::vector<int> oracle;
        const double oracle_score = exhaustive_best_score(scorer, 4, oracle);
        const Hypothesis all = beam_search(scorer, full);
        if (all.tokens == oracle && all.score == oracle_score) ++exhaustive_ok;

        BeamConfig five = full;
        five.beam_size = 5;
        BeamConfig one = full;
        one.beam_size = 1;
        const Hypothesis greedy = greedy_decode(scorer, one);
        if (beam_search(scorer, five).score >= greedy.score) ++beam5_ok;
        const Hypothesis b1 = beam_search(scorer, one);
        if (b1.tokens == greedy.tokens && b1.score == greedy.score) ++greedy_ok;
    }
    return {exhaustive_ok == n && beam5_ok == n && greedy_ok == n,
            fmt("beam 1296 = exhaustive on %zu/%zu; beam 5 >= greedy on %zu/%zu; beam 1 = greedy bitwise on "
                "%zu/%zu",
                exhaustive_ok, n, beam5_ok, n, greedy_ok, n)};
}

Outcome ac7() {
    const auto train = generate_dialogues(1, 1000, 9);
    const auto test = generate_dialogues(2, 200, 9);
    const Vocab vocab = Vocab::build(token_streams(train), 1);
    ModelConfig mc = ModelConfig::desk();
    mc.vocab_size = std::max(mc.vocab_size, vocab.size());
    TransformerModel model(mc, 1, InitScheme::normal);
    FinetuneConfig fc;
    fc.schedule = {200, 2000};
    fc.adam.peak_lr = 1e-3;
    const auto t0 = Clock::now();
    finetune_retrieval(model, vocab, train, fc);
    model.set_training(false);
    const RetrievalReport tuned = evaluate_retrieval(
        test, [&](const DialogueExample& d, const TokenList& c) { return retrieval_score(model, vocab, d.turns, c); });
    const double secs = seconds_since(t0);

    const auto many = generate_dialogues(3, 10000, 9);
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const RetrievalReport random =
        evaluate_retrieval(many, [&](const DialogueExample&, const TokenList&) { return u(rng); });

    const double r1 = tuned.recall.at(1), base = random.recall.at(1);
    return {r1 >= 0.95 && std::abs(base - 0.1) <= 0.02,
            fmt("fine-tuned R10@1 %.3f (>= 0.95) in %.1f s; random scorer R10@1 %.4f over 10000 (0.1 +- 0.02)", r1,
                secs, base)};
}

Outcome ac8() {
    const Tokens cand = {"the", "cat", "sat"}, ref = {"the", "cat", "ran"};
    const double r1 = rouge_n(cand, ref, 1).f1, r2 = rouge_n(cand, ref, 2).f1, rl = rouge_l(cand, ref).f1;
    const double b = bleu(cand, cand);
    // R10@k over a fixed spread of gold ranks
    std::vector<std::size_t> ranks;
    for (std::size_t i = 0; i < 50; ++i) ranks.push_back((i * 7) % 10);
    bool monotone = true;
    for (std::size_t k = 1; k < 10; ++k) {
        if (recall_at_k(ranks, 10, k) > recall_at_k(ranks, 10, k + 1)) monotone = false;
    }
    const SpanSet gold = {{"Color", 0, 1, {}}, {"Size", 2, 3, {}}, {"Brand", 4, 5, {}}};
    const SpanSet pred = {{"Color", 0, 1, {}}, {"Size", 2, 4, {}}};
    const PRF s = span_prf(pred, gold);
    const double tol = 1e-9;
    const bool pass = std::abs(r1 - 2.0 / 3) < tol && std::abs(r2 - 0.5) < tol && std::abs(rl - 2.0 / 3) < tol &&
                      std::abs(b - 1.0) < tol && monotone && std::abs(s.precision - 0.5) < tol &&
                      std::abs(s.recall - 1.0 / 3) < tol && std::abs(s.f1 - 0.4) < tol;
    return {pass, fmt("ROUGE-1/2/L %.12f/%.12f/%.12f; BLEU(c,c) %.12f; R10@k monotone: %s; span P/R/F1 "
                      "%.12f/%.12f/%.12f",
                      r1, r2, rl, b, monotone ? "yes" : "no", s.precision, s.recall, s.f1)};
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + KPT_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    return std::system(cmd.c_str());
}

Outcome ac9() {
    const fs::path dir = scratch_dir("repro");
    std::string detail;
    bool pass = true;

    if (run_cli("gen-corpus --seed 5 --n-docs 8 --profile tiny --out \"" + (dir / "corpus").string() + "\"",
                dir / "gen.log") != 0) {
        return {false, "kpt gen-corpus failed; see " + (dir / "gen.log").string()};
    }
    const std::string common = "pretrain --corpus \"" + (dir / "corpus" / "corpus.jsonl").string() + "\" --vocab \"" +
                               (dir / "corpus" / "vocab.txt").string() +
                               "\" --steps 30 --warmup 3 --lr 1e-3 --accum-steps 2 --seed 11 --out ";
    for (const char* run : {"run1", "run2"}) {
        if (run_cli(common + "\"" + (dir / run).string() + "\"", dir / (std::string(run) + ".log")) != 0) {
            return {false, std::string("kpt pretrain failed for ") + run};
        }
    }
    const std::string trace1 = read_bytes(dir / "run1" / "loss.csv");
    const std::string trace2 = read_bytes(dir / "run2" / "loss.csv");
    const bool traces_equal = !trace1.empty() && trace1 == trace2;
    pass = pass && traces_equal;
    detail += fmt("two process runs: loss traces %s (%zu bytes)", traces_equal ? "identical" : "DIFFER",
                  trace1.size());

    // save -> load -> forward against the in-memory model that was saved
    const Corpus corpus = generate_synthetic(5, 8, GeneratorProfile::named("tiny"));
    const Vocab vocab = build_vocab(corpus, 1);
    PretrainConfig cfg;
    cfg.model = ModelConfig::desk();
    cfg.schedule = {2, 20};
    cfg.adam.peak_lr = 1e-3;
    cfg.init = InitScheme::normal;
    PretrainResult r = pretrain(corpus, vocab, cfg);
    save_checkpoint(dir / "a.kpt", r.checkpoint);
    const Checkpoint loaded = load_checkpoint(dir / "a.kpt");
    TransformerModel reloaded = model_from_checkpoint(loaded);
    r.model.set_training(false);
    reloaded.set_training(false);
    const FlatDocument f = flatten(corpus[0], vocab, cfg.model.max_len);
    const std::vector<int> dec = {kBosId, f.tokens[1], f.tokens[2]};
    bool logits_equal = true;
    {
        NoGradGuard no_grad;
        const Tensor a = r.model.decode(r.model.encode(f.tokens), f.tokens, dec);
        const Tensor b = reloaded.decode(reloaded.encode(f.tokens), f.tokens, dec);
        logits_equal = a.numel() == b.numel();
        for (std::size_t i = 0; logits_equal && i < a.numel(); ++i) logits_equal = a.data()[i] == b.data()[i];
    }
    save_checkpoint(dir / "b.kpt", loaded);
    const bool bytes_equal = read_bytes(dir / "a.kpt") == read_bytes(dir / "b.kpt");
    // the CLI checkpoint must survive the same cycle
    const fs::path cli_ckpt = dir / "run1" / "checkpoint.kpt";
    save_checkpoint(dir / "c.kpt", load_checkpoint(cli_ckpt));
    const bool cli_bytes_equal = read_bytes(cli_ckpt) == read_bytes(dir / "c.kpt");
    pass = pass && logits_equal && bytes_equal && cli_bytes_equal;
    detail += fmt("; reload logits %s; save-load-save bytes %s (CLI checkpoint %s)",
                  logits_equal ? "bitwise equal" : "DIFFER", bytes_equal ? "identical" : "DIFFER",
                  cli_bytes_equal ? "identical" : "DIFFERS");
    if (pass) fs::remove_all(dir);
    return {pass, detail};
}

Outcome ac10() {
    const Corpus corpus = generate_synthetic(10, 8, GeneratorProfile::named("tiny"));
    const Vocab vocab = build_vocab(corpus, 1);
    std::string detail;
    bool pass = true;
    for (Objective off : kAllObjectives) {
        PretrainConfig cfg;
        cfg.model = ModelConfig::desk();
        cfg.schedule = {2, 12};
        cfg.adam.peak_lr = 1e-3;
        cfg.objectives = all_objectives();
        cfg.objectives.erase(off);
        bool ok = true;
        std::size_t rows = 0;
        try {
            const PretrainResult r = pretrain(corpus, vocab, cfg);
            for (const TraceRow& row : r.trace) {
                ++rows;
                double sum = 0.0;
                for (Objective o : kAllObjectives) {
                    const auto v = row.losses.get(o);
                    if (o == off) {
                        ok = ok && !v.has_value();
                    } else {
                        ok = ok && v.has_value() && std::isfinite(*v);
                        if (v) sum += *v;
                    }
                }
                ok = ok && std::abs(sum - row.losses.total) <= 1e-9 * std::max(1.0, std::abs(sum));
                // the CSV column of the disabled objective is empty
                std::vector<std::string> fields;
                std::stringstream ss(trace_line(row));
                for (std::string cell; std::getline(ss, cell, ',');) fields.push_back(cell);
                const std::size_t col = 2 + static_cast<std::size_t>(off);
                ok = ok && fields.size() == 8 && fields[col].empty();
                for (std::size_t c = 2; c < 7; ++c) {
                    if (c != col) ok = ok && !fields[c].empty();
                }
            }
        } catch (const std::exception& e) {
            ok = false;
            detail += std::string(" [") + e.what() + "]";
        }
        pass = pass && ok && rows == 12;
        detail += fmt("%s-%s %s", detail.empty() ? "" : "; ", objective_name(off), ok ? "ok" : "FAIL");
    }
    return {pass, detail};
}

struct Criterion {
    const char* id;
    const char* title;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all = {
        {"AC-1", "gradient correctness", ac1},   {"AC-2", "masking statistics", ac2},
        {"AC-3", "span selection optimality", ac3}, {"AC-4", "joint-objective overfit", ac4},
        {"AC-5", "KBC pipeline", ac5},           {"AC-6", "beam-search oracle", ac6},
        {"AC-7", "retrieval pipeline", ac7},     {"AC-8", "metric oracles", ac8},
        {"AC-9", "reproducibility and persistence", ac9}, {"AC-10", "ablation mechanics", ac10},
    };
    std::set<std::string> wanted(argv + 1, argv + argc);
    int failed = 0;
    for (const auto& c : all) {
        if (!wanted.empty() && !wanted.count(c.id)) continue;
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        std::printf("[%s] %s %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.title, o.detail.c_str());
        std::fflush(stdout);
        if (!o.pass) ++failed;
    }
    return failed == 0 ? 0 : 1;
}
