#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "kpt/tasks.hpp"
#include "test_support.hpp"

using namespace kpt;
using kpt::testing::TempDir;

namespace {

ModelConfig small_config(std::size_t vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.d_ff = 32;
    c.max_len = 32;
    return c;
}

SpanSet random_spans(std::mt19937_64& rng, std::size_t n_tokens) {
    static const std::vector<std::string> attrs = {"Color", "Size", "Material"};
    SpanSet spans;
    std::size_t i = 0;
    while (i < n_tokens) {
        if (kpt::testing::random_size(rng, 0, 2) == 0) {
            const std::size_t len = kpt::testing::random_size(rng, 1, std::min<std::size_t>(3, n_tokens - i));
            spans.push_back({attrs[kpt::testing::random_size(rng, 0, 2)], i, i + len, {}});
            i += len;
        } else {
            ++i;
        }
    }
    return spans;
}

// Exhaustive search over every length-L sequence, ties to the lexicographically
// smallest. Scores are summed left to right like the beam does.
Hypothesis exhaustive_best(NextTokenScorer& scorer, std::size_t length) {
    const std::size_t v = scorer.vocab_size();
    Hypothesis best;
    bool have = false;
    std::vector<int> seq(length, 0);
    std::size_t total = 1;
    for (std::size_t i = 0; i < length; ++i) total *= v;
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
        if (!have || score > best.score) {
            best.tokens = seq;
            best.score = score;
            have = true;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("BIO label set ids") {
    BioLabelSet set({"Color", "Size"});
    CHECK(set.size() == 5);
    CHECK(set.id("O") == 0);
    CHECK(set.id("Color-B") == 1);
    CHECK(set.id("Color-I") == 2);
    CHECK(set.id("Size-B") == 3);
    CHECK(set.id("Size-I") == 4);
    CHECK(set.label(4) == "Size-I");
    CHECK_THROWS(set.id("Brand-B"));
    CHECK(BioLabelSet::deserialize(set.serialize()).attributes() == set.attributes());
    const BioLabelSet from = BioLabelSet::from_labels({{"O", "Size-B"}, {"Color-B", "Color-I"}});
    CHECK(from.attributes() == std::vector<std::string>{"Color", "Size"});
}

TEST_CASE("worked example: bright yellow collar") {
    const TokenList tokens = {"A", "bright", "yellow", "collar"};
    const std::vector<std::string> labels = {"O", "Color-B", "Color-I", "O"};
    const SpanSet spans = decode_bio(labels, tokens);
    REQUIRE(spans.size() == 1);
    CHECK(spans[0].attribute == "Color");
    CHECK(spans[0].start == 1);
    CHECK(spans[0].end == 3);
    CHECK(spans[0].value == TokenList{"bright", "yellow"});
    CHECK(encode_bio(spans, 4) == labels);
}

TEST_CASE("decode_bio: orphan I opens a span, attribute switch splits") {
    const SpanSet a = decode_bio({"Color-I", "Color-I", "O"}, {});
    REQUIRE(a.size() == 1);
    CHECK(a[0].start == 0);
    CHECK(a[0].end == 2);
    const SpanSet b = decode_bio({"Color-B", "Size-I", "Size-I"}, {});
    REQUIRE(b.size() == 2);
    CHECK(b[1].attribute == "Size");
    CHECK(b[1].start == 1);
    const SpanSet c = decode_bio({"Color-B", "Color-B"}, {});
    CHECK(c.size() == 2);
}

TEST_CASE("encode then decode BIO is the identity on valid span sets") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = kpt::testing::random_size(rng, 0, 15);
        const SpanSet spans = random_spans(rng, n);
        const SpanSet back = decode_bio(encode_bio(spans, n), {});
        REQUIRE(back.size() == spans.size());
        for (std::size_t i = 0; i < spans.size(); ++i) REQUIRE(back[i].same_span(spans[i]));
    }
}

TEST_CASE("encode_bio rejects bad spans") {
    CHECK_THROWS(encode_bio({{"A", 0, 3, {}}}, 2));
    CHECK_THROWS(encode_bio({{"A", 1, 1, {}}}, 2));
    CHECK_THROWS(encode_bio({{"A", 0, 2, {}}, {"B", 1, 3, {}}}, 4));
}

TEST_CASE("synthetic KBC data: labels align and the worked example appears") {
    const auto data = generate_kbc(1, 5000);
    bool worked = false;
    std::set<std::string> attrs;
    for (const auto& ex : data) {
        REQUIRE(ex.labels.size() == ex.tokens.size());
        for (const auto& s : decode_bio(ex.labels, ex.tokens)) attrs.insert(s.attribute);
        if (ex.tokens == TokenList{"A", "bright", "yellow", "collar"}) worked = true;
    }
    CHECK(attrs.size() == 8);
    CHECK(worked);
    const auto again = generate_kbc(1, 5000);
    CHECK(again.front().tokens == data.front().tokens);
}

TEST_CASE("task files round trip") {
    TempDir dir("tasks");
    const auto kbc = generate_kbc(2, 20);
    save_kbc(dir / "kbc.jsonl", kbc);
    const auto kbc_back = load_kbc(dir / "kbc.jsonl");
    REQUIRE(kbc_back.size() == kbc.size());
    for (std::size_t i = 0; i < kbc.size(); ++i) {
        CHECK(kbc_back[i].tokens == kbc[i].tokens);
        CHECK(kbc_back[i].labels == kbc[i].labels);
    }

    const auto pairs = generate_summaries(3, 7);
    CHECK(pairs.size() == 7);
    save_pairs(dir / "sum.jsonl", pairs);
    const auto pairs_back = load_pairs(dir / "sum.jsonl");
    REQUIRE(pairs_back.size() == pairs.size());
    CHECK(pairs_back[3].target == pairs[3].target);

    const auto dlg = generate_dialogues(4, 5, 3);
    save_dialogues(dir / "dlg.jsonl", dlg);
    const auto dlg_back = load_dialogues(dir / "dlg.jsonl");
    REQUIRE(dlg_back.size() == dlg.size());
    CHECK(dlg_back[2].turns == dlg[2].turns);
    CHECK(dlg_back[2].negatives == dlg[2].negatives);

    kpt::testing::write_file(dir / "bad.jsonl", "{\"id\":\"a\",\"source\":[\"x\"],\"target\":[\"y\"]}\nnot json\n");
    try {
        load_pairs(dir / "bad.jsonl");
        FAIL("expected an error");
    } catch (const CorpusError& e) {
        CHECK(std::string(e.what()).find("bad.jsonl:2:") != std::string::npos);
    }
}

TEST_CASE("synthetic dialogues: the gold response shares the context marker") {
    for (const auto& d : generate_dialogues(5, 200, 9)) {
        REQUIRE(d.negatives.size() == 9);
        auto marker_of = [](const TokenList& t) {
            std::string m;
            for (const auto& w : t)
                if (w[0] == 'm') m = w;
            return m;
        };
        std::string ctx;
        for (const auto& turn : d.turns)
            if (!marker_of(turn).empty()) ctx = marker_of(turn);
        REQUIRE(!ctx.empty());
        REQUIRE(marker_of(d.response) == ctx);
        for (const auto& n : d.negatives) REQUIRE(marker_of(n) != ctx);
    }
}

TEST_CASE("dialogue context keeps the newest turns") {
    const std::vector<TokenList> turns = {{"a", "b", "c"}, {"d", "e"}, {"f"}};
    CHECK(context_tokens(turns, 100) == TokenList{"a", "b", "c", "[SEP]", "d", "e", "[SEP]", "f", "[SEP]"});
    CHECK(context_tokens(turns, 5) == TokenList{"d", "e", "[SEP]", "f", "[SEP]"});
    CHECK(context_tokens(turns, 2) == TokenList{"f", "[SEP]"});
    CHECK_THROWS(context_tokens(turns, 1));
    CHECK_THROWS(context_tokens({}, 10));
}

TEST_CASE("rank_candidates: descending, ties by index") {
    CHECK(rank_candidates(std::vector<double>{0.1, 0.5, 0.5, 0.2}) == std::vector<std::size_t>{1, 2, 3, 0});
    CHECK(rank_candidates(std::vector<double>{1, 1, 1}) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("retrieval evaluation: oracle and constant scorers") {
    const auto dlg = generate_dialogues(6, 300, 9);
    auto oracle = [](const DialogueExample& d, const TokenList& c) { return c == d.response ? 1.0 : 0.0; };
    const RetrievalReport perfect = evaluate_retrieval(dlg, oracle);
    CHECK(perfect.n_candidates == 10);
    CHECK(perfect.recall.at(1) == 1.0);
    // a constant scorer must not benefit from where the gold sits
    const RetrievalReport flat = evaluate_retrieval(dlg, [](const DialogueExample&, const TokenList&) { return 0.0; });
    CHECK(flat.recall.at(1) < 0.25);
    CHECK(flat.recall.at(1) <= flat.recall.at(2));
    CHECK(flat.recall.at(2) <= flat.recall.at(5));
}

TEST_CASE("beam search agrees with exhaustive enumeration") {
    BeamConfig cfg;
    cfg.beam_size = 1296;
    cfg.max_len = 4;
    cfg.eos.reset();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        HashedToyScorer scorer(seed, {static_cast<int>(seed % 3)}, 6);
        const Hypothesis beam = beam_search(scorer, cfg);
        const Hypothesis oracle = exhaustive_best(scorer, 4);
        CHECK(beam.tokens == oracle.tokens);
        CHECK(beam.score == oracle.score);
    }
}

TEST_CASE("beam 1 is greedy; wider beams do not lose to greedy") {
    BeamConfig cfg;
    cfg.max_len = 8;
    cfg.eos = 2;
    cfg.length_penalty = 0.0;
    std::size_t wins = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        HashedToyScorer scorer(seed, {1, 2, 3}, 6);
        const Hypothesis greedy = greedy_decode(scorer, cfg);
        BeamConfig one = cfg;
        one.beam_size = 1;
        const Hypothesis b1 = beam_search(scorer, one);
        REQUIRE(b1.tokens == greedy.tokens);
        REQUIRE(b1.score == greedy.score);
        BeamConfig five = cfg;
        five.beam_size = 5;
        const Hypothesis b5 = beam_search(scorer, five);
        if (b5.score >= greedy.score) ++wins;
    }
    CHECK(wins == 100);
}

TEST_CASE("beam search: finished hypotheses end in EOS") {
    BeamConfig cfg;
    cfg.max_len = 6;
    cfg.eos = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        HashedToyScorer scorer(seed, {}, 5);
        const Hypothesis h = beam_search(scorer, cfg);
        REQUIRE(h.tokens.size() <= 6);
        if (h.finished) {
            REQUIRE(h.tokens.back() == 0);
            REQUIRE(std::count(h.tokens.begin(), h.tokens.end(), 0) == 1);
        }
    }
    CHECK_THROWS(beam_search(*std::make_unique<HashedToyScorer>(1, std::vector<int>{}, 5), BeamConfig{0}));
}

TEST_CASE("tagger fine-tuning lowers the loss") {
    const auto data = generate_kbc(11, 40);
    Vocab vocab = Vocab::build(token_streams(data));
    std::vector<std::vector<std::string>> seqs;
    for (const auto& ex : data) seqs.push_back(ex.labels);
    const BioLabelSet labels = BioLabelSet::from_labels(seqs);
    TransformerModel model(small_config(vocab.size()), 3);
    FinetuneConfig cfg;
    cfg.schedule = {20, 300};
    cfg.adam.peak_lr = 1e-2;
    std::vector<double> losses;
    finetune_tagger(model, vocab, labels, data, cfg, [&](std::size_t, double, double loss) { losses.push_back(loss); });
    REQUIRE(losses.size() == 300);
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        head += losses[i];
        tail += losses[losses.size() - 1 - i];
    }
    CHECK(tail < 0.5 * head);
    CHECK(model.has_tagging_head());
    const auto pred = tag(model, vocab, labels, data[0].tokens);
    CHECK(pred.size() == data[0].tokens.size());
}

TEST_CASE("seq2seq fine-tuning and generation") {
    const std::vector<Seq2SeqPair> pairs = {{"a", {"x", "y"}, {"y", "x"}}, {"b", {"z"}, {"z", "z"}}};
    Vocab vocab = Vocab::build(token_streams(pairs));
    TransformerModel model(small_config(vocab.size()), 4);
    FinetuneConfig cfg;
    cfg.schedule = {5, 150};
    cfg.adam.peak_lr = 1e-2;
    finetune_seq2seq(model, vocab, pairs, cfg);
    BeamConfig beam;
    beam.max_len = 6;
    CHECK(generate(model, vocab, {"x", "y"}, beam) == TokenList{"y", "x"});
    CHECK(generate(model, vocab, {"z"}, beam) == TokenList{"z", "z"});
    // beam 1 equals greedy through the model scorer as well
    ModelScorer scorer(model, vocab.encode(TokenList{"x", "y"}));
    BeamConfig one = beam;
    one.beam_size = 1;
    CHECK(beam_search(scorer, one).tokens == greedy_decode(scorer, one).tokens);
}

TEST_CASE("retrieval fine-tuning separates gold from negatives") {
    const auto train = generate_dialogues(12, 60, 3);
    Vocab vocab = Vocab::build(token_streams(train));
    TransformerModel model(small_config(vocab.size()), 5);
    FinetuneConfig cfg;
    cfg.schedule = {5, 40};
    cfg.adam.peak_lr = 3e-3;
    std::vector<double> losses;
    finetune_retrieval(model, vocab, train, cfg, [&](std::size_t, double, double l) { losses.push_back(l); });
    REQUIRE(losses.size() == 40);
    for (double l : losses) CHECK(std::isfinite(l));
    const double s = retrieval_score(model, vocab, train[0].turns, train[0].response);
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
}
