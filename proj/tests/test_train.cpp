#include <doctest.h>

#include <cmath>
#include <sstream>

#include "kpt/ops.hpp"
#include "kpt/train.hpp"
#include "test_support.hpp"

using namespace kpt;
using kpt::testing::TempDir;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.d_ff = 32;
    c.max_len = 64;
    return c;
}

struct SmallRun {
    Corpus corpus;
    Vocab vocab;
    PretrainConfig config;
};

SmallRun small_run(std::size_t steps = 6, std::uint64_t seed = 1) {
    SmallRun r;
    r.corpus = generate_synthetic(3, 4, GeneratorProfile::named("tiny"));
    r.vocab = build_vocab(r.corpus);
    r.config.model = small_config();
    r.config.schedule = {2, steps};
    r.config.adam.peak_lr = 1e-2;
    r.config.seed = seed;
    return r;
}

Tensor leaf(std::vector<double> values, Precision p = Precision::f64) {
    const std::size_t n = values.size();
    return Tensor::from({n}, std::move(values), p, true);
}

void set_grad(Tensor t, const std::vector<double>& g) {
    auto dst = t.mutable_grad();
    std::copy(g.begin(), g.end(), dst.begin());
}

std::string expect_checkpoint_error(const std::string& bytes) {
    try {
        deserialize_checkpoint(bytes);
    } catch (const CheckpointError& e) {
        return e.what();
    }
    return "<no error>";
}

}  // namespace

TEST_CASE("lr schedule: linear warmup then linear decay to zero") {
    const Schedule s{10, 110};
    CHECK(lr_at(0, s, 2.0) == 0.0);
    CHECK(lr_at(5, s, 2.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(lr_at(10, s, 2.0) == 2.0);
    CHECK(lr_at(60, s, 2.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(lr_at(110, s, 2.0) == 0.0);
    CHECK_THROWS_AS(lr_at(111, s, 2.0), std::out_of_range);
    CHECK_THROWS_AS((Schedule{0, 10}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((Schedule{10, 10}.validate()), std::invalid_argument);
}

TEST_CASE("lr schedule: peak at warmup end, never negative or above peak") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t total = kpt::testing::random_size(rng, 2, 500);
        const std::size_t warm = kpt::testing::random_size(rng, 1, total - 1);
        const Schedule s{warm, total};
        double prev = -1.0;
        for (std::size_t k = 0; k <= total; ++k) {
            const double lr = lr_at(k, s, 1.0);
            REQUIRE(lr >= 0.0);
            REQUIRE(lr <= 1.0);
            if (k <= warm) REQUIRE(lr >= prev);
            if (k > warm) REQUIRE(lr <= prev);
            prev = lr;
        }
        CHECK(lr_at(warm, s, 1.0) == 1.0);
    }
}

TEST_CASE("weight decay exemptions") {
    CHECK(decays("encoder.0.ffn.in.weight"));
    CHECK(decays("token_embedding"));
    CHECK_FALSE(decays("encoder.0.ffn.in.bias"));
    CHECK_FALSE(decays("encoder.0.norm1.gain"));
}

TEST_CASE("adam matches a scalar oracle over two steps") {
    // reference values from a plain-float re-implementation of the update rule
    Tensor w = leaf({1.0, -2.0});
    Tensor b = leaf({1.0, -2.0});
    const NamedTensors params = {{"layer.bias", b}, {"layer.weight", w}};
    OptimizerState state;
    set_grad(w, {0.5, -1.5});
    set_grad(b, {0.5, -1.5});
    adam_step(params, state, 0.1);
    zero_grads(params);
    set_grad(w, {0.25, 3.0});
    set_grad(b, {0.25, 3.0});
    adam_step(params, state, 0.05);
    CHECK(state.step == 2);
    CHECK(w.data()[0] == doctest::Approx(0.8518066533132593).epsilon(1e-14));
    CHECK(w.data()[1] == doctest::Approx(-1.9153036962382324).epsilon(1e-14));
    CHECK(b.data()[0] == doctest::Approx(0.8532561533142594).epsilon(1e-14));
    CHECK(b.data()[1] == doctest::Approx(-1.9182526962385658).epsilon(1e-14));
}

TEST_CASE("adam skips parameters without a gradient buffer") {
    Tensor touched = leaf({1.0});
    Tensor untouched = leaf({3.0});
    set_grad(touched, {1.0});
    OptimizerState state;
    adam_step({{"a", touched}, {"b", untouched}}, state, 0.1);
    CHECK(touched.data()[0] != 1.0);
    CHECK(untouched.data()[0] == 3.0);
    CHECK(state.first_moment.count("b") == 0);
}

TEST_CASE("adam keeps f32 parameters and moments representable in f32") {
    Tensor w = leaf({0.1, 0.2, 0.3}, Precision::f32);
    OptimizerState state;
    set_grad(w, {0.013, -0.7, 1e-3});
    adam_step({{"w", w}}, state, 1e-3);
    for (double x : w.data()) CHECK(static_cast<double>(static_cast<float>(x)) == x);
    for (double x : state.first_moment["w"]) CHECK(static_cast<double>(static_cast<float>(x)) == x);
    for (double x : state.second_moment["w"]) CHECK(static_cast<double>(static_cast<float>(x)) == x);
}

TEST_CASE("checkpoint round trip is lossless and byte stable") {
    SmallRun r = small_run();
    PretrainResult res = pretrain(r.corpus, r.vocab, r.config);
    const std::string bytes = serialize_checkpoint(res.checkpoint);
    CHECK(bytes.substr(0, 4) == "KPLG");
    Checkpoint back = deserialize_checkpoint(bytes);
    CHECK(back == res.checkpoint);
    CHECK(serialize_checkpoint(back) == bytes);
    REQUIRE(back.optimizer.has_value());
    CHECK(back.optimizer->step == 6);
    CHECK(back.metadata.at("task") == "pretrain");
    CHECK(back.metadata.at("objectives") == "kmlm,kms2s,peabd,pecc,peasg");

    TempDir dir("ckpt");
    save_checkpoint(dir / "a.ckpt", res.checkpoint);
    CHECK(kpt::testing::read_file(dir / "a.ckpt") == bytes);
    CHECK(load_checkpoint(dir / "a.ckpt") == res.checkpoint);
}

TEST_CASE("checkpoint reload reproduces logits bitwise") {
    TransformerModel model(small_config(), 9, InitScheme::normal, Precision::f32);
    model.attach_tagging_head(5);
    TransformerModel loaded = model_from_checkpoint(deserialize_checkpoint(serialize_checkpoint(make_checkpoint(model))));
    CHECK(loaded.has_tagging_head());
    CHECK(loaded.n_tag_labels() == 5);
    const std::vector<int> src = {kClsId, 7, 8, 9, 10};
    const std::vector<int> dec = {kBosId, 11, 12};
    NoGradGuard no_grad;
    Tensor a = model.decode(model.encode(src), src, dec);
    Tensor b = loaded.decode(loaded.encode(src), src, dec);
    REQUIRE(a.numel() == b.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) REQUIRE(a.data()[i] == b.data()[i]);
}

TEST_CASE("checkpoint without optimizer state") {
    TransformerModel model(small_config(), 2);
    Checkpoint c = make_checkpoint(model);
    CHECK_FALSE(c.optimizer.has_value());
    CHECK(deserialize_checkpoint(serialize_checkpoint(c)) == c);
}

TEST_CASE("corrupt checkpoints are rejected with named errors") {
    TransformerModel model(small_config(), 2);
    const std::string good = serialize_checkpoint(make_checkpoint(model));

    std::string bad = good;
    bad[0] = 'X';
    CHECK(expect_checkpoint_error(bad).rfind("bad magic", 0) == 0);

    bad = good;
    bad[4] = 7;
    CHECK(expect_checkpoint_error(bad) == "unsupported version 7");

    CHECK(expect_checkpoint_error(good + "x").find("blob length mismatch") != std::string::npos);

    // every truncation point fails cleanly
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t cut = kpt::testing::random_size(rng, 0, good.size() - 1);
        const std::string msg = expect_checkpoint_error(good.substr(0, cut));
        CAPTURE(cut);
        CHECK(msg.rfind(cut < 4 ? "bad magic" : "blob length mismatch", 0) == 0);
    }
    CHECK(expect_checkpoint_error(good.substr(0, good.size() - 4)) == "blob length mismatch");
    CHECK(expect_checkpoint_error(good.substr(0, 30)) == "blob length mismatch: file truncated");
}

TEST_CASE("trace lines leave disabled objectives empty") {
    TraceRow row;
    row.step = 3;
    row.lr = 0.25;
    row.losses.enabled = {Objective::kmlm, Objective::pecc};
    row.losses.kmlm = 1.5;
    row.losses.pecc = 0.125;
    row.losses.total = 1.625;
    CHECK(trace_header() == "step,lr,kmlm,kms2s,peabd,pecc,peasg,total");
    CHECK(trace_line(row) == "3,0.25,1.5,,,0.125,,1.625");
}

TEST_CASE("pretrain: first row total is 3 ln V + ln 2 + ln C at zero-output init") {
    SmallRun r = small_run(3);
    r.config.model.vocab_size = 200;
    PretrainResult res = pretrain(r.corpus, r.vocab, r.config);
    const double expected = 3 * std::log(200.0) + std::log(2.0) + std::log(40.0);
    CHECK(res.trace.front().losses.total == doctest::Approx(expected).epsilon(1e-5));
}

TEST_CASE("pretrain is deterministic under a fixed seed") {
    SmallRun r = small_run();
    PretrainResult a = pretrain(r.corpus, r.vocab, r.config);
    PretrainResult b = pretrain(r.corpus, r.vocab, r.config);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(trace_line(a.trace[i]) == trace_line(b.trace[i]));
    CHECK(serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint));

    SmallRun other = small_run(6, 2);
    PretrainResult c = pretrain(other.corpus, other.vocab, other.config);
    CHECK(serialize_checkpoint(c.checkpoint) != serialize_checkpoint(a.checkpoint));
}

TEST_CASE("pretrain with one objective traces only that column") {
    SmallRun r = small_run(4);
    r.config.objectives = {Objective::kmlm};
    PretrainResult res = pretrain(r.corpus, r.vocab, r.config);
    for (const auto& row : res.trace) {
        CHECK(row.losses.kmlm.has_value());
        CHECK_FALSE(row.losses.pecc.has_value());
        CHECK(row.losses.total == *row.losses.kmlm);
        const std::string line = trace_line(row);
        CHECK(line.find(",,,,") != std::string::npos);
    }
    CHECK(res.checkpoint.metadata.at("objectives") == "kmlm");
}

TEST_CASE("pretrain: accumulation averages micro-batch losses") {
    SmallRun r = small_run(4);
    r.config.accum_steps = 3;
    PretrainResult res = pretrain(r.corpus, r.vocab, r.config);
    for (const auto& row : res.trace) {
        double sum = 0.0;
        for (Objective o : kAllObjectives) sum += row.losses.get(o).value_or(0.0);
        CHECK(row.losses.total == sum);
    }
}

TEST_CASE("pretrain: the trace lr matches the schedule at each update") {
    SmallRun r = small_run(8);
    PretrainResult res = pretrain(r.corpus, r.vocab, r.config);
    for (const auto& row : res.trace) {
        CHECK(row.lr == lr_at(row.step + 1, r.config.schedule, r.config.adam.peak_lr));
    }
    CHECK(res.trace.back().lr == 0.0);
}

TEST_CASE("pretrain rejects invalid setups") {
    SmallRun r = small_run();
    PretrainConfig c = r.config;
    c.objectives.clear();
    CHECK_THROWS_AS(pretrain(r.corpus, r.vocab, c), std::invalid_argument);
    c = r.config;
    c.accum_steps = 0;
    CHECK_THROWS_AS(pretrain(r.corpus, r.vocab, c), std::invalid_argument);
    c = r.config;
    c.model.vocab_size = 10;
    CHECK_THROWS_AS(pretrain(r.corpus, r.vocab, c), std::invalid_argument);
    CHECK_THROWS_AS(pretrain({}, r.vocab, r.config), std::invalid_argument);
}

TEST_CASE("pretrain reports the step of a non-finite loss") {
    SmallRun r = small_run(40);
    r.config.adam.peak_lr = 1e30;
    r.config.adam.weight_decay = 0.0;
    try {
        pretrain(r.corpus, r.vocab, r.config);
        FAIL("expected NonFiniteLoss");
    } catch (const NonFiniteLoss& e) {
        CHECK(e.step() < 40);
        CHECK(std::string(e.what()).find("step " + std::to_string(e.step())) != std::string::npos);
    }
}

TEST_CASE("objective lists round trip") {
    CHECK(objectives_from_string("pecc,kmlm") == ObjectiveSet{Objective::kmlm, Objective::pecc});
    CHECK(objectives_to_string(all_objectives()) == "kmlm,kms2s,peabd,pecc,peasg");
    CHECK_THROWS(objectives_from_string("kmlm,nope"));
}
