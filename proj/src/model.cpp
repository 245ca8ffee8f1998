#include "kpt/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>

#include "kpt/corpus.hpp"
#include "kpt/ops.hpp"

namespace kpt {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
    ModelConfig c;
    c.d_model = 768;
    c.n_heads = 12;
    c.n_enc_layers = 6;
    c.n_dec_layers = 6;
    c.d_ff = 4 * 768;
    c.max_len = 512;
    c.dropout_p = 0.1;
    return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw std::invalid_argument("unknown model preset '" + name + "'");
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* field) {
        if (v == 0) throw std::invalid_argument(std::string("model config: ") + field + " must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(n_enc_layers, "n_enc_layers");
    positive(n_dec_layers, "n_dec_layers");
    positive(d_ff, "d_ff");
    positive(n_categories, "n_categories");
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("model config: d_model " + std::to_string(d_model) +
                                    " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (max_len < 2) throw std::invalid_argument("model config: max_len must be >= 2");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
        throw std::invalid_argument("model config: dropout_p must lie in [0,1)");
    }
    if (n_boundary_labels != 2) throw std::invalid_argument("model config: n_boundary_labels is fixed at 2");
    if (vocab_size < static_cast<std::size_t>(kNumSpecialTokens)) {
        throw std::invalid_argument("model config: vocab_size must cover the 7 special tokens");
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

Tensor Linear::operator()(const Tensor& x) const { return ops::add(ops::matmul(x, weight), bias); }

Tensor LayerNormParams::operator()(const Tensor& x) const { return ops::layer_norm(x, gain, bias, 1e-5); }

AttentionMask AttentionMask::full(std::size_t rows, std::size_t cols) {
    return {rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

AttentionMask AttentionMask::causal(std::size_t n) {
    AttentionMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c <= r; ++c) m.allowed[r * n + c] = 1;
    }
    return m;
}

AttentionMask AttentionMask::keys(std::size_t rows, const std::vector<std::uint8_t>& key_allowed) {
    AttentionMask m{rows, key_allowed.size(), {}};
    m.allowed.reserve(rows * key_allowed.size());
    for (std::size_t r = 0; r < rows; ++r) m.allowed.insert(m.allowed.end(), key_allowed.begin(), key_allowed.end());
    return m;
}

AttentionMask AttentionMask::operator&(const AttentionMask& other) const {
    if (rows != other.rows || cols != other.cols) throw ShapeError("attention mask shapes differ");
    AttentionMask m = *this;
    for (std::size_t i = 0; i < allowed.size(); ++i) m.allowed[i] = allowed[i] && other.allowed[i];
    return m;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                 Tensor* weights_out) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
        throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    }
    if (mask.rows != q.dim(0) || mask.cols != k.dim(0)) {
        throw ShapeError("attention: mask is " + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + " for scores " + std::to_string(q.dim(0)) +
                         "x" + std::to_string(k.dim(0)));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor scores = ops::scale(ops::matmul_nt(q, k), scale);
    Tensor weights = ops::masked_softmax(scores, mask.allowed);
    if (weights_out) *weights_out = weights;
    return ops::matmul(weights, v);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng, Precision precision) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return Tensor::from(std::move(shape), std::move(values), precision, true);
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, Precision precision) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
    return {normal_tensor({in, out}, stddev, rng, precision), Tensor::zeros({out}, precision, true)};
}

Linear zero_linear(std::size_t in, std::size_t out, Precision precision) {
    return {Tensor::zeros({in, out}, precision, true), Tensor::zeros({out}, precision, true)};
}

LayerNormParams make_ln(std::size_t d, Precision precision) {
    return {Tensor::full({d}, 1.0, precision), Tensor::zeros({d}, precision, true)};
}

AttentionParams make_attention(std::size_t d, std::mt19937_64& rng, Precision precision) {
    return {make_linear(d, d, rng, precision), make_linear(d, d, rng, precision),
            make_linear(d, d, rng, precision), make_linear(d, d, rng, precision)};
}

using Visitor = std::function<void(const std::string&, Tensor&)>;

void visit_linear(const std::string& name, Linear& l, const Visitor& fn) {
    fn(name + ".weight", l.weight);
    fn(name + ".bias", l.bias);
}

void visit_ln(const std::string& name, LayerNormParams& l, const Visitor& fn) {
    fn(name + ".gain", l.gain);
    fn(name + ".bias", l.bias);
}

void visit_attention(const std::string& name, AttentionParams& a, const Visitor& fn) {
    visit_linear(name + ".q", a.q, fn);
    visit_linear(name + ".k", a.k, fn);
    visit_linear(name + ".v", a.v, fn);
    visit_linear(name + ".o", a.o, fn);
}

}  // namespace

TransformerModel::TransformerModel(const ModelConfig& config, std::uint64_t seed, InitScheme init,
                                   Precision precision)
    : config_(config), precision_(precision), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.d_model;
    token_embedding_ = normal_tensor({config_.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng, precision);
    position_embedding_ = normal_tensor({config_.max_len, d}, 0.02, rng, precision);
    for (std::size_t i = 0; i < config_.n_enc_layers; ++i) {
        EncoderLayer l;
        l.self_attn = make_attention(d, rng, precision);
        l.ln1 = make_ln(d, precision);
        l.ffn_in = make_linear(d, config_.d_ff, rng, precision);
        l.ffn_out = make_linear(config_.d_ff, d, rng, precision);
        l.ln2 = make_ln(d, precision);
        encoder_.push_back(std::move(l));
    }
    for (std::size_t i = 0; i < config_.n_dec_layers; ++i) {
        DecoderLayer l;
        l.self_attn = make_attention(d, rng, precision);
        l.ln1 = make_ln(d, precision);
        l.cross_attn = make_attention(d, rng, precision);
        l.ln2 = make_ln(d, precision);
        l.ffn_in = make_linear(d, config_.d_ff, rng, precision);
        l.ffn_out = make_linear(config_.d_ff, d, rng, precision);
        l.ln3 = make_ln(d, precision);
        decoder_.push_back(std::move(l));
    }
    if (init == InitScheme::zero_output) {
        encoder_.back().ln2.gain = Tensor::zeros({d}, precision, true);
        decoder_.back().ln3.gain = Tensor::zeros({d}, precision, true);
        boundary_head_ = zero_linear(d, config_.n_boundary_labels, precision);
        category_head_ = zero_linear(d, config_.n_categories, precision);
        retrieval_head_ = zero_linear(d, 2, precision);
    } else {
        boundary_head_ = make_linear(d, config_.n_boundary_labels, rng, precision);
        category_head_ = make_linear(d, config_.n_categories, rng, precision);
        retrieval_head_ = make_linear(d, 2, rng, precision);
    }
    for (auto& [name, t] : parameters()) {
        Tensor p = t;
        p.set_requires_grad(true);
    }
}

NamedTensors TransformerModel::parameters() const {
    // Visiting needs mutable access to members; handles share storage so the
    // returned tensors alias the model's parameters either way.
    auto& self = const_cast<TransformerModel&>(*this);
    std::map<std::string, Tensor> named;
    Visitor fn = [&named](const std::string& name, Tensor& t) {
        if (!named.emplace(name, t).second) throw std::logic_error("duplicate parameter " + name);
    };
    fn("embedding.token", self.token_embedding_);
    fn("embedding.position", self.position_embedding_);
    for (std::size_t i = 0; i < self.encoder_.size(); ++i) {
        auto& l = self.encoder_[i];
        const std::string p = "encoder." + std::to_string(i);
        visit_attention(p + ".self_attn", l.self_attn, fn);
        visit_ln(p + ".ln1", l.ln1, fn);
        visit_linear(p + ".ffn_in", l.ffn_in, fn);
        visit_linear(p + ".ffn_out", l.ffn_out, fn);
        visit_ln(p + ".ln2", l.ln2, fn);
    }
    for (std::size_t i = 0; i < self.decoder_.size(); ++i) {
        auto& l = self.decoder_[i];
        const std::string p = "decoder." + std::to_string(i);
        visit_attention(p + ".self_attn", l.self_attn, fn);
        visit_ln(p + ".ln1", l.ln1, fn);
        visit_attention(p + ".cross_attn", l.cross_attn, fn);
        visit_ln(p + ".ln2", l.ln2, fn);
        visit_linear(p + ".ffn_in", l.ffn_in, fn);
        visit_linear(p + ".ffn_out", l.ffn_out, fn);
        visit_ln(p + ".ln3", l.ln3, fn);
    }
    visit_linear("head.boundary", self.boundary_head_, fn);
    visit_linear("head.category", self.category_head_, fn);
    visit_linear("head.retrieval", self.retrieval_head_, fn);
    if (self.tagging_head_) visit_linear("head.tagging", *self.tagging_head_, fn);
    return NamedTensors(named.begin(), named.end());
}

std::size_t TransformerModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
}

Tensor TransformerModel::parameter(const std::string& name) const {
    for (const auto& [n, t] : parameters()) {
        if (n == name) return t;
    }
    throw std::out_of_range("no parameter named '" + name + "'");
}

void TransformerModel::attach_tagging_head(std::size_t n_labels) {
    if (n_labels == 0) throw std::invalid_argument("tagging head needs at least one label");
    tagging_head_ = zero_linear(config_.d_model, n_labels, precision_);
}

std::size_t TransformerModel::n_tag_labels() const {
    return tagging_head_ ? tagging_head_->bias.numel() : 0;
}

const Linear& TransformerModel::tagging_head() const {
    if (!tagging_head_) throw std::logic_error("model has no tagging head attached");
    return *tagging_head_;
}

TransformerModel TransformerModel::clone(std::optional<Precision> precision) const {
    TransformerModel copy = *this;
    const Precision target = precision.value_or(precision_);
    copy.precision_ = target;
    auto& c = copy;
    auto retarget = [target](Tensor& t) {
        t = t.cast(target);
        t.set_requires_grad(true);
    };
    retarget(c.token_embedding_);
    retarget(c.position_embedding_);
    auto lin = [&](Linear& l) { retarget(l.weight); retarget(l.bias); };
    auto ln = [&](LayerNormParams& l) { retarget(l.gain); retarget(l.bias); };
    auto att = [&](AttentionParams& a) { lin(a.q); lin(a.k); lin(a.v); lin(a.o); };
    for (auto& l : c.encoder_) {
        att(l.self_attn); ln(l.ln1); lin(l.ffn_in); lin(l.ffn_out); ln(l.ln2);
    }
    for (auto& l : c.decoder_) {
        att(l.self_attn); ln(l.ln1); att(l.cross_attn); ln(l.ln2);
        lin(l.ffn_in); lin(l.ffn_out); ln(l.ln3);
    }
    lin(c.boundary_head_);
    lin(c.category_head_);
    lin(c.retrieval_head_);
    if (c.tagging_head_) lin(*c.tagging_head_);
    return copy;
}

void TransformerModel::check_tokens(std::span<const int> tokens, const char* what) const {
    if (tokens.empty()) throw std::invalid_argument(std::string(what) + ": empty token sequence");
    if (tokens.size() > config_.max_len) {
        throw std::invalid_argument(std::string(what) + ": sequence length " + std::to_string(tokens.size()) +
                                    " exceeds max_len " + std::to_string(config_.max_len));
    }
    for (int id : tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
            throw std::out_of_range(std::string(what) + ": token id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(config_.vocab_size));
        }
    }
}

Tensor TransformerModel::drop(const Tensor& x) {
    if (!training_ || config_.dropout_p == 0.0) return x;
    return ops::dropout(x, config_.dropout_p, dropout_rng_);
}

Tensor TransformerModel::embed(std::span<const int> tokens) {
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    const double s = std::sqrt(static_cast<double>(config_.d_model));
    Tensor tok = ops::scale(ops::gather_rows(token_embedding_, tokens), s);
    return drop(ops::add(tok, ops::gather_rows(position_embedding_, positions)));
}

Tensor TransformerModel::attend(const AttentionParams& p, const Tensor& x_q, const Tensor& x_kv,
                                const AttentionMask& mask) {
    Tensor q = p.q(x_q);
    Tensor k = p.k(x_kv);
    Tensor v = p.v(x_kv);
    const std::size_t dh = config_.head_dim();
    std::vector<Tensor> heads;
    heads.reserve(config_.n_heads);
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
        heads.push_back(attention(ops::slice_cols(q, h * dh, dh), ops::slice_cols(k, h * dh, dh),
                                  ops::slice_cols(v, h * dh, dh), mask));
    }
    return p.o(ops::concat_cols(heads));
}

Tensor TransformerModel::feed_forward(const Linear& in, const Linear& out, const Tensor& x) {
    return out(drop(ops::gelu(in(x))));
}

namespace {
std::vector<std::uint8_t> non_pad(std::span<const int> tokens) {
    std::vector<std::uint8_t> flags(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) flags[i] = tokens[i] != kPadId;
    return flags;
}
}  // namespace

Tensor TransformerModel::encode(std::span<const int> tokens) {
    check_tokens(tokens, "encode");
    auto key_flags = non_pad(tokens);
    if (std::none_of(key_flags.begin(), key_flags.end(), [](auto f) { return f != 0; })) {
        throw std::invalid_argument("encode: sequence contains only [PAD] tokens");
    }
    const AttentionMask mask = AttentionMask::keys(tokens.size(), key_flags);
    Tensor x = embed(tokens);
    for (const auto& l : encoder_) {
        x = l.ln1(ops::add(x, drop(attend(l.self_attn, x, x, mask))));
        x = l.ln2(ops::add(x, drop(feed_forward(l.ffn_in, l.ffn_out, x))));
    }
    return x;
}

Tensor TransformerModel::decode_states(const Tensor& enc_states, std::span<const int> enc_tokens,
                                       std::span<const int> dec_tokens) {
    check_tokens(dec_tokens, "decode");
    if (enc_states.rank() != 2 || enc_states.dim(0) != enc_tokens.size() ||
        enc_states.dim(1) != config_.d_model) {
        throw ShapeError("decode: encoder states " + shape_str(enc_states.shape()) + " do not match " +
                         std::to_string(enc_tokens.size()) + " encoder tokens");
    }
    const std::size_t t = dec_tokens.size();
    const AttentionMask self_mask = AttentionMask::causal(t) & AttentionMask::keys(t, non_pad(dec_tokens));
    const AttentionMask cross_mask = AttentionMask::keys(t, non_pad(enc_tokens));
    Tensor x = embed(dec_tokens);
    for (const auto& l : decoder_) {
        x = l.ln1(ops::add(x, drop(attend(l.self_attn, x, x, self_mask))));
        x = l.ln2(ops::add(x, drop(attend(l.cross_attn, x, enc_states, cross_mask))));
        x = l.ln3(ops::add(x, drop(feed_forward(l.ffn_in, l.ffn_out, x))));
    }
    return x;
}

Tensor TransformerModel::decode(const Tensor& enc_states, std::span<const int> enc_tokens,
                                std::span<const int> dec_tokens) {
    return project(decode_states(enc_states, enc_tokens, dec_tokens));
}

Tensor TransformerModel::project(const Tensor& hidden) const {
    return ops::matmul_nt(hidden, token_embedding_);
}

Tensor TransformerModel::cls_state(const Tensor& enc_states) const { return ops::row(enc_states, 0); }

}  // namespace kpt
