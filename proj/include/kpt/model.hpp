#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kpt/gradcheck.hpp"
#include "kpt/tensor.hpp"

namespace kpt {

struct ModelConfig {
    std::size_t vocab_size = 200;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_enc_layers = 2;
    std::size_t n_dec_layers = 2;
    std::size_t d_ff = 256;
    std::size_t max_len = 128;
    double dropout_p = 0.0;
    std::size_t n_categories = 40;
    std::size_t n_boundary_labels = 2;

    /// 2+2 layers, d=64, 4 heads, 128 positions.
    static ModelConfig desk();
    /// 6+6 layers, d=768, 12 heads, 512 positions, dropout 0.1.
    static ModelConfig paper();
    static ModelConfig preset(const std::string& name);

    void validate() const;
    std::size_t head_dim() const { return d_model / n_heads; }
    bool operator==(const ModelConfig&) const = default;
};

enum class InitScheme {
    normal,
    /// As `normal`, but the last encoder/decoder layer norms have zero gain
    /// and all heads are zero, so every output distribution starts uniform.
    zero_output,
};

struct Linear {
    Tensor weight;  // [in × out]
    Tensor bias;    // [out]
    Tensor operator()(const Tensor& x) const;
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
    Tensor operator()(const Tensor& x) const;
};

struct AttentionParams {
    Linear q, k, v, o;
};

struct EncoderLayer {
    AttentionParams self_attn;
    LayerNormParams ln1;
    Linear ffn_in, ffn_out;
    LayerNormParams ln2;
};

struct DecoderLayer {
    AttentionParams self_attn;
    LayerNormParams ln1;
    AttentionParams cross_attn;
    LayerNormParams ln2;
    Linear ffn_in, ffn_out;
    LayerNormParams ln3;
};

/// Row-major [rows × cols] allow-list for attention.
struct AttentionMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> allowed;

    static AttentionMask full(std::size_t rows, std::size_t cols);
    static AttentionMask causal(std::size_t n);
    /// Every query may attend to the keys whose flag is set.
    static AttentionMask keys(std::size_t rows, const std::vector<std::uint8_t>& key_allowed);
    AttentionMask operator&(const AttentionMask& other) const;
};

/// Scaled dot-product attention for one head. q [Lq×dh], k/v [Lk×dh].
/// When `weights_out` is given it receives the attention weights.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask& mask,
                 Tensor* weights_out = nullptr);

class TransformerModel {
  public:
    TransformerModel(const ModelConfig& config, std::uint64_t seed,
                     InitScheme init = InitScheme::normal, Precision precision = Precision::f32);

    const ModelConfig& config() const { return config_; }
    Precision precision() const { return precision_; }

    /// All parameters sorted by name; each appears exactly once.
    NamedTensors parameters() const;
    std::size_t parameter_count() const;
    Tensor parameter(const std::string& name) const;

    void attach_tagging_head(std::size_t n_labels);
    bool has_tagging_head() const { return tagging_head_.has_value(); }
    std::size_t n_tag_labels() const;

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }
    std::mt19937_64& dropout_rng() { return dropout_rng_; }

    /// Encoder states [len × d_model]. Positions holding [PAD] are masked out
    /// as attention keys.
    Tensor encode(std::span<const int> tokens);
    /// Final decoder hidden states [len(dec) × d_model] (causal).
    Tensor decode_states(const Tensor& enc_states, std::span<const int> enc_tokens,
                         std::span<const int> dec_tokens);
    /// Decoder logits [len(dec) × vocab_size] through the tied projection.
    Tensor decode(const Tensor& enc_states, std::span<const int> enc_tokens,
                  std::span<const int> dec_tokens);
    /// hidden [n × d_model] → logits [n × vocab_size] with the token embedding.
    Tensor project(const Tensor& hidden) const;
    Tensor cls_state(const Tensor& enc_states) const;

    const Linear& boundary_head() const { return boundary_head_; }
    const Linear& category_head() const { return category_head_; }
    const Linear& retrieval_head() const { return retrieval_head_; }
    const Linear& tagging_head() const;
    const Tensor& token_embedding() const { return token_embedding_; }

    /// Deep copy, optionally converted to another precision.
    TransformerModel clone(std::optional<Precision> precision = std::nullopt) const;

  private:
    Tensor embed(std::span<const int> tokens);
    Tensor attend(const AttentionParams& p, const Tensor& x_q, const Tensor& x_kv,
                  const AttentionMask& mask);
    Tensor feed_forward(const Linear& in, const Linear& out, const Tensor& x);
    Tensor drop(const Tensor& x);
    void check_tokens(std::span<const int> tokens, const char* what) const;

    ModelConfig config_;
    Precision precision_;
    bool training_ = false;
    std::mt19937_64 dropout_rng_;

    Tensor token_embedding_;     // [vocab × d]
    Tensor position_embedding_;  // [max_len × d]
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    Linear boundary_head_;
    Linear category_head_;
    Linear retrieval_head_;
    std::optional<Linear> tagging_head_;
};

}  // namespace kpt
