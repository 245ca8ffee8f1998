#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "kpt/tensor.hpp"

namespace kpt::ops {

// All ops record onto Tape::current() when an input requires grad and
// recording is enabled. Results take the widest precision of their inputs.

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ, with a [m×k] and b [n×k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

enum class Elementwise { add, mul };
/// Same-shape add/mul, or add with a trailing-row broadcast of a rank-1 `b`
/// whose length equals a's last dimension (bias add).
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor softmax(const Tensor& x, int axis = -1);
/// Softmax over the last axis of a 2-D tensor where only positions with
/// allowed[r * cols + c] != 0 participate; masked entries are exactly 0.
/// A row with no allowed position is an error.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> allowed);

Tensor gelu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Mean of -log softmax(logits)[target] over rows whose target != ignore_id.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const int> targets,
                            int ignore_id = -100);

/// Rows of `table` selected by ids (embedding lookup).
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// Contiguous row range [start, start+count) of a 2-D tensor.
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
/// Row `i` of a 2-D tensor as a rank-1 tensor.
Tensor row(const Tensor& x, std::size_t i);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor add_scalars(std::span<const Tensor> scalars);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

}  // namespace kpt::ops
