#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "kpt/tensor.hpp"

namespace kpt {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct GradCheckOptions {
    double eps = 1e-5;
    double tol = 1e-4;
    /// 0 checks every coordinate; otherwise a seeded random subset of at most
    /// this many coordinates per tensor.
    std::size_t max_coords_per_tensor = 0;
    std::uint64_t seed = 0;
    /// Relative error is |a - n| / max(|a|, |n|, abs_floor).
    double abs_floor = 1e-6;
    /// Five-point stencil (f(x-2h), f(x-h), f(x+h), f(x+2h)): truncation error
    /// O(h^4) instead of O(h^2), at twice the evaluations.
    bool fourth_order = false;
    /// When > 0 (and fourth_order is off), a coordinate whose central
    /// difference misses by more than tol/4 is re-estimated with the
    /// five-point stencil at this step, and that estimate is the one judged.
    double refine_eps = 0.0;
};

struct TensorGradCheck {
    std::string name;
    std::size_t coords_checked = 0;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<TensorGradCheck> tensors;
    bool passed() const;
    double max_rel_error() const;
    std::size_t total_coords() const;
};

/// Compares supplied analytic gradients against central differences of `f`.
/// `analytic[i]` must have params[i]'s element count. Parameters must be f64.
GradCheckReport compare_gradients(const std::function<Tensor()>& f, const NamedTensors& params,
                                  const std::vector<std::vector<double>>& analytic,
                                  const GradCheckOptions& options = {});

/// Runs f once with recording, back-propagates, then compares each
/// parameter's grad against finite differences.
GradCheckReport grad_check(const std::function<Tensor()>& f, const NamedTensors& params,
                           const GradCheckOptions& options = {});

}  // namespace kpt
