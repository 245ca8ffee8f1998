#include "kpt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace kpt {

bool GradCheckReport::passed() const {
    return std::all_of(tensors.begin(), tensors.end(), [](const auto& t) { return t.passed; });
}

double GradCheckReport::max_rel_error() const {
    double m = 0;
    for (const auto& t : tensors) m = std::max(m, t.max_rel_error);
    return m;
}

std::size_t GradCheckReport::total_coords() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.coords_checked;
    return n;
}

GradCheckReport compare_gradients(const std::function<Tensor()>& f, const NamedTensors& params,
                                  const std::vector<std::vector<double>>& analytic,
                                  const GradCheckOptions& options) {
    if (analytic.size() != params.size()) {
        throw std::invalid_argument("compare_gradients: one analytic gradient per parameter required");
    }
    for (const auto& [name, p] : params) {
        if (p.precision() != Precision::f64) {
            throw std::invalid_argument("gradient check needs f64 parameters; '" + name + "' is f32");
        }
    }
    NoGradGuard no_grad;
    std::mt19937_64 rng(options.seed);
    GradCheckReport report;
    for (std::size_t t = 0; t < params.size(); ++t) {
        Tensor p = params[t].second;
        const std::size_t n = p.numel();
        if (analytic[t].size() != n) {
            throw std::invalid_argument("compare_gradients: gradient size mismatch for " + params[t].first);
        }
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), 0);
        if (options.max_coords_per_tensor > 0 && n > options.max_coords_per_tensor) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.max_coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }

        TensorGradCheck check;
        check.name = params[t].first;
        auto values = p.mutable_data();
        for (std::size_t idx : coords) {
            const double saved = values[idx];
            auto at = [&](double offset) {
                values[idx] = saved + offset;
                return f().item();
            };
            auto central = [&](double h) { return (at(h) - at(-h)) / (2.0 * h); };
            auto five_point = [&](double h) {
                const double d1 = at(h) - at(-h);
                const double d2 = at(2 * h) - at(-2 * h);
                return (8.0 * d1 - d2) / (12.0 * h);
            };
            const double a = analytic[t][idx];
            auto rel_error = [&](double numeric) {
                const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
                return std::abs(a - numeric) / denom;
            };
            double numeric = options.fourth_order ? five_point(options.eps) : central(options.eps);
            if (!options.fourth_order && options.refine_eps > 0 && rel_error(numeric) > options.tol / 4) {
                numeric = five_point(options.refine_eps);
            }
            values[idx] = saved;
            const double rel = rel_error(numeric);
            if (rel > check.max_rel_error || check.coords_checked == 0) {
                check.max_rel_error = rel;
                check.worst_index = idx;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
            ++check.coords_checked;
        }
        check.passed = check.max_rel_error < options.tol;
        report.tensors.push_back(std::move(check));
    }
    return report;
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const NamedTensors& params,
                           const GradCheckOptions& options) {
    for (const auto& [name, p] : params) {
        Tensor t = p;
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = f();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params) {
        if (p.has_grad()) {
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        } else {
            analytic.emplace_back(p.numel(), 0.0);
        }
    }
    return compare_gradients(f, params, analytic, options);
}

}  // namespace kpt
