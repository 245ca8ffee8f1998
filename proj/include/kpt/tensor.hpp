#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kpt {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Storage precision of a tensor. Values are always held as doubles; f32
/// tensors round every stored value to the nearest float, so their contents
/// are exactly what a 32-bit buffer would hold.
enum class Precision { f32, f64 };

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass touches it
    bool requires_grad = false;
    Precision precision = Precision::f32;
};
}  // namespace detail

/// Handle to a dense row-major array. Copies share storage, so a parameter
/// handed to an optimizer and the same parameter inside a model are one object.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, Precision precision = Precision::f32,
                        bool requires_grad = false);
    static Tensor full(Shape shape, double value, Precision precision = Precision::f32);
    static Tensor from(Shape shape, std::vector<double> values,
                       Precision precision = Precision::f32, bool requires_grad = false);
    static Tensor scalar(double value, Precision precision = Precision::f32);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t i) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    Precision precision() const;

    std::span<const double> data() const;
    /// Raw write access. Callers that write must call round_to_precision()
    /// afterwards if the tensor is f32.
    std::span<double> mutable_data();
    double at(std::size_t flat_index) const;
    double item() const;
    std::vector<double> to_vector() const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    void round_to_precision();
    /// Deep copy with fresh storage, no grad, optionally converted.
    Tensor clone() const;
    Tensor cast(Precision precision) const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

double round_value(double v, Precision precision);

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// One recorded operation. `backward` reads output->grad and accumulates into
/// the inputs' grads.
struct TapeNode {
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void(const detail::TensorImpl& out)> backward;
};

/// Ordered record of operations for the current thread. Recording order is a
/// topological order of the graph; backward walks it in exact reverse.
class Tape {
  public:
    static Tape& current();

    void record(TapeNode node);
    void clear();
    std::size_t size() const { return nodes_.size(); }
    bool recording() const { return enabled_ > 0; }

    /// Seeds d(loss)/d(loss) = 1 and propagates. Leaf grads accumulate; the
    /// tape is cleared afterwards.
    void backward(const Tensor& loss);

  private:
    friend class NoGradGuard;
    std::vector<TapeNode> nodes_;
    int enabled_ = 1;
};

/// Disables recording for its lifetime (used by evaluation and the
/// finite-difference side of gradient checks).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

void backward(const Tensor& loss);

}  // namespace kpt
