#include "kpt/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace kpt {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

double round_value(double v, Precision precision) {
    return precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

namespace {
void check_shape(const Shape& shape) {
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

detail::TensorImpl& checked(const std::shared_ptr<detail::TensorImpl>& impl) {
    if (!impl) throw std::logic_error("use of undefined tensor");
    return *impl;
}
}  // namespace

Tensor Tensor::zeros(Shape shape, Precision precision, bool requires_grad) {
    check_shape(shape);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(shape_numel(shape), 0.0);
    impl->shape = std::move(shape);
    impl->precision = precision;
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, Precision precision) {
    Tensor t = zeros(std::move(shape), precision);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), round_value(value, precision));
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, Precision precision,
                    bool requires_grad) {
    check_shape(shape);
    if (values.size() != shape_numel(shape)) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->precision = precision;
    impl->requires_grad = requires_grad;
    Tensor t(std::move(impl));
    t.round_to_precision();
    return t;
}

Tensor Tensor::scalar(double value, Precision precision) {
    return from({}, {value}, precision);
}

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::dim(std::size_t i) const {
    const auto& s = shape();
    if (i >= s.size()) throw ShapeError("dimension index out of range for " + shape_str(s));
    return s[i];
}

std::size_t Tensor::numel() const { return checked(impl_).data.size(); }
Precision Tensor::precision() const { return checked(impl_).precision; }
std::span<const double> Tensor::data() const { return checked(impl_).data; }
std::span<double> Tensor::mutable_data() { return checked(impl_).data; }

double Tensor::at(std::size_t flat_index) const {
    const auto& d = checked(impl_).data;
    if (flat_index >= d.size()) throw std::out_of_range("tensor index out of range");
    return d[flat_index];
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

std::vector<double> Tensor::to_vector() const { return checked(impl_).data; }

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }
void Tensor::set_requires_grad(bool on) { checked(impl_).requires_grad = on; }
bool Tensor::has_grad() const { return !checked(impl_).grad.empty(); }
std::span<const double> Tensor::grad() const { return checked(impl_).grad; }

std::span<double> Tensor::mutable_grad() {
    auto& impl = checked(impl_);
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
    return impl.grad;
}

void Tensor::zero_grad() {
    auto& g = checked(impl_).grad;
    std::fill(g.begin(), g.end(), 0.0);
}

void Tensor::round_to_precision() {
    auto& impl = checked(impl_);
    if (impl.precision == Precision::f64) return;
    for (auto& v : impl.data) v = round_value(v, Precision::f32);
}

Tensor Tensor::clone() const {
    const auto& src = checked(impl_);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = src.shape;
    impl->data = src.data;
    impl->precision = src.precision;
    impl->requires_grad = src.requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::cast(Precision precision) const {
    Tensor t = clone();
    t.impl_->precision = precision;
    t.round_to_precision();
    return t;
}

// ---------------------------------------------------------------------------

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(TapeNode node) { nodes_.push_back(std::move(node)); }

void Tape::clear() { nodes_.clear(); }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined()) throw std::logic_error("backward on undefined tensor");
    if (loss.numel() != 1) {
        throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    const auto& target = loss.impl();
    auto it = std::find_if(nodes_.rbegin(), nodes_.rend(),
                           [&](const TapeNode& n) { return n.output == target; });
    if (it == nodes_.rend()) throw std::logic_error("loss is not on the tape");

    target->grad.assign(1, 1.0);
    for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
        if (node->output->grad.empty()) continue;
        node->backward(*node->output);
    }
    for (const auto& node : nodes_) {
        for (const auto& in : node.inputs) {
            if (in->precision == Precision::f32 && !in->grad.empty()) {
                for (auto& g : in->grad) g = round_value(g, Precision::f32);
            }
        }
    }
    nodes_.clear();
}

NoGradGuard::NoGradGuard() { --Tape::current().enabled_; }
NoGradGuard::~NoGradGuard() { ++Tape::current().enabled_; }

void backward(const Tensor& loss) { Tape::current().backward(loss); }

}  // namespace kpt
