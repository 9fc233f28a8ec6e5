#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vband {

// Error taxonomy shared by every module.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct BoundsError : std::out_of_range {
    using std::out_of_range::out_of_range;
};
struct NumericError : std::domain_error {
    using std::domain_error::domain_error;
};
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until something accumulates into it
    bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major real tensor. Copies are shallow handles; use clone() for a deep copy.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

    Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
        for (auto e : shape)
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        if (numel_of(shape) != values.size())
            throw DimensionError("shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }
    static Tensor full(Shape shape, double v) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor vector(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor({rows, cols}, std::move(v));
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }
    bool empty() const { return impl_->data.empty(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
        return impl_->shape[axis];
    }
    /// Extent of the trailing axis.
    std::size_t cols() const { return rank() == 0 ? 0 : impl_->shape.back(); }
    /// Product of all leading extents.
    std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() const { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    double item() const {
        if (numel() != 1) throw DimensionError("item() on non-scalar " + shape_str(shape()));
        return impl_->data[0];
    }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    /// Gradient buffer; all-zero when nothing has flowed into this tensor.
    std::vector<double> grad() const {
        if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
        return impl_->grad;
    }
    std::vector<double>& grad_buffer() const {
        if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
        return impl_->grad;
    }
    void zero_grad() const { impl_->grad.clear(); }

    /// Deep copy detached from any tape.
    Tensor clone() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    bool same(const Tensor& other) const { return impl_ == other.impl_; }

private:
    friend class Tape;
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Append-only record of differentiable operations for one forward pass.
///
/// Constructing a Tape makes it the active tape of the current thread until it
/// is destroyed; ops executed while no tape is active record nothing.
class Tape {
public:
    using BackwardFn = std::function<void(const std::vector<double>& grad_out)>;

    Tape() : previous_(active_ref()) { active_ref() = this; }
    ~Tape() { active_ref() = previous_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    void record(const Tensor& out, BackwardFn fn) {
        if (consumed_) throw StateError("tape already consumed by backward(); call reset() first");
        nodes_.push_back({out.impl_, std::move(fn)});
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// Reverse sweep from a scalar loss. Each node is visited once.
    void backward(Tensor loss) {
        if (consumed_) throw StateError("backward() called twice on the same tape");
        if (loss.numel() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
        consumed_ = true;
        loss.impl_->grad.assign(1, 1.0);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->out->grad.empty()) continue;
            it->fn(it->out->grad);
        }
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

private:
    struct Node {
        std::shared_ptr<detail::TensorImpl> out;
        BackwardFn fn;
    };

    static Tape*& active_ref() {
        thread_local Tape* current = nullptr;
        return current;
    }

    Tape* previous_;
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

/// Runs backward on the active tape.
inline void backward(const Tensor& loss) {
    auto* tape = Tape::active();
    if (!tape) throw StateError("backward() without an active tape");
    tape->backward(loss);
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<Tensor> inputs) {
    for (const auto& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

/// Attaches a backward rule to `out` when a tape is active and an input needs gradients.
template <class F>
Tensor record(Tensor out, std::initializer_list<Tensor> inputs, F&& fn) {
    auto* tape = Tape::active();
    if (tape && any_requires_grad(inputs)) {
        out.set_requires_grad(true);
        tape->record(out, std::forward<F>(fn));
    }
    return out;
}

inline Tensor record_many(Tensor out, const std::vector<Tensor>& inputs, Tape::BackwardFn fn) {
    auto* tape = Tape::active();
    bool need = false;
    for (const auto& t : inputs) need = need || t.requires_grad();
    if (tape && need) {
        out.set_requires_grad(true);
        tape->record(out, std::move(fn));
    }
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

inline void require_rank(const Tensor& a, std::size_t r, const char* op) {
    if (a.rank() != r)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                             shape_str(a.shape()));
}

}  // namespace detail
}  // namespace vband
