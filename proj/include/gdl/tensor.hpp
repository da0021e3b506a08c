// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gdl {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until a backward pass touches it

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};
}  // namespace detail

// Dense row-major f64 tensor. A Tensor is a cheap handle onto shared
// storage; storage that participates in a gradient tape must not be
// mutated afterwards.
class Tensor {
  public:
    Tensor();  // scalar zero

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(std::vector<double> data, Shape shape,
                            bool requires_grad = false);
    static Tensor row(std::initializer_list<double> values);
    static Tensor gaussian(Shape shape, Rng& rng, double stddev = 1.0);

    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t rank() const { return impl_->shape.size(); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    double item() const;  // value of a one-element tensor
    double at(std::size_t flat) const { return impl_->data[flat]; }
    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const;
    void zero_grad() { impl_->grad.clear(); }

    Tensor clone() const;  // deep copy of the values, detached
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    bool empty_handle() const { return impl_ == nullptr; }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

  private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
        : impl_(std::move(impl)) {}

    std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Constructing one makes it the active tape for the
// current thread; ops whose inputs track gradients record their backward
// rule onto it in execution order. backward() replays the rules in reverse
// and consumes the tape.
class GradTape {
  public:
    GradTape();
    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    void backward(const Tensor& loss);
    void record(std::function<void()> step);
    std::size_t recorded_ops() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

    static GradTape* active();

  private:
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
    GradTape* prev_ = nullptr;
};

// Forward operations. Shapes are checked eagerly; violations throw
// std::invalid_argument. Broadcasting exists only for add() with a
// trailing-shape rhs applied across the leading batch axis.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& x, double scale, double shift);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor l1_distance(const Tensor& a, const Tensor& b);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor kl_divergence(const Tensor& p_probs, const Tensor& q_log_probs);
Tensor nll_loss(const Tensor& log_probs, std::span<const int> labels);
Tensor concat(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& x, std::size_t start, std::size_t length);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift);

// Backpropagates from a scalar loss through the active tape.
void backward(const Tensor& loss);

}  // namespace gdl
