// SPDX-License-Identifier: Apache-2.0
#include "gdl/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "gdl/rng.hpp"

namespace gdl {

namespace {

thread_local GradTape* g_active_tape = nullptr;

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

ImplPtr make_impl(Shape shape, std::vector<double> data, bool requires_grad) {
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return impl;
}

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

void require(bool cond, const std::string& op, const std::string& what) {
    if (!cond) shape_error(op, what);
}

// Interprets a tensor as (rows, cols) over its last axis.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
    if (t.rank() == 0) return {1, 1};
    const std::size_t cols = t.shape().back();
    return {cols == 0 ? 0 : t.size() / cols, cols};
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

constexpr double kNormEps = 1e-5;

}  // namespace

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

Tensor::Tensor() : impl_(nullptr) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> data(shape_size(shape), 0.0);
    return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> data(shape_size(shape), value);
    return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_impl({}, {value}, requires_grad));
}

Tensor Tensor::from_data(std::vector<double> data, Shape shape, bool requires_grad) {
    if (data.size() != shape_size(shape))
        throw std::invalid_argument("Tensor::from_data: " + std::to_string(data.size()) +
                                    " values do not fill shape " + shape_str(shape));
    return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::row(std::initializer_list<double> values) {
    return from_data(std::vector<double>(values), {values.size()});
}

Tensor Tensor::gaussian(Shape shape, Rng& rng, double stddev) {
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = stddev * rng.normal();
    return Tensor(make_impl(std::move(shape), std::move(data), false));
}

double Tensor::item() const {
    if (size() != 1)
        throw std::invalid_argument("Tensor::item: tensor has " +
                                    std::to_string(size()) + " elements");
    return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
    if (impl_->grad.empty())
        throw std::logic_error("Tensor::grad: no gradient has been computed");
    return impl_->grad;
}

Tensor Tensor::clone() const {
    return Tensor(make_impl(impl_->shape, impl_->data, false));
}

GradTape::GradTape() : prev_(g_active_tape) { g_active_tape = this; }

GradTape::~GradTape() { g_active_tape = prev_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(std::function<void()> step) {
    if (consumed_)
        throw std::logic_error("GradTape::record: tape already consumed by backward()");
    steps_.push_back(std::move(step));
}

void GradTape::backward(const Tensor& loss) {
    if (consumed_) throw std::logic_error("GradTape::backward: tape already consumed");
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(loss.shape()));
    auto impl = loss.impl();
    impl->grad.assign(1, 1.0);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    steps_.clear();
    consumed_ = true;
}

void backward(const Tensor& loss) {
    if (g_active_tape == nullptr)
        throw std::logic_error("backward: no active gradient tape");
    g_active_tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul",
            "expects rank-2 operands, got " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    require(b.shape()[0] == k, "matmul",
            "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
    const std::size_t n = b.shape()[1];

    Tensor out = Tensor::zeros({m, n});
    {
        const double* ad = a.data().data();
        const double* bd = b.data().data();
        double* od = out.mutable_data().data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double aik = ad[i * k + kk];
                if (aik == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j) od[i * n + j] += aik * bd[kk * n + j];
            }
    }

    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        GradTape::active()->record([ai, bi, oi, m, k, n] {
            if (oi->grad.empty()) return;
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                double* da = ai->grad.data();
                const double* bd = bi->data.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            acc += g[i * n + j] * bd[kk * n + j];
                        da[i * k + kk] += acc;
                    }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                double* db = bi->grad.data();
                const double* ad = ai->data.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double aik = ad[i * k + kk];
                        if (aik == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            db[kk * n + j] += aik * g[i * n + j];
                    }
            }
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require(x.rank() == 2, "linear", "input must be (batch, in), got " + shape_str(x.shape()));
    require(weight.rank() == 2, "linear",
            "weight must be (out, in), got " + shape_str(weight.shape()));
    const std::size_t batch = x.shape()[0], in = x.shape()[1];
    const std::size_t out_dim = weight.shape()[0];
    require(weight.shape()[1] == in, "linear",
            "weight " + shape_str(weight.shape()) + " does not accept input " +
                shape_str(x.shape()));
    const bool has_bias = !bias.empty_handle();
    if (has_bias)
        require(bias.rank() == 1 && bias.shape()[0] == out_dim, "linear",
                "bias must be (out,), got " + shape_str(bias.shape()));

    Tensor out = Tensor::zeros({batch, out_dim});
    {
        const double* xd = x.data().data();
        const double* wd = weight.data().data();
        double* od = out.mutable_data().data();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < out_dim; ++o) {
                double acc = has_bias ? bias.at(o) : 0.0;
                const double* wrow = wd + o * in;
                const double* xrow = xd + b * in;
                for (std::size_t i = 0; i < in; ++i) acc += xrow[i] * wrow[i];
                od[b * out_dim + o] = acc;
            }
    }

    const bool rec = has_bias ? should_record({&x, &weight, &bias})
                              : should_record({&x, &weight});
    if (rec) {
        out.set_requires_grad(true);
        auto xi = x.impl(), wi = weight.impl(), oi = out.impl();
        auto bi = has_bias ? bias.impl() : nullptr;
        GradTape::active()->record([xi, wi, bi, oi, batch, in, out_dim] {
            if (oi->grad.empty()) return;
            const double* g = oi->grad.data();
            if (xi->requires_grad) {
                xi->ensure_grad();
                double* dx = xi->grad.data();
                const double* wd = wi->data.data();
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const double go = g[b * out_dim + o];
                        if (go == 0.0) continue;
                        const double* wrow = wd + o * in;
                        double* dxrow = dx + b * in;
                        for (std::size_t i = 0; i < in; ++i) dxrow[i] += go * wrow[i];
                    }
            }
            if (wi->requires_grad) {
                wi->ensure_grad();
                double* dw = wi->grad.data();
                const double* xd = xi->data.data();
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out_dim; ++o) {
                        const double go = g[b * out_dim + o];
                        if (go == 0.0) continue;
                        const double* xrow = xd + b * in;
                        double* wrow = dw + o * in;
                        for (std::size_t i = 0; i < in; ++i) wrow[i] += go * xrow[i];
                    }
            }
            if (bi && bi->requires_grad) {
                bi->ensure_grad();
                double* db = bi->grad.data();
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out_dim; ++o) db[o] += g[b * out_dim + o];
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    const bool broadcast = b.rank() + 1 == a.rank() &&
                           std::equal(a.shape().begin() + 1, a.shape().end(),
                                      b.shape().begin(), b.shape().end());
    require(broadcast || a.shape() == b.shape(), "add",
            "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                " neither match nor broadcast over the leading axis");

    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size(), bn = b.size();
    {
        double* od = out.mutable_data().data();
        const double* ad = a.data().data();
        const double* bd = b.data().data();
        for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i % bn];
    }

    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        GradTape::active()->record([ai, bi, oi, n, bn] {
            if (oi->grad.empty()) return;
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                double* da = ai->grad.data();
                for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                double* db = bi->grad.data();
                for (std::size_t i = 0; i < n; ++i) db[i % bn] += g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul",
            "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i)
        out.mutable_data()[i] = a.at(i) * b.at(i);

    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        GradTape::active()->record([ai, bi, oi, n] {
            if (oi->grad.empty()) return;
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) bi->grad[i] += g[i] * ai->data[i];
            }
        });
    }
    return out;
}

Tensor affine(const Tensor& x, double scale, double shift) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i)
        out.mutable_data()[i] = scale * x.at(i) + shift;

    if (should_record({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        GradTape::active()->record([xi, oi, scale, n] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += scale * oi->grad[i];
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.at(i);
        out.mutable_data()[i] = v > 0.0 ? v : 0.0;
    }

    if (should_record({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        GradTape::active()->record([xi, oi, n] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            // relu'(0) = 0 by convention
            for (std::size_t i = 0; i < n; ++i)
                if (xi->data[i] > 0.0) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

Tensor gelu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.size();
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.at(i);
        out.mutable_data()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }

    if (should_record({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        GradTape::active()->record([xi, oi, n, inv_sqrt2] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
            for (std::size_t i = 0; i < n; ++i) {
                const double v = xi->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = std::exp(-0.5 * v * v) * inv_sqrt2pi;
                xi->grad[i] += oi->grad[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

namespace {

// Shared row-wise softmax with max subtraction; writes probabilities.
void softmax_rows(const double* x, double* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* or_ = out + r * cols;
        double mx = xr[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            or_[c] = std::exp(xr[c] - mx);
            z += or_[c];
        }
        for (std::size_t c = 0; c < cols; ++c) or_[c] /= z;
    }
}

}  // namespace

Tensor softmax(const Tensor& x) {
    const auto [rows, cols] = rows_cols(x);
    require(x.rank() >= 1 && cols > 0, "softmax",
            "last axis is empty in shape " + shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape());
    softmax_rows(x.data().data(), out.mutable_data().data(), rows, cols);

    if (should_record({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        GradTape::active()->record([xi, oi, rows = rows, cols = cols] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* s = oi->data.data() + r * cols;
                const double* g = oi->grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += g[c] * s[c];
                double* dx = xi->grad.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) dx[c] += s[c] * (g[c] - dot);
            }
        });
    }
    return out;
}

Tensor log_softmax(const Tensor& x) {
    const auto [rows, cols] = rows_cols(x);
    require(x.rank() >= 1 && cols > 0, "log_softmax",
            "last axis is empty in shape " + shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape());
    {
        const double* xd = x.data().data();
        double* od = out.mutable_data().data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = xd + r * cols;
            double mx = xr[0];
            for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
            double z = 0.0;
            for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
            const double lse = mx + std::log(z);
            for (std::size_t c = 0; c < cols; ++c) od[r * cols + c] = xr[c] - lse;
        }
    }

    if (should_record({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        GradTape::active()->record([xi, oi, rows = rows, cols = cols] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* lp = oi->data.data() + r * cols;
                const double* g = oi->grad.data() + r * cols;
                double gsum = 0.0;
                for (std::size_t c = 0; c < cols; ++c) gsum += g[c];
                double* dx = xi->grad.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c)
                    dx[c] += g[c] - std::exp(lp[c]) * gsum;
            }
        });
    }
    return out;
}

namespace {

Tensor reduce_scalar(const Tensor& x, bool take_mean, const char* name) {
    const std::size_t n = x.size();
    if (n == 0) throw std::invalid_argument(std::string(name) + ": empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x.at(i);
    const double scale = take_mean ? 1.0 / double(n) : 1.0;
    Tensor out = Tensor::scalar(acc * scale);

    if (should_record({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        GradTape::active()->record([xi, oi, n, scale] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            const double g = oi->grad[0] * scale;
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += g;
        });
    }
    return out;
}

}  // namespace

Tensor mean(const Tensor& x) { return reduce_scalar(x, true, "mean"); }
Tensor sum(const Tensor& x) { return reduce_scalar(x, false, "sum"); }

Tensor l1_distance(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "l1_distance",
            "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.size();
    require(n > 0, "l1_distance", "empty tensors");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(a.at(i) - b.at(i));
    Tensor out = Tensor::scalar(acc / double(n));

    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        GradTape::active()->record([ai, bi, oi, n] {
            if (oi->grad.empty()) return;
            const double g = oi->grad[0] / double(n);
            // sign(0) = 0, matching the relu'(0) = 0 convention
            for (std::size_t i = 0; i < n; ++i) {
                const double d = ai->data[i] - bi->data[i];
                const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (ai->requires_grad) {
                    ai->ensure_grad();
                    ai->grad[i] += g * s;
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    bi->grad[i] -= g * s;
                }
            }
        });
    }
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mse",
            "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.size();
    require(n > 0, "mse", "empty tensors");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.at(i) - b.at(i);
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / double(n));

    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        GradTape::active()->record([ai, bi, oi, n] {
            if (oi->grad.empty()) return;
            const double g = 2.0 * oi->grad[0] / double(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double d = ai->data[i] - bi->data[i];
                if (ai->requires_grad) {
                    ai->ensure_grad();
                    ai->grad[i] += g * d;
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    bi->grad[i] -= g * d;
                }
            }
        });
    }
    return out;
}

Tensor kl_divergence(const Tensor& p_probs, const Tensor& q_log_probs) {
    require(p_probs.shape() == q_log_probs.shape(), "kl_divergence",
            "shapes differ: " + shape_str(p_probs.shape()) + " vs " +
                shape_str(q_log_probs.shape()));
    const auto [rows, cols] = rows_cols(p_probs);
    require(p_probs.rank() >= 1 && cols > 0, "kl_divergence",
            "last axis is empty in shape " + shape_str(p_probs.shape()));
    for (std::size_t i = 0; i < p_probs.size(); ++i)
        require(p_probs.at(i) >= 0.0, "kl_divergence", "p contains negative mass");

    // Row KLs, averaged over rows; 0 * log 0 contributes 0.
    double acc = 0.0;
    for (std::size_t i = 0; i < p_probs.size(); ++i) {
        const double p = p_probs.at(i);
        if (p > 0.0) acc += p * (std::log(p) - q_log_probs.at(i));
    }
    Tensor out = Tensor::scalar(acc / double(rows));

    if (should_record({&p_probs, &q_log_probs})) {
        out.set_requires_grad(true);
        auto pi = p_probs.impl(), qi = q_log_probs.impl(), oi = out.impl();
        const std::size_t n = p_probs.size();
        GradTape::active()->record([pi, qi, oi, n, rows = rows] {
            if (oi->grad.empty()) return;
            const double g = oi->grad[0] / double(rows);
            for (std::size_t i = 0; i < n; ++i) {
                const double p = pi->data[i];
                if (qi->requires_grad) {
                    qi->ensure_grad();
                    qi->grad[i] -= g * p;
                }
                if (pi->requires_grad && p > 0.0) {
                    pi->ensure_grad();
                    pi->grad[i] += g * (std::log(p) + 1.0 - qi->data[i]);
                }
            }
        });
    }
    return out;
}

Tensor nll_loss(const Tensor& log_probs, std::span<const int> labels) {
    require(log_probs.rank() == 2, "nll_loss",
            "expects (batch, classes), got " + shape_str(log_probs.shape()));
    const std::size_t batch = log_probs.shape()[0], classes = log_probs.shape()[1];
    require(labels.size() == batch, "nll_loss",
            "label count " + std::to_string(labels.size()) + " != batch " +
                std::to_string(batch));
    for (int y : labels)
        require(y >= 0 && std::size_t(y) < classes, "nll_loss",
                "label " + std::to_string(y) + " outside [0, " +
                    std::to_string(classes) + ")");

    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
        acc -= log_probs.at(b * classes + std::size_t(labels[b]));
    Tensor out = Tensor::scalar(acc / double(batch));

    if (should_record({&log_probs})) {
        out.set_requires_grad(true);
        auto xi = log_probs.impl(), oi = out.impl();
        std::vector<int> ys(labels.begin(), labels.end());
        GradTape::active()->record([xi, oi, ys = std::move(ys), batch, classes] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            const double g = oi->grad[0] / double(batch);
            for (std::size_t b = 0; b < batch; ++b)
                xi->grad[b * classes + std::size_t(ys[b])] -= g;
        });
    }
    return out;
}

Tensor concat(const Tensor& a, const Tensor& b) {
    require(a.rank() == b.rank() && a.rank() >= 1, "concat",
            "ranks differ or rank 0: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    require(std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin(),
                       b.shape().end() - 1),
            "concat", "leading dimensions differ: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    const std::size_t ac = a.shape().back(), bc = b.shape().back();
    const auto [rows, acols] = rows_cols(a);
    (void)acols;
    Shape out_shape = a.shape();
    out_shape.back() = ac + bc;

    Tensor out = Tensor::zeros(out_shape);
    {
        double* od = out.mutable_data().data();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < ac; ++c) od[r * (ac + bc) + c] = a.at(r * ac + c);
            for (std::size_t c = 0; c < bc; ++c)
                od[r * (ac + bc) + ac + c] = b.at(r * bc + c);
        }
    }

    if (should_record({&a, &b})) {
        out.set_requires_grad(true);
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        GradTape::active()->record([ai, bi, oi, rows = rows, ac, bc] {
            if (oi->grad.empty()) return;
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < ac; ++c)
                        ai->grad[r * ac + c] += g[r * (ac + bc) + c];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < bc; ++c)
                        bi->grad[r * bc + c] += g[r * (ac + bc) + ac + c];
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, std::size_t start, std::size_t length) {
    require(x.rank() >= 1, "slice", "rank-0 tensor");
    const std::size_t cols = x.shape().back();
    require(length > 0 && start + length <= cols, "slice",
            "[" + std::to_string(start) + ", " + std::to_string(start + length) +
                ") out of range for last axis of " + shape_str(x.shape()));
    const auto [rows, xc] = rows_cols(x);
    (void)xc;
    Shape out_shape = x.shape();
    out_shape.back() = length;

    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < length; ++c)
            out.mutable_data()[r * length + c] = x.at(r * cols + start + c);

    if (should_record({&x})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        GradTape::active()->record([xi, oi, rows = rows, cols, start, length] {
            if (oi->grad.empty() || !xi->requires_grad) return;
            xi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < length; ++c)
                    xi->grad[r * cols + start + c] += oi->grad[r * length + c];
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift) {
    const auto [rows, cols] = rows_cols(x);
    require(x.rank() >= 1 && cols > 0, "layer_norm",
            "last axis is empty in shape " + shape_str(x.shape()));
    require(gain.rank() == 1 && gain.shape()[0] == cols, "layer_norm",
            "gain must be (" + std::to_string(cols) + ",), got " + shape_str(gain.shape()));
    require(shift.rank() == 1 && shift.shape()[0] == cols, "layer_norm",
            "shift must be (" + std::to_string(cols) + ",), got " + shape_str(shift.shape()));

    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_std(rows), means(rows);
    {
        const double* xd = x.data().data();
        double* od = out.mutable_data().data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xr = xd + r * cols;
            double mu = 0.0;
            for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
            mu /= double(cols);
            double var = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                const double d = xr[c] - mu;
                var += d * d;
            }
            var /= double(cols);
            const double is = 1.0 / std::sqrt(var + kNormEps);
            means[r] = mu;
            inv_std[r] = is;
            for (std::size_t c = 0; c < cols; ++c)
                od[r * cols + c] = gain.at(c) * (xr[c] - mu) * is + shift.at(c);
        }
    }

    if (should_record({&x, &gain, &shift})) {
        out.set_requires_grad(true);
        auto xi = x.impl(), gi = gain.impl(), si = shift.impl(), oi = out.impl();
        GradTape::active()->record([xi, gi, si, oi, rows = rows, cols = cols,
                                    means = std::move(means),
                                    inv_std = std::move(inv_std)] {
            if (oi->grad.empty()) return;
            const double* g = oi->grad.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = g + r * cols;
                const double* xr = xi->data.data() + r * cols;
                const double mu = means[r], is = inv_std[r];
                if (si->requires_grad) {
                    si->ensure_grad();
                    for (std::size_t c = 0; c < cols; ++c) si->grad[c] += gr[c];
                }
                if (gi->requires_grad) {
                    gi->ensure_grad();
                    for (std::size_t c = 0; c < cols; ++c)
                        gi->grad[c] += gr[c] * (xr[c] - mu) * is;
                }
                if (xi->requires_grad) {
                    xi->ensure_grad();
                    double sum_gy = 0.0, sum_gyx = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double gy = gr[c] * gi->data[c];
                        const double xh = (xr[c] - mu) * is;
                        sum_gy += gy;
                        sum_gyx += gy * xh;
                    }
                    const double inv_n = 1.0 / double(cols);
                    double* dx = xi->grad.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double gy = gr[c] * gi->data[c];
                        const double xh = (xr[c] - mu) * is;
                        dx[c] += is * (gy - inv_n * sum_gy - xh * inv_n * sum_gyx);
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace gdl
