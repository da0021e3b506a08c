// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include "doctest.h"
#include "gdl/rng.hpp"
#include "gdl/tensor.hpp"
#include "gradcheck.hpp"

using namespace gdl;
using gdl::testing::finite_diff_grad;
using gdl::testing::max_grad_rel_err;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::gaussian(std::move(shape), rng, scale);
    return t;
}

// Pushes every coordinate at least `margin` away from zero, for ops with a
// kink there.
Tensor away_from_zero(Tensor t, double margin) {
    for (double& v : t.mutable_data())
        if (std::abs(v) < margin) v = v < 0.0 ? v - margin : v + margin;
    return t;
}

}  // namespace

TEST_CASE("matmul identity") {
    Rng rng(1, "test");
    const Tensor a = random_tensor({3, 3}, rng);
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.mutable_data()[std::size_t(i) * 4] = 1.0;
    const Tensor out = matmul(eye, a);
    for (std::size_t i = 0; i < 9; ++i) CHECK(out.at(i) == doctest::Approx(a.at(i)));
}

TEST_CASE("matmul shape mismatch rejected") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_AS((void)matmul(a, b), std::invalid_argument);
}

TEST_CASE("softmax of zeros is uniform") {
    const Tensor out = softmax(Tensor::row({0.0, 0.0, 0.0}));
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(out.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax on empty last axis rejected") {
    CHECK_THROWS_AS((void)softmax(Tensor::zeros({2, 0})), std::invalid_argument);
    CHECK_THROWS_AS((void)log_softmax(Tensor::zeros({0})), std::invalid_argument);
}

TEST_CASE("kl divergence of a distribution with itself is zero") {
    const Tensor p = Tensor::row({0.2, 0.5, 0.3});
    Tensor log_p = Tensor::zeros({3});
    for (std::size_t i = 0; i < 3; ++i) log_p.mutable_data()[i] = std::log(p.at(i));
    CHECK(kl_divergence(p, log_p).item() == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("kl divergence against uniform") {
    // 0.7 ln 1.4 + 0.3 ln 0.6 evaluated directly
    const Tensor p = Tensor::row({0.7, 0.3});
    const Tensor q_log = Tensor::row({std::log(0.5), std::log(0.5)});
    const double expected = 0.7 * std::log(1.4) + 0.3 * std::log(0.6);
    CHECK(kl_divergence(p, q_log).item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(kl_divergence(p, q_log).item() == doctest::Approx(0.08228).epsilon(1e-4));
}

TEST_CASE("backward through sum of squares") {
    Tensor x = Tensor::row({1.0, 2.0, 3.0});
    x.set_requires_grad(true);
    GradTape tape;
    const Tensor loss = sum(mul(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward through mean") {
    Tensor x = Tensor::row({4.0, -1.0, 0.5, 2.0});
    x.set_requires_grad(true);
    GradTape tape;
    tape.backward(mean(x));
    for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(0.25));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::row({1.0, 2.0});
    x.set_requires_grad(true);
    GradTape tape;
    const Tensor y = relu(x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward requires an active tape") {
    const Tensor loss = Tensor::scalar(1.0);
    CHECK_THROWS_AS(backward(loss), std::logic_error);
}

TEST_CASE("tape is consumed by backward") {
    Tensor x = Tensor::row({1.0});
    x.set_requires_grad(true);
    GradTape tape;
    const Tensor loss = sum(x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
}

TEST_CASE("finite difference oracle sanity") {
    // f = x^2 at x = 3
    const Tensor x = Tensor::row({3.0});
    const Tensor g = finite_diff_grad(
        [](const Tensor& t) { return t.at(0) * t.at(0); }, x, 1e-5);
    CHECK(g.at(0) == doctest::Approx(6.0).epsilon(1e-8));

    // f = sum(relu(x)) at [-1, 2], away from the kink
    const Tensor x2 = Tensor::row({-1.0, 2.0});
    const Tensor g2 = finite_diff_grad(
        [](const Tensor& t) { return sum(relu(t)).item(); }, x2, 1e-6);
    CHECK(g2.at(0) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(g2.at(1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("gradcheck: every forward op") {
    Rng rng(42, "gradcheck");
    const double tol = 1e-4;

    SUBCASE("matmul lhs and rhs") {
        const Tensor a = random_tensor({3, 4}, rng);
        const Tensor b = random_tensor({4, 2}, rng);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(matmul(t, b)); }, a) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(matmul(a, t)); }, b) < tol);
    }
    SUBCASE("linear x, weight, bias") {
        const Tensor x = random_tensor({5, 3}, rng);
        const Tensor w = random_tensor({4, 3}, rng);
        const Tensor bias = random_tensor({4}, rng);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(linear(t, w, bias)); }, x) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(linear(x, t, bias)); }, w) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(linear(x, w, t)); }, bias) < tol);
    }
    SUBCASE("add same shape and broadcast") {
        const Tensor a = random_tensor({4, 3}, rng);
        const Tensor b = random_tensor({4, 3}, rng);
        const Tensor row = random_tensor({3}, rng);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(add(t, b)); }, a) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(add(a, t)); }, b) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(add(a, t)); }, row) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(add(t, row)); }, a) < tol);
    }
    SUBCASE("mul") {
        const Tensor a = random_tensor({6}, rng);
        const Tensor b = random_tensor({6}, rng);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(mul(t, b)); }, a) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return mean(mul(a, t)); }, b) < tol);
    }
    SUBCASE("affine") {
        const Tensor x = random_tensor({7}, rng);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return sum(affine(t, -2.5, 0.75)); }, x) < tol);
    }
    SUBCASE("relu away from the kink") {
        const Tensor x = away_from_zero(random_tensor({8}, rng), 1e-3);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(relu(t)); }, x) < tol);
    }
    SUBCASE("gelu") {
        const Tensor x = random_tensor({8}, rng);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(gelu(t)); }, x) < tol);
    }
    SUBCASE("softmax and log_softmax") {
        const Tensor x = random_tensor({3, 5}, rng);
        const Tensor weights = random_tensor({3, 5}, rng);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return sum(mul(softmax(t), weights)); }, x) < tol);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return sum(mul(log_softmax(t), weights)); }, x) <
              tol);
    }
    SUBCASE("mean and sum") {
        const Tensor x = random_tensor({4, 2}, rng);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return mean(t); }, x) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return sum(t); }, x) < tol);
    }
    SUBCASE("l1_distance away from ties") {
        const Tensor a = random_tensor({6}, rng);
        Tensor b = random_tensor({6}, rng);
        for (std::size_t i = 0; i < 6; ++i)
            if (std::abs(a.at(i) - b.at(i)) < 1e-2)
                b.mutable_data()[i] += 0.1;
        CHECK(max_grad_rel_err([&](const Tensor& t) { return l1_distance(t, b); }, a) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return l1_distance(a, t); }, b) < tol);
    }
    SUBCASE("mse") {
        const Tensor a = random_tensor({5}, rng);
        const Tensor b = random_tensor({5}, rng);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return mse(t, b); }, a) < tol);
        CHECK(max_grad_rel_err([&](const Tensor& t) { return mse(a, t); }, b) < tol);
    }
    SUBCASE("kl_divergence both arguments") {
        Tensor p = softmax(random_tensor({2, 4}, rng));
        const Tensor q = random_tensor({2, 4}, rng);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return kl_divergence(p, log_softmax(t)); }, q) <
              tol);
        // Gradient w.r.t. the probabilities themselves (p > 0 everywhere).
        const Tensor q_log = log_softmax(q);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return kl_divergence(t, q_log); }, p) < tol);
    }
    SUBCASE("nll_loss") {
        const Tensor x = random_tensor({4, 3}, rng);
        const std::vector<int> labels = {0, 2, 1, 2};
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return nll_loss(log_softmax(t), labels); }, x) <
              tol);
    }
    SUBCASE("concat and slice") {
        const Tensor a = random_tensor({3, 2}, rng);
        const Tensor b = random_tensor({3, 4}, rng);
        const Tensor weights = random_tensor({3, 6}, rng);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return sum(mul(concat(t, b), weights)); }, a) <
              tol);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return sum(mul(concat(a, t), weights)); }, b) <
              tol);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return sum(slice(t, 1, 3)); }, b) < tol);
    }
    SUBCASE("layer_norm x, gain, shift") {
        const Tensor x = random_tensor({3, 6}, rng);
        const Tensor gain = random_tensor({6}, rng);
        const Tensor shift = random_tensor({6}, rng);
        const Tensor weights = random_tensor({3, 6}, rng);
        auto through = [&](const Tensor& y) { return sum(mul(y, weights)); };
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return through(layer_norm(t, gain, shift)); }, x) <
              tol);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return through(layer_norm(x, t, shift)); }, gain) <
              tol);
        CHECK(max_grad_rel_err(
                  [&](const Tensor& t) { return through(layer_norm(x, gain, t)); }, shift) <
              tol);
    }
}

TEST_CASE("fused expression equals staged chain rule") {
    // d/dx mean(relu(x W^T + b) M) computed once through a fused closure and
    // once by backpropagating a staged graph; both against the oracle.
    Rng rng(7, "chain");
    const Tensor x = random_tensor({4, 3}, rng);
    const Tensor w = random_tensor({5, 3}, rng);
    const Tensor b = away_from_zero(random_tensor({5}, rng), 5e-2);
    const Tensor m = random_tensor({5, 2}, rng);

    auto fused = [&](const Tensor& t) { return mean(matmul(relu(linear(t, w, b)), m)); };

    Tensor leaf = x.clone();
    leaf.set_requires_grad(true);
    {
        GradTape tape;
        const Tensor h = linear(leaf, w, b);
        const Tensor a = relu(h);
        const Tensor loss = mean(matmul(a, m));
        tape.backward(loss);
    }
    CHECK(max_grad_rel_err(fused, x) < 1e-4);
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& t) { return fused(t).item(); }, x, 1e-5);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(gdl::testing::rel_err(leaf.grad()[i], fd.at(i)) < 1e-4);
}

TEST_CASE("ops are deterministic") {
    Rng rng(11, "det");
    const Tensor a = random_tensor({16, 16}, rng);
    const Tensor b = random_tensor({16, 16}, rng);
    const Tensor first = matmul(a, b);
    const Tensor second = matmul(a, b);
    for (std::size_t i = 0; i < first.size(); ++i) CHECK(first.at(i) == second.at(i));
}

TEST_CASE("no recording without an active tape") {
    Tensor x = Tensor::row({1.0, -2.0});
    x.set_requires_grad(true);
    const Tensor y = relu(x);  // no tape: silently untracked
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("unreached leaves stay gradient-free") {
    Tensor x = Tensor::row({1.0});
    Tensor y = Tensor::row({2.0});
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    GradTape tape;
    const Tensor loss = sum(x);
    tape.backward(loss);
    CHECK(x.has_grad());
    CHECK_FALSE(y.has_grad());
}
