// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <vector>

#include "gdl/tensor.hpp"

namespace gdl {

class Rng;

// Labeled 2-D Gaussian mixture: K equally likely components with isotropic
// std sigma_data, means evenly spaced on a circle of radius R. The class
// label is the component index.
struct GmmTask {
    int components = 8;
    double radius = 4.0;
    double sigma_data = 0.3;
    static constexpr int dim = 2;
    std::vector<std::array<double, 2>> means;
};

GmmTask make_gmm_task(int components = 8, double radius = 4.0, double sigma_data = 0.3);

struct LabeledSamples {
    Tensor x;  // (count, 2)
    std::vector<int> y;
};

LabeledSamples sample_gmm(const GmmTask& task, std::size_t count, Rng& rng);

// Draws from a single mixture component; the class-conditional reference
// distribution for target-class metrics.
Tensor sample_gmm_component(const GmmTask& task, int component, std::size_t count,
                            Rng& rng);

// Exact posterior p(component | x) via log-sum-exp; rows sum to 1.
// x: (batch, 2) -> (batch, K).
Tensor bayes_posterior(const GmmTask& task, const Tensor& x);

// Differentiable-almost-everywhere descriptor g(x) = (|x|_2, atan2(x2, x1));
// the origin maps to (0, 0). Stands in for a dense regression target.
// x: (batch, 2) -> (batch, 2).
Tensor descriptor_eval(const Tensor& x);

// Soft assignment over the task's K bins: softmax_k(-|x - mu_k|^2 / (2 s^2)).
// Rows sum to 1; a centrally symmetric input yields the uniform row.
Tensor descriptor_soft_map(const GmmTask& task, const Tensor& x);

}  // namespace gdl
