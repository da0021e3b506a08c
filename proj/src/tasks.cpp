// SPDX-License-Identifier: Apache-2.0
#include "gdl/tasks.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "gdl/rng.hpp"

namespace gdl {

GmmTask make_gmm_task(int components, double radius, double sigma_data) {
    if (components < 2) throw std::invalid_argument("make_gmm_task: need K >= 2");
    if (!(radius > 0.0) || !(sigma_data > 0.0))
        throw std::invalid_argument("make_gmm_task: radius and sigma_data must be positive");
    GmmTask task;
    task.components = components;
    task.radius = radius;
    task.sigma_data = sigma_data;
    for (int k = 0; k < components; ++k) {
        const double angle = 2.0 * std::numbers::pi * double(k) / double(components);
        task.means.push_back({radius * std::cos(angle), radius * std::sin(angle)});
    }
    return task;
}

LabeledSamples sample_gmm(const GmmTask& task, std::size_t count, Rng& rng) {
    LabeledSamples out;
    out.x = Tensor::zeros({count, std::size_t(GmmTask::dim)});
    out.y.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const int k = int(rng.below(std::uint64_t(task.components)));
        out.y[i] = k;
        out.x.mutable_data()[2 * i] = task.means[std::size_t(k)][0] +
                                      task.sigma_data * rng.normal();
        out.x.mutable_data()[2 * i + 1] = task.means[std::size_t(k)][1] +
                                          task.sigma_data * rng.normal();
    }
    return out;
}

Tensor sample_gmm_component(const GmmTask& task, int component, std::size_t count,
                            Rng& rng) {
    if (component < 0 || component >= task.components)
        throw std::invalid_argument("sample_gmm_component: component outside [0, K)");
    Tensor out = Tensor::zeros({count, std::size_t(GmmTask::dim)});
    for (std::size_t i = 0; i < count; ++i) {
        out.mutable_data()[2 * i] = task.means[std::size_t(component)][0] +
                                    task.sigma_data * rng.normal();
        out.mutable_data()[2 * i + 1] = task.means[std::size_t(component)][1] +
                                        task.sigma_data * rng.normal();
    }
    return out;
}

Tensor bayes_posterior(const GmmTask& task, const Tensor& x) {
    if (x.rank() != 2 || x.shape()[1] != std::size_t(GmmTask::dim))
        throw std::invalid_argument("bayes_posterior: x must be (batch, 2), got " +
                                    shape_str(x.shape()));
    const std::size_t batch = x.shape()[0];
    const std::size_t k = std::size_t(task.components);
    const double inv_two_var = 1.0 / (2.0 * task.sigma_data * task.sigma_data);

    Tensor out = Tensor::zeros({batch, k});
    std::vector<double> logits(k);
    for (std::size_t b = 0; b < batch; ++b) {
        const double px = x.at(2 * b), py = x.at(2 * b + 1);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
            const double dx = px - task.means[c][0];
            const double dy = py - task.means[c][1];
            logits[c] = -(dx * dx + dy * dy) * inv_two_var;
            mx = std::max(mx, logits[c]);
        }
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(logits[c] - mx);
        const double log_z = mx + std::log(z);
        for (std::size_t c = 0; c < k; ++c)
            out.mutable_data()[b * k + c] = std::exp(logits[c] - log_z);
    }
    return out;
}

Tensor descriptor_eval(const Tensor& x) {
    if (x.rank() != 2 || x.shape()[1] != std::size_t(GmmTask::dim))
        throw std::invalid_argument("descriptor_eval: x must be (batch, 2), got " +
                                    shape_str(x.shape()));
    const std::size_t batch = x.shape()[0];
    Tensor out = Tensor::zeros({batch, 2});
    for (std::size_t b = 0; b < batch; ++b) {
        const double px = x.at(2 * b), py = x.at(2 * b + 1);
        out.mutable_data()[2 * b] = std::hypot(px, py);
        out.mutable_data()[2 * b + 1] =
            (px == 0.0 && py == 0.0) ? 0.0 : std::atan2(py, px);
    }
    return out;
}

Tensor descriptor_soft_map(const GmmTask& task, const Tensor& x) {
    if (x.rank() != 2 || x.shape()[1] != std::size_t(GmmTask::dim))
        throw std::invalid_argument("descriptor_soft_map: x must be (batch, 2), got " +
                                    shape_str(x.shape()));
    // Same normalized exponentials as the posterior under uniform priors.
    return bayes_posterior(task, x);
}

}  // namespace gdl
