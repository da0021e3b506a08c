// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gdl/nets.hpp"
#include "gdl/schedule.hpp"
#include "gdl/tasks.hpp"
#include "gdl/tensor.hpp"

namespace gdl {

// 2-Wasserstein distance between Gaussians fit to the two sample sets:
// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)). Near-singular
// covariances are regularized with 1e-8 I.
double frechet_gaussian(const Tensor& samples_a, const Tensor& samples_b);

// Fraction of samples whose exact posterior argmax equals y_target.
double target_accuracy(const Tensor& samples, int y_target, const GmmTask& task);

// Per-class sample counts under the posterior argmax.
std::vector<std::size_t> class_histogram(const Tensor& samples, const GmmTask& task);

enum class ConfidenceKind { kTrueClass, kMaxSoftmax };

struct ConfidenceTrace {
    struct Row {
        int t = 0;
        int expert = -1;  // -1 = backbone
        double confidence = 0.0;
    };
    std::vector<Row> rows;
};

// Mean confidence of a guidance network on q_sample-corrupted held-out data
// across a timestep grid. For a bank the routed expert answers each t;
// expert = -1 rows evaluate the raw backbone.
ConfidenceTrace confidence_curve(const ExpertBank& bank, bool use_experts,
                                 const NoiseSchedule& sched, const Tensor& x,
                                 const std::vector<int>& y,
                                 const std::vector<int>& t_grid, ConfidenceKind kind,
                                 std::uint64_t seed);

void write_confidence_csv(const std::filesystem::path& path, const ConfidenceTrace& trace);

struct MetricReport {
    double frechet = 0.0;
    double accuracy = 0.0;
    std::vector<double> per_class_frechet;
    std::vector<std::size_t> per_class_count;
    std::string guidance_mode;
    int expert_count = 0;
    double scale = 0.0;
    std::string sampler;
    std::uint64_t seed = 0;
    std::string trace_path;
};

void write_metric_report(const std::filesystem::path& path, const MetricReport& report);

// Two-sample Kolmogorov-Smirnov test on 1-D samples; returns the asymptotic
// p-value.
double ks_test_pvalue(std::vector<double> a, std::vector<double> b);

}  // namespace gdl
