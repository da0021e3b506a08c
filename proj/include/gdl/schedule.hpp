// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "gdl/tensor.hpp"

namespace gdl {

enum class ReverseVariance { kPosterior, kBeta };

// Per-timestep diffusion schedule. Arrays are indexed by t-1 for
// t in 1..max_timestep; alpha_bar_at(0) == 1 by convention.
struct NoiseSchedule {
    int max_timestep = 0;
    std::vector<double> beta;       // beta[t-1]
    std::vector<double> alpha_bar;  // alpha_bar[t-1], strictly decreasing
    std::vector<double> sigma2;     // reverse-process variance at t

    double beta_at(int t) const;
    double alpha_bar_at(int t) const;  // accepts t = 0
    double sigma2_at(int t) const;
    double sigma_at(int t) const;
};

NoiseSchedule make_linear_schedule(int max_timestep, double beta_start, double beta_end,
                                   ReverseVariance variance = ReverseVariance::kPosterior);

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; t = 0 returns x0.
Tensor q_sample(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& eps);

struct TimestepRange {
    int lo = 0;
    int hi = 0;  // inclusive
    bool contains(int t) const { return lo <= t && t <= hi; }
    int width() const { return hi - lo + 1; }
};

// Inclusive timestep interval owned by expert n (1-based) out of N. When N
// does not divide T, the first T mod N experts take one extra timestep.
TimestepRange expert_range(int expert_count, int max_timestep, int expert);

// Inverse of expert_range: the unique expert whose range contains t.
int expert_for_timestep(int expert_count, int max_timestep, int t);

}  // namespace gdl
