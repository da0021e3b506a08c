// SPDX-License-Identifier: Apache-2.0
#include "gdl/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace gdl {

namespace {

void check_t(const NoiseSchedule& sched, int t, int lo) {
    if (t < lo || t > sched.max_timestep)
        throw std::invalid_argument("timestep " + std::to_string(t) + " outside [" +
                                    std::to_string(lo) + ", " +
                                    std::to_string(sched.max_timestep) + "]");
}

}  // namespace

double NoiseSchedule::beta_at(int t) const {
    check_t(*this, t, 1);
    return beta[std::size_t(t) - 1];
}

double NoiseSchedule::alpha_bar_at(int t) const {
    check_t(*this, t, 0);
    return t == 0 ? 1.0 : alpha_bar[std::size_t(t) - 1];
}

double NoiseSchedule::sigma2_at(int t) const {
    check_t(*this, t, 1);
    return sigma2[std::size_t(t) - 1];
}

double NoiseSchedule::sigma_at(int t) const { return std::sqrt(sigma2_at(t)); }

NoiseSchedule make_linear_schedule(int max_timestep, double beta_start, double beta_end,
                                   ReverseVariance variance) {
    if (max_timestep < 1)
        throw std::invalid_argument("make_linear_schedule: max_timestep must be >= 1");
    if (!(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument(
            "make_linear_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.max_timestep = max_timestep;
    const std::size_t n = std::size_t(max_timestep);
    s.beta.resize(n);
    s.alpha_bar.resize(n);
    s.sigma2.resize(n);

    double prod = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double frac = n == 1 ? 0.0 : double(i) / double(n - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        const double alpha_bar_prev = prod;
        prod *= 1.0 - s.beta[i];
        s.alpha_bar[i] = prod;
        s.sigma2[i] = variance == ReverseVariance::kBeta
                          ? s.beta[i]
                          : s.beta[i] * (1.0 - alpha_bar_prev) / (1.0 - prod);
    }
    return s;
}

Tensor q_sample(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& eps) {
    check_t(sched, t, 0);
    if (eps.shape() != x0.shape())
        throw std::invalid_argument("q_sample: eps shape " + shape_str(eps.shape()) +
                                    " != x0 shape " + shape_str(x0.shape()));
    const double ab = sched.alpha_bar_at(t);
    const double signal = std::sqrt(ab);
    const double noise = std::sqrt(1.0 - ab);
    Tensor out = Tensor::zeros(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i)
        out.mutable_data()[i] = signal * x0.at(i) + noise * eps.at(i);
    return out;
}

TimestepRange expert_range(int expert_count, int max_timestep, int expert) {
    if (expert_count < 1 || expert_count > max_timestep)
        throw std::invalid_argument("expert_range: need 1 <= N <= T");
    if (expert < 1 || expert > expert_count)
        throw std::invalid_argument("expert_range: expert " + std::to_string(expert) +
                                    " outside [1, " + std::to_string(expert_count) + "]");
    const int base = max_timestep / expert_count;
    const int extra = max_timestep % expert_count;
    // Experts 1..extra own base+1 timesteps, the rest own base.
    const int prior = (expert - 1) * base + std::min(expert - 1, extra);
    TimestepRange r;
    r.lo = prior + 1;
    r.hi = prior + base + (expert <= extra ? 1 : 0);
    return r;
}

int expert_for_timestep(int expert_count, int max_timestep, int t) {
    if (expert_count < 1 || expert_count > max_timestep)
        throw std::invalid_argument("expert_for_timestep: need 1 <= N <= T");
    if (t < 1 || t > max_timestep)
        throw std::invalid_argument("expert_for_timestep: t outside [1, T]");
    const int base = max_timestep / expert_count;
    const int extra = max_timestep % expert_count;
    const int wide_span = extra * (base + 1);
    if (t <= wide_span) return (t - 1) / (base + 1) + 1;
    return extra + (t - 1 - wide_span) / base + 1;
}

}  // namespace gdl
