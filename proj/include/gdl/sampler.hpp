// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gdl/nets.hpp"
#include "gdl/schedule.hpp"
#include "gdl/tensor.hpp"

namespace gdl {

class Rng;

// One sampling run's guidance recipe: which network variant produces the
// loss, what the loss compares against, and how strongly the gradient
// perturbs each reverse step.
struct GuidanceSpec {
    enum class Mode {
        kNone,
        kNaiveOffTheShelf,  // raw backbone on x_t
        kSingleNoiseAware,  // expert 1 of an N=1 bank
        kMultiExpert,       // expert routed by timestep
        kGradientsOnX0Hat,  // backbone on the predicted clean point
        kTConditioned,      // single model with the timestep embedded into its input
    };
    enum class LossKind { kClassNll, kRegressionL1, kDenseL1 };
    enum class GradScaling { kFixed, kNormRatio };

    Mode mode = Mode::kNone;
    LossKind loss_kind = LossKind::kClassNll;
    int y_target = 0;      // class index (kClassNll)
    Tensor d_target;       // regression target (kRegressionL1)
    Tensor s_target;       // probability map target (kDenseL1)
    double scale = 7.5;
    GradScaling grad_scaling = GradScaling::kFixed;
    double norm_ratio_rho = 0.3;  // only read under kNormRatio

    void validate() const;
};

struct SamplerConfig {
    enum class Kind { kDdpm, kDdim };
    Kind kind = Kind::kDdim;
    int steps = 25;
    double eta = 0.0;  // DDIM stochasticity; 0 = deterministic
    std::uint64_t seed = 0;

    void validate(int max_timestep) const;
};

// Single reverse steps. z is caller-supplied noise of x_t's shape (pass
// zeros for the final step).
Tensor ddpm_step(const NoiseSchedule& sched, const NoisePredictor& model,
                 const Tensor& x_t, int t, const Tensor& z);

Tensor guided_step(const NoiseSchedule& sched, const NoisePredictor& model,
                   const ExpertBank& bank, const GuidanceSpec& spec, const Tensor& x_t,
                   int t, const Tensor& z);

Tensor predict_x0(const NoiseSchedule& sched, const NoisePredictor& model,
                  const Tensor& x_t, int t);

Tensor ddim_step(const NoiseSchedule& sched, const NoisePredictor& model,
                 const Tensor& x_t, int t, int t_prev, double eta, const Tensor& z);

Tensor ddim_step_guided(const NoiseSchedule& sched, const NoisePredictor& model,
                        const ExpertBank& bank, const GuidanceSpec& spec,
                        const Tensor& x_t, int t, int t_prev, double eta,
                        const Tensor& z);

// Uniform-stride timestep subsequence: T first, T - (steps-1)*(T/steps) last.
std::vector<int> ddim_timesteps(int max_timestep, int steps);

// Guidance gradient g = grad_{x_t} L_guide for one step, plus the step's
// confidence reading (mean max-softmax; NaN for regression losses).
struct GuidanceEval {
    Tensor grad;
    double confidence = 0.0;
    int expert = -1;  // -1 = backbone
};
GuidanceEval guidance_gradient(const ExpertBank& bank, const GuidanceSpec& spec,
                               const NoiseSchedule& sched, const NoisePredictor& model,
                               const Tensor& x_t, int t);

struct StepTraceRow {
    int t = 0;
    int expert = -1;  // -1 = none/backbone
    double confidence = 0.0;
    double grad_norm = 0.0;
};

struct SampleResult {
    Tensor x0;  // (batch, dim)
    std::vector<StepTraceRow> trace;
    std::uint64_t guidance_evals = 0;
};

// Full reverse chain from seeded Gaussian noise. bank/spec may be null for
// unguided sampling.
SampleResult sample(const NoiseSchedule& sched, const NoisePredictor& model,
                    const ExpertBank* bank, const GuidanceSpec* spec,
                    const SamplerConfig& cfg, std::size_t batch, std::size_t dim);

void write_trace_csv(const std::filesystem::path& path,
                     const std::vector<StepTraceRow>& trace);

}  // namespace gdl
