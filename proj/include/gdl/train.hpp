// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "gdl/nets.hpp"
#include "gdl/sampler.hpp"
#include "gdl/schedule.hpp"
#include "gdl/tensor.hpp"

namespace gdl {

struct TrainConfig {
    int iterations = 3000;
    int batch_size = 128;
    double learning_rate = 1e-4;
    double weight_decay = 0.05;
    std::uint64_t seed = 0;
    int expert_count = 5;
    std::size_t dataset_size = 50000;  // generated knowledge-transfer samples
    double temperature = 1.0;
    GuidanceSpec::LossKind loss_kind = GuidanceSpec::LossKind::kClassNll;

    void validate() const;
};

// Adam with decoupled weight decay. Step order and state layout are fixed,
// so identical configs and seeds give bit-identical parameter trajectories.
class AdamW {
  public:
    AdamW(std::vector<Tensor> params, double learning_rate, double weight_decay,
          double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void zero_grad();
    void step();  // consumes the gradients accumulated on the params

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, wd_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

using LossCurve = std::vector<double>;

// Denoising regression: E || eps - model(q_sample(x0, t, eps), t) ||^2 with
// t uniform on {1..T}. Throws on divergence (non-finite loss).
LossCurve train_epsilon(const NoiseSchedule& sched, EpsilonModel& model,
                        const Tensor& data, const TrainConfig& cfg);

// Clean-data supervised training for the off-the-shelf models.
LossCurve train_teacher_classifier(Mlp& net, const Tensor& x, const std::vector<int>& y,
                                   const TrainConfig& cfg);
LossCurve train_teacher_regressor(Mlp& net, const Tensor& x, const Tensor& targets,
                                  const TrainConfig& cfg);

// Whole-range supervised training of a time-conditioned classifier: inputs
// q_sample(x0, t, eps) with the timestep embedded into the network input.
// Realizes the t-conditioned single-model baseline.
LossCurve train_tcond_classifier(const NoiseSchedule& sched, Mlp& net, const Tensor& x0,
                                 const std::vector<int>& y, const TrainConfig& cfg);

// Supervised expert n: t drawn uniformly from expert_range(N, T, n), inputs
// q_sample(x0, t, eps), cross-entropy to the true label. Other experts and
// the backbone are untouched.
LossCurve train_expert_supervised(const NoiseSchedule& sched, ExpertBank& bank, int expert,
                                  const Tensor& x0, const std::vector<int>& y,
                                  const TrainConfig& cfg);
// All experts in turn, each on cfg.iterations / N iterations (equal total
// budget across expert counts).
LossCurve train_experts_supervised(const NoiseSchedule& sched, ExpertBank& bank,
                                   const Tensor& x0, const std::vector<int>& y,
                                   const TrainConfig& cfg);

// Unconditional samples from the diffusion model for data-free transfer.
Tensor generate_kt_dataset(const NoiseSchedule& sched, const EpsilonModel& model,
                           std::size_t count, const SamplerConfig& sampler_cfg,
                           std::size_t dim);

// Knowledge-transfer loss. Classification: KL(sg(softmax(teacher / tau)) ||
// softmax(student)); regression and dense prediction: mean L1 between the
// detached teacher output and the student output.
Tensor kt_loss(const Tensor& teacher_out, const Tensor& student_out,
               GuidanceSpec::LossKind loss_kind, double tau);

// Data-free transfer for expert n: teacher = frozen backbone on clean
// generated x0, student = expert on q_sample(x0, t, eps) with t from the
// expert's range. Only adapter parameters receive gradient.
LossCurve train_expert_data_free(const NoiseSchedule& sched, ExpertBank& bank, int expert,
                                 const Tensor& kt_x0, const TrainConfig& cfg);
LossCurve train_experts_data_free(const NoiseSchedule& sched, ExpertBank& bank,
                                  const Tensor& kt_x0, const TrainConfig& cfg);

void write_loss_csv(const std::filesystem::path& path, const LossCurve& curve);

// Observation point for the expert training loops: called as (expert, t) for
// every timestep draw. Pass an empty function to remove.
void set_timestep_draw_hook(std::function<void(int, int)> hook);

}  // namespace gdl
