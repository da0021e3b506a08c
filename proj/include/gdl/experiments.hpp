// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gdl/config.hpp"
#include "gdl/container.hpp"
#include "gdl/metrics.hpp"
#include "gdl/tasks.hpp"

namespace gdl {

// Shared state for experiment pipelines. Expensive artifacts (epsilon model,
// teachers, generated datasets, trained banks) are cached on disk under dir
// and reloaded when the resolved config matches; training is deterministic,
// so a cached artifact is identical to a retrained one.
struct Workspace {
    RunConfig cfg;
    std::filesystem::path dir;
    NoiseSchedule sched;
    GmmTask task;
    LabeledSamples train_data;
    LabeledSamples eval_data;

    std::optional<EpsilonModel> epsilon;
    std::optional<Mlp> teacher;
    std::optional<Mlp> descriptor_teacher;
    std::map<std::size_t, Tensor> kt_pools;
};

Workspace make_workspace(RunConfig cfg, std::filesystem::path cache_dir);

EpsilonModel& ensure_epsilon(Workspace& ws);
Mlp& ensure_teacher(Workspace& ws);
Mlp& ensure_descriptor_teacher(Workspace& ws);

// Generated transfer data: the first `count` rows of a deterministic pool of
// at least cfg.train_experts.dataset_size samples, so data-size ablations
// use nested subsets of one pool.
Tensor kt_subset(Workspace& ws, std::size_t count);

enum class BankKind {
    kSupervised,        // labeled noisy data, per-expert ranges
    kDataFree,          // teacher predictions on generated data
    kTConditioned,      // single time-conditioned model, whole range
    kDescriptorDataFree,  // regression teacher, L1 transfer
    kDenseDataFree,     // classifier teacher, L1 transfer on logit maps
};

// Trains (or loads) a bank. kt_count only applies to data-free kinds. The
// training budget is a total split evenly across experts;
// iterations_override = 0 uses cfg.train_experts.iterations.
ExpertBank make_bank(Workspace& ws, BankKind kind, int expert_count, std::size_t kt_count,
                     std::uint64_t train_seed, int iterations_override = 0);

struct GuidedEval {
    std::vector<double> accuracy;         // per sampling seed
    std::vector<double> frechet_target;   // per seed, vs the target component
    Tensor last_samples;
    double mean_accuracy() const;
    double mean_frechet() const;
    double accuracy_stderr() const;
};

GuidedEval evaluate_class_guidance(Workspace& ws, const ExpertBank* bank,
                                   GuidanceSpec spec, SamplerConfig sampler_cfg,
                                   int n_seeds, std::size_t batch);

// Scripted paper-analog pipelines; each writes summary.csv plus the resolved
// config under out_dir/<name>/.
void reproduce_fig2(Workspace& ws, const std::filesystem::path& out_dir);
void reproduce_table1(Workspace& ws, const std::filesystem::path& out_dir);
void reproduce_expert_sweep(Workspace& ws, const std::filesystem::path& out_dir);
void reproduce_data_sweep(Workspace& ws, const std::filesystem::path& out_dir);
void reproduce_scale_sweep(Workspace& ws, const std::filesystem::path& out_dir);

}  // namespace gdl
