// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gdl/metrics.hpp"
#include "gdl/sampler.hpp"
#include "gdl/schedule.hpp"
#include "gdl/train.hpp"

#include "json.hpp"

namespace gdl {

// Resolved run configuration. JSON overrides are applied onto these
// defaults with strict validation: unknown keys are rejected at every
// nesting level.
struct RunConfig {
    std::uint64_t seed = 7;
    std::string out_dir;  // empty -> $GDL_OUT or "out"

    struct Schedule {
        int max_timestep = 1000;
        double beta_start = 1e-4;
        double beta_end = 0.02;
        ReverseVariance variance = ReverseVariance::kPosterior;
    } schedule;

    struct Task {
        int components = 8;
        double radius = 4.0;
        double sigma_data = 0.3;
        std::size_t train_count = 20000;
        std::size_t eval_count = 4000;
    } task;

    struct Net {
        std::vector<std::size_t> hidden_dims;
        std::size_t time_embed_dim = 0;
    };
    Net epsilon_model{{96, 96}, 32};
    Net teacher{{64, 64}, 0};

    struct Experts {
        int count = 5;
        std::size_t rank = 4;   // paper-scale default is 16; toy layers are small
        double alpha = 8.0;
    } experts;

    TrainConfig train_epsilon{24000, 128, 4e-4, 0.0};
    TrainConfig train_teacher{12000, 128, 1e-4, 0.05};
    TrainConfig train_experts{60000, 128, 1e-4, 0.05};

    SamplerConfig sampler{SamplerConfig::Kind::kDdim, 25, 0.0, 0};
    GuidanceSpec guidance;
    ConfidenceKind confidence = ConfidenceKind::kTrueClass;

    NoiseSchedule make_schedule() const;
    std::string resolved_out_dir() const;
    void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json dump_run_config(const RunConfig& cfg);
void write_run_config(const std::filesystem::path& path, const RunConfig& cfg);

std::string guidance_mode_name(GuidanceSpec::Mode mode);
GuidanceSpec::Mode guidance_mode_from_name(const std::string& name);

}  // namespace gdl
