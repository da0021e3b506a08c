// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: trains the diffusion and guidance models, generates
// datasets, runs guided sampling, evaluates metrics, and reproduces the
// scripted experiment pipelines. Exit codes: 0 success, 1 configuration or
// validation error, 2 runtime failure. Diagnostics go to stderr.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "gdl/config.hpp"
#include "gdl/container.hpp"
#include "gdl/experiments.hpp"
#include "gdl/metrics.hpp"
#include "gdl/rng.hpp"
#include "gdl/sampler.hpp"
#include "gdl/train.hpp"

namespace {

namespace fs = std::filesystem;

gdl::RunConfig load_config(const std::string& config_path,
                           std::optional<std::uint64_t> seed,
                           const std::string& out_dir) {
    gdl::RunConfig cfg = config_path.empty() ? gdl::RunConfig{}
                                             : gdl::load_run_config(config_path);
    if (seed.has_value()) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
    return cfg;
}

fs::path prepare_out(const gdl::RunConfig& cfg) {
    const fs::path out = cfg.resolved_out_dir();
    fs::create_directories(out);
    return out;
}

gdl::Workspace open_workspace(const gdl::RunConfig& cfg) {
    return gdl::make_workspace(cfg, prepare_out(cfg) / "cache");
}

int run(int argc, char** argv) {
    CLI::App app{"Guided-diffusion lab: multi-expert parameter-efficient guidance"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "JSON run configuration")
        ->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "override the config seed");
    app.add_option("--out", out_dir, "output directory (default $GDL_OUT or ./out)");

    auto* train_diffusion =
        app.add_subcommand("train-diffusion", "train the unconditional noise predictor");
    auto* train_teacher =
        app.add_subcommand("train-teacher", "train the off-the-shelf models on clean data");
    auto* gen_dataset =
        app.add_subcommand("gen-dataset", "generate the knowledge-transfer dataset");
    std::size_t gen_count = 0;
    gen_dataset->add_option("--count", gen_count, "number of samples")->required();

    auto* train_experts = app.add_subcommand("train-experts", "train an expert bank");
    std::string experts_mode = "data-free";
    int experts_n = 0;
    train_experts->add_option("--mode", experts_mode, "supervised | data-free")
        ->check(CLI::IsMember({"supervised", "data-free"}));
    train_experts->add_option("--experts", experts_n, "number of experts (default: config)");

    auto* sample_cmd = app.add_subcommand("sample", "run guided or unguided sampling");
    std::string guidance_name;
    std::optional<double> scale;
    std::size_t sample_count = 1000;
    sample_cmd->add_option("--guidance", guidance_name,
                           "none | naive | single | multi | x0hat | tcond");
    sample_cmd->add_option("--scale", scale, "guidance scale s");
    sample_cmd->add_option("--count", sample_count, "number of samples");

    auto* evaluate_cmd = app.add_subcommand("evaluate", "compute metrics for a samples file");
    std::string samples_path;
    evaluate_cmd->add_option("--samples", samples_path, "samples container")
        ->required()
        ->check(CLI::ExistingFile);

    auto* reproduce = app.add_subcommand("reproduce", "run a scripted experiment pipeline");
    std::string experiment;
    reproduce
        ->add_option("--experiment", experiment,
                     "fig2 | table1 | expert-sweep | data-sweep | scale-sweep")
        ->required()
        ->check(CLI::IsMember({"fig2", "table1", "expert-sweep", "data-sweep",
                               "scale-sweep"}));

    CLI11_PARSE(app, argc, argv);

    gdl::RunConfig cfg = load_config(config_path, seed, out_dir);
    const fs::path out = prepare_out(cfg);

    if (train_diffusion->parsed()) {
        gdl::Workspace ws = open_workspace(cfg);
        gdl::MlpSpec spec;
        spec.input_dim = 2;
        spec.output_dim = 2;
        spec.hidden_dims = cfg.epsilon_model.hidden_dims;
        spec.time_embed_dim = cfg.epsilon_model.time_embed_dim;
        gdl::Rng init(cfg.seed, "init.epsilon");
        gdl::EpsilonModel model(spec, ws.sched.max_timestep, init);
        gdl::TrainConfig tc = cfg.train_epsilon;
        tc.seed = cfg.seed;
        const gdl::LossCurve curve = gdl::train_epsilon(ws.sched, model, ws.train_data.x, tc);
        gdl::save_epsilon_model(out / "epsilon.gdlc", model);
        gdl::write_loss_csv(out / "epsilon_loss.csv", curve);
        std::cerr << "wrote " << (out / "epsilon.gdlc") << "\n";
        return 0;
    }
    if (train_teacher->parsed()) {
        gdl::Workspace ws = open_workspace(cfg);
        gdl::save_mlp(out / "teacher.gdlc", gdl::ensure_teacher(ws));
        gdl::save_mlp(out / "descriptor_teacher.gdlc", gdl::ensure_descriptor_teacher(ws));
        std::cerr << "wrote " << (out / "teacher.gdlc") << "\n";
        return 0;
    }
    if (gen_dataset->parsed()) {
        gdl::Workspace ws = open_workspace(cfg);
        gdl::SamplerConfig scfg = cfg.sampler;
        scfg.seed = gdl::Rng(cfg.seed, "kt-dataset-seed").next_u64();
        const gdl::Tensor data = gdl::generate_kt_dataset(
            ws.sched, gdl::ensure_epsilon(ws), gen_count, scfg, 2);
        gdl::save_dataset(out / "kt_dataset.gdlc", data);
        std::cerr << "wrote " << (out / "kt_dataset.gdlc") << "\n";
        return 0;
    }
    if (train_experts->parsed()) {
        gdl::Workspace ws = open_workspace(cfg);
        const int n = experts_n > 0 ? experts_n : cfg.experts.count;
        const gdl::BankKind kind = experts_mode == "supervised"
                                       ? gdl::BankKind::kSupervised
                                       : gdl::BankKind::kDataFree;
        const gdl::ExpertBank bank =
            gdl::make_bank(ws, kind, n, cfg.train_experts.dataset_size, cfg.seed);
        const fs::path path = out / ("experts_" + experts_mode + ".gdlc");
        gdl::save_expert_bank(path, bank);
        std::cerr << "wrote " << path << "\n";
        return 0;
    }
    if (sample_cmd->parsed()) {
        gdl::Workspace ws = open_workspace(cfg);
        gdl::GuidanceSpec spec = cfg.guidance;
        if (!guidance_name.empty()) spec.mode = gdl::guidance_mode_from_name(guidance_name);
        if (scale.has_value()) spec.scale = *scale;

        std::optional<gdl::ExpertBank> bank;
        switch (spec.mode) {
            case gdl::GuidanceSpec::Mode::kNone:
                break;
            case gdl::GuidanceSpec::Mode::kNaiveOffTheShelf:
            case gdl::GuidanceSpec::Mode::kGradientsOnX0Hat: {
                gdl::Rng naive_rng(cfg.seed, "bank.naive");
                bank.emplace(gdl::ensure_teacher(ws).clone(), 1, ws.sched.max_timestep,
                             cfg.experts.rank, cfg.experts.alpha, naive_rng);
                break;
            }
            case gdl::GuidanceSpec::Mode::kSingleNoiseAware:
                bank = gdl::make_bank(ws, gdl::BankKind::kSupervised, 1, 0, cfg.seed);
                break;
            case gdl::GuidanceSpec::Mode::kMultiExpert:
                bank = gdl::make_bank(ws, gdl::BankKind::kDataFree, cfg.experts.count,
                                      cfg.train_experts.dataset_size, cfg.seed);
                break;
            case gdl::GuidanceSpec::Mode::kTConditioned:
                bank = gdl::make_bank(ws, gdl::BankKind::kTConditioned, 1, 0, cfg.seed);
                break;
        }

        gdl::SamplerConfig scfg = cfg.sampler;
        scfg.seed = gdl::Rng(cfg.seed, "cli-sample").next_u64();
        const gdl::SampleResult res =
            gdl::sample(ws.sched, gdl::ensure_epsilon(ws),
                        bank.has_value() ? &*bank : nullptr,
                        spec.mode == gdl::GuidanceSpec::Mode::kNone ? nullptr : &spec,
                        scfg, sample_count, 2);
        gdl::save_dataset(out / "samples.gdlc", res.x0);
        gdl::write_trace_csv(out / "sample_trace.csv", res.trace);
        std::cerr << "wrote " << (out / "samples.gdlc") << " ("
                  << res.guidance_evals << " guidance evaluations)\n";
        return 0;
    }
    if (evaluate_cmd->parsed()) {
        gdl::Workspace ws = open_workspace(cfg);
        const gdl::Dataset samples = gdl::load_dataset(samples_path);
        if (samples.x0.shape()[0] == 0) throw std::invalid_argument("no samples");

        gdl::MetricReport report;
        gdl::Rng ref_rng(cfg.seed, "frechet-ref");
        const gdl::Tensor reference =
            gdl::sample_gmm_component(ws.task, cfg.guidance.y_target, 4000, ref_rng);
        report.frechet = gdl::frechet_gaussian(samples.x0, reference);
        report.accuracy = gdl::target_accuracy(samples.x0, cfg.guidance.y_target, ws.task);
        const auto hist = gdl::class_histogram(samples.x0, ws.task);
        report.per_class_count = hist;
        for (int k = 0; k < ws.task.components; ++k) {
            gdl::Rng class_rng(cfg.seed, "frechet-ref-class" + std::to_string(k));
            const gdl::Tensor class_ref = gdl::sample_gmm_component(ws.task, k, 4000, class_rng);
            report.per_class_frechet.push_back(gdl::frechet_gaussian(samples.x0, class_ref));
        }
        report.guidance_mode = gdl::guidance_mode_name(cfg.guidance.mode);
        report.expert_count = cfg.experts.count;
        report.scale = cfg.guidance.scale;
        report.sampler = cfg.sampler.kind == gdl::SamplerConfig::Kind::kDdpm ? "ddpm" : "ddim";
        report.seed = cfg.seed;
        gdl::write_metric_report(out / "metrics.json", report);
        std::cout << "accuracy " << report.accuracy << ", frechet " << report.frechet
                  << "\n";
        return 0;
    }
    if (reproduce->parsed()) {
        gdl::Workspace ws = open_workspace(cfg);
        if (experiment == "fig2") gdl::reproduce_fig2(ws, out);
        if (experiment == "table1") gdl::reproduce_table1(ws, out);
        if (experiment == "expert-sweep") gdl::reproduce_expert_sweep(ws, out);
        if (experiment == "data-sweep") gdl::reproduce_data_sweep(ws, out);
        if (experiment == "scale-sweep") gdl::reproduce_scale_sweep(ws, out);
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
}
