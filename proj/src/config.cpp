// SPDX-License-Identifier: Apache-2.0
#include "gdl/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <stdexcept>

namespace gdl {

namespace {

// Wraps a JSON object and tracks which keys were consumed; finish() rejects
// anything left over so config typos fail loudly.
class StrictObject {
  public:
    StrictObject(const nlohmann::json& j, std::string context)
        : json_(j), context_(std::move(context)) {
        if (!j.is_object())
            throw std::invalid_argument("config: " + context_ + " must be an object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        if (!json_.contains(key)) return;
        seen_.insert(key);
        try {
            out = json_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw std::invalid_argument("config: bad value type for " + context_ + "." + key);
        }
    }

    bool take(const char* key, nlohmann::json& out) {
        if (!json_.contains(key)) return false;
        seen_.insert(key);
        out = json_.at(key);
        return true;
    }

    void finish() const {
        for (const auto& [key, value] : json_.items())
            if (!seen_.count(key))
                throw std::invalid_argument("config: unknown key '" + context_ + "." + key +
                                            "'");
    }

  private:
    const nlohmann::json& json_;
    std::string context_;
    std::set<std::string> seen_;
};

void parse_net(const nlohmann::json& j, const std::string& context, RunConfig::Net& net) {
    StrictObject o(j, context);
    o.read("hidden_dims", net.hidden_dims);
    o.read("time_embed_dim", net.time_embed_dim);
    o.finish();
}

void parse_train(const nlohmann::json& j, const std::string& context, TrainConfig& cfg) {
    StrictObject o(j, context);
    o.read("iterations", cfg.iterations);
    o.read("batch_size", cfg.batch_size);
    o.read("learning_rate", cfg.learning_rate);
    o.read("weight_decay", cfg.weight_decay);
    o.read("dataset_size", cfg.dataset_size);
    o.read("temperature", cfg.temperature);
    o.finish();
}

std::string loss_kind_name(GuidanceSpec::LossKind kind) {
    switch (kind) {
        case GuidanceSpec::LossKind::kClassNll: return "class_nll";
        case GuidanceSpec::LossKind::kRegressionL1: return "regression_l1";
        case GuidanceSpec::LossKind::kDenseL1: return "dense_l1";
    }
    return "class_nll";
}

GuidanceSpec::LossKind loss_kind_from_name(const std::string& name) {
    if (name == "class_nll") return GuidanceSpec::LossKind::kClassNll;
    if (name == "regression_l1") return GuidanceSpec::LossKind::kRegressionL1;
    if (name == "dense_l1") return GuidanceSpec::LossKind::kDenseL1;
    throw std::invalid_argument("config: unknown loss kind '" + name + "'");
}

std::vector<double> tensor_values(const Tensor& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace

std::string guidance_mode_name(GuidanceSpec::Mode mode) {
    switch (mode) {
        case GuidanceSpec::Mode::kNone: return "none";
        case GuidanceSpec::Mode::kNaiveOffTheShelf: return "naive";
        case GuidanceSpec::Mode::kSingleNoiseAware: return "single";
        case GuidanceSpec::Mode::kMultiExpert: return "multi";
        case GuidanceSpec::Mode::kGradientsOnX0Hat: return "x0hat";
        case GuidanceSpec::Mode::kTConditioned: return "tcond";
    }
    return "none";
}

GuidanceSpec::Mode guidance_mode_from_name(const std::string& name) {
    if (name == "none") return GuidanceSpec::Mode::kNone;
    if (name == "naive") return GuidanceSpec::Mode::kNaiveOffTheShelf;
    if (name == "single") return GuidanceSpec::Mode::kSingleNoiseAware;
    if (name == "multi") return GuidanceSpec::Mode::kMultiExpert;
    if (name == "x0hat") return GuidanceSpec::Mode::kGradientsOnX0Hat;
    if (name == "tcond") return GuidanceSpec::Mode::kTConditioned;
    throw std::invalid_argument("config: unknown guidance mode '" + name + "'");
}

NoiseSchedule RunConfig::make_schedule() const {
    return make_linear_schedule(schedule.max_timestep, schedule.beta_start,
                                schedule.beta_end, schedule.variance);
}

std::string RunConfig::resolved_out_dir() const {
    if (!out_dir.empty()) return out_dir;
    if (const char* env = std::getenv("GDL_OUT"); env != nullptr && env[0] != '\0')
        return env;
    return "out";
}

void RunConfig::validate() const {
    if (schedule.max_timestep < 1)
        throw std::invalid_argument("config: schedule.max_timestep must be >= 1");
    if (!(0.0 < schedule.beta_start && schedule.beta_start <= schedule.beta_end &&
          schedule.beta_end < 1.0))
        throw std::invalid_argument("config: need 0 < beta_start <= beta_end < 1");
    if (task.components < 2) throw std::invalid_argument("config: task.components >= 2");
    if (task.train_count == 0 || task.eval_count == 0)
        throw std::invalid_argument("config: task sample counts must be positive");
    if (experts.count < 1 || experts.count > schedule.max_timestep)
        throw std::invalid_argument("config: experts.count outside [1, T]");
    if (experts.alpha <= 0.0) throw std::invalid_argument("config: experts.alpha > 0");
    MlpSpec probe;
    probe.input_dim = 2;
    probe.output_dim = 2;
    probe.hidden_dims = epsilon_model.hidden_dims;
    probe.time_embed_dim = epsilon_model.time_embed_dim;
    probe.validate();
    if (epsilon_model.time_embed_dim == 0)
        throw std::invalid_argument("config: epsilon_model.time_embed_dim must be > 0");
    train_epsilon.validate();
    train_teacher.validate();
    train_experts.validate();
    sampler.validate(schedule.max_timestep);
    guidance.validate();
}

RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig cfg;
    StrictObject root(j, "root");
    int format_version = 1;
    root.read("format_version", format_version);
    if (format_version != 1)
        throw std::invalid_argument("config: unsupported format_version " +
                                    std::to_string(format_version));
    root.read("seed", cfg.seed);
    root.read("out_dir", cfg.out_dir);

    nlohmann::json section;
    if (root.take("schedule", section)) {
        StrictObject o(section, "schedule");
        o.read("max_timestep", cfg.schedule.max_timestep);
        o.read("beta_start", cfg.schedule.beta_start);
        o.read("beta_end", cfg.schedule.beta_end);
        std::string variance;
        o.read("variance", variance);
        if (!variance.empty()) {
            if (variance == "posterior")
                cfg.schedule.variance = ReverseVariance::kPosterior;
            else if (variance == "beta")
                cfg.schedule.variance = ReverseVariance::kBeta;
            else
                throw std::invalid_argument("config: schedule.variance must be "
                                            "'posterior' or 'beta'");
        }
        o.finish();
    }
    if (root.take("task", section)) {
        StrictObject o(section, "task");
        o.read("components", cfg.task.components);
        o.read("radius", cfg.task.radius);
        o.read("sigma_data", cfg.task.sigma_data);
        o.read("train_count", cfg.task.train_count);
        o.read("eval_count", cfg.task.eval_count);
        o.finish();
    }
    if (root.take("epsilon_model", section))
        parse_net(section, "epsilon_model", cfg.epsilon_model);
    if (root.take("teacher", section)) parse_net(section, "teacher", cfg.teacher);
    if (root.take("experts", section)) {
        StrictObject o(section, "experts");
        o.read("count", cfg.experts.count);
        o.read("rank", cfg.experts.rank);
        o.read("alpha", cfg.experts.alpha);
        o.finish();
    }
    if (root.take("train_epsilon", section))
        parse_train(section, "train_epsilon", cfg.train_epsilon);
    if (root.take("train_teacher", section))
        parse_train(section, "train_teacher", cfg.train_teacher);
    if (root.take("train_experts", section))
        parse_train(section, "train_experts", cfg.train_experts);
    if (root.take("sampler", section)) {
        StrictObject o(section, "sampler");
        std::string kind;
        o.read("kind", kind);
        if (!kind.empty()) {
            if (kind == "ddpm")
                cfg.sampler.kind = SamplerConfig::Kind::kDdpm;
            else if (kind == "ddim")
                cfg.sampler.kind = SamplerConfig::Kind::kDdim;
            else
                throw std::invalid_argument("config: sampler.kind must be 'ddpm' or 'ddim'");
        }
        o.read("steps", cfg.sampler.steps);
        o.read("eta", cfg.sampler.eta);
        o.finish();
    }
    if (root.take("guidance", section)) {
        StrictObject o(section, "guidance");
        std::string mode, loss, scaling;
        o.read("mode", mode);
        if (!mode.empty()) cfg.guidance.mode = guidance_mode_from_name(mode);
        o.read("loss", loss);
        if (!loss.empty()) cfg.guidance.loss_kind = loss_kind_from_name(loss);
        o.read("y_target", cfg.guidance.y_target);
        std::vector<double> d_target, s_target;
        o.read("d_target", d_target);
        if (!d_target.empty())
            cfg.guidance.d_target = Tensor::from_data(d_target, {d_target.size()});
        o.read("s_target", s_target);
        if (!s_target.empty())
            cfg.guidance.s_target = Tensor::from_data(s_target, {s_target.size()});
        o.read("scale", cfg.guidance.scale);
        o.read("grad_scaling", scaling);
        if (!scaling.empty()) {
            if (scaling == "fixed")
                cfg.guidance.grad_scaling = GuidanceSpec::GradScaling::kFixed;
            else if (scaling == "norm_ratio")
                cfg.guidance.grad_scaling = GuidanceSpec::GradScaling::kNormRatio;
            else
                throw std::invalid_argument(
                    "config: guidance.grad_scaling must be 'fixed' or 'norm_ratio'");
        }
        o.read("norm_ratio_rho", cfg.guidance.norm_ratio_rho);
        o.finish();
    }
    if (root.take("metrics", section)) {
        StrictObject o(section, "metrics");
        std::string confidence;
        o.read("confidence", confidence);
        if (!confidence.empty()) {
            if (confidence == "true_class")
                cfg.confidence = ConfidenceKind::kTrueClass;
            else if (confidence == "max_softmax")
                cfg.confidence = ConfidenceKind::kMaxSoftmax;
            else
                throw std::invalid_argument("config: metrics.confidence must be "
                                            "'true_class' or 'max_softmax'");
        }
        o.finish();
    }
    root.finish();
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("config: parse error in '" + path.string() +
                                    "': " + e.what());
    }
    return parse_run_config(j);
}

nlohmann::json dump_run_config(const RunConfig& cfg) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    j["schedule"] = {{"max_timestep", cfg.schedule.max_timestep},
                     {"beta_start", cfg.schedule.beta_start},
                     {"beta_end", cfg.schedule.beta_end},
                     {"variance", cfg.schedule.variance == ReverseVariance::kBeta
                                      ? "beta"
                                      : "posterior"}};
    j["task"] = {{"components", cfg.task.components},
                 {"radius", cfg.task.radius},
                 {"sigma_data", cfg.task.sigma_data},
                 {"train_count", cfg.task.train_count},
                 {"eval_count", cfg.task.eval_count}};
    j["epsilon_model"] = {{"hidden_dims", cfg.epsilon_model.hidden_dims},
                          {"time_embed_dim", cfg.epsilon_model.time_embed_dim}};
    j["teacher"] = {{"hidden_dims", cfg.teacher.hidden_dims},
                    {"time_embed_dim", cfg.teacher.time_embed_dim}};
    j["experts"] = {{"count", cfg.experts.count},
                    {"rank", cfg.experts.rank},
                    {"alpha", cfg.experts.alpha}};
    auto train_json = [](const TrainConfig& t) {
        return nlohmann::json{{"iterations", t.iterations},
                              {"batch_size", t.batch_size},
                              {"learning_rate", t.learning_rate},
                              {"weight_decay", t.weight_decay},
                              {"dataset_size", t.dataset_size},
                              {"temperature", t.temperature}};
    };
    j["train_epsilon"] = train_json(cfg.train_epsilon);
    j["train_teacher"] = train_json(cfg.train_teacher);
    j["train_experts"] = train_json(cfg.train_experts);
    j["sampler"] = {
        {"kind", cfg.sampler.kind == SamplerConfig::Kind::kDdpm ? "ddpm" : "ddim"},
        {"steps", cfg.sampler.steps},
        {"eta", cfg.sampler.eta}};
    j["guidance"] = {{"mode", guidance_mode_name(cfg.guidance.mode)},
                     {"loss", loss_kind_name(cfg.guidance.loss_kind)},
                     {"y_target", cfg.guidance.y_target},
                     {"scale", cfg.guidance.scale},
                     {"grad_scaling",
                      cfg.guidance.grad_scaling == GuidanceSpec::GradScaling::kNormRatio
                          ? "norm_ratio"
                          : "fixed"},
                     {"norm_ratio_rho", cfg.guidance.norm_ratio_rho}};
    if (!cfg.guidance.d_target.empty_handle())
        j["guidance"]["d_target"] = tensor_values(cfg.guidance.d_target);
    if (!cfg.guidance.s_target.empty_handle())
        j["guidance"]["s_target"] = tensor_values(cfg.guidance.s_target);
    j["metrics"] = {{"confidence", cfg.confidence == ConfidenceKind::kMaxSoftmax
                                       ? "max_softmax"
                                       : "true_class"}};
    return j;
}

void write_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("config: cannot write '" + path.string() + "'");
    out << dump_run_config(cfg).dump(2) << "\n";
}

}  // namespace gdl
