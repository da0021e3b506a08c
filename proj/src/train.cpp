// SPDX-License-Identifier: Apache-2.0
#include "gdl/train.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "gdl/container.hpp"
#include "gdl/rng.hpp"

namespace gdl {

namespace {

thread_local std::function<void(int, int)> g_timestep_draw_hook;

void check_finite_loss(double loss, const char* what, int iteration) {
    if (!std::isfinite(loss))
        throw std::runtime_error(std::string(what) + " diverged at iteration " +
                                 std::to_string(iteration) + " (loss = " +
                                 std::to_string(loss) + ")");
}

Tensor gather_rows(const Tensor& data, const std::vector<std::size_t>& idx) {
    const std::size_t dim = data.shape()[1];
    Tensor out = Tensor::zeros({idx.size(), dim});
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < dim; ++c)
            out.mutable_data()[r * dim + c] = data.at(idx[r] * dim + c);
    return out;
}

std::vector<std::size_t> draw_batch(Rng& rng, std::size_t n, std::size_t batch) {
    std::vector<std::size_t> idx(batch);
    for (std::size_t& i : idx) i = std::size_t(rng.below(n));
    return idx;
}

// Row-wise forward corruption with an independent timestep per row.
Tensor q_sample_rows(const NoiseSchedule& sched, const Tensor& x0_rows,
                     std::span<const int> ts, const Tensor& eps) {
    const std::size_t batch = x0_rows.shape()[0], dim = x0_rows.shape()[1];
    Tensor out = Tensor::zeros({batch, dim});
    for (std::size_t b = 0; b < batch; ++b) {
        const double ab = sched.alpha_bar_at(ts[b]);
        const double signal = std::sqrt(ab), noise = std::sqrt(1.0 - ab);
        for (std::size_t c = 0; c < dim; ++c)
            out.mutable_data()[b * dim + c] =
                signal * x0_rows.at(b * dim + c) + noise * eps.at(b * dim + c);
    }
    return out;
}

struct GradScope {
    explicit GradScope(std::vector<Tensor> params) : params_(std::move(params)) {
        for (Tensor& p : params_) p.set_requires_grad(true);
    }
    ~GradScope() {
        for (Tensor& p : params_) {
            p.set_requires_grad(false);
            p.zero_grad();
        }
    }
    std::vector<Tensor> params_;
};

}  // namespace

void set_timestep_draw_hook(std::function<void(int, int)> hook) {
    g_timestep_draw_hook = std::move(hook);
}

void TrainConfig::validate() const {
    if (iterations < 0) throw std::invalid_argument("TrainConfig: iterations must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate > 0.0))
        throw std::invalid_argument("TrainConfig: learning_rate must be positive");
    if (weight_decay < 0.0)
        throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
    if (expert_count < 1)
        throw std::invalid_argument("TrainConfig: expert_count must be >= 1");
    if (!(temperature > 0.0))
        throw std::invalid_argument("TrainConfig: temperature must be positive");
}

AdamW::AdamW(std::vector<Tensor> params, double learning_rate, double weight_decay,
             double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(learning_rate), wd_(weight_decay), beta1_(beta1),
      beta2_(beta2), eps_(eps) {
    for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void AdamW::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;  // unreached parameter this step
        auto g = p.grad();
        auto data = p.mutable_data();
        for (std::size_t j = 0; j < data.size(); ++j) {
            m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
            v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
            const double m_hat = m_[i][j] / bc1;
            const double v_hat = v_[i][j] / bc2;
            data[j] -= lr_ * (m_hat / (std::sqrt(v_hat) + eps_) + wd_ * data[j]);
        }
    }
}

LossCurve train_epsilon(const NoiseSchedule& sched, EpsilonModel& model,
                        const Tensor& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.rank() != 2 || data.shape()[0] == 0)
        throw std::invalid_argument("train_epsilon: data must be a nonempty (count, dim)");
    const std::size_t count = data.shape()[0], dim = data.shape()[1];

    Rng rng(cfg.seed, "train.epsilon");
    Rng batch_rng = rng.split("batch");
    Rng t_rng = rng.split("timestep");
    Rng eps_rng = rng.split("noise");

    GradScope scope(model.net().parameters());
    AdamW opt(scope.params_, cfg.learning_rate, cfg.weight_decay);

    LossCurve curve;
    const std::size_t batch = std::size_t(cfg.batch_size);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const Tensor x0 = gather_rows(data, draw_batch(batch_rng, count, batch));
        std::vector<int> ts(batch);
        for (int& t : ts) t = t_rng.range_int(1, sched.max_timestep);
        const Tensor eps = Tensor::gaussian({batch, dim}, eps_rng);
        const Tensor x_t = q_sample_rows(sched, x0, ts, eps);

        GradTape tape;
        const Tensor pred = model.predict_rows(x_t, ts);
        const Tensor loss = mse(pred, eps);
        tape.backward(loss);
        check_finite_loss(loss.item(), "train_epsilon", iter);
        opt.step();
        opt.zero_grad();
        curve.push_back(loss.item());
    }
    return curve;
}

LossCurve train_teacher_classifier(Mlp& net, const Tensor& x, const std::vector<int>& y,
                                   const TrainConfig& cfg) {
    cfg.validate();
    if (x.rank() != 2 || x.shape()[0] == 0 || x.shape()[0] != y.size())
        throw std::invalid_argument("train_teacher_classifier: bad data shapes");
    const std::size_t count = x.shape()[0];

    Rng batch_rng = Rng(cfg.seed, "train.teacher").split("batch");
    GradScope scope(net.parameters());
    AdamW opt(scope.params_, cfg.learning_rate, cfg.weight_decay);

    LossCurve curve;
    const std::size_t batch = std::size_t(cfg.batch_size);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const auto idx = draw_batch(batch_rng, count, batch);
        const Tensor xb = gather_rows(x, idx);
        std::vector<int> yb(batch);
        for (std::size_t b = 0; b < batch; ++b) yb[b] = y[idx[b]];

        GradTape tape;
        const Tensor loss = nll_loss(log_softmax(net.forward(xb)), yb);
        tape.backward(loss);
        check_finite_loss(loss.item(), "train_teacher_classifier", iter);
        opt.step();
        opt.zero_grad();
        curve.push_back(loss.item());
    }
    return curve;
}

LossCurve train_teacher_regressor(Mlp& net, const Tensor& x, const Tensor& targets,
                                  const TrainConfig& cfg) {
    cfg.validate();
    if (x.rank() != 2 || x.shape()[0] == 0 || targets.rank() != 2 ||
        targets.shape()[0] != x.shape()[0])
        throw std::invalid_argument("train_teacher_regressor: bad data shapes");
    const std::size_t count = x.shape()[0];

    Rng batch_rng = Rng(cfg.seed, "train.teacher").split("batch");
    GradScope scope(net.parameters());
    AdamW opt(scope.params_, cfg.learning_rate, cfg.weight_decay);

    LossCurve curve;
    const std::size_t batch = std::size_t(cfg.batch_size);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const auto idx = draw_batch(batch_rng, count, batch);
        const Tensor xb = gather_rows(x, idx);
        const Tensor tb = gather_rows(targets, idx);

        GradTape tape;
        const Tensor loss = mse(net.forward(xb), tb);
        tape.backward(loss);
        check_finite_loss(loss.item(), "train_teacher_regressor", iter);
        opt.step();
        opt.zero_grad();
        curve.push_back(loss.item());
    }
    return curve;
}

LossCurve train_tcond_classifier(const NoiseSchedule& sched, Mlp& net, const Tensor& x0,
                                 const std::vector<int>& y, const TrainConfig& cfg) {
    cfg.validate();
    if (net.spec().time_embed_dim == 0)
        throw std::invalid_argument("train_tcond_classifier: net is not time-conditioned");
    if (x0.rank() != 2 || x0.shape()[0] == 0 || x0.shape()[0] != y.size())
        throw std::invalid_argument("train_tcond_classifier: bad data shapes");
    const std::size_t count = x0.shape()[0], dim = x0.shape()[1];

    Rng rng(cfg.seed, "train.tcond");
    Rng batch_rng = rng.split("batch");
    Rng t_rng = rng.split("timestep");
    Rng eps_rng = rng.split("noise");

    GradScope scope(net.parameters());
    AdamW opt(scope.params_, cfg.learning_rate, cfg.weight_decay);

    LossCurve curve;
    const std::size_t batch = std::size_t(cfg.batch_size);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const auto idx = draw_batch(batch_rng, count, batch);
        const Tensor xb = gather_rows(x0, idx);
        std::vector<int> yb(batch);
        for (std::size_t b = 0; b < batch; ++b) yb[b] = y[idx[b]];
        std::vector<int> ts(batch);
        for (int& t : ts) t = t_rng.range_int(1, sched.max_timestep);
        const Tensor eps = Tensor::gaussian({batch, dim}, eps_rng);
        const Tensor x_t = q_sample_rows(sched, xb, ts, eps);

        GradTape tape;
        const Tensor logits = net.forward(x_t, ts, sched.max_timestep);
        const Tensor loss = nll_loss(log_softmax(logits), yb);
        tape.backward(loss);
        check_finite_loss(loss.item(), "train_tcond_classifier", iter);
        opt.step();
        opt.zero_grad();
        curve.push_back(loss.item());
    }
    return curve;
}

LossCurve train_expert_supervised(const NoiseSchedule& sched, ExpertBank& bank, int expert,
                                  const Tensor& x0, const std::vector<int>& y,
                                  const TrainConfig& cfg) {
    cfg.validate();
    if (x0.rank() != 2 || x0.shape()[0] == 0 || x0.shape()[0] != y.size())
        throw std::invalid_argument("train_expert_supervised: bad data shapes");
    const std::size_t count = x0.shape()[0], dim = x0.shape()[1];
    const TimestepRange range = expert_range(bank.expert_count(), bank.max_timestep(), expert);

    Rng rng = Rng(cfg.seed, "train.expert.supervised")
                  .split("expert" + std::to_string(expert));
    Rng batch_rng = rng.split("batch");
    Rng t_rng = rng.split("timestep");
    Rng eps_rng = rng.split("noise");

    GradScope scope(bank.adapter(expert).parameters());
    AdamW opt(scope.params_, cfg.learning_rate, cfg.weight_decay);

    LossCurve curve;
    const std::size_t batch = std::size_t(cfg.batch_size);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const auto idx = draw_batch(batch_rng, count, batch);
        const Tensor xb = gather_rows(x0, idx);
        std::vector<int> yb(batch);
        for (std::size_t b = 0; b < batch; ++b) yb[b] = y[idx[b]];
        std::vector<int> ts(batch);
        for (int& t : ts) {
            t = t_rng.range_int(range.lo, range.hi);
            if (g_timestep_draw_hook) g_timestep_draw_hook(expert, t);
        }
        const Tensor eps = Tensor::gaussian({batch, dim}, eps_rng);
        const Tensor x_t = q_sample_rows(sched, xb, ts, eps);

        GradTape tape;
        const Tensor loss = nll_loss(log_softmax(bank.forward(x_t, expert)), yb);
        tape.backward(loss);
        check_finite_loss(loss.item(), "train_expert_supervised", iter);
        opt.step();
        opt.zero_grad();
        curve.push_back(loss.item());
    }
    return curve;
}

LossCurve train_experts_supervised(const NoiseSchedule& sched, ExpertBank& bank,
                                   const Tensor& x0, const std::vector<int>& y,
                                   const TrainConfig& cfg) {
    TrainConfig per_expert = cfg;
    per_expert.iterations = cfg.iterations / bank.expert_count();
    LossCurve curve;
    for (int n = 1; n <= bank.expert_count(); ++n) {
        const LossCurve c = train_expert_supervised(sched, bank, n, x0, y, per_expert);
        curve.insert(curve.end(), c.begin(), c.end());
    }
    return curve;
}

Tensor generate_kt_dataset(const NoiseSchedule& sched, const EpsilonModel& model,
                           std::size_t count, const SamplerConfig& sampler_cfg,
                           std::size_t dim) {
    sampler_cfg.validate(sched.max_timestep);
    Tensor out = Tensor::zeros({count, dim});
    Rng seeder(sampler_cfg.seed, "kt-dataset");
    constexpr std::size_t kChunk = 512;
    std::size_t written = 0;
    while (written < count) {
        const std::size_t n = std::min(kChunk, count - written);
        SamplerConfig chunk_cfg = sampler_cfg;
        chunk_cfg.seed = seeder.next_u64();
        const SampleResult res = sample(sched, model, nullptr, nullptr, chunk_cfg, n, dim);
        for (std::size_t i = 0; i < n * dim; ++i)
            out.mutable_data()[written * dim + i] = res.x0.at(i);
        written += n;
    }
    return out;
}

Tensor kt_loss(const Tensor& teacher_out, const Tensor& student_out,
               GuidanceSpec::LossKind loss_kind, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("kt_loss: temperature must be positive");
    if (teacher_out.requires_grad())
        throw std::invalid_argument("kt_loss: teacher output must be gradient-detached");
    if (teacher_out.shape() != student_out.shape())
        throw std::invalid_argument("kt_loss: teacher and student shapes differ");
    switch (loss_kind) {
        case GuidanceSpec::LossKind::kClassNll: {
            const Tensor target = softmax(affine(teacher_out, 1.0 / tau, 0.0));
            return kl_divergence(target, log_softmax(student_out));
        }
        case GuidanceSpec::LossKind::kRegressionL1:
        case GuidanceSpec::LossKind::kDenseL1:
            return l1_distance(student_out, teacher_out);
    }
    throw std::invalid_argument("kt_loss: unknown loss kind");
}

LossCurve train_expert_data_free(const NoiseSchedule& sched, ExpertBank& bank, int expert,
                                 const Tensor& kt_x0, const TrainConfig& cfg) {
    cfg.validate();
    if (kt_x0.rank() != 2 || kt_x0.shape()[0] == 0)
        throw std::invalid_argument("train_expert_data_free: empty transfer dataset");
    const std::size_t count = kt_x0.shape()[0], dim = kt_x0.shape()[1];
    const TimestepRange range = expert_range(bank.expert_count(), bank.max_timestep(), expert);

    Rng rng = Rng(cfg.seed, "train.expert.data_free")
                  .split("expert" + std::to_string(expert));
    Rng batch_rng = rng.split("batch");
    Rng t_rng = rng.split("timestep");
    Rng eps_rng = rng.split("noise");

    GradScope scope(bank.adapter(expert).parameters());
    AdamW opt(scope.params_, cfg.learning_rate, cfg.weight_decay);

    LossCurve curve;
    const std::size_t batch = std::size_t(cfg.batch_size);
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const Tensor x0 = gather_rows(kt_x0, draw_batch(batch_rng, count, batch));
        std::vector<int> ts(batch);
        for (int& t : ts) {
            t = t_rng.range_int(range.lo, range.hi);
            if (g_timestep_draw_hook) g_timestep_draw_hook(expert, t);
        }
        const Tensor eps = Tensor::gaussian({batch, dim}, eps_rng);
        const Tensor x_t = q_sample_rows(sched, x0, ts, eps);

        GradTape tape;
        const Tensor teacher = bank.forward(x0, std::nullopt);
        const Tensor student = bank.forward(x_t, expert);
        const Tensor loss = kt_loss(teacher, student, cfg.loss_kind, cfg.temperature);
        tape.backward(loss);
        check_finite_loss(loss.item(), "train_expert_data_free", iter);
        opt.step();
        opt.zero_grad();
        curve.push_back(loss.item());
    }
    return curve;
}

LossCurve train_experts_data_free(const NoiseSchedule& sched, ExpertBank& bank,
                                  const Tensor& kt_x0, const TrainConfig& cfg) {
    TrainConfig per_expert = cfg;
    per_expert.iterations = cfg.iterations / bank.expert_count();
    LossCurve curve;
    for (int n = 1; n <= bank.expert_count(); ++n) {
        const LossCurve c = train_expert_data_free(sched, bank, n, kt_x0, per_expert);
        curve.insert(curve.end(), c.begin(), c.end());
    }
    return curve;
}

void write_loss_csv(const std::filesystem::path& path, const LossCurve& curve) {
    CsvWriter csv(path, {"iteration", "loss"});
    for (std::size_t i = 0; i < curve.size(); ++i) csv.append({double(i), curve[i]});
}

}  // namespace gdl
